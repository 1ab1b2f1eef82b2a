use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blockshuffle::assignment::{solve, CostMatrix};
use blockshuffle::micronet::{DatasetConfig, GroupedLayer, MicroNet, SynthDataset};
use blockshuffle::shuffle::{optimize_permutations, planted_instance, ShuffleOptions};
use blockshuffle::structure::{build_reg_matrix, RegLevel};
use blockshuffle::{Matrix, Permutation, WeightTensor};

fn assignment(c: &mut Criterion) {
    let mut group = c.benchmark_group("assignment");
    for n in [16, 64, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let cost = CostMatrix::new(Matrix::from_fn(n, n, |_, _| rng.gen_range(0.0..100.0))).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| b.iter(|| solve(black_box(cost))));
    }
    group.finish();
}

fn shuffle(c: &mut Criterion) {
    let mut group = c.benchmark_group("optimize_permutations");
    group.sample_size(20);
    for n in [16, 64] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = planted_instance(n, 4, &mut rng);
        let cost = build_reg_matrix(n, n, RegLevel::Max, 0.5).unwrap();
        let opts = ShuffleOptions { restarts: 0, ..Default::default() };
        group.bench_with_input(BenchmarkId::from_parameter(n), &s, |b, s| {
            b.iter(|| optimize_permutations(black_box(s), &cost, &opts).unwrap())
        });
    }
    group.finish();
}

fn conv_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv_forward");
    let (ch, hw, batch) = (64, 8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input: Vec<f64> = (0..batch * ch * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for groups in [1, 4, 16] {
        let w = WeightTensor::new(ch, ch / groups, 3, (0..ch * ch / groups * 9).map(|_| rng.gen_range(-0.1..0.1)).collect())
            .unwrap();
        let layer = GroupedLayer::new(
            groups,
            w,
            vec![0.0; ch],
            Permutation::random(ch, &mut rng),
            Permutation::random(ch, &mut rng),
            1,
            1,
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::new("groups", groups), &layer, |b, l| {
            b.iter(|| l.forward_batch(black_box(&input), batch, ch, hw, hw, None).unwrap())
        });
    }
    group.finish();
}

fn micronet_batch(c: &mut Criterion) {
    let data = SynthDataset::generate(DatasetConfig { n_train: 64, n_test: 1, ..Default::default() });
    let net = MicroNet::acceptance(0);
    c.bench_function("micronet_loss_and_grad_64", |b| {
        b.iter(|| net.loss_and_grad(black_box(&data.train.images), &data.train.labels, 64).unwrap())
    });
}

criterion_group!(benches, assignment, shuffle, conv_forward, micronet_batch);
criterion_main!(benches);
