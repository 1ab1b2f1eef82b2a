//! Turning a sparsified dense network into grouped convolutions.
//!
//! A layer with output permutation `p` and input permutation `q` at level
//! `g` keeps only the kernel slices inside the diagonal blocks of
//! `P S Q`; surviving blocks are packed into a [`GroupedLayer`] whose
//! gather is `q` and whose scatter is `p`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::micronet::{GroupedLayer, MicroNet};
use crate::regularizer::{model_sparsity, LayerSpec};
use crate::structure::{build_relationship_matrix, cardinality, group_level};
use crate::tensor::{
    contract, importance_matrix, permute_importance, permute_weights, ImportanceMatrix, Norm, Permutation, WeightTensor,
};

/// Bisection steps of the threshold search.
pub const THRESHOLD_ITERS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub group_level: u32,
    pub gather_in: Permutation,
    pub scatter_out: Permutation,
    /// Importance outside the kept diagonal blocks.
    pub off_block_mass_removed: f64,
    pub capacity: u32,
}

impl LayerPlan {
    pub fn groups(&self) -> usize {
        cardinality(self.group_level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub layers: Vec<LayerPlan>,
    pub threshold_used: f64,
    pub target_rate: f64,
    pub achieved_rate: f64,
    #[serde(default)]
    pub capacity_limited: bool,
    #[serde(default)]
    pub lambda_history: Vec<f64>,
    #[serde(default)]
    pub sparsity_history: Vec<f64>,
}

impl GroupingPlan {
    pub fn levels(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.group_level).collect()
    }

    /// Checks level ranges, permutation sizes and the recorded rate.
    pub fn validate(&self, specs: &[LayerSpec]) -> Result<()> {
        if specs.len() != self.layers.len() {
            return Err(Error::Plan(format!("{} layers in plan, {} in network", self.layers.len(), specs.len())));
        }
        for (l, s) in self.layers.iter().zip(specs) {
            if l.capacity != s.capacity() {
                return Err(Error::Plan(format!("{}: capacity {} but layer admits {}", l.name, l.capacity, s.capacity())));
            }
            if l.group_level < 1 || l.group_level > l.capacity {
                return Err(Error::LevelOutOfRange { level: l.group_level, capacity: l.capacity });
            }
            if l.gather_in.len() != s.c_in || l.scatter_out.len() != s.c_out {
                return Err(Error::Plan(format!("{}: permutation sizes do not match {}->{}", l.name, s.c_in, s.c_out)));
            }
        }
        let rate = model_sparsity(&self.levels(), specs)?;
        if rate != self.achieved_rate {
            return Err(Error::Plan(format!("achieved_rate {} but levels give {rate}", self.achieved_rate)));
        }
        Ok(())
    }
}

/// Total importance outside the diagonal blocks of `U_g`.
pub fn off_block_mass(s_perm: &ImportanceMatrix, level: u32) -> Result<f64> {
    let mask = build_relationship_matrix(s_perm.rows(), s_perm.cols(), level)?;
    Ok(s_perm.total() - contract(s_perm.as_matrix(), mask.as_matrix())?)
}

/// Keeps the diagonal blocks of the permuted weights and packs them into a
/// grouped layer. The bias follows the output permutation.
pub fn compress_layer(
    w: &WeightTensor,
    bias: &[f64],
    p_out: &Permutation,
    q_in: &Permutation,
    level: u32,
    stride: usize,
    padding: usize,
) -> Result<GroupedLayer> {
    let (c_out, c_in, k) = (w.c_out(), w.c_in(), w.k());
    if bias.len() != c_out {
        return Err(shape_err(format!("bias of {} for {c_out} outputs", bias.len())));
    }
    // Validates level against capacity and divisibility.
    build_relationship_matrix(c_out, c_in, level)?;
    let groups = cardinality(level);
    let permuted = permute_weights(w, p_out, q_in)?;
    let (bo, bi) = (c_out / groups, c_in / groups);
    let mut packed = WeightTensor::zeros(c_out, bi, k);
    for a in 0..c_out {
        let g = a / bo;
        for local in 0..bi {
            packed.kernel_mut(a, local).copy_from_slice(permuted.kernel(a, g * bi + local));
        }
    }
    let bias = (0..c_out).map(|a| bias[p_out.get(a)]).collect();
    GroupedLayer::new(groups, packed, bias, q_in.clone(), p_out.clone(), stride, padding)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub levels: Vec<u32>,
    pub achieved_rate: f64,
    /// Set when no threshold reaches the target.
    pub capacity_limited: bool,
}

/// Per-layer levels induced by threshold `p`.
pub fn levels_at(s_perm: &[ImportanceMatrix], specs: &[LayerSpec], p: f64) -> Vec<u32> {
    s_perm.iter().zip(specs).map(|(s, spec)| group_level(s, p, spec.capacity())).collect()
}

/// Largest threshold in `(0, 1)` whose levels reach `target_rate`, found
/// by bisection on the nonincreasing map from threshold to sparsity.
///
/// A non-positive target returns all-dense levels, flagged. When even the
/// smallest probed threshold misses the target, the levels found there are
/// returned, flagged.
pub fn choose_threshold(s_perm: &[ImportanceMatrix], specs: &[LayerSpec], target_rate: f64) -> Result<ThresholdChoice> {
    if s_perm.len() != specs.len() {
        return Err(shape_err(format!("{} importance matrices for {} layers", s_perm.len(), specs.len())));
    }
    if !(target_rate < 1.0) || target_rate.is_nan() {
        return Err(Error::Config(format!("target rate {target_rate} must be below 1")));
    }
    if target_rate <= 0.0 {
        let levels = vec![1; specs.len()];
        return Ok(ThresholdChoice { threshold: 1.0, levels, achieved_rate: 0.0, capacity_limited: true });
    }
    let rate = |p: f64| -> Result<(Vec<u32>, f64)> {
        let levels = levels_at(s_perm, specs, p);
        let r = model_sparsity(&levels, specs)?;
        Ok((levels, r))
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..THRESHOLD_ITERS {
        let mid = 0.5 * (lo + hi);
        if rate(mid)?.1 >= target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (threshold, capacity_limited) = if lo > 0.0 { (lo, false) } else { (hi, true) };
    let (levels, achieved_rate) = rate(threshold)?;
    Ok(ThresholdChoice { threshold, levels, achieved_rate, capacity_limited })
}

/// Permuted importance matrices of every conv layer of a dense network.
pub fn permuted_importances(net: &MicroNet, perms: &[(Permutation, Permutation)], norm: Norm) -> Result<Vec<ImportanceMatrix>> {
    if perms.len() != net.convs().len() {
        return Err(shape_err(format!("{} permutation pairs for {} layers", perms.len(), net.convs().len())));
    }
    net.convs()
        .iter()
        .zip(perms)
        .map(|(l, (p, q))| {
            if !l.is_dense() {
                return Err(Error::Config("network is already compressed".into()));
            }
            permute_importance(&importance_matrix(l.weights(), norm), p, q)
        })
        .collect()
}

/// Rebuilds the compressed network from a dense network and a plan.
pub fn apply_plan(net: &MicroNet, plan: &GroupingPlan) -> Result<MicroNet> {
    plan.validate(&net.layer_specs())?;
    let mut convs = Vec::with_capacity(net.convs().len());
    for (l, lp) in net.convs().iter().zip(&plan.layers) {
        if !l.is_dense() {
            return Err(Error::Config("network is already compressed".into()));
        }
        convs.push(compress_layer(
            l.weights(),
            l.bias(),
            &lp.scatter_out,
            &lp.gather_in,
            lp.group_level,
            l.stride(),
            l.padding(),
        )?);
    }
    MicroNet::from_parts(net.input_shape(), convs, net.fc_weight().to_vec(), net.fc_bias().to_vec())
}

/// Threshold search followed by per-layer compression. `perms` holds one
/// `(p_out, q_in)` pair per conv layer.
pub fn compress_model(
    net: &MicroNet,
    perms: &[(Permutation, Permutation)],
    target_rate: f64,
    norm: Norm,
) -> Result<(MicroNet, GroupingPlan)> {
    let s_perm = permuted_importances(net, perms, norm)?;
    let specs = net.layer_specs();
    let choice = choose_threshold(&s_perm, &specs, target_rate)?;
    let mut layers = Vec::with_capacity(specs.len());
    for (((spec, s), (p, q)), &g) in specs.iter().zip(&s_perm).zip(perms).zip(&choice.levels) {
        layers.push(LayerPlan {
            name: spec.name.clone(),
            group_level: g,
            gather_in: q.clone(),
            scatter_out: p.clone(),
            off_block_mass_removed: off_block_mass(s, g)?,
            capacity: spec.capacity(),
        });
    }
    let plan = GroupingPlan {
        layers,
        threshold_used: choice.threshold,
        target_rate,
        achieved_rate: choice.achieved_rate,
        capacity_limited: choice.capacity_limited,
        lambda_history: Vec::new(),
        sparsity_history: Vec::new(),
    };
    let compressed = apply_plan(net, &plan)?;
    Ok((compressed, plan))
}

/// Ablation settings for the finetune stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleMode {
    Finetune,
    FromScratch,
    ShuffleNet,
    Random,
    NoShuffle,
}

impl ShuffleMode {
    pub const ALL: [ShuffleMode; 5] =
        [Self::Finetune, Self::FromScratch, Self::ShuffleNet, Self::Random, Self::NoShuffle];

    pub fn reinitializes(self) -> bool {
        self != Self::Finetune
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Finetune => "finetune",
            Self::FromScratch => "fromscratch",
            Self::ShuffleNet => "shufflenet",
            Self::Random => "random",
            Self::NoShuffle => "noshuffle",
        }
    }
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShuffleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::Config(format!("unknown shuffle mode '{s}'")))
    }
}

/// Reshape `(groups, n)` → transpose → flatten: position `n·G + g` reads
/// channel `g·N + n`.
pub fn shufflenet_permutation(channels: usize, groups: usize) -> Result<Permutation> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Divisibility { c_out: channels, c_in: channels, groups });
    }
    let n = channels / groups;
    Permutation::new((0..channels).map(|t| (t % groups) * n + t / groups).collect())
}

/// Replaces the plan's permutations according to `mode`. Levels and the
/// recorded rates are kept.
pub fn shuffle_variant(plan: &GroupingPlan, mode: ShuffleMode, seed: u64) -> Result<GroupingPlan> {
    let mut out = plan.clone();
    match mode {
        ShuffleMode::Finetune | ShuffleMode::FromScratch => {}
        ShuffleMode::NoShuffle => {
            for l in &mut out.layers {
                l.gather_in = Permutation::identity(l.gather_in.len());
                l.scatter_out = Permutation::identity(l.scatter_out.len());
            }
        }
        ShuffleMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for l in &mut out.layers {
                l.gather_in = Permutation::random(l.gather_in.len(), &mut rng);
                l.scatter_out = Permutation::random(l.scatter_out.len(), &mut rng);
            }
        }
        ShuffleMode::ShuffleNet => {
            let mut prev_groups = None;
            for l in &mut out.layers {
                let c_in = l.gather_in.len();
                l.gather_in = match prev_groups {
                    Some(g) if c_in % g == 0 => shufflenet_permutation(c_in, g)?,
                    _ => Permutation::identity(c_in),
                };
                l.scatter_out = Permutation::identity(l.scatter_out.len());
                prev_groups = Some(l.groups());
            }
        }
    }
    Ok(out)
}

/// `D[i][j]` counts channels written by group `i` of the producing layer
/// and read by group `j` of the consuming layer.
pub fn confusion_matrix(scatter_out: &Permutation, groups_out: usize, gather_in: &Permutation, groups_in: usize) -> Result<Vec<Vec<usize>>> {
    let c = scatter_out.len();
    if gather_in.len() != c {
        return Err(shape_err(format!("{c} produced channels but {} consumed", gather_in.len())));
    }
    if groups_out == 0 || groups_in == 0 || c % groups_out != 0 || c % groups_in != 0 {
        return Err(Error::Divisibility { c_out: c, c_in: c, groups: groups_out.max(groups_in) });
    }
    let (bo, bi) = (c / groups_out, c / groups_in);
    let (p_inv, q_inv) = (scatter_out.inverse(), gather_in.inverse());
    let mut d = vec![vec![0; groups_in]; groups_out];
    for ch in 0..c {
        d[p_inv.get(ch) / bo][q_inv.get(ch) / bi] += 1;
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub from: String,
    pub to: String,
    pub matrix: Vec<Vec<usize>>,
}

/// Confusion matrices for every pair of consecutive layers.
pub fn plan_confusion_matrices(plan: &GroupingPlan) -> Result<Vec<ConfusionMatrix>> {
    plan.layers
        .windows(2)
        .map(|w| {
            Ok(ConfusionMatrix {
                from: w[0].name.clone(),
                to: w[1].name.clone(),
                matrix: confusion_matrix(&w[0].scatter_out, w[0].groups(), &w[1].gather_in, w[1].groups())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::{conv_forward, FeatureMap};
    use crate::shuffle::is_groupable;
    use crate::structure::max_group_level;
    use crate::tensor::TensorShape;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_weights(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> WeightTensor {
        WeightTensor::new(c_out, c_in, k, (0..c_out * c_in * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Zeroes every slice outside the level-`g` blocks of the permuted layout.
    fn make_groupable(w: &mut WeightTensor, p: &Permutation, q: &Permutation, level: u32, eps: f64) {
        let groups = cardinality(level);
        let (bo, bi) = (w.c_out() / groups, w.c_in() / groups);
        for a in 0..w.c_out() {
            for b in 0..w.c_in() {
                if a / bo != b / bi {
                    for v in w.kernel_mut(p.get(a), q.get(b)) {
                        *v *= eps;
                    }
                }
            }
        }
    }

    fn random_input(c: usize, hw: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(TensorShape::new(c, hw, hw).unwrap(), (0..c * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let scale = a.iter().fold(1e-300f64, |m, x| m.max(x.abs()));
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn level_one_is_a_relabeled_dense_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_weights(8, 4, 3, &mut rng);
        let bias: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = Permutation::random(8, &mut rng);
        let q = Permutation::random(4, &mut rng);
        let layer = compress_layer(&w, &bias, &p, &q, 1, 1, 1).unwrap();
        let (dw, db) = layer.to_dense();
        assert_eq!(dw, w);
        assert_eq!(db, bias);
    }

    #[test]
    fn groupable_layers_compress_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(c_out, c_in, level) in &[(8, 8, 2), (8, 8, 4), (16, 8, 3), (8, 16, 2)] {
            let mut w = random_weights(c_out, c_in, 3, &mut rng);
            let bias: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = Permutation::random(c_out, &mut rng);
            let q = Permutation::random(c_in, &mut rng);
            make_groupable(&mut w, &p, &q, level, 0.0);
            let s = importance_matrix(&w, Norm::L1);
            assert!(is_groupable(&s, level, &p, &q, 0.0).unwrap());
            for g in 1..=level {
                let layer = compress_layer(&w, &bias, &p, &q, g, 1, 1).unwrap();
                for _ in 0..3 {
                    let x = random_input(c_in, 6, &mut rng);
                    let dense = conv_forward(&w, &bias, &x, 1, 1).unwrap();
                    let grouped = layer.forward(&x).unwrap();
                    assert!(max_rel_diff(dense.as_slice(), grouped.as_slice()) <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn compressed_weights_are_groupable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(16, 16, 3, &mut rng);
        let p = Permutation::random(16, &mut rng);
        let q = Permutation::random(16, &mut rng);
        let layer = compress_layer(&w, &[0.0; 16], &p, &q, 3, 1, 1).unwrap();
        let (dw, _) = layer.to_dense();
        assert!(is_groupable(&importance_matrix(&dw, Norm::L1), 3, &p, &q, 0.0).unwrap());
    }

    #[test]
    fn deviation_shrinks_with_off_block_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_weights(8, 8, 3, &mut rng);
        let p = Permutation::random(8, &mut rng);
        let q = Permutation::random(8, &mut rng);
        let x = random_input(8, 6, &mut rng);
        let mut last = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3] {
            let mut w = base.clone();
            make_groupable(&mut w, &p, &q, 3, eps);
            let layer = compress_layer(&w, &[0.0; 8], &p, &q, 3, 1, 1).unwrap();
            let dense = conv_forward(&w, &[0.0; 8], &x, 1, 1).unwrap();
            let dev = dense.as_slice().iter().zip(layer.forward(&x).unwrap().as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(dev < last && dev > 0.0);
            last = dev;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn rejects_levels_beyond_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_weights(16, 3, 3, &mut rng);
        let r = compress_layer(&w, &[0.0; 16], &Permutation::identity(16), &Permutation::identity(3), 2, 1, 1);
        assert!(matches!(r, Err(Error::LevelOutOfRange { .. })));
    }

    fn spec(name: &str, c_in: usize, c_out: usize) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            c_in,
            c_out,
            k: 3,
            stride: 1,
            in_shape: TensorShape::new(c_in, 8, 8).unwrap(),
            shortcut: false,
        }
    }

    fn random_importance(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ImportanceMatrix {
        ImportanceMatrix::new(crate::tensor::Matrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn perfectly_sparse_model_reaches_capacity() {
        let specs = [spec("a", 8, 8), spec("b", 8, 16)];
        let s: Vec<ImportanceMatrix> = specs
            .iter()
            .map(|sp| {
                let cap = max_group_level(sp.c_out, sp.c_in);
                let u = build_relationship_matrix(sp.c_out, sp.c_in, cap).unwrap();
                ImportanceMatrix::new(u.as_matrix().clone()).unwrap()
            })
            .collect();
        let choice = choose_threshold(&s, &specs, 0.5).unwrap();
        assert_eq!(choice.levels, vec![4, 4]);
        assert_eq!(choice.achieved_rate, 1.0 - 1.0 / 8.0);
        assert!(!choice.capacity_limited);
        assert_eq!(levels_at(&s, &specs, 1e-6), vec![4, 4]);
    }

    #[test]
    fn degenerate_target_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let specs = [spec("a", 8, 8)];
        let s = [random_importance(8, 8, &mut rng)];
        let choice = choose_threshold(&s, &specs, 0.0).unwrap();
        assert_eq!(choice.levels, vec![1]);
        assert_eq!(choice.achieved_rate, 0.0);
        assert!(choice.capacity_limited);
    }

    #[test]
    fn unreachable_target_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let specs = [spec("a", 3, 16), spec("b", 16, 16)];
        let s = [random_importance(16, 3, &mut rng), random_importance(16, 16, &mut rng)];
        let choice = choose_threshold(&s, &specs, 0.99).unwrap();
        assert!(choice.capacity_limited);
        assert_eq!(choice.levels, vec![1, 5]);
        assert!(choice.achieved_rate < 0.99);
    }

    #[test]
    fn bisection_agrees_with_grid_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let specs = [spec("a", 16, 16), spec("b", 16, 32), spec("c", 32, 64)];
        for _ in 0..20 {
            let s: Vec<ImportanceMatrix> = specs.iter().map(|sp| random_importance(sp.c_out, sp.c_in, &mut rng)).collect();
            let target = rng.gen_range(0.05..0.9);
            let choice = choose_threshold(&s, &specs, target).unwrap();
            if choice.capacity_limited {
                continue;
            }
            let grid_best = (1..10_000)
                .map(|k| k as f64 / 10_000.0)
                .filter(|&p| model_sparsity(&levels_at(&s, &specs, p), &specs).unwrap() >= target)
                .fold(0.0, f64::max);
            assert!(grid_best <= choice.threshold && choice.threshold < grid_best + 1e-4);
            assert!(choice.achieved_rate >= target);
        }
    }

    #[test]
    fn shufflenet_pattern() {
        assert_eq!(shufflenet_permutation(4, 2).unwrap().map(), &[0, 2, 1, 3]);
        assert_eq!(shufflenet_permutation(6, 3).unwrap().map(), &[0, 2, 4, 1, 3, 5]);
        assert!(shufflenet_permutation(6, 4).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in ShuffleMode::ALL {
            assert_eq!(m.to_string().parse::<ShuffleMode>().unwrap(), m);
        }
        assert_eq!("No-Shuffle".parse::<ShuffleMode>().unwrap(), ShuffleMode::NoShuffle);
        assert!("bogus".parse::<ShuffleMode>().is_err());
        assert_eq!(ShuffleMode::ALL.iter().filter(|m| m.reinitializes()).count(), 4);
    }

    fn sample_plan(levels: &[u32], channels: &[usize], rng: &mut ChaCha8Rng) -> GroupingPlan {
        let layers = levels
            .iter()
            .enumerate()
            .map(|(i, &g)| LayerPlan {
                name: format!("conv{i}"),
                group_level: g,
                gather_in: Permutation::random(channels[i], rng),
                scatter_out: Permutation::random(channels[i + 1], rng),
                off_block_mass_removed: 0.0,
                capacity: max_group_level(channels[i + 1], channels[i]),
            })
            .collect();
        GroupingPlan {
            layers,
            threshold_used: 0.5,
            target_rate: 0.5,
            achieved_rate: 0.0,
            capacity_limited: false,
            lambda_history: vec![],
            sparsity_history: vec![],
        }
    }

    #[test]
    fn variants_rewrite_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let plan = sample_plan(&[4, 4, 4], &[16, 512, 512, 64], &mut rng);
        let none = shuffle_variant(&plan, ShuffleMode::NoShuffle, 0).unwrap();
        assert!(none.layers.iter().all(|l| l.gather_in.is_identity() && l.scatter_out.is_identity()));
        assert_eq!(shuffle_variant(&plan, ShuffleMode::Random, 3).unwrap(), shuffle_variant(&plan, ShuffleMode::Random, 3).unwrap());
        assert_ne!(shuffle_variant(&plan, ShuffleMode::Random, 3).unwrap(), shuffle_variant(&plan, ShuffleMode::Random, 4).unwrap());
        assert_eq!(shuffle_variant(&plan, ShuffleMode::FromScratch, 0).unwrap(), plan);
        let sn = shuffle_variant(&plan, ShuffleMode::ShuffleNet, 0).unwrap();
        assert_eq!(sn.levels(), plan.levels());
        let cm = plan_confusion_matrices(&sn).unwrap();
        assert_eq!(cm[1].matrix, vec![vec![8; 8]; 8]);
    }

    #[test]
    fn confusion_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let c: usize = 1 << rng.gen_range(1..8);
            let g1 = 1 << rng.gen_range(0..=c.trailing_zeros());
            let g2 = 1 << rng.gen_range(0..=c.trailing_zeros());
            let d = confusion_matrix(&Permutation::random(c, &mut rng), g1, &Permutation::random(c, &mut rng), g2).unwrap();
            assert!(d.iter().all(|row| row.iter().sum::<usize>() == c / g1));
            for j in 0..g2 {
                assert_eq!(d.iter().map(|row| row[j]).sum::<usize>(), c / g2);
            }
        }
    }

    #[test]
    fn plan_round_trips_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let plan = sample_plan(&[1, 3], &[4, 8, 16], &mut rng);
        let back: GroupingPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn compress_model_matches_its_plan() {
        let net = MicroNet::acceptance(0);
        let perms: Vec<_> = net
            .convs()
            .iter()
            .map(|l| (Permutation::identity(l.c_out()), Permutation::identity(l.c_in())))
            .collect();
        let (a, plan) = compress_model(&net, &perms, 0.5, Norm::L1).unwrap();
        let (b, plan2) = compress_model(&net, &perms, 0.5, Norm::L1).unwrap();
        assert_eq!((&a, &plan), (&b, &plan2));
        assert!(plan.achieved_rate >= 0.5 || plan.capacity_limited);
        plan.validate(&net.layer_specs()).unwrap();
        assert_eq!(apply_plan(&net, &plan).unwrap(), a);
        for (l, lp) in a.convs().iter().zip(&plan.layers) {
            assert_eq!(l.groups(), lp.groups());
        }
        assert!(matches!(compress_model(&a, &perms, 0.5, Norm::L1), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn packed_parameter_count_divides(level in 1u32..=4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_weights(8, 16, 3, &mut rng);
            let layer = compress_layer(&w, &[0.0; 8], &Permutation::random(8, &mut rng), &Permutation::random(16, &mut rng), level, 1, 1).unwrap();
            prop_assert_eq!(layer.weights().as_slice().len(), 8 * 16 * 9 / cardinality(level));
        }
    }
}
