//! Run orchestration: sparsifying training with per-epoch permutation,
//! level, penalty and λ updates, then compression and finetuning, plus the
//! on-disk checkpoint and plan formats.

mod checkpoint;
mod report;
mod verify;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{round_to_f32, Checkpoint, NamedTensor, MAGIC};
pub use report::{plan_ledger, run_report, CardinalityRow, ReportFormat, TrajectoryRow};
pub use verify::{verify, Check, VerifyReport};

use crate::compressor::{compress_model, off_block_mass, shuffle_variant, GroupingPlan, LayerPlan, ShuffleMode};
use crate::error::{Error, Result};
use crate::micronet::{
    evaluate, train_epoch, ConvGeometry, DatasetConfig, LayerReg, MicroNet, RegTerm, Sgd, SgdConfig, SynthDataset,
    ACCEPTANCE_ARCH,
};
use crate::regularizer::{lambda_step, model_sparsity, LambdaAction, SparsityState, DEFAULT_DELTA_LAMBDA};
use crate::shuffle::{optimize_from, optimize_permutations, ShuffleOptions};
use crate::structure::{build_reg_matrix, group_level, RegLevel, RegMatrix, DEFAULT_POWER};
use crate::tensor::{importance_matrix, permute_importance, Norm, Permutation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub arch: Vec<ConvGeometry>,
    /// Sparsifying training epochs `N`.
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Fixed learning rate of the sparsifying stage.
    pub lr: f64,
    /// Initial finetune learning rate, decayed ×0.1 at 50% and 75%.
    pub finetune_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub finetune_weight_decay: f64,
    pub target_rate: f64,
    /// Group-level threshold used during training.
    pub p_train: f64,
    pub delta_lambda: f64,
    pub power: f64,
    pub norm: Norm,
    pub restarts: usize,
    pub max_iters: usize,
    pub mode: ShuffleMode,
    /// Replaces the λ controller with a constant.
    pub fixed_lambda: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            arch: ACCEPTANCE_ARCH.to_vec(),
            epochs: 60,
            finetune_epochs: 60,
            lr: 0.05,
            finetune_lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            finetune_weight_decay: 1e-4,
            target_rate: 0.5,
            p_train: 0.9,
            delta_lambda: DEFAULT_DELTA_LAMBDA,
            power: DEFAULT_POWER,
            norm: Norm::L1,
            restarts: 5,
            max_iters: 50,
            mode: ShuffleMode::Finetune,
            fixed_lambda: None,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(cfg_err(format!("{name} must be positive, got {v}")))
            }
        };
        if self.epochs < 1 {
            return Err(cfg_err("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(cfg_err("batch_size must be at least 1"));
        }
        if !(self.target_rate > 0.0 && self.target_rate < 1.0) {
            return Err(cfg_err(format!("target_rate must lie in (0, 1), got {}", self.target_rate)));
        }
        if !(self.p_train > 0.0 && self.p_train <= 1.0) {
            return Err(cfg_err(format!("p_train must lie in (0, 1], got {}", self.p_train)));
        }
        positive("lr", self.lr)?;
        positive("finetune_lr", self.finetune_lr)?;
        positive("delta_lambda", self.delta_lambda)?;
        positive("power", self.power)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.finetune_weight_decay >= 0.0 && self.finetune_weight_decay.is_finite()) {
            return Err(cfg_err("finetune_weight_decay must be nonnegative"));
        }
        if let Some(l) = self.fixed_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(cfg_err(format!("fixed_lambda must be nonnegative, got {l}")));
            }
        }
        let d = &self.dataset;
        if d.n_classes < 2 || d.n_train < 1 || d.n_test < 1 || !(d.noise >= 0.0 && d.noise.is_finite()) {
            return Err(cfg_err("dataset needs at least 2 classes, nonempty splits and nonnegative noise"));
        }
        if self.arch.is_empty() {
            return Err(cfg_err("arch must contain at least one conv layer"));
        }
        self.build_net(0)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset(&self) -> SynthDataset {
        SynthDataset::generate(self.dataset)
    }

    fn build_net(&self, seed: u64) -> Result<MicroNet> {
        MicroNet::new(SynthDataset::SAMPLE_SHAPE, &self.arch, self.dataset.n_classes, seed)
            .map_err(|e| cfg_err(format!("arch: {e}")))
    }

    fn sgd(&self, lr: f64, weight_decay: f64) -> Sgd {
        Sgd::new(SgdConfig { lr, momentum: self.momentum, weight_decay, batch_size: self.batch_size })
    }
}

/// Independent seed streams derived from the run seed (splitmix64).
fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_ORDER: u64 = 3 << 32;
const STREAM_REINIT: u64 = 4;
const STREAM_VARIANT: u64 = 5;
const STREAM_FINETUNE_ORDER: u64 = 6 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    InitialPermutations,
    Train,
    Permutations,
    Levels,
    RegMatrices,
    Lambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// 0 for the update before the first epoch.
    pub epoch: usize,
    pub step: Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub reg_loss: f64,
    /// λ in effect during the epoch.
    pub lambda: f64,
    pub levels: Vec<u32>,
    pub sparsity: f64,
    pub lambda_action: LambdaAction,
    pub shuffle_objectives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Trained,
    Compressed,
    Finetuned,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub pre_compression: Option<f64>,
    pub post_compression: Option<f64>,
    pub finetuned: Option<f64>,
}

/// Everything recorded about a run: the grouping plan itself plus the
/// configuration, training trajectory and Algorithm event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    #[serde(flatten)]
    pub grouping: GroupingPlan,
    pub stage: Stage,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ShuffleMode>,
    pub accuracy: Accuracies,
    #[serde(default)]
    pub epochs: Vec<EpochRecord>,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub finetune: Vec<FinetuneRecord>,
}

impl RunPlan {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: RunPlan = serde_json::from_str(&text).map_err(|e| Error::Plan(e.to_string()))?;
        Ok(plan)
    }

    /// `(p_out, q_in)` per layer.
    pub fn permutations(&self) -> Vec<(Permutation, Permutation)> {
        self.grouping.layers.iter().map(|l| (l.scatter_out.clone(), l.gather_in.clone())).collect()
    }

    /// Loads a checkpoint written for this plan.
    pub fn net_from(&self, ckpt: &Checkpoint) -> Result<MicroNet> {
        let grouped = ckpt.is_compressed();
        if grouped && self.stage == Stage::Trained {
            return Err(Error::Plan("compressed checkpoint paired with a training-stage plan".into()));
        }
        ckpt.to_net(SynthDataset::SAMPLE_SHAPE, &self.config.arch, grouped.then_some(&self.grouping))
    }
}

fn layer_reg_matrix(l: &crate::regularizer::LayerSpec, level: u32, power: f64) -> Result<RegMatrix> {
    build_reg_matrix(l.c_out, l.c_in, RegLevel::Level(level), power)
}

/// Sparsifying training: initial permutation solve, then per epoch
/// train → permutations → levels → penalty matrices → λ.
pub fn run_train(config: &RunConfig) -> Result<(MicroNet, RunPlan)> {
    config.validate()?;
    let data = config.dataset();
    let mut net = config.build_net(stream_seed(config.seed, STREAM_INIT))?;
    let specs = net.layer_specs();
    let caps: Vec<u32> = specs.iter().map(|s| s.capacity()).collect();
    let costs = specs
        .iter()
        .map(|s| build_reg_matrix(s.c_out, s.c_in, RegLevel::Max, config.power))
        .collect::<Result<Vec<_>>>()?;
    let importances = |net: &MicroNet| net.convs().iter().map(|l| importance_matrix(l.weights(), config.norm)).collect::<Vec<_>>();

    let mut events = vec![Event { epoch: 0, step: Step::InitialPermutations }];
    let mut perms = Vec::with_capacity(specs.len());
    for (i, (s, cost)) in importances(&net).iter().zip(&costs).enumerate() {
        let opts = ShuffleOptions {
            max_iters: config.max_iters,
            restarts: config.restarts,
            seed: stream_seed(config.seed, STREAM_SHUFFLE + i as u64),
        };
        let res = optimize_permutations(s, cost, &opts)?;
        perms.push((res.p_out, res.q_in));
    }

    let mut levels = vec![1u32; specs.len()];
    let mut regs = specs.iter().map(|s| layer_reg_matrix(s, 1, config.power)).collect::<Result<Vec<_>>>()?;
    let mut state = SparsityState { delta_lambda: config.delta_lambda, ..SparsityState::new(config.epochs, config.target_rate) };
    let mut sgd = config.sgd(config.lr, 0.0);
    let warm = ShuffleOptions { max_iters: config.max_iters, restarts: 0, seed: 0 };
    let mut records = Vec::with_capacity(config.epochs);

    for t in 1..=config.epochs {
        let lambda = config.fixed_lambda.unwrap_or(state.lambda);
        let term = RegTerm {
            lambda,
            norm: config.norm,
            layers: perms
                .iter()
                .zip(&regs)
                .zip(&caps)
                .map(|(((p, q), reg), &cap)| {
                    (cap > 1).then(|| LayerReg { reg: reg.clone(), p_out: p.clone(), q_in: q.clone() })
                })
                .collect(),
        };
        let stats = train_epoch(&mut net, &data.train, &mut sgd, Some(&term), stream_seed(config.seed, STREAM_ORDER + t as u64))?;
        events.push(Event { epoch: t, step: Step::Train });

        let s_all = importances(&net);
        let mut objectives = Vec::with_capacity(specs.len());
        for ((s, cost), pq) in s_all.iter().zip(&costs).zip(perms.iter_mut()) {
            let res = optimize_from(s, cost, pq.0.clone(), pq.1.clone(), &warm)?;
            objectives.push(res.objective);
            *pq = (res.p_out, res.q_in);
        }
        events.push(Event { epoch: t, step: Step::Permutations });

        for (i, (s, (p, q))) in s_all.iter().zip(&perms).enumerate() {
            levels[i] = group_level(&permute_importance(s, p, q)?, config.p_train, caps[i]);
        }
        events.push(Event { epoch: t, step: Step::Levels });

        regs = specs.iter().zip(&levels).map(|(s, &g)| layer_reg_matrix(s, g, config.power)).collect::<Result<Vec<_>>>()?;
        events.push(Event { epoch: t, step: Step::RegMatrices });

        let sparsity = model_sparsity(&levels, &specs)?;
        let (next, action) = lambda_step(state, sparsity);
        state = next;
        events.push(Event { epoch: t, step: Step::Lambda });

        records.push(EpochRecord {
            epoch: t,
            loss: stats.loss,
            train_accuracy: stats.accuracy,
            reg_loss: stats.reg_loss,
            lambda,
            levels: levels.clone(),
            sparsity,
            lambda_action: action,
            shuffle_objectives: objectives,
        });
    }
    round_to_f32(&mut net);

    let s_final = importances(&net);
    let mut layers = Vec::with_capacity(specs.len());
    for (((spec, s), (p, q)), &g) in specs.iter().zip(&s_final).zip(&perms).zip(&levels) {
        layers.push(LayerPlan {
            name: spec.name.clone(),
            group_level: g,
            gather_in: q.clone(),
            scatter_out: p.clone(),
            off_block_mass_removed: off_block_mass(&permute_importance(s, p, q)?, g)?,
            capacity: spec.capacity(),
        });
    }
    let grouping = GroupingPlan {
        layers,
        threshold_used: config.p_train,
        target_rate: config.target_rate,
        achieved_rate: model_sparsity(&levels, &specs)?,
        capacity_limited: false,
        lambda_history: records.iter().map(|r| r.lambda).collect(),
        sparsity_history: records.iter().map(|r| r.sparsity).collect(),
    };
    let accuracy = Accuracies { pre_compression: Some(evaluate(&net, &data.test)?), ..Default::default() };
    let plan = RunPlan {
        grouping,
        stage: Stage::Trained,
        config: config.clone(),
        mode: None,
        accuracy,
        epochs: records,
        events,
        finetune: Vec::new(),
    };
    Ok((net, plan))
}

/// Threshold search and conversion to grouped layers.
pub fn run_compress(net: &MicroNet, plan: &RunPlan, target_rate: f64) -> Result<(MicroNet, RunPlan)> {
    if plan.stage != Stage::Trained || net.convs().iter().any(|l| !l.is_dense()) {
        return Err(Error::Config("checkpoint is already compressed; compress expects a dense training checkpoint".into()));
    }
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(cfg_err(format!("rate must lie in (0, 1), got {target_rate}")));
    }
    let data = plan.config.dataset();
    let (compressed, mut grouping) = compress_model(net, &plan.permutations(), target_rate, plan.config.norm)?;
    grouping.lambda_history = plan.grouping.lambda_history.clone();
    grouping.sparsity_history = plan.grouping.sparsity_history.clone();
    let mut out = plan.clone();
    out.grouping = grouping;
    out.stage = Stage::Compressed;
    out.accuracy.pre_compression = Some(evaluate(net, &data.test)?);
    out.accuracy.post_compression = Some(evaluate(&compressed, &data.test)?);
    Ok((compressed, out))
}

/// Network and plan at the start of finetuning for `config.mode`.
pub fn finetune_start(net: &MicroNet, plan: &RunPlan, config: &RunConfig) -> Result<(MicroNet, GroupingPlan)> {
    let variant = shuffle_variant(&plan.grouping, config.mode, stream_seed(config.seed, STREAM_VARIANT))?;
    let mut start = net.clone();
    if config.mode.reinitializes() {
        for (l, lp) in start.convs_mut().iter_mut().zip(&variant.layers) {
            l.set_shuffles(lp.gather_in.clone(), lp.scatter_out.clone())?;
        }
        start.reinitialize(stream_seed(config.seed, STREAM_REINIT));
    }
    Ok((start, variant))
}

fn step_decay_lr(base: f64, epoch: usize, total: usize) -> f64 {
    let decays = [total / 2, 3 * total / 4].iter().filter(|&&m| m > 0 && epoch >= m).count();
    base * 0.1f64.powi(decays as i32)
}

fn finetune_loop(net: &mut MicroNet, config: &RunConfig, data: &SynthDataset) -> Result<Vec<FinetuneRecord>> {
    let mut sgd = config.sgd(config.finetune_lr, config.finetune_weight_decay);
    let mut records = Vec::with_capacity(config.finetune_epochs);
    for e in 0..config.finetune_epochs {
        let lr = step_decay_lr(config.finetune_lr, e, config.finetune_epochs);
        sgd.set_lr(lr);
        let stats = train_epoch(net, &data.train, &mut sgd, None, stream_seed(config.seed, STREAM_FINETUNE_ORDER + e as u64))?;
        records.push(FinetuneRecord { epoch: e + 1, lr, loss: stats.loss, train_accuracy: stats.accuracy });
    }
    round_to_f32(net);
    Ok(records)
}

/// Trains the compressed network under the finetune schedule and the
/// configured ablation mode.
pub fn run_finetune(net: &MicroNet, plan: &RunPlan, config: &RunConfig) -> Result<(MicroNet, RunPlan)> {
    config.validate()?;
    if plan.stage != Stage::Compressed {
        return Err(Error::Plan("finetune expects a compressed plan".into()));
    }
    if config.dataset != plan.config.dataset || config.arch != plan.config.arch {
        return Err(cfg_err("finetune config must use the dataset and arch of the compressed run"));
    }
    let data = config.dataset();
    let (mut tuned, variant) = finetune_start(net, plan, config)?;
    let records = finetune_loop(&mut tuned, config, &data)?;
    let mut out = plan.clone();
    out.grouping = variant;
    out.stage = Stage::Finetuned;
    out.mode = Some(config.mode);
    out.finetune = records;
    out.accuracy.finetuned = Some(evaluate(&tuned, &data.test)?);
    Ok((tuned, out))
}

/// Outcome of a full train → compress → finetune run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub dense: MicroNet,
    pub compressed: MicroNet,
    pub finetuned: MicroNet,
    pub plan: RunPlan,
}

pub fn run_pipeline(config: &RunConfig) -> Result<PipelineRun> {
    let (dense, trained) = run_train(config)?;
    let (compressed, plan) = run_compress(&dense, &trained, config.target_rate)?;
    let (finetuned, plan) = run_finetune(&compressed, &plan, config)?;
    Ok(PipelineRun { dense, compressed, finetuned, plan })
}

/// Same budget without compression: `N` epochs with λ = 0, then the
/// finetune schedule on the dense network. Returns the network and its
/// test accuracy.
pub fn run_dense_baseline(config: &RunConfig) -> Result<(MicroNet, f64)> {
    let cfg = RunConfig { fixed_lambda: Some(0.0), ..config.clone() };
    let (mut net, _) = run_train(&cfg)?;
    let data = cfg.dataset();
    finetune_loop(&mut net, &cfg, &data)?;
    let acc = evaluate(&net, &data.test)?;
    Ok((net, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::plan_confusion_matrices;
    use crate::micronet::Sgd;

    fn small() -> RunConfig {
        RunConfig {
            dataset: DatasetConfig { n_train: 128, n_test: 64, ..Default::default() },
            epochs: 2,
            finetune_epochs: 2,
            restarts: 1,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 3, "epochs": 5}"#).unwrap();
        assert_eq!((partial.seed, partial.epochs, partial.p_train), (3, 5, 0.9));
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 5}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            RunConfig { epochs: 0, ..small() },
            RunConfig { target_rate: 1.0, ..small() },
            RunConfig { p_train: 0.0, ..small() },
            RunConfig { lr: -1.0, ..small() },
            RunConfig { fixed_lambda: Some(-1.0), ..small() },
            RunConfig { arch: vec![ConvGeometry { c_in: 4, c_out: 8, k: 3, stride: 1, padding: 1 }], ..small() },
        ] {
            assert!(matches!(run_train(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn step_decay_schedule() {
        let lrs: Vec<f64> = (0..8).map(|e| step_decay_lr(1.0, e, 8)).collect();
        assert_eq!(lrs, [1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.010000000000000002, 0.010000000000000002]);
        assert_eq!(step_decay_lr(1.0, 0, 1), 1.0);
    }

    #[test]
    fn event_log_follows_the_algorithm_order() {
        let (_, plan) = run_train(&small()).unwrap();
        let mut expected = vec![Event { epoch: 0, step: Step::InitialPermutations }];
        for t in 1..=2 {
            for step in [Step::Train, Step::Permutations, Step::Levels, Step::RegMatrices, Step::Lambda] {
                expected.push(Event { epoch: t, step });
            }
        }
        assert_eq!(plan.events, expected);
        assert_eq!(plan.epochs.len(), 2);
        assert_eq!(plan.grouping.lambda_history, vec![0.0, 2e-6]);
        plan.grouping.validate(&MicroNet::acceptance(0).layer_specs()).unwrap();
    }

    #[test]
    fn zero_lambda_single_epoch_is_plain_sgd() {
        let cfg = RunConfig { epochs: 1, fixed_lambda: Some(0.0), ..small() };
        let (net, plan) = run_train(&cfg).unwrap();
        let data = cfg.dataset();
        let mut plain = cfg.build_net(stream_seed(cfg.seed, STREAM_INIT)).unwrap();
        let mut sgd = Sgd::new(SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: 0.0, batch_size: cfg.batch_size });
        let stats = train_epoch(&mut plain, &data.train, &mut sgd, None, stream_seed(cfg.seed, STREAM_ORDER + 1)).unwrap();
        round_to_f32(&mut plain);
        assert_eq!(net, plain);
        assert_eq!(plan.epochs[0].loss, stats.loss);
        assert_eq!(plan.epochs.len(), 1);
    }

    #[test]
    fn pipeline_is_deterministic_and_consistent() {
        let cfg = small();
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a, b);
        let g = &a.plan.grouping;
        assert_eq!(g.achieved_rate, model_sparsity(&g.levels(), &a.dense.layer_specs()).unwrap());
        assert!(g.achieved_rate >= cfg.target_rate || g.capacity_limited);
        assert!(a.plan.accuracy.post_compression.is_some() && a.plan.accuracy.finetuned.is_some());
        for cm in plan_confusion_matrices(g).unwrap() {
            assert!(cm.matrix.iter().flatten().all(|&v| v <= 64));
        }
    }

    #[test]
    fn compress_rejects_compressed_input() {
        let cfg = small();
        let (dense, trained) = run_train(&cfg).unwrap();
        let (compressed, plan) = run_compress(&dense, &trained, 0.5).unwrap();
        assert!(run_compress(&compressed, &plan, 0.5).is_err());
        assert!(run_compress(&compressed, &trained, 0.5).is_err());
    }

    #[test]
    fn finetune_modes() {
        let cfg = small();
        let (dense, trained) = run_train(&cfg).unwrap();
        let (compressed, plan) = run_compress(&dense, &trained, 0.5).unwrap();

        let zero = RunConfig { finetune_epochs: 0, ..cfg.clone() };
        let (same, p0) = run_finetune(&compressed, &plan, &zero).unwrap();
        assert_eq!(same, compressed);
        assert_eq!(p0.accuracy.finetuned, plan.accuracy.post_compression);

        let (ft, ft_plan) = finetune_start(&compressed, &plan, &cfg).unwrap();
        let scratch_cfg = RunConfig { mode: ShuffleMode::FromScratch, ..cfg.clone() };
        let (fs, fs_plan) = finetune_start(&compressed, &plan, &scratch_cfg).unwrap();
        assert_eq!(ft_plan, fs_plan);
        assert_ne!(ft.param_slices(), fs.param_slices());
        for (a, b) in ft.convs().iter().zip(fs.convs()) {
            assert_eq!((a.groups(), a.gather_in(), a.scatter_out()), (b.groups(), b.gather_in(), b.scatter_out()));
        }

        let none_cfg = RunConfig { mode: ShuffleMode::NoShuffle, ..cfg.clone() };
        let (none, _) = run_finetune(&compressed, &plan, &none_cfg).unwrap();
        assert!(none.convs().iter().all(|l| l.gather_in().is_identity() && l.scatter_out().is_identity()));
        let (_, tuned) = run_finetune(&compressed, &plan, &cfg).unwrap();
        assert_eq!(tuned.finetune.len(), 2);
        assert!(run_finetune(&compressed, &tuned, &cfg).is_err());
    }

    #[test]
    fn artifacts_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let (dense, trained) = run_train(&cfg).unwrap();
        let (compressed, plan) = run_compress(&dense, &trained, 0.5).unwrap();
        let ck_path = dir.path().join("c.ssz");
        let plan_path = dir.path().join("plan.json");
        Checkpoint::from_net(&compressed).unwrap().save(&ck_path).unwrap();
        plan.save(&plan_path).unwrap();
        let plan_back = RunPlan::load(&plan_path).unwrap();
        assert_eq!(plan_back, plan);
        let net_back = plan_back.net_from(&Checkpoint::load(&ck_path).unwrap()).unwrap();
        assert_eq!(net_back, compressed);
        assert!(trained.net_from(&Checkpoint::load(&ck_path).unwrap()).is_err());
    }
}
