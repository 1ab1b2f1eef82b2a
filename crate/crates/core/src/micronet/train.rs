use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Split;
use super::net::MicroNet;
use crate::error::{shape_err, Result};
use crate::regularizer::{accumulate_reg_subgradient, reg_loss};
use crate::structure::RegMatrix;
use crate::tensor::{importance_matrix, permute_importance, Norm, Permutation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, weight_decay: 0.0, batch_size: 64 }
    }
}

/// Momentum SGD: `v ← μ v + g`, `θ ← θ − lr · v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    fn step(&mut self, net: &mut MicroNet, grads: &[Vec<f64>]) {
        let SgdConfig { lr, momentum, weight_decay, .. } = self.config;
        let params = net.param_slices_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let g = if weight_decay != 0.0 { gi + weight_decay * *pi } else { gi };
                *vi = momentum * *vi + g;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Structured penalty for one dense conv layer.
#[derive(Debug, Clone)]
pub struct LayerReg {
    pub reg: RegMatrix,
    pub p_out: Permutation,
    pub q_in: Permutation,
}

/// `λ · Σ_layers reg_loss` added to the data loss.
#[derive(Debug, Clone)]
pub struct RegTerm {
    pub lambda: f64,
    pub norm: Norm,
    /// One entry per conv layer; `None` leaves the layer unpenalized.
    pub layers: Vec<Option<LayerReg>>,
}

impl RegTerm {
    pub fn penalty(&self, net: &MicroNet) -> Result<f64> {
        let mut total = 0.0;
        for (l, reg) in net.convs().iter().zip(&self.layers) {
            if let Some(r) = reg {
                let s = permute_importance(&importance_matrix(l.weights(), self.norm), &r.p_out, &r.q_in)?;
                total += reg_loss(&s, &r.reg)?;
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean data loss over the epoch's batches.
    pub loss: f64,
    /// Training accuracy measured on the fly.
    pub accuracy: f64,
    /// Unweighted structured penalty at the end of the epoch.
    pub reg_loss: f64,
}

/// One pass over `split` in an order shuffled by `shuffle_seed`.
pub fn train_epoch(
    net: &mut MicroNet,
    split: &Split,
    sgd: &mut Sgd,
    reg: Option<&RegTerm>,
    shuffle_seed: u64,
) -> Result<EpochStats> {
    if let Some(r) = reg {
        if r.layers.len() != net.convs().len() {
            return Err(shape_err("one regularization entry per conv layer required"));
        }
        for (l, lr) in net.convs().iter().zip(&r.layers) {
            if lr.is_some() && !l.is_dense() {
                return Err(shape_err("structured penalty applies to dense layers only"));
            }
        }
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let numel = net.input_shape().numel();
    let bs = sgd.config.batch_size.max(1);

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let mut correct = 0usize;
    let mut images = Vec::with_capacity(bs * numel);
    let mut labels = Vec::with_capacity(bs);
    for chunk in order.chunks(bs) {
        images.clear();
        labels.clear();
        for &idx in chunk {
            images.extend_from_slice(split.image(idx));
            labels.push(split.labels[idx]);
        }
        let res = net.loss_and_grad(&images, &labels, chunk.len())?;
        let mut grads: Vec<Vec<f64>> = res.grads.slices().into_iter().map(<[f64]>::to_vec).collect();
        if let Some(r) = reg.filter(|r| r.lambda != 0.0) {
            for (idx, (l, lr)) in net.convs().iter().zip(&r.layers).enumerate() {
                if let Some(lr) = lr {
                    accumulate_reg_subgradient(l.weights(), &lr.p_out, &lr.q_in, &lr.reg, r.norm, r.lambda, &mut grads[2 * idx])?;
                }
            }
        }
        sgd.step(net, &grads);
        loss_sum += res.loss;
        batches += 1;
        correct += res.correct;
    }
    let reg_loss = match reg {
        Some(r) => r.penalty(net)?,
        None => 0.0,
    };
    Ok(EpochStats {
        loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
        accuracy: if split.is_empty() { 0.0 } else { correct as f64 / split.len() as f64 },
        reg_loss,
    })
}

const EVAL_BATCH: usize = 250;

/// Top-1 accuracy on `split`.
pub fn evaluate(net: &MicroNet, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let numel = net.input_shape().numel();
    let mut correct = 0;
    for start in (0..split.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(split.len());
        let preds = net.predict(&split.images[start * numel..end * numel], end - start)?;
        correct += preds.iter().zip(&split.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / split.len() as f64)
}
