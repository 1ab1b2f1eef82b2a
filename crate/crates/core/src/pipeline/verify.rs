//! Structural and numerical checks on a checkpoint against its plan.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, RunPlan, Stage};
use crate::accounting::{compression_report, micronet_spec};
use crate::compressor::plan_confusion_matrices;
use crate::error::Result;
use crate::micronet::{GroupedLayer, MicroNet, SynthDataset};
use crate::regularizer::model_sparsity;
use crate::shuffle::is_groupable;
use crate::structure::cardinality;
use crate::tensor::{importance_matrix, Norm};

/// Relative tolerance for comparing logits of equivalent networks.
const LOGIT_TOL: f64 = 1e-6;
const PROBE_SAMPLES: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, outcome: Result<std::result::Result<String, String>>) {
        let (passed, detail) = match outcome {
            Ok(Ok(d)) => (true, d),
            Ok(Err(d)) => (false, d),
            Err(e) => (false, format!("error: {e}")),
        };
        self.checks.push(Check { name: name.into(), passed, detail });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {:<20} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail)?;
        }
        write!(f, "{}", if self.passed() { "all checks passed" } else { "verification failed" })
    }
}

type Outcome = Result<std::result::Result<String, String>>;

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(1.0)).fold(0.0, f64::max)
}

fn masked_dense(net: &MicroNet) -> Result<MicroNet> {
    let convs = net
        .convs()
        .iter()
        .map(|l| {
            let (w, b) = l.to_dense();
            GroupedLayer::dense(w, b, l.stride(), l.padding())
        })
        .collect::<Result<Vec<_>>>()?;
    MicroNet::from_parts(net.input_shape(), convs, net.fc_weight().to_vec(), net.fc_bias().to_vec())
}

fn check_structure(net: &MicroNet, plan: &RunPlan) -> Outcome {
    let trained = plan.stage == Stage::Trained;
    if net.convs().len() != plan.grouping.layers.len() {
        return Ok(Err(format!("{} conv layers, plan has {}", net.convs().len(), plan.grouping.layers.len())));
    }
    for (l, lp) in net.convs().iter().zip(&plan.grouping.layers) {
        let ok = if trained {
            l.is_dense()
        } else {
            l.groups() == lp.groups() && l.gather_in() == &lp.gather_in && l.scatter_out() == &lp.scatter_out
        };
        if !ok {
            return Ok(Err(format!("{}: {} groups, plan expects {}", lp.name, l.groups(), if trained { 1 } else { lp.groups() })));
        }
    }
    Ok(Ok(if trained { "dense network".into() } else { format!("groups {:?}", net.convs().iter().map(|l| l.groups()).collect::<Vec<_>>()) }))
}

fn check_equivalence(net: &MicroNet, probe: &[f64], n: usize) -> Outcome {
    let dense = masked_dense(net)?;
    let diff = max_rel_diff(&net.logits(probe, n)?, &dense.logits(probe, n)?);
    let msg = format!("max relative logit difference {diff:.2e}");
    Ok(if diff <= LOGIT_TOL { Ok(msg) } else { Err(msg) })
}

fn check_groupable(net: &MicroNet) -> Outcome {
    for (i, l) in net.convs().iter().enumerate() {
        let level = l.groups().trailing_zeros() + 1;
        let s = importance_matrix(&l.to_dense().0, Norm::L1);
        if !is_groupable(&s, level, l.scatter_out(), l.gather_in(), 0.0)? {
            return Ok(Err(format!("conv{i} has weight outside its diagonal blocks")));
        }
    }
    Ok(Ok("no weight outside the diagonal blocks".into()))
}

fn check_ledger(net: &MicroNet, plan: &RunPlan) -> Outcome {
    let specs = net.layer_specs();
    let levels = plan.grouping.levels();
    let stored: usize = net.convs().iter().map(|l| l.weights().as_slice().len()).sum();
    let expected: usize = if plan.stage == Stage::Trained {
        specs.iter().map(|s| s.params()).sum()
    } else {
        specs.iter().zip(&levels).map(|(s, &g)| s.params() / cardinality(g)).sum()
    };
    if stored != expected {
        return Ok(Err(format!("{stored} conv weights stored, expected {expected}")));
    }
    let rate = model_sparsity(&levels, &specs)?;
    let report = compression_report(&micronet_spec(&masked_dense(net)?), &levels)?;
    if rate != plan.grouping.achieved_rate || report.rate != rate {
        return Ok(Err(format!(
            "rate {rate} from levels, {} from the report, plan records {}",
            report.rate, plan.grouping.achieved_rate
        )));
    }
    Ok(Ok(format!("{stored} conv weights, rate {rate:.6}")))
}

fn check_fusion(net: &MicroNet, probe: &[f64], n: usize) -> Outcome {
    let fused = net.fuse_shuffles()?;
    let diff = max_rel_diff(&net.logits(probe, n)?, &fused.logits(probe, n)?);
    let msg = format!("max relative logit difference {diff:.2e}");
    Ok(if diff <= LOGIT_TOL { Ok(msg) } else { Err(msg) })
}

fn check_confusion(plan: &RunPlan) -> Outcome {
    let mats = plan_confusion_matrices(&plan.grouping)?;
    for (cm, w) in mats.iter().zip(plan.grouping.layers.windows(2)) {
        let c = w[0].scatter_out.len();
        let (g1, g2) = (w[0].groups(), w[1].groups());
        let rows_ok = cm.matrix.iter().all(|r| r.iter().sum::<usize>() == c / g1);
        let cols_ok = (0..g2).all(|j| cm.matrix.iter().map(|r| r[j]).sum::<usize>() == c / g2);
        if !rows_ok || !cols_ok {
            return Ok(Err(format!("{} → {} marginals are not C/G", cm.from, cm.to)));
        }
    }
    Ok(Ok(format!("{} boundaries", mats.len())))
}

fn check_round_trip(net: &MicroNet, plan: &RunPlan) -> Outcome {
    let mut bytes = Vec::new();
    Checkpoint::from_net(net)?.write_to(&mut bytes)?;
    let back = plan.net_from(&Checkpoint::read_from(bytes.as_slice())?)?;
    Ok(if &back == net { Ok(format!("{} bytes", bytes.len())) } else { Err("reloaded network differs".into()) })
}

/// Runs every check; failures are collected rather than returned early.
pub fn verify(net: &MicroNet, plan: &RunPlan) -> VerifyReport {
    let mut report = VerifyReport { checks: Vec::new() };
    let data = SynthDataset::generate(crate::micronet::DatasetConfig { n_train: 1, ..plan.config.dataset });
    let n = data.test.len().min(PROBE_SAMPLES);
    let probe = &data.test.head(n).images;

    report.push("plan", plan.grouping.validate(&net.layer_specs()).map(|_| Ok("levels and permutations valid".into())));
    report.push("structure", check_structure(net, plan));
    report.push("masked-dense", check_equivalence(net, probe, n));
    report.push("groupable", check_groupable(net));
    report.push("parameters", check_ledger(net, plan));
    report.push("fused-shuffles", check_fusion(net, probe, n));
    report.push("confusion", check_confusion(plan));
    report.push("checkpoint", check_round_trip(net, plan));
    report
}
