//! Tables written by `report`: per-layer cardinalities, confusion matrices
//! between consecutive layers, the parameter/FLOP ledger and the training
//! trajectory.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunPlan;
use crate::accounting::{compression_report, micronet_spec, ArchSpec, CompressionReport};
use crate::compressor::{plan_confusion_matrices, ConfusionMatrix};
use crate::error::{Error, Result};
use crate::micronet::{MicroNet, SynthDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    fn ext(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format '{other}' (json|csv)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalityRow {
    pub layer: String,
    pub c_in: usize,
    pub c_out: usize,
    pub level: u32,
    pub groups: usize,
    pub capacity: u32,
    pub off_block_mass_removed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub lambda: f64,
    pub sparsity: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub reg_loss: f64,
    /// Space-separated group levels.
    pub levels: String,
}

#[derive(Serialize)]
struct ConfusionCell<'a> {
    from: &'a str,
    to: &'a str,
    row: usize,
    col: usize,
    count: usize,
}

fn write_table<T: Serialize>(path: &Path, format: ReportFormat, rows: &[T]) -> Result<()> {
    let out = BufWriter::new(File::create(path)?);
    match format {
        ReportFormat::Json => serde_json::to_writer_pretty(out, rows)?,
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn cardinality_rows(plan: &RunPlan) -> Vec<CardinalityRow> {
    plan.grouping
        .layers
        .iter()
        .map(|l| CardinalityRow {
            layer: l.name.clone(),
            c_in: l.gather_in.len(),
            c_out: l.scatter_out.len(),
            level: l.group_level,
            groups: l.groups(),
            capacity: l.capacity,
            off_block_mass_removed: l.off_block_mass_removed,
        })
        .collect()
}

fn trajectory_rows(plan: &RunPlan) -> Vec<TrajectoryRow> {
    plan.epochs
        .iter()
        .map(|e| TrajectoryRow {
            epoch: e.epoch,
            lambda: e.lambda,
            sparsity: e.sparsity,
            loss: e.loss,
            train_accuracy: e.train_accuracy,
            reg_loss: e.reg_loss,
            levels: e.levels.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(" "),
        })
        .collect()
}

/// Ledger for the plan's levels, on `arch` when given and otherwise on the
/// dense micronet the plan was trained with.
pub fn plan_ledger(plan: &RunPlan, arch: Option<&ArchSpec>) -> Result<CompressionReport> {
    let levels = plan.grouping.levels();
    match arch {
        Some(spec) => compression_report(spec, &levels),
        None => {
            let net = MicroNet::new(SynthDataset::SAMPLE_SHAPE, &plan.config.arch, plan.config.dataset.n_classes, 0)?;
            compression_report(&micronet_spec(&net), &levels)
        }
    }
}

/// Writes `cardinality`, `confusion`, `ledger` and `trajectory` tables into
/// `out_dir` and returns their paths.
pub fn run_report(plan: &RunPlan, arch: Option<&ArchSpec>, format: ReportFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let path = |stem: &str| out_dir.join(format!("{stem}.{}", format.ext()));
    let mut written = Vec::new();

    let p = path("cardinality");
    write_table(&p, format, &cardinality_rows(plan))?;
    written.push(p);

    let mats = plan_confusion_matrices(&plan.grouping)?;
    let p = path("confusion");
    match format {
        ReportFormat::Json => write_table::<ConfusionMatrix>(&p, format, &mats)?,
        ReportFormat::Csv => {
            let cells: Vec<ConfusionCell> = mats
                .iter()
                .flat_map(|m| {
                    m.matrix.iter().enumerate().flat_map(move |(row, r)| {
                        r.iter().enumerate().map(move |(col, &count)| ConfusionCell { from: &m.from, to: &m.to, row, col, count })
                    })
                })
                .collect();
            write_table(&p, format, &cells)?;
        }
    }
    written.push(p);

    let ledger = plan_ledger(plan, arch)?;
    let p = path("ledger");
    match format {
        ReportFormat::Json => std::fs::write(&p, serde_json::to_string_pretty(&ledger)? + "\n")?,
        ReportFormat::Csv => ledger.write_csv(BufWriter::new(File::create(&p)?))?,
    }
    written.push(p);

    let p = path("trajectory");
    write_table(&p, format, &trajectory_rows(plan))?;
    written.push(p);
    Ok(written)
}
