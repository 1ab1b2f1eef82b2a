use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use blockshuffle::accounting::{zoo, ArchSpec};
use blockshuffle::pipeline::{
    run_compress, run_finetune, run_report, run_train, verify, Checkpoint, ReportFormat, RunConfig, RunPlan, Stage,
};

#[derive(Parser)]
#[command(name = "blockshuffle", version, about = "Learned channel shuffles and group-convolution compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum CountFormat {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Sparsifying training; writes a dense checkpoint and the in-progress plan.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        out_plan: PathBuf,
    },
    /// Picks the threshold for a target rate and converts convs to grouped form.
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Target fraction of conv weights removed, in (0, 1).
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        out_plan: PathBuf,
    },
    /// Finetunes a compressed checkpoint under the config's shuffle mode.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Also write the plan with finetune records and final accuracy.
        #[arg(long)]
        out_plan: Option<PathBuf>,
    },
    /// Equivalence and invariant checks; exits 1 on any failure.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        plan: PathBuf,
    },
    /// Cardinality, confusion, ledger and trajectory tables.
    Report {
        #[arg(long)]
        plan: PathBuf,
        /// Checkpoint to check against the plan before reporting.
        #[arg(long, conflicts_with = "arch")]
        ckpt: Option<PathBuf>,
        /// Architecture spec (path or bundled name) for the ledger.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter and FLOP totals of an architecture spec.
    Count {
        /// Path to a JSON spec, or one of the bundled names.
        #[arg(long)]
        arch: String,
        #[arg(long, value_enum, default_value = "text")]
        format: CountFormat,
    },
}

fn load_arch(arg: &str) -> Result<ArchSpec> {
    let path = Path::new(arg);
    if path.exists() {
        return ArchSpec::load(path).with_context(|| format!("loading {arg}"));
    }
    if zoo::BUNDLED.contains(&arg) {
        return Ok(zoo::bundled(arg)?);
    }
    bail!("{arg}: no such file and not a bundled spec ({})", zoo::BUNDLED.join(", "))
}

fn load_pair(ckpt: &Path, plan: &Path) -> Result<(blockshuffle::micronet::MicroNet, RunPlan)> {
    let plan = RunPlan::load(plan).with_context(|| format!("loading plan {}", plan.display()))?;
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let net = plan.net_from(&ck)?;
    Ok((net, plan))
}

fn save(net: &blockshuffle::micronet::MicroNet, plan: &RunPlan, ckpt: &Path, plan_path: Option<&Path>) -> Result<()> {
    Checkpoint::from_net(net)?.save(ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    if let Some(p) = plan_path {
        plan.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |a| format!("{:.2}%", 100.0 * a))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out_ckpt, out_plan } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading config {}", config.display()))?;
            let (net, plan) = run_train(&cfg)?;
            save(&net, &plan, &out_ckpt, Some(&out_plan))?;
            let last = plan.epochs.last().expect("at least one epoch");
            println!(
                "trained {} epochs: sparsity {:.4}, levels {:?}, λ {:.3e}, test accuracy {}",
                plan.epochs.len(),
                last.sparsity,
                last.levels,
                last.lambda,
                pct(plan.accuracy.pre_compression)
            );
        }
        Command::Compress { ckpt, plan, rate, out_ckpt, out_plan } => {
            let (net, plan) = load_pair(&ckpt, &plan)?;
            let (compressed, plan) = run_compress(&net, &plan, rate)?;
            save(&compressed, &plan, &out_ckpt, Some(&out_plan))?;
            let g = &plan.grouping;
            println!(
                "compressed at threshold {:.6e}: levels {:?}, rate {:.4} (target {}){}; accuracy {} -> {}",
                g.threshold_used,
                g.levels(),
                g.achieved_rate,
                g.target_rate,
                if g.capacity_limited { ", capacity limited" } else { "" },
                pct(plan.accuracy.pre_compression),
                pct(plan.accuracy.post_compression)
            );
        }
        Command::Finetune { ckpt, plan, config, out_ckpt, out_plan } => {
            let (net, plan) = load_pair(&ckpt, &plan)?;
            if plan.stage != Stage::Compressed {
                bail!("finetune expects the plan written by compress");
            }
            let cfg = RunConfig::load(&config).with_context(|| format!("loading config {}", config.display()))?;
            let (tuned, plan) = run_finetune(&net, &plan, &cfg)?;
            save(&tuned, &plan, &out_ckpt, out_plan.as_deref())?;
            println!(
                "finetuned {} epochs in mode {}: accuracy {} -> {}",
                plan.finetune.len(),
                cfg.mode,
                pct(plan.accuracy.post_compression),
                pct(plan.accuracy.finetuned)
            );
        }
        Command::Verify { ckpt, plan } => {
            let (net, plan) = load_pair(&ckpt, &plan)?;
            let report = verify(&net, &plan);
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Report { plan, ckpt, arch, format, out } => {
            let plan_path = plan;
            let plan = RunPlan::load(&plan_path).with_context(|| format!("loading plan {}", plan_path.display()))?;
            if let Some(ck) = ckpt {
                load_pair(&ck, &plan_path)?;
            }
            let arch = arch.as_deref().map(load_arch).transpose()?;
            let format = match format {
                Format::Json => ReportFormat::Json,
                Format::Csv => ReportFormat::Csv,
            };
            for f in run_report(&plan, arch.as_ref(), format, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Count { arch, format } => {
            let spec = load_arch(&arch)?;
            let costs = spec.layer_costs()?;
            let params: u64 = costs.iter().map(|c| c.params()).sum();
            let flops: u64 = costs.iter().map(|c| c.flops).sum();
            match format {
                CountFormat::Json => println!(
                    "{}",
                    serde_json::json!({
                        "name": spec.name,
                        "params": params,
                        "flops": flops,
                        "conv_layers": spec.conv_count(),
                        "layers": costs,
                    })
                ),
                CountFormat::Text => {
                    println!("{}", spec.name);
                    println!("  params      {params} ({:.2}M)", params as f64 / 1e6);
                    println!("  flops       {flops} ({:.2}G)", flops as f64 / 1e9);
                    println!("  conv layers {}", spec.conv_count());
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
