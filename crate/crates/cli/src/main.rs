use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aff_core::autodiff::{inject_backward_fault, OpKind};
use aff_core::run::{
    build_report, inventory, run_eval, run_inspect, run_suite, run_training, RunConfig, Scope, MANIFEST_FILE, TOLERANCE,
    WEIGHTS_FILE,
};
use aff_core::{Error, Precision};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "aff", version, about = "Attentional feature fusion networks: train, evaluate, check and inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Validate the configuration and print the network inventory only.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics.jsonl, run.cfg and checkpoint.fsds.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the configured validation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// ops, attention, fusion, blocks or all.
        #[arg(default_value = "all")]
        scope: String,
        /// Corrupt the backward rule of one op (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Parameter and FLOP counts beside the add-fusion baseline.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Dump the attention maps of every fusion site.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `FSDS` container with the images to run (default: validation set).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Defaults, then the config file (or `fallback`), then `--set`, `--seed`
/// and `--precision`.
fn resolve(common: &Common, fallback: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = common.config.as_deref().or(fallback) {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| anyhow::Error::new(e).context(format!("in {}", path.display())))?;
    }
    for kv in &common.set {
        cfg.apply_override(kv).context("in --set")?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &common.precision {
        cfg.set("precision", p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

/// `run.cfg` beside the checkpoint, used when no `--config` is given.
fn manifest_of(checkpoint: &Path) -> Option<PathBuf> {
    let m = checkpoint.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE);
    m.exists().then_some(m)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { common } => {
            let cfg = resolve(&common, None)?;
            if common.dry_run {
                print!("{}", inventory(&cfg)?);
                return Ok(ExitCode::SUCCESS);
            }
            let out = out_dir(&common);
            let outcome = run_training(&cfg, &out, |line| println!("{line}"))?;
            let last = outcome.records.last().expect("epoch-0 record");
            eprintln!(
                "trained {} epochs: {} = {:.4}; checkpoint in {}",
                cfg.epochs,
                last.metric_name(),
                last.val_metric,
                out.display()
            );
        }
        Command::Eval { checkpoint, common } => {
            let cfg = resolve(&common, manifest_of(&checkpoint).as_deref())?;
            if common.dry_run {
                print!("{}", inventory(&cfg)?);
                return Ok(ExitCode::SUCCESS);
            }
            let metric = run_eval(&cfg, &checkpoint)?;
            println!("{}", json!({ cfg.task.metric_name(): metric }));
        }
        Command::Gradcheck {
            scope,
            inject_fault,
            common,
        } => {
            let scope = Scope::from_name(&scope)?;
            let cfg = resolve(&common, None)?;
            if cfg.precision != Precision::F64 {
                return Err(Error::Config("gradient checks run in double precision only".into()).into());
            }
            if common.dry_run {
                println!("gradcheck scope validated; tolerance {TOLERANCE:e}");
                return Ok(ExitCode::SUCCESS);
            }
            if let Some(name) = inject_fault {
                let op = OpKind::from_name(&name).ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?;
                inject_backward_fault(Some(op));
            }
            let results = run_suite(scope, cfg.seed)?;
            for r in &results {
                println!(
                    "{:<10} {:<30} {:>10.3e}  {:<4}  worst {}",
                    r.scope,
                    r.unit,
                    r.report.max_rel_error,
                    if r.passed() { "ok" } else { "FAIL" },
                    r.report.worst
                );
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.unit.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("gradient check failed (> {TOLERANCE:e}): {}", failed.join(", "));
                return Ok(ExitCode::from(1));
            }
            println!("all {} units below {TOLERANCE:e}", results.len());
        }
        Command::Report { common } => {
            let cfg = resolve(&common, None)?;
            if common.dry_run {
                print!("{}", inventory(&cfg)?);
                return Ok(ExitCode::SUCCESS);
            }
            let report = build_report(&cfg)?;
            print!("{}", report.to_text());
            if let Some(out) = &common.out {
                fs::create_dir_all(out).with_context(|| out.display().to_string())?;
                let path = out.join("report.json");
                fs::write(&path, serde_json::to_string_pretty(&report.to_json())?)
                    .with_context(|| path.display().to_string())?;
            }
        }
        Command::Inspect {
            checkpoint,
            input,
            count,
            common,
        } => {
            let cfg = resolve(&common, manifest_of(&checkpoint).as_deref())?;
            if common.dry_run {
                print!("{}", inventory(&cfg)?);
                return Ok(ExitCode::SUCCESS);
            }
            let out = out_dir(&common);
            let maps = run_inspect(&cfg, &checkpoint, input.as_deref(), count, &out)?;
            let mut sites = Vec::new();
            for m in &maps {
                println!("{:<32} {} mean {:.6} min {:.6} max {:.6}", m.path, m.map.shape(), m.mean, m.min, m.max);
                sites.push(json!({ "site": m.path, "mean": m.mean, "min": m.min, "max": m.max }));
            }
            let path = out.join("weights.json");
            fs::write(&path, serde_json::to_string_pretty(&json!({ "sites": sites }))?)
                .with_context(|| path.display().to_string())?;
            eprintln!("maps written to {}", out.join(WEIGHTS_FILE).display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Diverged { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn divergence_maps_to_three() {
        let e = anyhow!(Error::Diverged {
            epoch: 2,
            detail: "loss is NaN".into()
        });
        assert_eq!(exit_code(&e), 3);
        assert_eq!(exit_code(&anyhow!(Error::Config("x".into())).context("outer")), 2);
    }
}
