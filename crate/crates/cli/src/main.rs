use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use terra_cli::summary::{summarize_files, summary_text, write_summary};
use terra_cli::{evaluate_checkpoints, generate_data, parse_config, run_experiment, runner, train_seeds, ExperimentConfig};

#[derive(Parser)]
#[command(name = "terra", version, about = "Longitudinal heterogeneous treatment effect experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file; omitted keys take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured range
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overrides `output_dir`
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the manifest and list planned runs without computing
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate training and evaluation panels to <out>/data
    Generate(Common),
    /// Train TERRA and write logs and checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on this panel CSV instead of a simulated one
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Score TERRA checkpoints against ground-truth blips
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation panel CSV with a true_blip column
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Generate, fit every method, evaluate and summarise
    Run(Common),
    /// Per-method mean ± sd of overall metrics across metrics.csv files
    Summarize {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Also write summary.csv and summary.txt here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text)?;
    if let Some(s) = c.seed {
        cfg.scenario.seed = s;
        cfg.n_seeds = 1;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

/// True when the dry run handled the command.
fn dry_run(c: &Common, cfg: &ExperimentConfig) -> Result<bool> {
    if !c.dry_run {
        return Ok(false);
    }
    runner::write_manifest(cfg)?;
    for line in runner::plan(cfg) {
        println!("{line}");
    }
    println!("manifest: {}", cfg.output_dir.join("manifest.json").display());
    Ok(true)
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Generate(c) => {
            let cfg = load(&c)?;
            if !dry_run(&c, &cfg)? {
                for p in generate_data(&cfg)? {
                    println!("{}", p.display());
                }
            }
        }
        Command::Train { common, panel } => {
            let cfg = load(&common)?;
            if !dry_run(&common, &cfg)? {
                for p in train_seeds(&cfg, panel.as_deref())? {
                    println!("{}", p.display());
                }
            }
        }
        Command::Evaluate { common, checkpoint, panel } => {
            let cfg = load(&common)?;
            if !dry_run(&common, &cfg)? {
                for r in evaluate_checkpoints(&cfg, checkpoint.as_deref(), panel.as_deref())? {
                    let sp = r.spearman.map_or_else(|| "n/a".into(), |s| format!("{s:.4}"));
                    println!("{} seed={} t={} mse={:.6} spearman={sp}", r.method, r.seed, r.timepoint, r.mse);
                }
            }
        }
        Command::Run(c) => {
            let cfg = load(&c)?;
            if !dry_run(&c, &cfg)? {
                let report = run_experiment(&cfg)?;
                for f in &report.failures {
                    eprintln!("FAILED {} seed {}: {}", f.method, f.seed, f.error);
                }
                print!("{}", std::fs::read_to_string(cfg.output_dir.join("summary.txt"))?);
                if !report.failed_methods.is_empty() {
                    let names: Vec<&str> = report.failed_methods.iter().map(|m| m.as_str()).collect();
                    eprintln!("every run failed for: {}", names.join(", "));
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Summarize { metrics, out } => {
            if metrics.is_empty() {
                bail!("no metrics files given");
            }
            let rows = summarize_files(&metrics)?;
            if let Some(dir) = out {
                write_summary(&rows, &dir)?;
            }
            print!("{}", summary_text(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
