//! Config-driven experiment runner around `terra-core`.

pub mod config;
pub mod runner;
pub mod summary;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use terra_core::datagen::generate;
use terra_core::metrics::{evaluate, write_metrics_csv, EvalMode, MetricsRow};
use terra_core::snmm::io::{read_panel_csv, write_panel_csv};
use terra_core::transformer::read_checkpoint;

pub use config::{parse_config, ExperimentConfig, Method};
pub use runner::{run_experiment, RunReport};

pub fn panel_path(dir: &Path, split: &str, seed: u64) -> PathBuf {
    dir.join("data").join(format!("{split}_seed{seed}.csv"))
}

/// Writes the training and evaluation panels of every seed, ground truth included.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    runner::write_manifest(cfg)?;
    let mut out = Vec::new();
    for seed in cfg.seeds() {
        for (split, spec) in [("train", cfg.train_spec(seed)), ("eval", cfg.eval_spec(seed))] {
            let (panel, _) = generate(&spec)?;
            let path = panel_path(&cfg.output_dir, split, seed);
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            write_panel_csv(&panel, &mut w)?;
            w.flush()?;
            out.push(path);
        }
    }
    Ok(out)
}

fn load_panel(path: &Path, k: usize) -> Result<terra_core::Panel> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_panel_csv(BufReader::new(f), Some(k))?)
}

/// Trains TERRA for every seed. `panel` replaces the generated training panel.
pub fn train_seeds(cfg: &ExperimentConfig, panel: Option<&Path>) -> Result<Vec<PathBuf>> {
    runner::write_manifest(cfg)?;
    let mut out = Vec::new();
    for seed in cfg.seeds() {
        let p = match panel {
            Some(path) => load_panel(path, cfg.scenario.n_treatments)?,
            None => generate(&cfg.train_spec(seed))?.0,
        };
        let o = runner::train_terra(cfg, seed, &p, &cfg.output_dir)?;
        eprintln!("seed {seed}: best epoch {} val {:.4} stopped early {}", o.best_epoch, o.best_val_total, o.stopped_early);
        out.push(runner::checkpoint_path(&cfg.output_dir, seed));
    }
    Ok(out)
}

/// Scores saved TERRA checkpoints on evaluation panels and writes
/// `terra_metrics.csv` and `terra_metrics_all_steps.csv`.
pub fn evaluate_checkpoints(cfg: &ExperimentConfig, checkpoint: Option<&Path>, panel: Option<&Path>) -> Result<Vec<MetricsRow>> {
    let mut treated = Vec::new();
    let mut all = Vec::new();
    for seed in cfg.seeds() {
        let ck = checkpoint.map_or_else(|| runner::checkpoint_path(&cfg.output_dir, seed), Path::to_path_buf);
        let f = File::open(&ck).with_context(|| format!("opening {}", ck.display()))?;
        let model = read_checkpoint(BufReader::new(f)).with_context(|| format!("reading {}", ck.display()))?;
        let p = match panel {
            Some(path) => load_panel(path, cfg.scenario.n_treatments)?,
            None => generate(&cfg.eval_spec(seed))?.0,
        };
        let est = runner::terra_blips(&model, &p)?;
        treated.extend(evaluate(&p, &est, EvalMode::TreatedOnly)?.rows(Method::Terra.as_str(), seed));
        all.extend(evaluate(&p, &est, EvalMode::AllSteps)?.rows(Method::Terra.as_str(), seed));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    for (name, rows) in [("terra_metrics.csv", &treated), ("terra_metrics_all_steps.csv", &all)] {
        let mut w = BufWriter::new(File::create(cfg.output_dir.join(name))?);
        write_metrics_csv(rows, &mut w)?;
        w.flush()?;
    }
    Ok(treated)
}
