//! End-to-end experiment execution and artifact writing.
//!
//! Layout of `output_dir`:
//!
//! ```text
//! manifest.json             resolved config, every surrogate constant, seeds
//! plan.txt                  one line per planned (seed, method) run
//! metrics.csv               treated-step metrics: method,seed,timepoint,mse,spearman
//! metrics_all_steps.csv     same schema, control steps included
//! failures.csv              method,seed,error
//! summary.csv, summary.txt  per-method mean ± sd of the overall rows
//! logs/terra_seed{S}.csv    training log
//! checkpoints/terra_seed{S}.ckpt
//! plots/mse_by_timepoint.csv    method,timepoint,mse_mean,mse_sd,spearman_mean,n_seeds
//! plots/blip_trajectories.csv   method,seed,unit,timepoint,arm,true_blip,estimated_blip
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use terra_core::baselines::{fit_recursive_rlearner, PropensitySource};
use terra_core::datagen::{generate, GroundTruth};
use terra_core::metrics::{evaluate, write_metrics_csv, EvalMode, EvalReport, MetricsRow};
use terra_core::snmm::BlipEvaluation;
use terra_core::training::{train, write_log_csv, TrainOutcome};
use terra_core::transformer::{write_checkpoint, Terra};
use terra_core::Panel;

use crate::config::{ExperimentConfig, Method};
use crate::summary::{summarize_rows, write_summary};

/// Units per seed whose blip paths go to `plots/blip_trajectories.csv`.
const TRAJECTORY_UNITS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub method: Method,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    /// Treated-step rows, sorted by method then seed.
    pub rows: Vec<MetricsRow>,
    pub rows_all_steps: Vec<MetricsRow>,
    pub failures: Vec<Failure>,
    /// Methods whose every seed failed.
    pub failed_methods: Vec<Method>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.failed_methods.is_empty())
    }
}

pub fn plan(cfg: &ExperimentConfig) -> Vec<String> {
    let mut lines = Vec::new();
    for &m in &cfg.methods {
        for s in cfg.seeds() {
            lines.push(format!(
                "{m} seed={s} scenario={} n={} eval_n={} T={} K={}",
                cfg.scenario.kind, cfg.scenario.n_units, cfg.eval_n, cfg.scenario.horizon, cfg.scenario.n_treatments
            ));
        }
    }
    lines
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    write_file(&cfg.output_dir.join("manifest.json"), &cfg.manifest_json())?;
    write_file(&cfg.output_dir.join("plan.txt"), &(plan(cfg).join("\n") + "\n"))
}

/// Realised-history blips from a TERRA model.
pub fn terra_blips(model: &Terra, panel: &Panel) -> terra_core::Result<BlipEvaluation> {
    let pred = model.predict_panel(panel)?;
    BlipEvaluation::from_fn(panel, |i, t| pred.blip(i, t).to_vec())
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("terra_seed{seed}.ckpt"))
}

pub fn log_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("logs").join(format!("terra_seed{seed}.csv"))
}

/// Trains TERRA on `panel` and writes its log and checkpoint.
pub fn train_terra(cfg: &ExperimentConfig, seed: u64, panel: &Panel, dir: &Path) -> Result<TrainOutcome> {
    let out = train(panel, &cfg.arch, &cfg.train_config(seed))?;
    let mut log = create(&log_path(dir, seed))?;
    write_log_csv(&out.log, &mut log)?;
    log.flush()?;
    let mut ck = create(&checkpoint_path(dir, seed))?;
    write_checkpoint(&out.model, &mut ck)?;
    ck.flush()?;
    Ok(out)
}

fn estimate(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    train_panel: &Panel,
    truth: &GroundTruth,
    eval_panel: &Panel,
) -> Result<BlipEvaluation> {
    match cfg.regressor(method) {
        None => {
            let out = train_terra(cfg, seed, train_panel, &cfg.output_dir)?;
            Ok(terra_blips(&out.model, eval_panel)?)
        }
        Some(kind) => {
            let propensity = if cfg.oracle_propensity {
                PropensitySource::Oracle(truth.propensities())
            } else {
                PropensitySource::LinearProbability
            };
            let fit = fit_recursive_rlearner(train_panel, kind, cfg.rlearner_features.feature_map(), propensity)?;
            Ok(fit.blips(eval_panel)?)
        }
    }
}

struct SeedResult {
    treated: EvalReport,
    all: EvalReport,
    trajectories: Vec<String>,
}

fn trajectory_lines(method: Method, seed: u64, panel: &Panel, est: &BlipEvaluation) -> Vec<String> {
    let mut lines = Vec::new();
    for i in 0..panel.len().min(TRAJECTORY_UNITS) {
        let tr = panel.get(i);
        let truth = tr.true_blips.as_deref().unwrap_or_default();
        for t in 1..=panel.horizon() {
            let z = tr.z(t);
            let g = truth.get(t - 1).copied().unwrap_or(f64::NAN);
            lines.push(format!("{method},{seed},{i},{t},{z},{g:?},{:?}", est.realized(i, t, z)));
        }
    }
    lines
}

/// Runs every (method, seed) pair and writes all artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let dir = &cfg.output_dir;
    write_manifest(cfg)?;
    let seeds = cfg.seeds();
    let mut results: Vec<(Method, u64, std::result::Result<SeedResult, String>)> = Vec::new();
    for &seed in &seeds {
        let (train_panel, truth) = generate(&cfg.train_spec(seed))?;
        let (eval_panel, _) = generate(&cfg.eval_spec(seed))?;
        for &m in &cfg.methods {
            let r = estimate(cfg, m, seed, &train_panel, &truth, &eval_panel).and_then(|est| {
                Ok(SeedResult {
                    treated: evaluate(&eval_panel, &est, EvalMode::TreatedOnly)?,
                    all: evaluate(&eval_panel, &est, EvalMode::AllSteps)?,
                    trajectories: trajectory_lines(m, seed, &eval_panel, &est),
                })
            });
            results.push((m, seed, r.map_err(|e| format!("{e:#}"))));
        }
    }
    results.sort_by_key(|(m, s, _)| (*m, *s));

    let mut report = RunReport::default();
    let mut traj = vec!["method,seed,unit,timepoint,arm,true_blip,estimated_blip".to_string()];
    for (m, seed, r) in &results {
        match r {
            Ok(sr) => {
                report.rows.extend(sr.treated.rows(m.as_str(), *seed));
                report.rows_all_steps.extend(sr.all.rows(m.as_str(), *seed));
                if *seed == seeds[0] {
                    traj.extend(sr.trajectories.iter().cloned());
                }
            }
            Err(e) => report.failures.push(Failure { method: *m, seed: *seed, error: e.clone() }),
        }
    }
    report.failed_methods = cfg
        .methods
        .iter()
        .copied()
        .filter(|m| results.iter().filter(|(rm, _, _)| rm == m).all(|(_, _, r)| r.is_err()))
        .collect();

    let mut w = create(&dir.join("metrics.csv"))?;
    write_metrics_csv(&report.rows, &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("metrics_all_steps.csv"))?;
    write_metrics_csv(&report.rows_all_steps, &mut w)?;
    w.flush()?;

    let mut fail = String::from("method,seed,error\n");
    for f in &report.failures {
        fail.push_str(&format!("{},{},\"{}\"\n", f.method, f.seed, f.error.replace('"', "'").replace('\n', " ")));
    }
    write_file(&dir.join("failures.csv"), &fail)?;
    write_file(&dir.join("plots").join("mse_by_timepoint.csv"), &mse_by_timepoint(&report.rows))?;
    write_file(&dir.join("plots").join("blip_trajectories.csv"), &(traj.join("\n") + "\n"))?;
    let summary = summarize_rows(&report.rows)?;
    write_summary(&summary, dir)?;
    Ok(report)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() < 2 { 0.0 } else { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    (mean, sd)
}

/// Across-seed aggregation per (method, timepoint), for line charts.
pub fn mse_by_timepoint(rows: &[MetricsRow]) -> String {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.timepoint.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = String::from("method,timepoint,mse_mean,mse_sd,spearman_mean,n_seeds\n");
    for (m, t) in keys {
        let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.method == m && r.timepoint == t).collect();
        let (mse, sd) = mean_sd(&sel.iter().map(|r| r.mse).collect::<Vec<_>>());
        let sp: Vec<f64> = sel.iter().filter_map(|r| r.spearman).collect();
        let sp = if sp.is_empty() { String::new() } else { format!("{:?}", mean_sd(&sp).0) };
        out.push_str(&format!("{m},{t},{mse:?},{sd:?},{sp},{}\n", sel.len()));
    }
    out
}
