//! Blip recovery metrics: per-timepoint MSE, overall MSE and Spearman rank
//! correlation of estimated against true realised blips.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TerraError};
use crate::snmm::{BlipEvaluation, Panel};

/// Which `(unit, t)` pairs enter the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Only steps with `Z_t ≠ 0`. The headline mode.
    TreatedOnly,
    /// Every step; control steps contribute `(0 − 0)²`.
    AllSteps,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TreatedOnly => "treated",
            Self::AllSteps => "all",
        })
    }
}

/// Mean over units of `(est − truth)²` for each column of `[N × T]` inputs.
pub fn mse_per_timepoint(est: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    let shape_err = || TerraError::Shape { op: "mse_per_timepoint", detail: "estimate and truth shapes differ".into() };
    if est.len() != truth.len() || est.is_empty() {
        return Err(shape_err());
    }
    let t = est[0].len();
    if est.iter().chain(truth).any(|r| r.len() != t) {
        return Err(shape_err());
    }
    let n = est.len() as f64;
    Ok((0..t)
        .map(|j| est.iter().zip(truth).map(|(e, g)| (e[j] - g[j]).powi(2)).sum::<f64>() / n)
        .collect())
}

/// 1-based ranks; ties share the mean of their rank block.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation, `None` when either side has no rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(TerraError::Shape { op: "spearman", detail: format!("{} vs {} values", x.len(), y.len()) });
    }
    if x.len() < 2 {
        return Err(TerraError::Contract(format!("spearman needs at least 2 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(TerraError::NonFinite { op: "spearman" });
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub mse_per_timepoint: Vec<f64>,
    /// Mean of the per-timepoint MSEs.
    pub overall_mse: f64,
    /// Pooled over every included `(unit, t)` pair.
    pub overall_spearman: Option<f64>,
    pub spearman_per_timepoint: Vec<Option<f64>>,
    pub n_units: usize,
    /// Included pairs per timepoint.
    pub counts: Vec<usize>,
}

/// Compares realised estimated blips `ĝ_t^{Z_t}` with the panel's true blips.
pub fn evaluate(panel: &Panel, estimate: &BlipEvaluation, mode: EvalMode) -> Result<EvalReport> {
    if !panel.has_ground_truth() {
        return Err(TerraError::Contract("evaluate needs a panel with ground-truth blips".into()));
    }
    let horizon = panel.horizon();
    let mut est_t = vec![Vec::new(); horizon];
    let mut true_t = vec![Vec::new(); horizon];
    for (i, tr) in panel.trajectories().iter().enumerate() {
        let truth = tr.true_blips.as_ref().expect("checked above");
        for t in 1..=horizon {
            let z = tr.z(t);
            if mode == EvalMode::TreatedOnly && z == 0 {
                continue;
            }
            est_t[t - 1].push(estimate.realized(i, t, z));
            true_t[t - 1].push(truth[t - 1]);
        }
    }
    if let Some(t) = est_t.iter().position(Vec::is_empty) {
        return Err(TerraError::Contract(format!("no {mode} steps at t={} to evaluate", t + 1)));
    }
    let mse: Vec<f64> = est_t
        .iter()
        .zip(&true_t)
        .map(|(e, g)| e.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / e.len() as f64)
        .collect();
    if mse.iter().any(|v| !v.is_finite()) {
        return Err(TerraError::NonFinite { op: "evaluate" });
    }
    let per_t = est_t
        .iter()
        .zip(&true_t)
        .map(|(e, g)| if e.len() < 2 { Ok(None) } else { spearman(e, g) })
        .collect::<Result<Vec<_>>>()?;
    let pooled_e: Vec<f64> = est_t.concat();
    let pooled_g: Vec<f64> = true_t.concat();
    let overall_spearman = if pooled_e.len() < 2 { None } else { spearman(&pooled_e, &pooled_g)? };
    Ok(EvalReport {
        mode,
        overall_mse: mse.iter().sum::<f64>() / horizon as f64,
        mse_per_timepoint: mse,
        overall_spearman,
        spearman_per_timepoint: per_t,
        n_units: panel.len(),
        counts: est_t.iter().map(Vec::len).collect(),
    })
}

pub const METRICS_HEADER: [&str; 5] = ["method", "seed", "timepoint", "mse", "spearman"];

/// One line of `metrics.csv`; `timepoint` is `1..=T` or `overall`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub timepoint: String,
    pub mse: f64,
    pub spearman: Option<f64>,
}

impl EvalReport {
    /// `T` per-timepoint rows followed by the `overall` row.
    pub fn rows(&self, method: &str, seed: u64) -> Vec<MetricsRow> {
        let row = |timepoint: String, mse, spearman| MetricsRow { method: method.to_string(), seed, timepoint, mse, spearman };
        self.mse_per_timepoint
            .iter()
            .zip(&self.spearman_per_timepoint)
            .enumerate()
            .map(|(t, (&m, &s))| row((t + 1).to_string(), m, s))
            .chain(std::iter::once(row("overall".into(), self.overall_mse, self.overall_spearman)))
            .collect()
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| TerraError::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| TerraError::Parse(e.to_string()))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(TerraError::Parse(format!(
            "metrics header {:?} does not match {:?}",
            header.iter().collect::<Vec<_>>(),
            METRICS_HEADER
        )));
    }
    r.deserialize().map(|row| row.map_err(|e| TerraError::Parse(e.to_string()))).collect()
}
