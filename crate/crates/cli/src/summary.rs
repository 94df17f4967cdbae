//! Per-method summary of `overall` metric rows across seeds.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use terra_core::metrics::{read_metrics_csv, MetricsRow};

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub n_seeds: usize,
    pub mse_mean: f64,
    /// Sample sd; 0 for a single seed.
    pub mse_sd: f64,
    pub spearman_mean: Option<f64>,
    pub spearman_sd: Option<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Sorted by MSE ascending, ties by Spearman descending (missing last).
pub fn summarize_rows(rows: &[MetricsRow]) -> Result<Vec<SummaryRow>> {
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort();
    methods.dedup();
    let mut out = Vec::new();
    for m in methods {
        let overall: Vec<&MetricsRow> = rows.iter().filter(|r| r.method == m && r.timepoint == "overall").collect();
        if overall.is_empty() {
            bail!("method {m} has no overall rows");
        }
        let mut seeds: Vec<u64> = overall.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            bail!("method {m} has more than one overall row for a seed");
        }
        let (mse_mean, mse_sd) = mean_sd(&overall.iter().map(|r| r.mse).collect::<Vec<_>>());
        let sp: Vec<f64> = overall.iter().filter_map(|r| r.spearman).collect();
        let (spearman_mean, spearman_sd) = if sp.is_empty() {
            (None, None)
        } else {
            let (a, b) = mean_sd(&sp);
            (Some(a), Some(b))
        };
        out.push(SummaryRow { method: m.to_string(), n_seeds: overall.len(), mse_mean, mse_sd, spearman_mean, spearman_sd });
    }
    out.sort_by(|a, b| {
        a.mse_mean
            .total_cmp(&b.mse_mean)
            .then_with(|| b.spearman_mean.unwrap_or(f64::NEG_INFINITY).total_cmp(&a.spearman_mean.unwrap_or(f64::NEG_INFINITY)))
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(out)
}

/// Reads and concatenates `metrics.csv` files; schemas must match exactly.
pub fn summarize_files<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        rows.extend(read_metrics_csv(f).with_context(|| format!("reading {}", p.display()))?);
    }
    summarize_rows(&rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,n_seeds,mse_mean,mse_sd,spearman_mean,spearman_sd\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:?},{:?},{},{}\n",
            r.method,
            r.n_seeds,
            r.mse_mean,
            r.mse_sd,
            opt(r.spearman_mean),
            opt(r.spearman_sd)
        ));
    }
    s
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            let sp = match (r.spearman_mean, r.spearman_sd) {
                (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
                _ => "n/a".into(),
            };
            [r.method.clone(), r.n_seeds.to_string(), format!("{:.4} ± {:.4}", r.mse_mean, r.mse_sd), sp]
        })
        .collect();
    let header = ["method", "seeds", "overall MSE", "overall Spearman"].map(String::from);
    let width: Vec<usize> = (0..4)
        .map(|c| std::iter::once(&header).chain(&cells).map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let line = |r: &[String; 4]| {
        let mut s: String = r.iter().zip(&width).map(|(v, w)| format!("{v:<w$}  ", w = *w)).collect();
        s.truncate(s.trim_end().len());
        s + "\n"
    };
    std::iter::once(&header).chain(&cells).map(line).collect()
}

pub fn write_summary(rows: &[SummaryRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.csv"), summary_csv(rows))?;
    fs::write(dir.join("summary.txt"), summary_text(rows))?;
    Ok(())
}
