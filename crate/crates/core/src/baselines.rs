//! Recursive R-learners with closed-form linear regressors.
//!
//! Fitting runs backward over `t = T..1`. At each step the outcome
//! nuisance `μ̂_t` regresses `U_{t+1}` on the full history
//! ([`full_history`]), propensities come
//! from an oracle or from clipped linear-probability fits, and the blip
//! coefficients solve the residual-on-residual least-squares problem
//! `min Σ_i (Ũ_i − Σ_z Ĩ_i^z θ_zᵀ(1, h_i))²`. `U_t` is then formed from the
//! fitted blip before moving to `t − 1`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Result, TerraError};
use crate::snmm::{BlipEvaluation, Panel, Trajectory};

/// Linear-probability propensity predictions are clipped to this range.
pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressorKind {
    Ols,
    Ridge(f64),
}

impl RegressorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Ridge(a) if !(a >= 0.0 && a.is_finite()) => {
                Err(TerraError::Config(format!("ridge_alpha: must be finite and >= 0, got {a}")))
            }
            _ => Ok(()),
        }
    }

    fn alpha(&self) -> f64 {
        match *self {
            Self::Ols => 0.0,
            Self::Ridge(a) => a,
        }
    }
}

impl fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ols => f.write_str("ols"),
            Self::Ridge(a) => write!(f, "ridge({a})"),
        }
    }
}

/// `y ≈ intercept + coef·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// `[b, β_1..β_d]`.
    pub fn coefficients(&self) -> Vec<f64> {
        std::iter::once(self.intercept).chain(self.coef.iter().copied()).collect()
    }
}

/// In-place Cholesky solve of `A x = b` for row-major symmetric `A` (d×d).
fn solve_spd(a: &mut [f64], b: &mut [f64], d: usize, ctx: &'static str) -> Result<()> {
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 1e-11 * scale) {
            return Err(TerraError::Singular(ctx));
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l;
        }
    }
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * d + k] * b[k];
        }
        b[i] = s / a[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= a[k * d + i] * b[k];
        }
        b[i] = s / a[i * d + i];
    }
    Ok(())
}

fn check_design(x: &[Vec<f64>], y: &[f64], op: &'static str) -> Result<usize> {
    if x.len() != y.len() {
        return Err(TerraError::Shape { op, detail: format!("{} rows vs {} targets", x.len(), y.len()) });
    }
    let d = x.first().map_or(0, Vec::len);
    if let Some(r) = x.iter().position(|r| r.len() != d) {
        return Err(TerraError::Shape { op, detail: format!("row {r} has {} features, expected {d}", x[r].len()) });
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(TerraError::NonFinite { op });
    }
    Ok(d)
}

/// Least squares with an unpenalised intercept, via centred normal equations.
/// Zero-variance columns receive coefficient 0.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64], kind: RegressorKind) -> Result<LinearFit> {
    kind.validate()?;
    let d = check_design(x, y, "fit_linear")?;
    let n = y.len();
    if n == 0 || (kind == RegressorKind::Ols && n <= d) {
        return Err(TerraError::Contract(format!("fit_linear: OLS needs more rows than features ({n} <= {d})")));
    }
    let nf = n as f64;
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut x_mean = vec![0.0; d];
    for r in x {
        for (m, v) in x_mean.iter_mut().zip(r) {
            *m += v / nf;
        }
    }
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut c = vec![0.0; d];
    for (r, &yi) in x.iter().zip(y) {
        for j in 0..d {
            c[j] = r[j] - x_mean[j];
        }
        let yc = yi - y_mean;
        for j in 0..d {
            b[j] += c[j] * yc;
            for k in 0..=j {
                a[j * d + k] += c[j] * c[k];
            }
        }
    }
    // constant columns carry no information and get coefficient 0
    let keep: Vec<usize> = (0..d).filter(|&j| a[j * d + j] > 1e-12 * nf).collect();
    let m = keep.len();
    let mut a_k = vec![0.0; m * m];
    let mut b_k: Vec<f64> = keep.iter().map(|&j| b[j]).collect();
    for (r, &j) in keep.iter().enumerate() {
        for (c, &k) in keep.iter().enumerate() {
            a_k[r * m + c] = if k <= j { a[j * d + k] } else { a[k * d + j] };
        }
        a_k[r * m + r] += kind.alpha();
    }
    solve_spd(&mut a_k, &mut b_k, m, "fit_linear")?;
    b.iter_mut().for_each(|v| *v = 0.0);
    for (r, &j) in keep.iter().enumerate() {
        b[j] = b_k[r];
    }
    let intercept = y_mean - x_mean.iter().zip(&b).map(|(m, v)| m * v).sum::<f64>();
    Ok(LinearFit { intercept, coef: b })
}

/// Least squares without intercept; ridge penalises every coefficient.
fn fit_through_origin(x: &[Vec<f64>], y: &[f64], kind: RegressorKind) -> Result<Vec<f64>> {
    let d = check_design(x, y, "blip regression")?;
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for (r, &yi) in x.iter().zip(y) {
        for j in 0..d {
            b[j] += r[j] * yi;
            for k in 0..=j {
                a[j * d + k] += r[j] * r[k];
            }
        }
    }
    for j in 0..d {
        a[j * d + j] += kind.alpha();
        for k in 0..j {
            a[k * d + j] = a[j * d + k];
        }
    }
    solve_spd(&mut a, &mut b, d, "blip regression")?;
    Ok(b)
}

/// Features of a trajectory at the history preceding `t`.
pub type FeatureFn = Arc<dyn Fn(&Trajectory, usize) -> Vec<f64> + Send + Sync>;

/// History features `h_t` read by every per-step regression.
#[derive(Clone, Default)]
pub enum FeatureMap {
    /// `X_{t-1}` only.
    Covariates,
    /// `X_{t-1}` followed by the one-hot of `Z_{t-1}` over active arms
    /// (dummies only for `t ≥ 2`).
    #[default]
    CovariatesAndLastArm,
    Custom(FeatureFn),
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Covariates => f.write_str("Covariates"),
            Self::CovariatesAndLastArm => f.write_str("CovariatesAndLastArm"),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl FeatureMap {
    pub fn features(&self, tr: &Trajectory, t: usize, n_treatments: usize) -> Vec<f64> {
        match self {
            Self::Covariates => tr.history_x(t).to_vec(),
            Self::CovariatesAndLastArm => {
                let mut h = tr.history_x(t).to_vec();
                if t >= 2 {
                    let z = tr.z(t - 1);
                    h.extend((1..n_treatments).map(|a| if a == z { 1.0 } else { 0.0 }));
                }
                h
            }
            Self::Custom(f) => f(tr, t),
        }
    }
}

/// Where `ê_t` comes from.
#[derive(Debug, Clone, Copy)]
pub enum PropensitySource<'a> {
    /// True propensities indexed `[unit][t-1][arm]`, aligned with the panel.
    Oracle(&'a [Vec<Vec<f64>>]),
    /// Per-arm linear-probability regression clipped to [`PROPENSITY_CLIP`].
    LinearProbability,
}

impl PropensitySource<'_> {
    pub fn is_oracle(&self) -> bool {
        matches!(self, Self::Oracle(_))
    }
}

/// Fitted models for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepModel {
    pub t: usize,
    pub mu: LinearFit,
    /// Linear-probability fits for arms `1..K`, absent under oracle
    /// propensities.
    pub propensity: Option<Vec<LinearFit>>,
    /// Per active arm `z = 1..K`: `θ_z` over `(1, h)`, or `None` if the arm
    /// is degenerate at this step.
    pub blip: Vec<Option<Vec<f64>>>,
}

impl StepModel {
    /// `ĝ_t^z(h)` for active arms; degenerate arms contribute 0.
    pub fn blip_at(&self, h: &[f64]) -> Vec<f64> {
        self.blip
            .iter()
            .map(|th| th.as_ref().map_or(0.0, |th| th[0] + th[1..].iter().zip(h).map(|(a, b)| a * b).sum::<f64>()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RecursiveRLearner {
    pub kind: RegressorKind,
    pub features: FeatureMap,
    pub oracle_propensity: bool,
    n_treatments: usize,
    /// Index `t - 1`.
    steps: Vec<StepModel>,
}

impl RecursiveRLearner {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.n_treatments
    }

    pub fn step(&self, t: usize) -> &StepModel {
        &self.steps[t - 1]
    }

    /// `(t, z)` pairs whose blip could not be identified.
    pub fn degenerate_arms(&self) -> Vec<(usize, usize)> {
        self.steps
            .iter()
            .flat_map(|s| s.blip.iter().enumerate().filter(|(_, b)| b.is_none()).map(move |(a, _)| (s.t, a + 1)))
            .collect()
    }

    /// `ĝ_t^z` at every realised history of `panel`.
    pub fn blips(&self, panel: &Panel) -> Result<BlipEvaluation> {
        if panel.horizon() != self.horizon() || panel.n_treatments() != self.n_treatments {
            return Err(TerraError::Contract(format!(
                "learner fitted for T={}, K={}; panel has T={}, K={}",
                self.horizon(),
                self.n_treatments,
                panel.horizon(),
                panel.n_treatments()
            )));
        }
        BlipEvaluation::from_fn(panel, |i, t| {
            let h = self.features.features(panel.get(i), t, self.n_treatments);
            self.step(t).blip_at(&h)
        })
    }
}

/// `X_0..X_{t-1}` and one-hot `Z_1..Z_{t-1}`: the conditioning set of the
/// outcome nuisance.
pub fn full_history(tr: &Trajectory, t: usize, n_treatments: usize) -> Vec<f64> {
    let mut h: Vec<f64> = tr.covariates[..t].iter().flatten().copied().collect();
    for &z in tr.prefix(t) {
        h.extend((1..n_treatments).map(|a| if a == z { 1.0 } else { 0.0 }));
    }
    h
}

/// Drops columns that repeat an earlier column exactly (static covariates
/// recur in every `X_s`).
fn distinct_columns(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let mut keep: Vec<usize> = Vec::with_capacity(d);
    for j in 0..d {
        if !keep.iter().any(|&k| rows.iter().all(|r| r[k] == r[j])) {
            keep.push(j);
        }
    }
    if keep.len() == d {
        return rows;
    }
    rows.into_iter().map(|r| keep.iter().map(|&j| r[j]).collect()).collect()
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, s) = v.clone().fold((0.0, 0.0), |(n, s), x| (n + 1.0, s + x));
    let m = s / n;
    v.map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Fits the recursive R-learner backward over time.
pub fn fit_recursive_rlearner(
    panel: &Panel,
    kind: RegressorKind,
    features: FeatureMap,
    propensity: PropensitySource,
) -> Result<RecursiveRLearner> {
    kind.validate()?;
    let n = panel.len();
    let k = panel.n_treatments();
    let horizon = panel.horizon();
    if let PropensitySource::Oracle(e) = propensity {
        if e.len() != n || e.iter().any(|u| u.len() != horizon || u.iter().any(|r| r.len() != k)) {
            return Err(TerraError::Contract("oracle propensities do not match the panel".into()));
        }
    }
    let mut u: Vec<f64> = panel.trajectories().iter().map(|tr| tr.outcome).collect();
    let mut steps = Vec::with_capacity(horizon);
    for t in (1..=horizon).rev() {
        let h: Vec<Vec<f64>> = panel.trajectories().iter().map(|tr| features.features(tr, t, k)).collect();
        let z: Vec<usize> = panel.trajectories().iter().map(|tr| tr.z(t)).collect();
        let full = distinct_columns(panel.trajectories().iter().map(|tr| full_history(tr, t, k)).collect());
        let mu = fit_linear(&full, &u, kind)?;

        let (e, lpm) = match propensity {
            PropensitySource::Oracle(e) => (e.iter().map(|ui| ui[t - 1].clone()).collect::<Vec<_>>(), None),
            PropensitySource::LinearProbability => {
                let fits = (1..k)
                    .map(|a| {
                        let ind: Vec<f64> = z.iter().map(|&zi| if zi == a { 1.0 } else { 0.0 }).collect();
                        fit_linear(&h, &ind, kind)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let e = h
                    .iter()
                    .map(|hi| {
                        let act: Vec<f64> =
                            fits.iter().map(|f| f.predict(hi).clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1)).collect();
                        std::iter::once(1.0 - act.iter().sum::<f64>()).chain(act).collect()
                    })
                    .collect();
                (e, Some(fits))
            }
        };

        let mu_hat: Vec<f64> = full.iter().map(|hi| mu.predict(hi)).collect();
        let u_tilde: Vec<f64> = u.iter().zip(&mu_hat).map(|(a, b)| a - b).collect();
        let i_tilde: Vec<Vec<f64>> = z
            .iter()
            .zip(&e)
            .map(|(&zi, ei)| (1..k).map(|a| if zi == a { 1.0 } else { 0.0 } - ei[a]).collect())
            .collect();

        let active: Vec<usize> = (0..k - 1)
            .filter(|&a| z.iter().any(|&zi| zi == a + 1) && variance(i_tilde.iter().map(|r| r[a])) > 1e-12)
            .collect();
        let m = h.first().map_or(0, Vec::len) + 1;
        // constant features duplicate the arm intercept; their θ stays 0
        let varying: Vec<usize> = (0..m - 1).filter(|&j| h.iter().any(|r| r[j] != h[0][j])).collect();
        let w = varying.len() + 1;
        let mut blip = vec![None; k - 1];
        if !active.is_empty() {
            let design: Vec<Vec<f64>> = i_tilde
                .iter()
                .zip(&h)
                .map(|(it, hi)| {
                    active
                        .iter()
                        .flat_map(|&a| std::iter::once(it[a]).chain(varying.iter().map(move |&j| it[a] * hi[j])))
                        .collect()
                })
                .collect();
            let theta = fit_through_origin(&design, &u_tilde, kind)?;
            for (n, &a) in active.iter().enumerate() {
                let mut th = vec![0.0; m];
                th[0] = theta[n * w];
                for (c, &j) in varying.iter().enumerate() {
                    th[j + 1] = theta[n * w + 1 + c];
                }
                blip[a] = Some(th);
            }
        }
        let step = StepModel { t, mu, propensity: lpm, blip };
        for ((ui, hi), &zi) in u.iter_mut().zip(&h).zip(&z) {
            if zi > 0 {
                *ui -= step.blip_at(hi)[zi - 1];
            }
        }
        steps.push(step);
    }
    steps.reverse();
    Ok(RecursiveRLearner {
        kind,
        features,
        oracle_propensity: propensity.is_oracle(),
        n_treatments: k,
        steps,
    })
}
