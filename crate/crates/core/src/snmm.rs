//! Structural nested mean model machinery.
//!
//! Time is 1-based throughout: a trajectory of horizon `T` holds covariates
//! `X_0..X_{T-1}` (index `t-1` is the history available before treatment
//! `t`), treatments `Z_1..Z_T` (index `t-1`) and one final outcome `Y`.
//! Arm `0` is the control; `Z⁺ = {1..K-1}`. Per-arm blip components
//! `g_t^z` are indexed by `z - 1`.

pub mod io;

use crate::error::{Result, TerraError};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `X_0..X_{T-1}`, each of length `p`.
    pub covariates: Vec<Vec<f64>>,
    /// `Z_1..Z_T`, values in `0..K`.
    pub treatments: Vec<usize>,
    pub outcome: f64,
    /// Ground-truth `γ_t` at the realised history, when known.
    pub true_blips: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.treatments.len()
    }

    /// Treatment at 1-based time `t`.
    pub fn z(&self, t: usize) -> usize {
        self.treatments[t - 1]
    }

    /// The covariate vector `X_{t-1}` available before treatment `t`.
    pub fn history_x(&self, t: usize) -> &[f64] {
        &self.covariates[t - 1]
    }

    /// The treatment prefix `Z_1..Z_{t-1}`.
    pub fn prefix(&self, t: usize) -> &[usize] {
        &self.treatments[..t - 1]
    }
}

/// Units sharing dimensions `(N, T, p, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    trajectories: Vec<Trajectory>,
    horizon: usize,
    n_covariates: usize,
    n_treatments: usize,
}

impl Panel {
    pub fn new(trajectories: Vec<Trajectory>, n_treatments: usize) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| TerraError::Panel("a panel needs at least one unit".into()))?;
        let horizon = first.horizon();
        let n_covariates = first.covariates.first().map_or(0, Vec::len);
        if horizon == 0 || n_covariates == 0 {
            return Err(TerraError::Panel("horizon and covariate dimension must be positive".into()));
        }
        if n_treatments < 2 {
            return Err(TerraError::Panel(format!("need at least 2 arms, got {n_treatments}")));
        }
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.horizon() != horizon || tr.covariates.len() != horizon {
                return Err(TerraError::Panel(format!("unit {i}: horizon differs from {horizon}")));
            }
            if tr.covariates.iter().any(|x| x.len() != n_covariates) {
                return Err(TerraError::Panel(format!("unit {i}: covariate dimension differs from {n_covariates}")));
            }
            if let Some(&z) = tr.treatments.iter().find(|&&z| z >= n_treatments) {
                return Err(TerraError::Panel(format!("unit {i}: treatment {z} out of range 0..{n_treatments}")));
            }
            if !tr.outcome.is_finite() || tr.covariates.iter().flatten().any(|v| !v.is_finite()) {
                return Err(TerraError::Panel(format!("unit {i}: non-finite value")));
            }
            if tr.true_blips.as_ref().is_some_and(|b| b.len() != horizon) {
                return Err(TerraError::Panel(format!("unit {i}: true_blips length differs from {horizon}")));
            }
        }
        Ok(Self {
            trajectories,
            horizon,
            n_covariates,
            n_treatments,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_treatments(&self) -> usize {
        self.n_treatments
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn get(&self, i: usize) -> &Trajectory {
        &self.trajectories[i]
    }

    pub fn has_ground_truth(&self) -> bool {
        self.trajectories.iter().all(|t| t.true_blips.is_some())
    }

    /// Sub-panel of the given units, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(idx.iter().map(|&i| self.trajectories[i].clone()).collect(), self.n_treatments)
    }
}

/// Blip components `ĝ_t^z` at realised histories, `[N × T × (K-1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlipEvaluation {
    values: Vec<f64>,
    n_units: usize,
    horizon: usize,
    n_active: usize,
}

impl BlipEvaluation {
    pub fn zeros(n_units: usize, horizon: usize, n_treatments: usize) -> Self {
        let n_active = n_treatments - 1;
        Self {
            values: vec![0.0; n_units * horizon * n_active],
            n_units,
            horizon,
            n_active,
        }
    }

    /// Evaluates `f(unit, t)` (returning one value per active arm) everywhere.
    pub fn from_fn(panel: &Panel, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        let mut out = Self::zeros(panel.len(), panel.horizon(), panel.n_treatments());
        for i in 0..panel.len() {
            for t in 1..=panel.horizon() {
                let g = f(i, t);
                if g.len() != out.n_active {
                    return Err(TerraError::Contract(format!(
                        "blip evaluator returned {} components, expected {}",
                        g.len(),
                        out.n_active
                    )));
                }
                out.at_mut(i, t).copy_from_slice(&g);
            }
        }
        if !out.values.iter().all(|v| v.is_finite()) {
            return Err(TerraError::NonFinite { op: "BlipEvaluation" });
        }
        Ok(out)
    }

    pub fn at(&self, unit: usize, t: usize) -> &[f64] {
        let o = (unit * self.horizon + t - 1) * self.n_active;
        &self.values[o..o + self.n_active]
    }

    pub fn at_mut(&mut self, unit: usize, t: usize) -> &mut [f64] {
        let o = (unit * self.horizon + t - 1) * self.n_active;
        &mut self.values[o..o + self.n_active]
    }

    /// `Σ_z 1{Z_t = z} g_t^z`: the realised blip.
    pub fn realized(&self, unit: usize, t: usize, z: usize) -> f64 {
        if z == 0 {
            0.0
        } else {
            self.at(unit, t)[z - 1]
        }
    }

    fn check_against(&self, panel: &Panel) -> Result<()> {
        if self.n_units != panel.len() || self.horizon != panel.horizon() || self.n_active + 1 != panel.n_treatments() {
            return Err(TerraError::Contract(format!(
                "blip evaluation [{}×{}×{}] does not match panel [{}×{}×{}]",
                self.n_units,
                self.horizon,
                self.n_active,
                panel.len(),
                panel.horizon(),
                panel.n_treatments() - 1
            )));
        }
        Ok(())
    }
}

/// Recursively blipped outcomes. Row `i` has `T+1` slots: slot `t-1` holds
/// `U_t` and slot `T` holds `U_{T+1} = Y`.
pub fn recursive_blip(panel: &Panel, g: &BlipEvaluation) -> Result<Vec<Vec<f64>>> {
    g.check_against(panel)?;
    let h = panel.horizon();
    Ok(panel
        .trajectories()
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let mut u = vec![0.0; h + 1];
            u[h] = tr.outcome;
            for t in (1..=h).rev() {
                u[t - 1] = u[t] - g.realized(i, t, tr.z(t));
            }
            u
        })
        .collect())
}

/// Closed form `U_t = Y − Σ_{s≥t} realised blips`, evaluated independently
/// of the recursion.
pub fn blipped_outcome_closed_form(panel: &Panel, g: &BlipEvaluation, unit: usize, t: usize) -> f64 {
    let tr = panel.get(unit);
    let later: f64 = (t..=panel.horizon()).map(|s| g.realized(unit, s, tr.z(s))).sum();
    tr.outcome - later
}

/// Residualised outcome `Ũ = U_next − μ` and treatment indicators
/// `Ĩ^z = 1{Z = z} − e^z` for `z ∈ Z⁺`. Rows of `propensity` cover all `K`
/// arms.
pub fn residualize(
    u_next: &[f64],
    mu: &[f64],
    treatments: &[usize],
    propensity: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = u_next.len();
    if mu.len() != n || treatments.len() != n || propensity.len() != n {
        return Err(TerraError::Contract("residualize inputs differ in length".into()));
    }
    let u_tilde = u_next.iter().zip(mu).map(|(u, m)| u - m).collect();
    let i_tilde = treatments
        .iter()
        .zip(propensity)
        .map(|(&z, e)| {
            (1..e.len())
                .map(|arm| if z == arm { 1.0 } else { 0.0 } - e[arm])
                .collect()
        })
        .collect();
    Ok((u_tilde, i_tilde))
}

/// Normalised-weight mean of `(Ũ − Σ_z Ĩ^z g^z)²`.
pub fn blip_loss(u_tilde: &[f64], i_tilde: &[Vec<f64>], g: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let n = u_tilde.len();
    if i_tilde.len() != n || g.len() != n || weights.len() != n {
        return Err(TerraError::Contract("blip_loss inputs differ in length".into()));
    }
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return Err(TerraError::Contract("blip_loss weights must have positive sum".into()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let fit: f64 = i_tilde[i].iter().zip(&g[i]).map(|(a, b)| a * b).sum();
        let r = u_tilde[i] - fit;
        acc += weights[i] * r * r;
    }
    Ok(acc / total_w)
}

/// Evaluates a nuisance or blip function at the history preceding time `t`.
pub type HistoryFn<'a> = &'a dyn Fn(&Trajectory, usize) -> Vec<f64>;

/// Per-component empirical mean and standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub n: usize,
}

impl MomentEstimate {
    /// Largest `|mean| / se` over components.
    pub fn max_z(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.se)
            .map(|(m, s)| if *s > 0.0 { m.abs() / s } else if *m == 0.0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; m];
        for r in rows {
            for j in 0..m {
                mean[j] += r[j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; m];
        for r in rows {
            for j in 0..m {
                var[j] += (r[j] - mean[j]).powi(2);
            }
        }
        let se = var.iter().map(|v| (v / (n as f64 - 1.0).max(1.0) / n as f64).sqrt()).collect();
        Self { mean, se, n }
    }
}

/// Empirical estimating equation at time `t`:
/// `mean_i Σ_z Ĩ^z h^z · (Ũ_{t+1} − Σ_z Ĩ^z g_t^z)`.
///
/// `h` returns a `[K-1]×m` matrix flattened row-major (arm-major); the result
/// has `m` components. `U_{t+1}` is built from `g` at times `t+1..T`.
pub fn estimating_equation(
    panel: &Panel,
    t: usize,
    g: HistoryFn,
    h: HistoryFn,
    mu: HistoryFn,
    e: HistoryFn,
) -> Result<MomentEstimate> {
    if t == 0 || t > panel.horizon() {
        return Err(TerraError::Contract(format!("time {t} outside 1..={}", panel.horizon())));
    }
    let k1 = panel.n_treatments() - 1;
    let rows = panel
        .trajectories()
        .iter()
        .map(|tr| {
            let u_next = tr.outcome
                - (t + 1..=panel.horizon())
                    .map(|s| match tr.z(s) {
                        0 => 0.0,
                        z => g(tr, s)[z - 1],
                    })
                    .sum::<f64>();
            let e_t = e(tr, t);
            let z = tr.z(t);
            let i_tilde: Vec<f64> = (1..=k1).map(|a| if z == a { 1.0 } else { 0.0 } - e_t[a]).collect();
            let g_t = g(tr, t);
            let resid = u_next - mu(tr, t)[0] - i_tilde.iter().zip(&g_t).map(|(a, b)| a * b).sum::<f64>();
            let h_t = h(tr, t);
            let m = h_t.len() / k1;
            (0..m)
                .map(|j| (0..k1).map(|a| i_tilde[a] * h_t[a * m + j]).sum::<f64>() * resid)
                .collect::<Vec<f64>>()
        })
        .collect::<Vec<_>>();
    Ok(MomentEstimate::from_rows(&rows))
}

/// Default `h`: the indicator of each active arm, one component per arm.
pub fn arm_indicator_h(n_treatments: usize) -> impl Fn(&Trajectory, usize) -> Vec<f64> {
    let k1 = n_treatments - 1;
    move |_, _| {
        let mut h = vec![0.0; k1 * k1];
        for a in 0..k1 {
            h[a * k1 + a] = 1.0;
        }
        h
    }
}

/// Paired comparison of `U_t` against a simulated control-continuation
/// outcome within one treatment-prefix stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumDeviation {
    pub prefix: Vec<usize>,
    pub n: usize,
    pub mean_dev: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub t: usize,
    pub strata: Vec<StratumDeviation>,
    /// Prefixes with fewer than the minimum number of units.
    pub skipped: Vec<(Vec<usize>, usize)>,
}

impl Prop1Report {
    pub fn max_abs_deviation(&self) -> Option<&StratumDeviation> {
        self.strata
            .iter()
            .max_by(|a, b| a.mean_dev.abs().total_cmp(&b.mean_dev.abs()))
    }

    /// Largest `|deviation| / se` across strata.
    pub fn max_z(&self) -> f64 {
        self.strata
            .iter()
            .map(|s| if s.se > 0.0 { s.mean_dev.abs() / s.se } else { 0.0 })
            .fold(0.0, f64::max)
    }
}

/// Checks that blipped outcomes mimic control-continuation outcomes.
///
/// Units are stratified by their realised prefix `Z_1..Z_{t-1}`; within each
/// stratum the mean of `U_t − Y(Z̄_{t-1}, 0, …, 0)` should vanish.
/// `counterfactual(unit, t)` must simulate the outcome for `unit` when all
/// treatments from `t` on are set to control, keeping the realised history.
pub fn proposition1_check(
    panel: &Panel,
    g: &BlipEvaluation,
    t: usize,
    counterfactual: &mut dyn FnMut(usize, usize) -> f64,
    min_stratum: usize,
) -> Result<Prop1Report> {
    if t == 0 || t > panel.horizon() {
        return Err(TerraError::Contract(format!("time {t} outside 1..={}", panel.horizon())));
    }
    let u = recursive_blip(panel, g)?;
    let mut by_prefix: std::collections::BTreeMap<Vec<usize>, Vec<f64>> = Default::default();
    for (i, tr) in panel.trajectories().iter().enumerate() {
        let d = u[i][t - 1] - counterfactual(i, t);
        by_prefix.entry(tr.prefix(t).to_vec()).or_default().push(d);
    }
    let mut strata = Vec::new();
    let mut skipped = Vec::new();
    for (prefix, devs) in by_prefix {
        if devs.len() < min_stratum.max(2) {
            skipped.push((prefix, devs.len()));
            continue;
        }
        let est = MomentEstimate::from_rows(&devs.iter().map(|&d| vec![d]).collect::<Vec<_>>());
        strata.push(StratumDeviation {
            prefix,
            n: est.n,
            mean_dev: est.mean[0],
            se: est.se[0],
        });
    }
    Ok(Prop1Report { t, strata, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(z: &[usize], y: f64) -> Trajectory {
        Trajectory {
            covariates: vec![vec![0.0]; z.len()],
            treatments: z.to_vec(),
            outcome: y,
            true_blips: None,
        }
    }

    #[test]
    fn recursive_blip_hand_example() {
        let panel = Panel::new(vec![traj(&[1, 1], 5.0)], 2).unwrap();
        let mut g = BlipEvaluation::zeros(1, 2, 2);
        g.at_mut(0, 1)[0] = 0.5;
        g.at_mut(0, 2)[0] = 1.5;
        let u = recursive_blip(&panel, &g).unwrap();
        assert_eq!(u[0], vec![3.0, 3.5, 5.0]);
    }

    #[test]
    fn zero_blips_or_all_control_leave_outcome() {
        let panel = Panel::new(vec![traj(&[1, 0, 1], 2.0), traj(&[0, 0, 0], -1.0)], 2).unwrap();
        let u = recursive_blip(&panel, &BlipEvaluation::zeros(2, 3, 2)).unwrap();
        assert!(u[0].iter().all(|&v| v == 2.0));

        let g = BlipEvaluation::from_fn(&panel, |_, _| vec![7.0]).unwrap();
        let u = recursive_blip(&panel, &g).unwrap();
        assert!(u[1].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn mismatched_evaluation_is_rejected() {
        let panel = Panel::new(vec![traj(&[1, 0], 2.0)], 2).unwrap();
        assert!(recursive_blip(&panel, &BlipEvaluation::zeros(1, 3, 2)).is_err());
    }

    #[test]
    fn panel_validation() {
        assert!(Panel::new(vec![], 2).is_err());
        assert!(Panel::new(vec![traj(&[2], 0.0)], 2).is_err());
        assert!(Panel::new(vec![traj(&[1], 0.0), traj(&[1, 0], 0.0)], 2).is_err());
        assert!(Panel::new(vec![traj(&[1], f64::NAN)], 2).is_err());
    }

    #[test]
    fn residualize_examples() {
        let (u, i) = residualize(&[2.0], &[0.5], &[1], &[vec![0.75, 0.25]]).unwrap();
        assert_eq!(u, vec![1.5]);
        assert_eq!(i, vec![vec![0.75]]);

        let (u, i) = residualize(&[1.0, 3.0], &[1.0, 3.0], &[0, 2], &[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(u, vec![0.0, 0.0]);
        assert_eq!(i, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn blip_loss_examples() {
        let l = blip_loss(&[1.0, -1.0], &[vec![1.0], vec![1.0]], &[vec![0.0], vec![0.0]], &[1.0, 1.0]).unwrap();
        assert_eq!(l, 1.0);
        let l2 = blip_loss(&[1.0, -1.0], &[vec![1.0], vec![1.0]], &[vec![0.0], vec![0.0]], &[2.0, 2.0]).unwrap();
        assert_eq!(l, l2);
        let l = blip_loss(&[1.0, -0.5], &[vec![0.5], vec![-0.25]], &[vec![2.0], vec![2.0]], &[1.0, 3.0]).unwrap();
        assert_eq!(l, 0.0);
    }

    fn arb_panel() -> impl Strategy<Value = (Panel, BlipEvaluation)> {
        (1usize..5, 1usize..6, 2usize..4).prop_flat_map(|(n, t, k)| {
            (
                proptest::collection::vec(proptest::collection::vec(0..k, t), n),
                proptest::collection::vec(-5.0..5.0f64, n),
                proptest::collection::vec(-3.0..3.0f64, n * t * (k - 1)),
            )
                .prop_map(move |(zs, ys, gs)| {
                    let trs = zs.iter().zip(&ys).map(|(z, &y)| traj(z, y)).collect();
                    let panel = Panel::new(trs, k).unwrap();
                    let mut g = BlipEvaluation::zeros(n, t, k);
                    g.values.copy_from_slice(&gs);
                    (panel, g)
                })
        })
    }

    proptest! {
        #[test]
        fn recursion_matches_closed_form((panel, g) in arb_panel()) {
            let u = recursive_blip(&panel, &g).unwrap();
            for i in 0..panel.len() {
                prop_assert_eq!(u[i][panel.horizon()], panel.get(i).outcome);
                for t in 1..=panel.horizon() {
                    let c = blipped_outcome_closed_form(&panel, &g, i, t);
                    prop_assert!((u[i][t - 1] - c).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn blipped_outcome_is_linear_in_each_component((panel, g) in arb_panel(), bump in -2.0..2.0f64) {
            let u0 = recursive_blip(&panel, &g).unwrap();
            let (i, s) = (0, 1);
            let mut g2 = g.clone();
            g2.at_mut(i, s).iter_mut().for_each(|v| *v += bump);
            let u1 = recursive_blip(&panel, &g2).unwrap();
            let treated = panel.get(i).z(s) != 0;
            for t in 1..=panel.horizon() {
                let expect = if treated && t <= s { -bump } else { 0.0 };
                prop_assert!((u1[i][t - 1] - u0[i][t - 1] - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn blip_loss_zero_iff_residual_zero(
            r in proptest::collection::vec(-1.0..1.0f64, 1..8),
        ) {
            let n = r.len();
            let i_t: Vec<Vec<f64>> = (0..n).map(|i| vec![0.3 + i as f64 * 0.1]).collect();
            let g: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 - 1.0]).collect();
            let u: Vec<f64> = (0..n).map(|i| i_t[i][0] * g[i][0] + r[i]).collect();
            let l = blip_loss(&u, &i_t, &g, &vec![1.0; n]).unwrap();
            let zero = r.iter().all(|&v| v == 0.0);
            prop_assert_eq!(l == 0.0, zero);
        }
    }
}
