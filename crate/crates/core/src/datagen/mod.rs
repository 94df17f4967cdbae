//! Seeded data-generating processes with exact ground truth.
//!
//! Three simulation scenarios (linear homogeneous, linear time-varying,
//! nonlinear) and a semi-synthetic ad-journey process. Every unit draws from
//! its own RNG stream keyed by `(seed, unit)`, so a panel does not depend on
//! generation order.
//!
//! Each process is written as [`Dynamics`]: propensities, per-arm blips and
//! baseline at time `t` given `X_{t-1}`, plus the covariate transition. One
//! path simulator then drives both panel generation and control-continuation
//! counterfactuals.

mod scenarios;
mod semisynthetic;

pub use scenarios::{covariate_step, s2_beta, s3_blip, COVARIATE_NOISE_SD, S1_BETA};
pub use semisynthetic::{click_probability, conversion_probability, semi_beta, SurrogateParams};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TerraError};
use crate::snmm::{BlipEvaluation, Panel, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    S1,
    S2,
    S3,
    SemiSynthetic,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::S1 => "S1",
            Self::S2 => "S2",
            Self::S3 => "S3",
            Self::SemiSynthetic => "semisynthetic",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = TerraError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Self::S1),
            "s2" => Ok(Self::S2),
            "s3" => Ok(Self::S3),
            "semisynthetic" | "semi" | "semi_synthetic" => Ok(Self::SemiSynthetic),
            _ => Err(TerraError::Config(format!(
                "scenario: unknown kind {s:?} (S1, S2, S3, semisynthetic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_units: usize,
    pub horizon: usize,
    pub n_covariates: usize,
    pub n_treatments: usize,
    pub noise_sd: f64,
    pub seed: u64,
    /// Only read by the semi-synthetic process.
    pub surrogate: SurrogateParams,
}

impl ScenarioSpec {
    /// Defaults: `T = 5`; `p = 5, K = 2, ε ~ N(0, 1)` for the simulations;
    /// `p = 9, K = 4, ε ~ N(0, 0.1²)` for the semi-synthetic process.
    pub fn new(kind: ScenarioKind, n_units: usize, seed: u64) -> Self {
        let semi = kind == ScenarioKind::SemiSynthetic;
        Self {
            kind,
            n_units,
            horizon: 5,
            n_covariates: if semi { 9 } else { 5 },
            n_treatments: if semi { 4 } else { 2 },
            noise_sd: if semi { 0.1 } else { 1.0 },
            seed,
            surrogate: SurrogateParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TerraError::Config(m));
        if self.n_units == 0 {
            return bad("n: need at least one unit".into());
        }
        if self.horizon == 0 {
            return bad("horizon: T must be at least 1".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd: {} must be finite and non-negative", self.noise_sd));
        }
        match self.kind {
            ScenarioKind::SemiSynthetic => {
                if self.n_covariates != 9 {
                    return bad(format!("p: the semi-synthetic process has 9 covariates, got {}", self.n_covariates));
                }
                if self.n_treatments < 2 {
                    return bad(format!("k: need at least 2 arms, got {}", self.n_treatments));
                }
                self.surrogate.validate()?;
            }
            kind => {
                if self.n_covariates != 5 || self.n_treatments != 2 {
                    return bad(format!(
                        "p/k: {kind} is defined for p = 5 covariates and K = 2 arms, got p = {}, K = {}",
                        self.n_covariates, self.n_treatments
                    ));
                }
                if kind == ScenarioKind::S2 && self.horizon < 2 {
                    return bad("horizon: S2 needs T >= 2".into());
                }
                if kind == ScenarioKind::S3 && self.horizon != 5 {
                    return bad(format!("horizon: S3 blips are enumerated for T = 5, got {}", self.horizon));
                }
            }
        }
        Ok(())
    }
}

/// Exact quantities behind a generated panel, indexed `[unit][t-1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub horizon: usize,
    pub n_treatments: usize,
    /// `γ_t` at the realized history and arm (0 at control steps).
    pub gamma: Vec<Vec<f64>>,
    /// Structural blips `γ_t^z(H_{t-1})` for every arm, control included
    /// (always 0): the expected outcome change from arm `z` at `t` versus
    /// control, with control afterwards. Equals the direct step effect plus
    /// [`Dynamics::carryover`].
    pub arm_blips: Vec<Vec<Vec<f64>>>,
    /// The direct step effect entering `score_t`, without covariate carryover.
    pub direct_arm_blips: Vec<Vec<Vec<f64>>>,
    /// Generator propensities `e_t^z` for every arm.
    pub propensity: Vec<Vec<Vec<f64>>>,
    /// Per-step direct effect plus `baseline_t`; `Y` is their sum plus noise.
    pub scores: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
}

impl GroundTruth {
    pub fn n_units(&self) -> usize {
        self.gamma.len()
    }

    pub fn propensity_at(&self, unit: usize, t: usize) -> &[f64] {
        &self.propensity[unit][t - 1]
    }

    /// Oracle blips for `z ∈ Z⁺` in [`BlipEvaluation`] layout.
    pub fn blip_evaluation(&self) -> BlipEvaluation {
        let mut ev = BlipEvaluation::zeros(self.n_units(), self.horizon, self.n_treatments);
        for (i, unit) in self.arm_blips.iter().enumerate() {
            for (t0, arms) in unit.iter().enumerate() {
                ev.at_mut(i, t0 + 1).copy_from_slice(&arms[1..]);
            }
        }
        ev
    }

    /// Oracle propensities as `[unit][t-1][z]`.
    pub fn propensities(&self) -> &[Vec<Vec<f64>>] {
        &self.propensity
    }
}

/// One data-generating process, with `t` 1-based and `x_prev = X_{t-1}`.
pub trait Dynamics {
    fn initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn propensity(&self, t: usize, x_prev: &[f64], z_prev: usize) -> Vec<f64>;
    /// `g_t^z` for every arm; entry 0 is the control arm and must be 0.
    fn arm_blips(&self, t: usize, x_prev: &[f64]) -> Vec<f64>;
    fn baseline(&self, t: usize, x_prev: &[f64]) -> f64;
    /// Per arm: change in `E[Σ_{s>t} baseline_s]` caused by `Z_t = z`
    /// rather than control, with control from `t+1` on. Zero when treatment
    /// never reaches later baselines.
    fn carryover(&self, t: usize, x_prev: &[f64]) -> Vec<f64> {
        vec![0.0; self.arm_blips(t, x_prev).len()]
    }
    /// Draws `X_t`. `score` is `γ_t + baseline_t`, used by processes with
    /// outcome feedback.
    fn transition(&self, t: usize, x_prev: &[f64], z: usize, score: f64, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

struct Path {
    covariates: Vec<Vec<f64>>,
    treatments: Vec<usize>,
    arm_blips: Vec<Vec<f64>>,
    structural: Vec<Vec<f64>>,
    propensity: Vec<Vec<f64>>,
    scores: Vec<f64>,
    noise: f64,
    outcome: f64,
}

fn sample_arm(e: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (z, p) in e.iter().enumerate() {
        acc += p;
        if u < acc {
            return z;
        }
    }
    e.len() - 1
}

pub(crate) fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Simulates one path. Covariates in `prefix_x` and treatments in
/// `prefix_z` are replayed; from `control_from` on, treatment is forced to
/// control.
fn simulate(
    dyn_: &dyn Dynamics,
    horizon: usize,
    noise_sd: f64,
    rng: &mut ChaCha8Rng,
    prefix_x: &[Vec<f64>],
    prefix_z: &[usize],
    control_from: Option<usize>,
) -> Path {
    let mut covariates = Vec::with_capacity(horizon);
    covariates.push(match prefix_x.first() {
        Some(x) => x.clone(),
        None => dyn_.initial(rng),
    });
    let mut treatments = Vec::with_capacity(horizon);
    let mut arm_blips = Vec::with_capacity(horizon);
    let mut structural = Vec::with_capacity(horizon);
    let mut propensity = Vec::with_capacity(horizon);
    let mut scores = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let x_prev = &covariates[t - 1];
        let z_prev = if t > 1 { treatments[t - 2] } else { 0 };
        let e = dyn_.propensity(t, x_prev, z_prev);
        let z = if t <= prefix_z.len() {
            prefix_z[t - 1]
        } else if control_from.is_some_and(|c| t >= c) {
            0
        } else {
            sample_arm(&e, rng)
        };
        let g = dyn_.arm_blips(t, x_prev);
        let score = g[z] + dyn_.baseline(t, x_prev);
        structural.push(g.iter().zip(dyn_.carryover(t, x_prev)).map(|(a, b)| a + b).collect());
        if t < horizon {
            let next = match prefix_x.get(t) {
                Some(x) => x.clone(),
                None => dyn_.transition(t, x_prev, z, score, rng),
            };
            covariates.push(next);
        }
        treatments.push(z);
        arm_blips.push(g);
        propensity.push(e);
        scores.push(score);
    }
    let noise = noise_sd * std_normal(rng);
    let outcome = scores.iter().sum::<f64>() + noise;
    Path {
        covariates,
        treatments,
        arm_blips,
        structural,
        propensity,
        scores,
        noise,
        outcome,
    }
}

const COUNTERFACTUAL_SALT: u64 = 0xc0_47e2_fac7;

/// A configured generator.
pub struct Generator {
    spec: ScenarioSpec,
    dynamics: Box<dyn Dynamics + Send + Sync>,
}

impl Generator {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let dynamics: Box<dyn Dynamics + Send + Sync> = match spec.kind {
            ScenarioKind::SemiSynthetic => Box::new(semisynthetic::SemiSynthetic::new(&spec)),
            kind => Box::new(scenarios::Scenario::new(kind, spec.horizon)),
        };
        Ok(Self { spec, dynamics })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    fn unit_rng(&self, unit: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(unit as u64);
        rng
    }

    pub fn generate(&self) -> Result<(Panel, GroundTruth)> {
        let s = &self.spec;
        let mut units = Vec::with_capacity(s.n_units);
        let mut gt = GroundTruth {
            horizon: s.horizon,
            n_treatments: s.n_treatments,
            gamma: Vec::with_capacity(s.n_units),
            arm_blips: Vec::with_capacity(s.n_units),
            direct_arm_blips: Vec::with_capacity(s.n_units),
            propensity: Vec::with_capacity(s.n_units),
            scores: Vec::with_capacity(s.n_units),
            noise: Vec::with_capacity(s.n_units),
        };
        for i in 0..s.n_units {
            let mut rng = self.unit_rng(i);
            let p = simulate(self.dynamics(), s.horizon, s.noise_sd, &mut rng, &[], &[], None);
            let gamma: Vec<f64> = p.treatments.iter().zip(&p.structural).map(|(&z, g)| g[z]).collect();
            units.push(Trajectory {
                covariates: p.covariates,
                treatments: p.treatments,
                outcome: p.outcome,
                true_blips: Some(gamma.clone()),
            });
            gt.gamma.push(gamma);
            gt.arm_blips.push(p.structural);
            gt.direct_arm_blips.push(p.arm_blips);
            gt.propensity.push(p.propensity);
            gt.scores.push(p.scores);
            gt.noise.push(p.noise);
        }
        Ok((Panel::new(units, s.n_treatments)?, gt))
    }

    /// Outcome of `traj` re-simulated under control from `t` onward, keeping
    /// the realized history `(X̄_{t-1}, Z̄_{t-1})` and drawing fresh future
    /// covariates and noise. `draw` selects an independent replicate.
    pub fn control_continuation(&self, unit: usize, traj: &Trajectory, t: usize, draw: u64) -> Result<f64> {
        let horizon = self.spec.horizon;
        if t == 0 || t > horizon || traj.horizon() != horizon {
            return Err(TerraError::Contract(format!("control_continuation: t = {t} outside 1..={horizon}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ COUNTERFACTUAL_SALT);
        rng.set_stream(((unit as u64) << 20) ^ ((t as u64) << 12) ^ draw);
        let p = simulate(
            self.dynamics(),
            horizon,
            self.spec.noise_sd,
            &mut rng,
            &traj.covariates[..t],
            &traj.treatments[..t - 1],
            Some(t),
        );
        Ok(p.outcome)
    }
}

/// Convenience: generate the panel and ground truth for `spec`.
pub fn generate(spec: &ScenarioSpec) -> Result<(Panel, GroundTruth)> {
    Generator::new(spec.clone())?.generate()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
