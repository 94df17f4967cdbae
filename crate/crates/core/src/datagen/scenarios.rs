//! Simulation scenarios 1–3.
//!
//! Time `t` is the 1-based treatment step. The time-varying coefficient
//! formulas of scenario 2 and the scenario-3 time trend are written for a
//! 0-based index `k = t - 1`; intercepts `α` and baseline scales use `t`.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use super::{sigmoid, std_normal, Dynamics, ScenarioKind};

pub const S1_BETA: [f64; 5] = [0.5, 0.3, -0.2, 0.0, 0.0];

/// Standard deviation of the covariate innovation.
pub const COVARIATE_NOISE_SD: f64 = 0.5;

/// `X_t = 0.5·X_{t-1} + 0.2·Z_t + ε`, `ε ~ N(0, 0.5²·I)`.
pub fn covariate_step(x_prev: &[f64], z: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    x_prev
        .iter()
        .map(|x| 0.5 * x + 0.2 * z as f64 + COVARIATE_NOISE_SD * std_normal(rng))
        .collect()
}

/// Scenario-2 slopes at 1-based `t`.
pub fn s2_beta(t: usize, horizon: usize) -> [f64; 5] {
    let k = (t - 1) as f64;
    let tt = horizon as f64;
    let half = (tt - 1.0) / 2.0;
    [
        0.3 + 0.1 * k,
        0.4 - 0.1 * k,
        -0.2 + 0.1 * (2.0 * PI * k / tt).sin(),
        0.15 * ((k - half) / half).powi(2),
        if k < tt / 2.0 { 0.1 } else { -0.1 },
    ]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scenario-3 treated-arm blip for formula `j ∈ 0..5` at covariates `x`.
pub fn s3_blip(j: usize, x: &[f64]) -> f64 {
    match j {
        0 => 0.3 * x[0] * x[0] + 0.2 * x[1] * x[1] + 0.1 * x[0] * x[1] + 0.15 * x[2].abs() + 0.1,
        1 => 0.4 * x[0].sin() + 0.3 * x[1].cos() + 0.2 * x[2] + 0.1 * x[3].tanh() + 0.2,
        2 => {
            0.3 * relu(x[0]) + 0.2 * relu(x[1]) + 0.1 * x[2].clamp(-2.0, 2.0).exp() + 0.15 * x[3].abs().ln_1p() + 0.3
        }
        3 => {
            0.2 * x[0].powi(3)
                + 0.15 * x[1] * x[1] * x[2]
                + 0.1 * x[0] * x[1] * x[2]
                + 0.2 * sign(x[3]) * x[3] * x[3]
                + 0.1 * x[4] * x[4]
                + 0.4
        }
        4 => {
            0.25 * (x[0] * x[0]).sin() + 0.2 * x[1].cos() * x[2] + 0.15 * x[3].max(x[4]) + 0.1 * (x[0] * x[0]).min(1.0) + 0.5
        }
        _ => panic!("scenario 3 defines five blip formulas, got index {j}"),
    }
}

pub(super) struct Scenario {
    kind: ScenarioKind,
    horizon: usize,
}

impl Scenario {
    pub(super) fn new(kind: ScenarioKind, horizon: usize) -> Self {
        Self { kind, horizon }
    }

    fn treated_blip(&self, t: usize, x: &[f64]) -> f64 {
        let alpha = 0.1 * (t + 1) as f64;
        match self.kind {
            ScenarioKind::S1 => dot(x, &S1_BETA) + alpha,
            ScenarioKind::S2 => dot(x, &s2_beta(t, self.horizon)) + alpha,
            ScenarioKind::S3 => s3_blip(t - 1, x),
            ScenarioKind::SemiSynthetic => unreachable!("handled by the semi-synthetic process"),
        }
    }

    /// `E[baseline_s(X)]` for `X ~ N(mean, var·I)`.
    fn expected_baseline(&self, s: usize, mean: &[f64], var: f64) -> f64 {
        let scale = (s + 1) as f64 / self.horizon as f64;
        match self.kind {
            ScenarioKind::S1 => 0.4 * mean[0] + 0.3 * mean[1],
            ScenarioKind::S2 => scale * (0.3 * mean[0] + 0.1 * mean[1]),
            ScenarioKind::S3 => scale * (0.2 * mean[0].sin() * (-var / 2.0).exp() + 0.1 - mean[1] * mean[1] - var),
            ScenarioKind::SemiSynthetic => unreachable!("handled by the semi-synthetic process"),
        }
    }

    /// `E[Σ_{s>t} baseline_s | X_{t-1}, Z_t = z, control afterwards]`. Each
    /// coordinate of `X_{s-1}` is Gaussian with AR(1) mean and variance.
    fn expected_future_baselines(&self, t: usize, x_prev: &[f64], z: usize) -> f64 {
        let sd2 = COVARIATE_NOISE_SD * COVARIATE_NOISE_SD;
        let mut mean: Vec<f64> = x_prev.iter().map(|x| 0.5 * x + 0.2 * z as f64).collect();
        let mut var = sd2;
        let mut total = 0.0;
        for s in t + 1..=self.horizon {
            total += self.expected_baseline(s, &mean, var);
            mean.iter_mut().for_each(|m| *m *= 0.5);
            var = 0.25 * var + sd2;
        }
        total
    }

    fn logit(&self, t: usize, x: &[f64], z_prev: usize) -> f64 {
        let zp = z_prev as f64;
        let k = (t - 1) as f64;
        let tt = self.horizon as f64;
        let base = 0.2 * x[0] - 0.1 * x[3] + 0.15 * x[4];
        match self.kind {
            ScenarioKind::S1 => base + 0.3 * zp,
            ScenarioKind::S2 => base + 0.1 * (PI * k / (tt - 1.0)).sin() + (0.4 - 0.05 * k) * zp,
            ScenarioKind::S3 => {
                0.3 * x[0].tanh()
                    + 0.2 * x[1] * x[1]
                    + 0.15 * (x[2] * x[2]).sin()
                    + 0.1 * relu(x[3])
                    + 0.1 * (k + 1.0) / tt
                    + 0.4 * (2.0 * zp - 1.0).tanh()
            }
            ScenarioKind::SemiSynthetic => unreachable!("handled by the semi-synthetic process"),
        }
    }
}

impl Dynamics for Scenario {
    fn initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..5).map(|_| std_normal(rng)).collect()
    }

    fn propensity(&self, t: usize, x_prev: &[f64], z_prev: usize) -> Vec<f64> {
        let p = sigmoid(self.logit(t, x_prev, z_prev));
        vec![1.0 - p, p]
    }

    fn arm_blips(&self, t: usize, x_prev: &[f64]) -> Vec<f64> {
        vec![0.0, self.treated_blip(t, x_prev)]
    }

    fn baseline(&self, t: usize, x: &[f64]) -> f64 {
        let scale = (t + 1) as f64 / self.horizon as f64;
        match self.kind {
            ScenarioKind::S1 => 0.4 * x[0] + 0.3 * x[1],
            ScenarioKind::S2 => scale * (0.3 * x[0] + 0.1 * x[1]),
            ScenarioKind::S3 => scale * (0.2 * x[0].sin() + 0.1 - x[1] * x[1]),
            ScenarioKind::SemiSynthetic => unreachable!("handled by the semi-synthetic process"),
        }
    }

    fn carryover(&self, t: usize, x_prev: &[f64]) -> Vec<f64> {
        vec![0.0, self.expected_future_baselines(t, x_prev, 1) - self.expected_future_baselines(t, x_prev, 0)]
    }

    fn transition(&self, _t: usize, x_prev: &[f64], z: usize, _score: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        covariate_step(x_prev, z, rng)
    }
}
