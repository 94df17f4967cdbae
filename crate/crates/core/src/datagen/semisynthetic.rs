//! Semi-synthetic ad-journey process.
//!
//! Covariates (0-based index: meaning):
//! 0 interest breadth, 1 regional demand, 2 city score (all static);
//! 3 slot width, 4 slot height, 5 format, 6 visibility (AR(1) around fresh
//! surrogate draws); 7 `ln(1 + cumulative clicks)`, 8 `ln(1 + cumulative
//! conversions)`.
//!
//! Step `τ = t - 1` uses `X_τ`. The step score is computed before that
//! step's click and conversion draws update the counters in `X_{τ+1}`.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Geometric};
use serde::{Deserialize, Serialize};

use super::{std_normal, Dynamics, ScenarioSpec};
use crate::error::{Result, TerraError};

/// Surrogate distributions and link constants. Every field is echoed in the
/// run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub interest_geometric_p: f64,
    pub interest_max: u32,
    pub region_beta: (f64, f64),
    pub city_beta: (f64, f64),
    pub slot_levels: [f64; 4],
    pub format_probs: [f64; 4],
    pub visibility_probs: [f64; 4],
    pub format_scores: [f64; 4],
    pub visibility_scores: [f64; 4],
    pub ar_persistence: f64,
    pub ar_innovation_weight: f64,
    pub ar_noise_sd: f64,
    pub p0_click: f64,
    pub p0_conv: f64,
    pub click_slope: f64,
    pub conv_slope: f64,
    pub click_clip: (f64, f64),
    pub conv_clip: (f64, f64),
    pub interest_center: f64,
    pub interest_scale: f64,
    pub geo_weights: (f64, f64),
    pub geo_center: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            interest_geometric_p: 0.3,
            interest_max: 10,
            region_beta: (2.0, 5.0),
            city_beta: (2.0, 5.0),
            slot_levels: [0.25, 0.5, 0.75, 1.0],
            format_probs: [0.4, 0.3, 0.2, 0.1],
            visibility_probs: [0.4, 0.3, 0.2, 0.1],
            format_scores: [0.2, 0.1, -0.1, -0.2],
            visibility_scores: [0.3, 0.1, -0.1, -0.3],
            ar_persistence: 0.6,
            ar_innovation_weight: 0.4,
            ar_noise_sd: 0.05,
            p0_click: 0.05,
            p0_conv: 0.005,
            click_slope: 0.1,
            conv_slope: 0.05,
            click_clip: (0.001, 0.5),
            conv_clip: (0.001, 0.3),
            interest_center: 5.5,
            interest_scale: 3.0,
            geo_weights: (0.6, 0.4),
            geo_center: 0.3,
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TerraError::Config(format!("surrogate: {m}")));
        if !(self.interest_geometric_p > 0.0 && self.interest_geometric_p <= 1.0) || self.interest_max == 0 {
            return bad("interest breadth needs p in (0,1] and a positive maximum");
        }
        for (a, b) in [self.region_beta, self.city_beta] {
            if !(a > 0.0 && b > 0.0) {
                return bad("beta shapes must be positive");
            }
        }
        for probs in [self.format_probs, self.visibility_probs] {
            if probs.iter().any(|&p| p < 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad("categorical probabilities must be non-negative and sum to 1");
            }
        }
        if !(self.p0_click > 0.0 && self.p0_conv >= 0.0) || self.click_clip.0 > self.click_clip.1 || self.conv_clip.0 > self.conv_clip.1 {
            return bad("click/conversion rates and clips are inconsistent");
        }
        if !(self.ar_noise_sd >= 0.0) || self.interest_scale == 0.0 {
            return bad("ar_noise_sd must be non-negative and interest_scale nonzero");
        }
        Ok(())
    }
}

/// Coefficients on the five engineered features at 0-based step `tau`.
pub fn semi_beta(tau: usize, horizon: usize) -> [f64; 5] {
    let k = tau as f64;
    let half = horizon as f64 / 2.0;
    [
        0.3 + 0.1 * k,
        0.4 - 0.05 * k,
        -0.2 + 0.1 * (2.0 * PI * k / horizon as f64).sin(),
        0.15 * ((k - half) / half).powi(2),
        if k < half { -0.1 } else { 0.1 },
    ]
}

/// `clip(p₀ + slope·max(0, score), lo, hi)`.
pub fn click_probability(p: &SurrogateParams, score: f64) -> f64 {
    (p.p0_click + p.click_slope * score.max(0.0)).clamp(p.click_clip.0, p.click_clip.1)
}

/// Conversion probability given a click.
pub fn conversion_probability(p: &SurrogateParams, score: f64) -> f64 {
    (p.p0_conv / p.p0_click + p.conv_slope * score.max(0.0)).clamp(p.conv_clip.0, p.conv_clip.1)
}

fn categorical(probs: &[f64; 4], rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as f64;
        }
    }
    3.0
}

/// Piecewise-linear score map over levels 0..3, clamped at the ends.
fn level_score(map: &[f64; 4], v: f64) -> f64 {
    let v = v.clamp(0.0, 3.0);
    let i = (v.floor() as usize).min(2);
    let f = v - i as f64;
    map[i] * (1.0 - f) + map[i + 1] * f
}

fn count(log1p_value: f64) -> f64 {
    log1p_value.exp_m1().round()
}

pub(super) struct SemiSynthetic {
    horizon: usize,
    n_arms: usize,
    p: SurrogateParams,
    geometric: Geometric,
    region: Beta<f64>,
    city: Beta<f64>,
}

impl SemiSynthetic {
    pub(super) fn new(spec: &ScenarioSpec) -> Self {
        let p = spec.surrogate.clone();
        Self {
            horizon: spec.horizon,
            n_arms: spec.n_treatments,
            geometric: Geometric::new(p.interest_geometric_p).expect("validated"),
            region: Beta::new(p.region_beta.0, p.region_beta.1).expect("validated"),
            city: Beta::new(p.city_beta.0, p.city_beta.1).expect("validated"),
            p,
        }
    }

    fn interest(&self, rng: &mut ChaCha8Rng) -> f64 {
        loop {
            let k = self.geometric.sample(rng) + 1;
            if k <= u64::from(self.p.interest_max) {
                return k as f64;
            }
        }
    }

    /// Fresh surrogate draws for the four ad features.
    fn ad_features(&self, rng: &mut ChaCha8Rng) -> [f64; 4] {
        let slot = |rng: &mut ChaCha8Rng| self.p.slot_levels[rng.random_range(0..4)];
        [
            slot(rng),
            slot(rng),
            categorical(&self.p.format_probs, rng),
            categorical(&self.p.visibility_probs, rng),
        ]
    }

    /// The five engineered features at step `tau` from `X_τ`.
    pub(super) fn phi(&self, tau: usize, x: &[f64]) -> [f64; 5] {
        let p = &self.p;
        [
            (x[0] - p.interest_center) / p.interest_scale,
            p.geo_weights.0 * (x[1] - p.geo_center) + p.geo_weights.1 * (x[2] - p.geo_center),
            level_score(&p.format_scores, x[5]),
            level_score(&p.visibility_scores, x[6]),
            count(x[7]) / (tau + 1) as f64,
        ]
    }

    fn arm_scale(z: usize) -> f64 {
        (1.0 - 0.2 * z as f64).max(0.4)
    }
}

impl Dynamics for SemiSynthetic {
    fn initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let ad = self.ad_features(rng);
        vec![
            self.interest(rng),
            self.region.sample(rng),
            self.city.sample(rng),
            ad[0],
            ad[1],
            ad[2],
            ad[3],
            0.0,
            0.0,
        ]
    }

    fn propensity(&self, _t: usize, _x: &[f64], _z_prev: usize) -> Vec<f64> {
        vec![1.0 / self.n_arms as f64; self.n_arms]
    }

    fn arm_blips(&self, t: usize, x: &[f64]) -> Vec<f64> {
        let tau = t - 1;
        let phi = self.phi(tau, x);
        let lin: f64 = phi.iter().zip(semi_beta(tau, self.horizon)).map(|(a, b)| a * b).sum::<f64>() + 0.1 * (tau + 1) as f64;
        (0..self.n_arms)
            .map(|z| if z == 0 { 0.0 } else { Self::arm_scale(z) * lin })
            .collect()
    }

    fn baseline(&self, t: usize, x: &[f64]) -> f64 {
        let tau = t - 1;
        let phi = self.phi(tau, x);
        (tau + 1) as f64 / self.horizon as f64 * (0.3 * phi[0] + 0.1 * phi[1])
    }

    fn transition(&self, _t: usize, x: &[f64], _z: usize, score: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = &self.p;
        let clicked = rng.random::<f64>() < click_probability(p, score);
        let converted = clicked && rng.random::<f64>() < conversion_probability(p, score);
        let fresh = self.ad_features(rng);
        let mut next = x.to_vec();
        for (j, f) in fresh.iter().enumerate() {
            next[3 + j] = p.ar_persistence * x[3 + j] + p.ar_innovation_weight * f + p.ar_noise_sd * std_normal(rng);
        }
        next[7] = (count(x[7]) + f64::from(u8::from(clicked))).ln_1p();
        next[8] = (count(x[8]) + f64::from(u8::from(converted))).ln_1p();
        next
    }
}
