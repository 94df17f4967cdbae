//! Experiment configuration: a `key=value` document.
//!
//! Pairs are separated by whitespace or newlines; `#` starts a comment.
//! Every key is optional. Keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `scenario` | `S1` | `S1`, `S2`, `S3` or `semisynthetic` |
//! | `n` | `3000` | training-panel units per seed |
//! | `eval_n` | `2000` | units in the fresh evaluation panel |
//! | `horizon` | `5` | `T` |
//! | `k` | scenario default | arms including control (2; semisynthetic 4) |
//! | `noise_sd` | scenario default | outcome noise sd (1.0; semisynthetic 0.1) |
//! | `seed` | `0` | first seed; seeds are `seed..seed+seeds` |
//! | `seeds` | `5` | number of seeds |
//! | `methods` | `terra,rlearner_ols,rlearner_ridge` | comma-separated |
//! | `oracle_propensity` | `true` | R-learners use the generator's propensities |
//! | `ridge_alpha` | `1.0` | penalty of `rlearner_ridge` |
//! | `rlearner_features` | `covariates_last_arm` | or `covariates` |
//! | `output_dir` | `terra-out` | artifact directory |
//! | `d_model`, `n_heads`, `n_layers`, `d_ff`, `dropout` | 32, 4, 2, 64, 0.1 | transformer |
//! | `lr`, `beta1`, `beta2`, `eps`, `weight_decay`, `clip_max_norm` | 2e-3, 0.9, 0.999, 1e-8, 1e-4, 1.0 | optimiser |
//! | `max_epochs`, `batch_size`, `patience_early_stop`, `patience_lr`, `lr_decay_factor` | 300, 128, 25, 10, 0.5 | schedule |
//! | `lambda_prop`, `lambda_cmu`, `lambda_blip` | 0.05, 0.05, 20 | loss weights |
//! | `time_weighting` | `hyperbolic` | `uniform`, `hyperbolic`, `exponential`, `linear_decay` |
//! | `val_fraction` | `0.2` | validation share of training units |
//! | `surrogate.<field>` | see manifest | semi-synthetic surrogate constant, JSON value |

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use terra_core::baselines::{FeatureMap, RegressorKind};
use terra_core::datagen::{ScenarioKind, ScenarioSpec, SurrogateParams};
use terra_core::training::{TimeWeighting, TrainConfig};
use terra_core::transformer::ArchConfig;
use terra_core::TerraError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Terra,
    RlearnerOls,
    RlearnerRidge,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Terra, Method::RlearnerOls, Method::RlearnerRidge];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Terra => "terra",
            Self::RlearnerOls => "rlearner_ols",
            Self::RlearnerRidge => "rlearner_ridge",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?} (terra, rlearner_ols, rlearner_ridge)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureChoice {
    Covariates,
    CovariatesLastArm,
}

impl FeatureChoice {
    pub fn feature_map(&self) -> FeatureMap {
        match self {
            Self::Covariates => FeatureMap::Covariates,
            Self::CovariatesLastArm => FeatureMap::CovariatesAndLastArm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// `seed` here is the first seed.
    pub scenario: ScenarioSpec,
    pub eval_n: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub n_seeds: usize,
    pub output_dir: PathBuf,
    pub oracle_propensity: bool,
    pub ridge_alpha: f64,
    pub rlearner_features: FeatureChoice,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_config("").expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.scenario.seed + i).collect()
    }

    /// Training-panel spec for one seed.
    pub fn train_spec(&self, seed: u64) -> ScenarioSpec {
        ScenarioSpec { seed, ..self.scenario.clone() }
    }

    /// Evaluation-panel spec: same process, shifted seed.
    pub fn eval_spec(&self, seed: u64) -> ScenarioSpec {
        ScenarioSpec { seed: eval_seed(seed), n_units: self.eval_n, ..self.scenario.clone() }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn regressor(&self, m: Method) -> Option<RegressorKind> {
        match m {
            Method::Terra => None,
            Method::RlearnerOls => Some(RegressorKind::Ols),
            Method::RlearnerRidge => Some(RegressorKind::Ridge(self.ridge_alpha)),
        }
    }

    /// The resolved configuration, including every surrogate constant.
    pub fn manifest_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["propensity_mode"] = serde_json::Value::from(if self.oracle_propensity { "oracle" } else { "linear_probability" });
        v["seeds"] = serde_json::Value::from(self.seeds());
        v["eval_seeds"] = serde_json::Value::from(self.seeds().into_iter().map(eval_seed).collect::<Vec<_>>());
        let mut s = serde_json::to_string_pretty(&v).expect("json");
        s.push('\n');
        s
    }
}

/// Seed of the evaluation panel paired with training seed `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x00_e7a1_5eed
}

#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { key: key.to_string(), message: message.into() }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError> {
    raw.parse().map_err(|_| err(key, format!("cannot parse {raw:?}")))
}

fn positive(key: &str, raw: &str) -> Result<usize, ConfigError> {
    let v: usize = value(key, raw)?;
    if v == 0 {
        return Err(err(key, "must be at least 1"));
    }
    Ok(v)
}

fn boolean(key: &str, raw: &str) -> Result<bool, ConfigError> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(err(key, format!("expected true/false, got {raw:?}"))),
    }
}

/// Splits a document into `(key, value)` pairs; later duplicates are errors.
fn pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| err(tok, "expected key=value"))?;
            if out.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(k, "given more than once"));
            }
        }
    }
    Ok(out)
}

fn set_surrogate(s: &mut SurrogateParams, key: &str, field: &str, raw: &str) -> Result<(), ConfigError> {
    let mut v = serde_json::to_value(&*s).expect("surrogate serializes");
    let slot = v.get_mut(field).ok_or_else(|| err(key, "unknown surrogate parameter"))?;
    *slot = serde_json::from_str(raw).map_err(|e| err(key, format!("expected a JSON value: {e}")))?;
    *s = serde_json::from_value(v).map_err(|e| err(key, format!("wrong shape: {e}")))?;
    Ok(())
}

/// Resolves a config document; omitted keys take their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut kv = pairs(text)?;
    let mut take = |k: &str| kv.remove(k);

    let kind: ScenarioKind = match take("scenario") {
        Some(raw) => raw.parse().map_err(|e: TerraError| err("scenario", e.to_string()))?,
        None => ScenarioKind::S1,
    };
    let n = take("n").map_or(Ok(3000), |r| positive("n", &r))?;
    let seed = take("seed").map_or(Ok(0), |r| value("seed", &r))?;
    let mut scenario = ScenarioSpec::new(kind, n, seed);
    if let Some(r) = take("horizon") {
        scenario.horizon = positive("horizon", &r)?;
    }
    if let Some(r) = take("k") {
        scenario.n_treatments = value("k", &r)?;
        if scenario.n_treatments < 2 {
            return Err(err("k", "need at least 2 arms"));
        }
    }
    if let Some(r) = take("noise_sd") {
        scenario.noise_sd = value("noise_sd", &r)?;
        if !(scenario.noise_sd >= 0.0 && scenario.noise_sd.is_finite()) {
            return Err(err("noise_sd", "must be finite and non-negative"));
        }
    }

    let eval_n = take("eval_n").map_or(Ok(2000), |r| positive("eval_n", &r))?;
    if eval_n < 2 {
        return Err(err("eval_n", "need at least 2 units"));
    }
    let n_seeds = take("seeds").map_or(Ok(5), |r| positive("seeds", &r))?;
    let methods = match take("methods") {
        Some(raw) => {
            let mut m = raw
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<Method>().map_err(|e| err("methods", e)))
                .collect::<Result<Vec<_>, _>>()?;
            m.sort();
            m.dedup();
            if m.is_empty() {
                return Err(err("methods", "need at least one method"));
            }
            m
        }
        None => Method::ALL.to_vec(),
    };
    let oracle_propensity = take("oracle_propensity").map_or(Ok(true), |r| boolean("oracle_propensity", &r))?;
    let ridge_alpha: f64 = take("ridge_alpha").map_or(Ok(1.0), |r| value("ridge_alpha", &r))?;
    if !(ridge_alpha >= 0.0 && ridge_alpha.is_finite()) {
        return Err(err("ridge_alpha", "must be finite and >= 0"));
    }
    let rlearner_features = match take("rlearner_features").as_deref() {
        None | Some("covariates_last_arm") => FeatureChoice::CovariatesLastArm,
        Some("covariates") => FeatureChoice::Covariates,
        Some(other) => return Err(err("rlearner_features", format!("unknown feature map {other:?}"))),
    };
    let output_dir = PathBuf::from(take("output_dir").unwrap_or_else(|| "terra-out".into()));

    let mut arch = ArchConfig::for_dims(scenario.n_covariates, scenario.n_treatments, scenario.horizon);
    for (key, slot) in [
        ("d_model", &mut arch.d_model),
        ("n_heads", &mut arch.n_heads),
        ("n_layers", &mut arch.n_layers),
        ("d_ff", &mut arch.d_ff),
    ] {
        if let Some(r) = take(key) {
            *slot = positive(key, &r)?;
        }
    }
    if let Some(r) = take("dropout") {
        arch.dropout_p = value("dropout", &r)?;
        if !(0.0..1.0).contains(&arch.dropout_p) {
            return Err(err("dropout", "must be in [0,1)"));
        }
    }
    if arch.d_model % arch.n_heads != 0 {
        return Err(err("n_heads", format!("{} does not divide d_model {}", arch.n_heads, arch.d_model)));
    }

    let mut train = TrainConfig::default();
    for (key, slot) in [
        ("lr", &mut train.lr),
        ("beta1", &mut train.beta1),
        ("beta2", &mut train.beta2),
        ("eps", &mut train.eps),
        ("weight_decay", &mut train.weight_decay),
        ("clip_max_norm", &mut train.clip_max_norm),
        ("lr_decay_factor", &mut train.lr_decay_factor),
        ("lambda_prop", &mut train.lambda_prop),
        ("lambda_cmu", &mut train.lambda_cmu),
        ("lambda_blip", &mut train.lambda_blip),
        ("val_fraction", &mut train.val_fraction),
    ] {
        if let Some(r) = take(key) {
            *slot = value(key, &r)?;
        }
    }
    for (key, slot) in [
        ("max_epochs", &mut train.max_epochs),
        ("batch_size", &mut train.batch_size),
        ("patience_early_stop", &mut train.patience_early_stop),
        ("patience_lr", &mut train.patience_lr),
    ] {
        if let Some(r) = take(key) {
            *slot = value(key, &r)?;
        }
    }
    if let Some(r) = take("time_weighting") {
        train.time_weighting = r.parse().map_err(|e: TerraError| err("time_weighting", e.to_string()))?;
    }
    train.validate().map_err(|e| keyed(e, "train"))?;
    if train.time_weighting == TimeWeighting::LinearDecay && scenario.horizon > 10 {
        return Err(err("time_weighting", "linear_decay needs horizon <= 10"));
    }

    let surrogate_keys: Vec<String> = kv.keys().filter(|k| k.starts_with("surrogate.")).cloned().collect();
    for key in surrogate_keys {
        let raw = kv.remove(&key).expect("listed");
        set_surrogate(&mut scenario.surrogate, &key, &key["surrogate.".len()..], &raw)?;
    }
    if let Some(key) = kv.keys().next() {
        return Err(err(key, "unknown key"));
    }
    scenario.validate().map_err(|e| keyed(e, "scenario"))?;

    Ok(ExperimentConfig {
        scenario,
        eval_n,
        arch,
        train,
        methods,
        n_seeds,
        output_dir,
        oracle_propensity,
        ridge_alpha,
        rlearner_features,
    })
}

/// Core validation messages start with `key: ...`.
fn keyed(e: TerraError, fallback: &str) -> ConfigError {
    let msg = match e {
        TerraError::Config(m) => m,
        other => other.to_string(),
    };
    match msg.split_once(": ") {
        Some((k, rest)) if !k.contains(' ') => err(k, rest),
        _ => err(fallback, msg),
    }
}
