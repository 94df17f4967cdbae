//! Joint training of the propensity, conditional-mean and blip heads.
//!
//! Every mini-batch runs one forward pass. Blipped outcomes `U_t` are then
//! formed backwards from `U_{T+1} = Y` using the current blip predictions as
//! constants, and the three weighted losses are assembled on the graph.
//! Inside the blip loss, later-time blips, `μ̂_t` and `ê_t` are all treated
//! as constants; `μ̂` and `ê` learn only from their own losses.

mod optim;

pub use optim::{adamax_step, clip_gradients, global_norm, AdamaxParams, OptimizerState, PlateauScheduler};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TerraError};
use crate::snmm::{Panel, Trajectory};
use crate::tensor::{Graph, Tensor, Var};
use crate::transformer::{ArchConfig, ModelOutputs, Scaler, Terra};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeighting {
    Uniform,
    Hyperbolic,
    Exponential,
    LinearDecay,
}

impl fmt::Display for TimeWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Hyperbolic => "hyperbolic",
            Self::Exponential => "exponential",
            Self::LinearDecay => "linear_decay",
        })
    }
}

impl FromStr for TimeWeighting {
    type Err = TerraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "hyperbolic" => Ok(Self::Hyperbolic),
            "exponential" => Ok(Self::Exponential),
            "linear_decay" => Ok(Self::LinearDecay),
            other => Err(TerraError::Config(format!(
                "time_weights: unknown strategy {other:?} (uniform, hyperbolic, exponential, linear_decay)"
            ))),
        }
    }
}

/// Per-time loss weights, indexed by 0-based `t`.
pub fn time_weights(strategy: TimeWeighting, horizon: usize) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(TerraError::Config("time_weights: T must be at least 1".into()));
    }
    if strategy == TimeWeighting::LinearDecay && horizon > 10 {
        return Err(TerraError::Config(format!(
            "time_weights: linear_decay is non-positive for t >= 10 (T = {horizon})"
        )));
    }
    Ok((0..horizon)
        .map(|t| {
            let t = t as f64;
            match strategy {
                TimeWeighting::Uniform => 1.0,
                TimeWeighting::Hyperbolic => 10.0 / (t + 1.0),
                TimeWeighting::Exponential => 10.0 * 0.8f64.powf(t),
                TimeWeighting::LinearDecay => 10.0 * (1.0 - 0.1 * t),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_max_norm: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience_early_stop: usize,
    pub patience_lr: usize,
    pub lr_decay_factor: f64,
    pub lambda_prop: f64,
    pub lambda_cmu: f64,
    pub lambda_blip: f64,
    pub time_weighting: TimeWeighting,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_max_norm: 1.0,
            max_epochs: 300,
            batch_size: 128,
            patience_early_stop: 25,
            patience_lr: 10,
            lr_decay_factor: 0.5,
            lambda_prop: 0.05,
            lambda_cmu: 0.05,
            lambda_blip: 20.0,
            time_weighting: TimeWeighting::Hyperbolic,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(TerraError::Config(format!("{key}: {why}")));
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !open_unit(self.beta1) {
            return bad("beta1", "must be in (0,1)");
        }
        if !open_unit(self.beta2) {
            return bad("beta2", "must be in (0,1)");
        }
        if !(self.eps >= 0.0) {
            return bad("eps", "must be non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.clip_max_norm > 0.0) {
            return bad("clip_max_norm", "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.patience_early_stop == 0 {
            return bad("patience_early_stop", "must be positive");
        }
        if self.patience_lr == 0 {
            return bad("patience_lr", "must be positive");
        }
        if !open_unit(self.lr_decay_factor) {
            return bad("lr_decay_factor", "must be in (0,1)");
        }
        for (k, v) in [
            ("lambda_prop", self.lambda_prop),
            ("lambda_cmu", self.lambda_cmu),
            ("lambda_blip", self.lambda_blip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, "must be non-negative");
            }
        }
        if self.lambda_prop + self.lambda_cmu + self.lambda_blip <= 0.0 {
            return bad("lambda_blip", "at least one loss weight must be positive");
        }
        if !open_unit(self.val_fraction) {
            return bad("val_fraction", "must be in (0,1)");
        }
        Ok(())
    }

    fn adamax(&self, lr: f64) -> AdamaxParams {
        AdamaxParams {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }
}

/// Graph handles for the three losses and their λ-weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub prop: Var,
    pub cmu: Var,
    pub blip: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub prop: f64,
    pub cmu: f64,
    pub blip: f64,
}

impl LossValues {
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        cfg.lambda_prop * self.prop + cfg.lambda_cmu * self.cmu + cfg.lambda_blip * self.blip
    }

    fn read(g: &Graph, l: &LossVars) -> Self {
        Self {
            prop: g.value(l.prop).data()[0],
            cmu: g.value(l.cmu).data()[0],
            blip: g.value(l.blip).data()[0],
        }
    }
}

/// Constant targets derived from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursionTargets {
    /// `U_{t+1}` per row `unit·T + t−1`.
    pub u_next: Vec<f64>,
    /// `U_{t+1} − μ̂_t`.
    pub u_tilde: Vec<f64>,
    /// `1{Z_t = z} − ê_t^z` for `z ∈ Z⁺`, row-major `[B·T × (K−1)]`.
    pub i_tilde: Vec<f64>,
}

/// Recursive blipping and residualisation on detached head values.
pub fn recursion_targets(g: &Graph, out: &ModelOutputs, batch: &[&Trajectory], n_treatments: usize) -> RecursionTargets {
    let (t_len, k) = (out.horizon, n_treatments);
    let blip = g.value(out.blip).data();
    let mu = g.value(out.cond_mean).data();
    let e = g.value(out.propensity).data();
    let rows = batch.len() * t_len;
    let mut u_next = vec![0.0; rows];
    let mut i_tilde = vec![0.0; rows * (k - 1)];
    for (i, tr) in batch.iter().enumerate() {
        let mut u = tr.outcome;
        for t in (1..=t_len).rev() {
            let r = i * t_len + t - 1;
            u_next[r] = u;
            let z = tr.treatments[t - 1];
            if z > 0 {
                u -= blip[r * (k - 1) + z - 1];
            }
            for a in 1..k {
                i_tilde[r * (k - 1) + a - 1] = f64::from(u8::from(z == a)) - e[r * k + a];
            }
        }
    }
    let u_tilde = u_next.iter().zip(mu).map(|(u, m)| u - m).collect();
    RecursionTargets { u_next, u_tilde, i_tilde }
}

/// Builds `L_prop`, `L_cmu`, `L_blip` and the λ-weighted total.
///
/// Each loss is `Σ_t w_t · mean over units`, with `w` from
/// [`time_weights`].
pub fn joint_losses(
    g: &mut Graph,
    out: &ModelOutputs,
    batch: &[&Trajectory],
    weights: &[f64],
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let t_len = out.horizon;
    if weights.len() != t_len || batch.len() != out.n_units {
        return Err(TerraError::Contract("joint_losses: weights or batch misaligned with outputs".into()));
    }
    let k = g.value(out.propensity).last_dim();
    let tg = recursion_targets(g, out, batch, k);
    let b = batch.len() as f64;
    let row_w: Vec<f64> = (0..batch.len() * t_len).map(|r| weights[r % t_len] / b).collect();
    let z: Vec<usize> = batch.iter().flat_map(|tr| tr.treatments.iter().copied()).collect();

    let prop = g.weighted_cross_entropy(out.propensity_logits, z, row_w.clone())?;
    let cmu = g.weighted_sq_error(out.cond_mean, tg.u_next, row_w.clone())?;
    let contrast = g.mul_const(out.blip, tg.i_tilde)?;
    let contrast = g.row_sum(contrast)?;
    let blip = g.weighted_sq_error(contrast, tg.u_tilde, row_w)?;

    let parts = [
        g.scale(prop, cfg.lambda_prop)?,
        g.scale(cmu, cfg.lambda_cmu)?,
        g.scale(blip, cfg.lambda_blip)?,
    ];
    let s = g.add(parts[0], parts[1])?;
    let total = g.add(s, parts[2])?;
    Ok(LossVars { prop, cmu, blip, total })
}

/// One row of the training log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossValues,
    pub val: LossValues,
    pub clipped_fraction: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_prop,train_cmu,train_blip,val_prop,val_cmu,val_blip,clipped_fraction";

pub fn write_log_csv<W: Write>(log: &[EpochLog], mut w: W) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for e in log {
        writeln!(
            w,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            e.epoch, e.lr, e.train.prop, e.train.cmu, e.train.blip, e.val.prop, e.val.cmu, e.val.blip, e.clipped_fraction
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation total loss.
    pub model: Terra,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub stopped_early: bool,
}

/// Unit-level split: `(train, validation)` indices, fixed by `seed`.
pub fn split_units(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(TerraError::Config(format!(
            "val_fraction: {val_fraction} of {n} units leaves an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5b11));
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    Ok((idx, val))
}

/// Evaluation-mode losses over `units`, as a size-weighted mean of chunks.
pub fn evaluate_losses(model: &Terra, units: &[&Trajectory], weights: &[f64], cfg: &TrainConfig) -> Result<LossValues> {
    let mut acc = LossValues::default();
    let n = units.len() as f64;
    for chunk in units.chunks(512) {
        let mut g = Graph::new();
        let p = model.bind(&mut g)?;
        let out = model.forward(&mut g, &p, chunk)?;
        let lv = joint_losses(&mut g, &out, chunk, weights, cfg)?;
        let l = LossValues::read(&g, &lv);
        let f = chunk.len() as f64 / n;
        acc.prop += f * l.prop;
        acc.cmu += f * l.cmu;
        acc.blip += f * l.blip;
    }
    Ok(acc)
}

fn diverged(epoch: usize, what: &str, state: String) -> TerraError {
    TerraError::Diverged {
        epoch,
        detail: format!("{what}; {state}"),
    }
}

/// Forward, losses and parameter gradients for one batch.
pub fn batch_step(
    model: &Terra,
    g: &mut Graph,
    batch: &[&Trajectory],
    weights: &[f64],
    cfg: &TrainConfig,
) -> Result<(LossValues, Vec<Tensor>)> {
    let p = model.bind(g)?;
    let out = model.forward(g, &p, batch)?;
    let l = joint_losses(g, &out, batch, weights, cfg)?;
    let mut grads = g.backward(l.total)?;
    let v = LossValues::read(g, &l);
    Ok((v, p.iter().map(|&v| grads.take(v)).collect()))
}

/// Runs the full training loop and returns the best-validation model.
pub fn train(panel: &Panel, arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if arch.n_covariates != panel.n_covariates()
        || arch.n_treatments != panel.n_treatments()
        || arch.horizon != panel.horizon()
    {
        return Err(TerraError::Config(format!(
            "architecture (p={}, K={}, T={}) does not match panel (p={}, K={}, T={})",
            arch.n_covariates,
            arch.n_treatments,
            arch.horizon,
            panel.n_covariates(),
            panel.n_treatments(),
            panel.horizon()
        )));
    }
    let weights = time_weights(cfg.time_weighting, panel.horizon())?;
    let (train_idx, val_idx) = split_units(panel.len(), cfg.val_fraction, cfg.seed)?;
    let train_panel = panel.select(&train_idx)?;
    let train_units: Vec<&Trajectory> = train_panel.trajectories().iter().collect();
    let val_units: Vec<&Trajectory> = val_idx.iter().map(|&i| panel.get(i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Terra::new(arch.clone(), Scaler::fit(&train_panel), rng.next_u64())?;
    let mut state = OptimizerState::new(model.params().tensors());
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_decay_factor, cfg.patience_lr);

    let checked = |model: &Terra, units: &[&Trajectory], epoch: usize| {
        evaluate_losses(model, units, &weights, cfg).map_err(|e| match e {
            TerraError::NonFinite { op } => diverged(epoch, &format!("non-finite evaluation value in {op}"), String::new()),
            e => e,
        })
    };
    let first_train = checked(&model, &train_units, 0)?;
    let first_val = checked(&model, &val_units, 0)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        lr: cfg.lr,
        train: first_train,
        val: first_val,
        clipped_fraction: 0.0,
    }];
    let mut best = (first_val.total(cfg), 0, model.params().clone());
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train_units.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = sched.lr;
        let hp = cfg.adamax(lr);
        let mut sums = LossValues::default();
        let mut clipped = 0usize;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<&Trajectory> = idx.iter().map(|&i| train_units[i]).collect();
            let state_dump = || format!("batch {bi}, lr {lr:e}, optimizer step {}", state.step);
            let mut g = Graph::training(rng.next_u64());
            let (v, mut grads) = match batch_step(&model, &mut g, &batch, &weights, cfg) {
                Ok(s) => s,
                Err(TerraError::NonFinite { op }) => {
                    return Err(diverged(epoch, &format!("non-finite value in {op}"), state_dump()));
                }
                Err(e) => return Err(e),
            };
            if !v.total(cfg).is_finite() || grads.iter().any(|t| !t.is_finite()) {
                return Err(diverged(epoch, &format!("non-finite loss or gradient {v:?}"), state_dump()));
            }
            let f = batch.len() as f64 / train_units.len() as f64;
            sums.prop += f * v.prop;
            sums.cmu += f * v.cmu;
            sums.blip += f * v.blip;
            if clip_gradients(&mut grads, cfg.clip_max_norm).1 {
                clipped += 1;
            }
            adamax_step(&mut state, model.params_mut().tensors_mut(), &grads, &hp)?;
        }
        let val = checked(&model, &val_units, epoch)?;
        let val_total = val.total(cfg);
        if !val_total.is_finite() {
            return Err(diverged(epoch, &format!("non-finite validation loss {val:?}"), format!("lr {lr:e}")));
        }
        log.push(EpochLog {
            epoch,
            lr,
            train: sums,
            val,
            clipped_fraction: clipped as f64 / batches.len() as f64,
        });
        if val_total < best.0 {
            best = (val_total, epoch, model.params().clone());
        }
        sched.step(val_total);
        if epoch - best.1 >= cfg.patience_early_stop {
            stopped_early = true;
            break;
        }
    }

    let (best_val_total, best_epoch, params) = best;
    *model.params_mut() = params;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_total,
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
