//! Adamax with decoupled weight decay, global-norm clipping and a plateau
//! learning-rate schedule.

use crate::error::{Result, TerraError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamaxParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

/// First moments `m`, infinity-norm moments `u` and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            u: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

/// One Adamax update in place.
///
/// `g ← grad + wd·θ; m ← β1·m + (1−β1)·g; u ← max(β2·u, |g|);
/// θ ← θ − lr/(1−β1^step) · m/(u+eps)`.
/// Coordinates with `m = 0` are left untouched, so `eps = 0` is allowed.
pub fn adamax_step(state: &mut OptimizerState, params: &mut [Tensor], grads: &[Tensor], hp: &AdamaxParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TerraError::Contract(format!(
            "adamax: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bias = 1.0 - hp.beta1.powi(state.step.min(i32::MAX as u64) as i32);
    let step_size = hp.lr / bias;
    for (i, (theta, grad)) in params.iter_mut().zip(grads).enumerate() {
        if theta.len() != grad.len() {
            return Err(TerraError::Contract(format!("adamax: gradient {i} has the wrong length")));
        }
        let (m, u) = (&mut state.m[i], &mut state.u[i]);
        for (j, (th, g)) in theta.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g + hp.weight_decay * *th;
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            u[j] = (hp.beta2 * u[j]).max(g.abs());
            if m[j] != 0.0 {
                *th -= step_size * m[j] / (u[j] + hp.eps);
            }
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` to global ℓ2 norm `max_norm` when it is exceeded.
/// Returns the pre-clip norm and whether clipping happened.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> (f64, bool) {
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        (n, true)
    } else {
        (n, false)
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a new best validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
