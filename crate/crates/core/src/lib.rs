//! Longitudinal heterogeneous treatment effect estimation by recursive
//! residual learning over structural nested mean models, with a causal
//! transformer estimating all nuisance and blip functions jointly.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense tensors and reverse-mode autodiff.
//! - [`transformer`]: paired causal encoders and the three output heads.
//! - [`snmm`]: panel data model, recursive blipping, residualisation and
//!   estimating-equation oracles.
//! - [`training`]: the joint training loop and its optimiser machinery.
//! - [`datagen`]: seeded simulation scenarios and the semi-synthetic DGP.
//! - [`baselines`]: closed-form recursive R-learners.
//! - [`metrics`]: blip recovery metrics.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod snmm;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Result, TerraError};
pub use snmm::{Panel, Trajectory};
pub use tensor::{Graph, Tensor, Var};
