//! Shared fixtures for the criterion benches.

use terra_core::datagen::{generate, ScenarioKind, ScenarioSpec};
use terra_core::transformer::{ArchConfig, Scaler, Terra};
use terra_core::{Panel, Tensor};

/// A simulated Scenario 1 panel.
pub fn s1_panel(n: usize, seed: u64) -> Panel {
    generate(&ScenarioSpec::new(ScenarioKind::S1, n, seed)).expect("valid spec").0
}

/// A freshly initialised model with default architecture for `panel`.
pub fn default_model(panel: &Panel, seed: u64) -> Terra {
    Terra::new(ArchConfig::for_panel(panel), Scaler::fit(panel), seed).expect("valid arch")
}

/// A deterministic `rows × cols` matrix.
pub fn matrix(rows: usize, cols: usize, salt: f64) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i as f64) * 0.37 + salt).sin()).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}
