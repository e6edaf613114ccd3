//! Brute-force reference implementations used to check the engine.
//!
//! The oracles share no code with the backward sweeps: they evaluate the
//! network with per-neuron loops in `f64` and differentiate numerically.

mod finite_diff;
mod grid;
mod naive;

pub use finite_diff::finite_diff_gradient;
pub use grid::{
    architecture_grid, architecture_specs, build_case, GridBody, GridCase, GridSpec, GRID_INSTANCES,
};
pub use naive::{naive_forward, naive_lrp, NaiveTrace};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
