//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use gprg_core::riemann::{initial_guess, prg_run};
use gprg_core::{ComplexField, InitialGuess, ModelInstance, Nonlinearity, PRGConfig, PolarGrid, PotentialSpec, PrecondKind, PrecondSpec, Stage, StepRule};

/// Harmonic trap with cubic coupling `eta` on an `nr × ntheta` disk of radius 8.
pub fn instance(nr: usize, ntheta: usize, omega: f64, eta: f64) -> ModelInstance {
    let grid = Arc::new(PolarGrid::new(8.0, nr, ntheta).expect("bench grid"));
    ModelInstance::new(grid, PotentialSpec::Harmonic, omega, Nonlinearity::cubic(eta), 0.2).expect("bench model")
}

/// A state part way to convergence, so the metrics look like mid-run ones.
pub fn warm_state(model: &ModelInstance, iters: usize) -> ComplexField {
    let phi0 = initial_guess(model, InitialGuess::vortex(1), 0);
    let stage = Stage::new(PrecondSpec::new(PrecondKind::Hessian), iters);
    let (_, phi) = prg_run(model, &phi0, &PRGConfig::new(StepRule::Fixed { tau: 1.0 }, vec![stage], 1e-14)).expect("warm-up run");
    phi
}
