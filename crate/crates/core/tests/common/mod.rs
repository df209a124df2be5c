#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use gprg_core::precond::{build_metric, FactorizedMetric};
use gprg_core::riemann::{initial_guess, prg_run};
use gprg_core::{ComplexField, InitialGuess, ModelInstance, Nonlinearity, PRGConfig, PolarGrid, PotentialSpec, PrecondKind, PrecondSpec, Stage, StepRule};

pub fn model(radius: f64, nr: usize, ntheta: usize, omega: f64, eta: f64) -> ModelInstance {
    let grid = Arc::new(PolarGrid::new(radius, nr, ntheta).unwrap());
    ModelInstance::new(grid, PotentialSpec::Harmonic, omega, Nonlinearity::cubic(eta), 0.2).unwrap()
}

/// R = 8, 32 × 64, η = 100.
pub fn small(omega: f64) -> ModelInstance {
    model(8.0, 32, 64, omega, 100.0)
}

pub fn exact_optimal() -> PrecondSpec {
    PrecondSpec::new(PrecondKind::OptimalShifted).with_drop_tol(0.0)
}

pub struct Reference {
    pub model: ModelInstance,
    pub phi: ComplexField,
    pub residual: f64,
}

impl Reference {
    pub fn metric(&self) -> FactorizedMetric {
        build_metric(&self.model, &self.phi, &exact_optimal()).unwrap()
    }
}

fn solve(model: ModelInstance, guess: InitialGuess, hessian_iters: usize, iters: usize) -> Reference {
    let phi0 = initial_guess(&model, guess, 0);
    let s1 = Stage::new(PrecondSpec::new(PrecondKind::Hessian), hessian_iters);
    let s2 = Stage::new(exact_optimal(), iters);
    let cfg = PRGConfig::new(StepRule::Fixed { tau: 1.0 }, vec![s1, s2], 1e-11);
    let (trace, phi) = prg_run(&model, &phi0, &cfg).unwrap();
    let residual = trace.last().unwrap().residual_inf;
    Reference { model, phi, residual }
}

/// Small rotating instance from the vortex guess.
pub fn small_vortex() -> &'static Reference {
    static CELL: OnceLock<Reference> = OnceLock::new();
    CELL.get_or_init(|| solve(small(0.8), InitialGuess::vortex(1), 3000, 2000))
}

/// Small non-rotating instance (radial ground state).
pub fn small_radial() -> &'static Reference {
    static CELL: OnceLock<Reference> = OnceLock::new();
    CELL.get_or_init(|| solve(small(0.0), InitialGuess::gaussian(), 100, 2000))
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}
