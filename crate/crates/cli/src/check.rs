//! Small-scale self-tests with independent oracles.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use gprg_core::diagnostics::loja_fit;
use gprg_core::field::l2_inner;
use gprg_core::grid::{assemble_dtheta, assemble_kinetic};
use gprg_core::precond::build_metric;
use gprg_core::riemann::{initial_guess, prg_run, retract, tangent_project_l2};
use gprg_core::spectrum::{kernel_basis, rho_tau, tau_opt};
use gprg_core::{
    InitialGuess, ModelInstance, Nonlinearity, Ordering, PRGConfig, PolarGrid, PotentialSpec, PrecondKind, PrecondSpec,
    Regime, Stage, StepRule,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Flip the sign of the rotation term in the gradient and Hessian.
    RotationSign,
}

pub struct Outcome {
    pub group: &'static str,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub ms: f64,
}

type Check = fn(&Fixture) -> (bool, String);

pub struct Fixture {
    model: ModelInstance,
}

impl Fixture {
    pub fn new(fault: Option<Fault>) -> Self {
        let grid = Arc::new(PolarGrid::new(4.0, 12, 32).expect("fixture grid"));
        let model = ModelInstance::new(grid, PotentialSpec::Harmonic, 0.8, Nonlinearity::cubic(50.0), 0.2).expect("fixture model");
        let model = match fault {
            Some(Fault::RotationSign) => model.with_rotation_sign_fault(),
            None => model,
        };
        Self { model }
    }

    fn state(&self, seed: u64) -> Vec<f64> {
        initial_guess(&self.model, InitialGuess::vortex(1).with_noise(0.3), seed).into_values()
    }

    /// Seeded direction with unit weighted norm.
    fn direction(&self, seed: u64) -> Vec<f64> {
        let a = initial_guess(&self.model, InitialGuess::vortex(2).with_noise(1.0), seed + 1000);
        let b = initial_guess(&self.model, InitialGuess::gaussian().with_noise(1.0), seed + 2000);
        let v: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - 0.5 * y).collect();
        let norm = l2_inner(self.model.grid(), &v, &v).sqrt();
        v.iter().map(|x| x / norm).collect()
    }
}

const CHECKS: [(&str, &str, Check); 13] = [
    ("grid", "mass-weights-sum-to-area", mass_area),
    ("grid", "kinetic-closed-form", kinetic_closed_form),
    ("grid", "dtheta-antisymmetric", dtheta_antisymmetric),
    ("model", "gradient-fd", gradient_fd),
    ("model", "hessian-fd", hessian_fd),
    ("model", "hessian-symmetric", hessian_symmetric),
    ("model", "phase-invariance", phase_invariance),
    ("precond", "exact-factor-inverts", exact_factor_inverts),
    ("precond", "orderings-agree", orderings_agree),
    ("riemann", "retraction-on-sphere", retraction_on_sphere),
    ("riemann", "energy-decreases", energy_decreases),
    ("spectrum", "kernel-orthonormal", kernel_orthonormal),
    ("diagnostics", "regime-classifier", regime_classifier),
];

pub fn groups() -> Vec<&'static str> {
    let mut g: Vec<&str> = CHECKS.iter().map(|c| c.0).collect();
    g.dedup();
    g
}

pub fn is_known(filter: &str) -> bool {
    CHECKS.iter().any(|(g, n, _)| *g == filter || *n == filter)
}

/// Runs the checks whose group or name equals `filter` (all when `None`).
pub fn run(filter: Option<&str>, fault: Option<Fault>) -> Vec<Outcome> {
    let fixture = Fixture::new(fault);
    CHECKS
        .iter()
        .filter(|(g, n, _)| filter.is_none_or(|f| f == *g || f == *n))
        .map(|&(group, name, check)| {
            let t = Instant::now();
            let (pass, detail) = check(&fixture);
            Outcome { group, name, pass, detail, ms: t.elapsed().as_secs_f64() * 1e3 }
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mass_area(f: &Fixture) -> (bool, String) {
    let grid = f.model.grid();
    let area = PI * grid.radius().powi(2);
    let err = rel(grid.weights().iter().sum(), area);
    (err <= 1e-13, format!("relative error {err:.1e}"))
}

fn kinetic_closed_form(_: &Fixture) -> (bool, String) {
    // v = R² - r² has ∫|∇v|² = 2πR⁴, and xᵀKx carries half of it.
    let radius = 2.0;
    let grid = PolarGrid::new(radius, 128, 16).expect("grid");
    let n = grid.n_nodes();
    let mut x = vec![0.0; 2 * n];
    for i in 0..grid.nr() {
        for j in 0..grid.ntheta() {
            x[grid.index(i, j)] = radius * radius - grid.r_nodes()[i].powi(2);
        }
    }
    let err = rel(assemble_kinetic(&grid).quad_form(&x), PI * radius.powi(4));
    (err <= 1e-3, format!("relative error {err:.1e}"))
}

fn dtheta_antisymmetric(f: &Fixture) -> (bool, String) {
    let d = assemble_dtheta(f.model.grid()).antisymmetry_defect();
    (d <= 1e-14, format!("defect {d:.1e}"))
}

fn gradient_fd(f: &Fixture) -> (bool, String) {
    let t = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..8 {
        let x = f.state(seed);
        let v = f.direction(seed);
        let at = |s: f64| -> Vec<f64> { x.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
        let (Ok(ep), Ok(em)) = (f.model.energy_values(&at(t)), f.model.energy_values(&at(-t))) else {
            return (false, "energy evaluation failed".into());
        };
        let fd = (ep - em) / (2.0 * t);
        worst = worst.max(rel(fd, dot(&f.model.grad_values(&x), &v)));
    }
    (worst <= 1e-6, format!("8 directions, worst relative mismatch {worst:.1e}"))
}

fn hessian_fd(f: &Fixture) -> (bool, String) {
    let t = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..8 {
        let x = f.state(seed);
        let v = f.direction(seed);
        let at = |s: f64| -> Vec<f64> { x.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
        let (gp, gm) = (f.model.grad_values(&at(t)), f.model.grad_values(&at(-t)));
        let hv = f.model.hessian_apply_values(&x, &v);
        let num: f64 = gp.iter().zip(&gm).zip(&hv).map(|((p, m), h)| ((p - m) / (2.0 * t) - h).powi(2)).sum();
        worst = worst.max((num / dot(&hv, &hv)).sqrt());
    }
    (worst <= 1e-5, format!("8 directions, worst relative mismatch {worst:.1e}"))
}

fn hessian_symmetric(f: &Fixture) -> (bool, String) {
    let d = f.model.hessian_matrix(&f.state(0)).matrix().symmetry_defect();
    (d <= 1e-12, format!("defect {d:.1e}"))
}

fn phase_invariance(f: &Fixture) -> (bool, String) {
    let phi = initial_guess(&f.model, InitialGuess::vortex(1).with_noise(0.3), 0);
    let (Ok(e), Ok(e2)) = (f.model.energy(&phi), f.model.energy(&phi.phase_rotated(1.3))) else {
        return (false, "energy evaluation failed".into());
    };
    let err = rel(e2, e);
    (err <= 1e-13, format!("relative change {err:.1e}"))
}

fn exact_factor_inverts(f: &Fixture) -> (bool, String) {
    let phi = initial_guess(&f.model, InitialGuess::vortex(1), 0);
    let spec = PrecondSpec::new(PrecondKind::KineticPlusPotential).with_drop_tol(0.0);
    let metric = match build_metric(&f.model, &phi, &spec) {
        Ok(m) => m,
        Err(e) => return (false, e.to_string()),
    };
    let x = f.direction(3);
    let back = metric.apply_inverse(&metric.matrix().apply(&x));
    let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let shifts = metric.stats().shift_count;
    (err <= 1e-9 && shifts == 0, format!("relative error {err:.1e}, {shifts} shifted restarts"))
}

fn orderings_agree(f: &Fixture) -> (bool, String) {
    let phi = initial_guess(&f.model, InitialGuess::vortex(1), 0);
    let spec = PrecondSpec::new(PrecondKind::OptimalShifted).with_drop_tol(0.0);
    let (Ok(amd), Ok(nat)) = (
        build_metric(&f.model, &phi, &spec.with_ordering(Ordering::Amd)),
        build_metric(&f.model, &phi, &spec.with_ordering(Ordering::Natural)),
    ) else {
        return (false, "factorization failed".into());
    };
    let b = f.direction(5);
    let (xa, xn) = (amd.apply_inverse(&b), nat.apply_inverse(&b));
    let err = xa.iter().zip(&xn).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / xn.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (err <= 1e-9, format!("solutions differ by {err:.1e}; factor nnz amd {} natural {}", amd.stats().factor_nnz, nat.stats().factor_nnz))
}

fn retraction_on_sphere(f: &Fixture) -> (bool, String) {
    let phi = initial_guess(&f.model, InitialGuess::vortex(1).with_noise(0.3), 1);
    let d = tangent_project_l2(&phi, &f.direction(1));
    let mut worst = 0.0f64;
    for tau in [1e-3, 0.1, 1.0, 10.0] {
        match retract(&phi, &d, tau) {
            Ok(r) => worst = worst.max((r.mass_norm() - 1.0).abs()),
            Err(e) => return (false, e.to_string()),
        }
    }
    (worst <= 1e-14, format!("worst mass defect {worst:.1e}"))
}

fn energy_decreases(f: &Fixture) -> (bool, String) {
    let phi0 = initial_guess(&f.model, InitialGuess::vortex(1), 0);
    let stage = Stage::new(PrecondSpec::new(PrecondKind::Hessian), 100);
    let cfg = PRGConfig::new(StepRule::Fixed { tau: 1.0 }, vec![stage], 1e-12);
    let trace = match prg_run(&f.model, &phi0, &cfg) {
        Ok((t, _)) => t,
        Err(e) => return (false, e.to_string()),
    };
    let e = trace.energies();
    let bad = (5..e.len().saturating_sub(1)).filter(|&n| e[n + 1] > e[n] + 1e-13 * e[n].abs()).count();
    let last = trace.last().map_or(f64::NAN, |t| t.residual_inf);
    (bad == 0, format!("{} iterations, {bad} increases, final residual {last:.1e}", e.len() - 1))
}

fn kernel_orthonormal(f: &Fixture) -> (bool, String) {
    // Noise breaks the symmetry that makes ∂_Θφ parallel to iφ.
    let phi = initial_guess(&f.model, InitialGuess::vortex(1).with_noise(0.3), 0);
    let metric = match build_metric(&f.model, &phi, &PrecondSpec::new(PrecondKind::KineticPlusPotential).with_drop_tol(0.0)) {
        Ok(m) => m,
        Err(e) => return (false, e.to_string()),
    };
    let k = match kernel_basis(&f.model, &phi, &metric, true) {
        Ok(k) => k,
        Err(e) => return (false, e.to_string()),
    };
    let g = k.gram(&metric);
    let m = k.len();
    let defect = (0..m * m).map(|p| (g[p] - if p / m == p % m { 1.0 } else { 0.0 }).abs()).fold(0.0, f64::max);
    let tangent = k.vectors.iter().map(|v| l2_inner(f.model.grid(), phi.values(), v).abs()).fold(0.0, f64::max);
    (m == 2 && defect <= 1e-10 && tangent <= 1e-12, format!("{m} vectors, Gram defect {defect:.1e}, tangency {tangent:.1e}"))
}

fn regime_classifier(_: &Fixture) -> (bool, String) {
    let mut wrong = 0;
    for k in 0..5 {
        let q = 0.9 + 0.02 * k as f64;
        let geometric: Vec<(usize, f64)> = (0..200).map(|n| (n, q.powi(2 * n as i32))).collect();
        wrong += usize::from(loja_fit(&geometric).regime != Regime::Linear);
        let p = 0.5 + 0.5 * k as f64;
        let power: Vec<(usize, f64)> = (0..200).map(|n| (n, (n as f64 + 1.0).powf(-p))).collect();
        wrong += usize::from(loja_fit(&power).regime != Regime::Sublinear);
    }
    let rate_ok = (rho_tau(0.1, 1.0, tau_opt(0.1, 1.0)) - 0.9 / 1.1).abs() < 1e-14;
    (wrong == 0 && rate_ok, format!("{wrong} of 10 sequences mislabeled"))
}
