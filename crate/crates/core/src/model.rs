//! Discrete Gross–Pitaevskii energy, gradient and Hessian.
//!
//! Gradients and Hessian actions are returned in dual (weighted) coordinates.
//! With `lin = K + W V + Ω R` the energy reads
//! `E(φ) = ½ (φᵀ lin φ + Σ w F(|φ|²))` and `E'(φ) = H_φ φ` where
//! `H_φ = lin + W f(|φ|²)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::ComplexField;
use crate::grid::{
    assemble_dtheta, assemble_kinetic, assemble_mass, assemble_rotation, sample_potential, PolarGrid, PotentialSpec,
    SampledPotential,
};
use crate::sparse::{dot, CsrMatrix, SparseSymOperator};

/// Below this density the logarithm is clamped.
pub const LOG_CLAMP: f64 = 1e-300;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("rotation speed must be finite and nonnegative, got {0}")]
    Omega(f64),
    #[error("nonlinearity parameter {name} must be finite and nonnegative, got {value}")]
    Coupling { name: &'static str, value: f64 },
    #[error("field contains non-finite values")]
    NonFinite,
    #[error("field is not normalized (mass {0})")]
    NotNormalized(f64),
    #[error("field lives on a different grid")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonlinearityKind {
    /// `f(s) = η s`.
    Cubic,
    /// `f(s) = η s log s`.
    Logarithmic,
    /// `f(s) = η s + η_LHY s^{3/2}`.
    Lhy,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nonlinearity {
    pub kind: NonlinearityKind,
    pub eta: f64,
    pub eta_lhy: f64,
}

impl Nonlinearity {
    pub fn cubic(eta: f64) -> Self {
        Self { kind: NonlinearityKind::Cubic, eta, eta_lhy: 0.0 }
    }

    pub fn logarithmic(eta: f64) -> Self {
        Self { kind: NonlinearityKind::Logarithmic, eta, eta_lhy: 0.0 }
    }

    pub fn lhy(eta: f64, eta_lhy: f64) -> Self {
        Self { kind: NonlinearityKind::Lhy, eta, eta_lhy }
    }

    pub fn none() -> Self {
        Self { kind: NonlinearityKind::None, eta: 0.0, eta_lhy: 0.0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in [("eta", self.eta), ("eta_lhy", self.eta_lhy)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ModelError::Coupling { name, value });
            }
        }
        Ok(())
    }

    /// `f(s)`.
    pub fn f(&self, s: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Cubic => self.eta * s,
            NonlinearityKind::Logarithmic => {
                if s <= 0.0 {
                    0.0
                } else {
                    self.eta * s * s.max(LOG_CLAMP).ln()
                }
            }
            NonlinearityKind::Lhy => self.eta * s + self.eta_lhy * s * s.max(0.0).sqrt(),
            NonlinearityKind::None => 0.0,
        }
    }

    /// `F(ρ) = ∫₀^ρ f(s) ds`.
    pub fn big_f(&self, rho: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Cubic => 0.5 * self.eta * rho * rho,
            NonlinearityKind::Logarithmic => {
                if rho <= 0.0 {
                    0.0
                } else {
                    self.eta * (0.5 * rho * rho * rho.max(LOG_CLAMP).ln() - 0.25 * rho * rho)
                }
            }
            NonlinearityKind::Lhy => 0.5 * self.eta * rho * rho + 0.4 * self.eta_lhy * rho * rho * rho.max(0.0).sqrt(),
            NonlinearityKind::None => 0.0,
        }
    }

    /// `f'(s)`.
    pub fn f_prime(&self, s: f64) -> f64 {
        match self.kind {
            NonlinearityKind::Cubic => self.eta,
            NonlinearityKind::Logarithmic => self.eta * (s.max(LOG_CLAMP).ln() + 1.0),
            NonlinearityKind::Lhy => self.eta + 1.5 * self.eta_lhy * s.max(0.0).sqrt(),
            NonlinearityKind::None => 0.0,
        }
    }
}

/// Quantities produced by one gradient evaluation at a normalized state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// `H_φ φ` in dual coordinates.
    pub grad: Vec<f64>,
    pub energy: f64,
    pub lambda_tilde: f64,
    pub residual_inf: f64,
}

/// A discretized problem instance.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    grid: Arc<PolarGrid>,
    potential_spec: PotentialSpec,
    potential: SampledPotential,
    omega: f64,
    nonlinearity: Nonlinearity,
    kinetic: SparseSymOperator,
    mass: SparseSymOperator,
    dtheta: CsrMatrix,
    rotation: SparseSymOperator,
    /// `K + W V`.
    kinetic_potential: SparseSymOperator,
    /// `K + W V + Ω R`, padded with explicit zeros on the per-node
    /// `(re, im)` couplings so the Hessian shares its pattern.
    linear: SparseSymOperator,
    rotation_fault: bool,
}

impl ModelInstance {
    /// `k_dominance` is the constant of the trap-dominance warning.
    pub fn new(
        grid: Arc<PolarGrid>,
        potential_spec: PotentialSpec,
        omega: f64,
        nonlinearity: Nonlinearity,
        k_dominance: f64,
    ) -> Result<Self, ModelError> {
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(ModelError::Omega(omega));
        }
        nonlinearity.validate()?;
        let potential = sample_potential(&grid, &potential_spec, omega, k_dominance);
        let kinetic = assemble_kinetic(&grid);
        let mass = assemble_mass(&grid);
        let dtheta = assemble_dtheta(&grid);
        let rotation = assemble_rotation(&grid, &dtheta);
        let wv: Vec<f64> = grid
            .realified_weights()
            .iter()
            .zip(potential.values.iter().chain(potential.values.iter()))
            .map(|(w, v)| w * v)
            .collect();
        let kinetic_potential = kinetic
            .combine(1.0, &SparseSymOperator::new(CsrMatrix::identity_scaled(&wv), false), 1.0)
            .with_positive_definite(potential.values.iter().all(|v| *v >= 0.0));
        let mut model = Self {
            grid,
            potential_spec,
            potential,
            omega,
            nonlinearity,
            kinetic,
            mass,
            dtheta,
            rotation,
            kinetic_potential,
            linear: SparseSymOperator::new(CsrMatrix::identity_scaled(&[]), false),
            rotation_fault: false,
        };
        model.linear = model.build_linear(omega);
        Ok(model)
    }

    fn build_linear(&self, rotation_coef: f64) -> SparseSymOperator {
        let n = self.grid.n_nodes();
        let mut t = Vec::with_capacity(2 * n);
        for p in 0..n {
            t.push((p, n + p, 0.0));
            t.push((n + p, p, 0.0));
        }
        let pad = SparseSymOperator::new(CsrMatrix::from_triplets(2 * n, 2 * n, &t), false);
        self.kinetic_potential.combine(1.0, &self.rotation, rotation_coef).combine(1.0, &pad, 1.0)
    }

    /// Test hook: flips the sign of the rotation term in the gradient and
    /// Hessian (but not in [`ModelInstance::energy`]).
    pub fn with_rotation_sign_fault(mut self) -> Self {
        self.rotation_fault = true;
        self.linear = self.build_linear(-self.omega);
        self
    }

    pub fn has_rotation_fault(&self) -> bool {
        self.rotation_fault
    }

    pub fn grid(&self) -> &Arc<PolarGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.nonlinearity
    }

    pub fn potential_spec(&self) -> &PotentialSpec {
        &self.potential_spec
    }

    pub fn potential(&self) -> &SampledPotential {
        &self.potential
    }

    pub fn kinetic(&self) -> &SparseSymOperator {
        &self.kinetic
    }

    pub fn mass(&self) -> &SparseSymOperator {
        &self.mass
    }

    pub fn dtheta(&self) -> &CsrMatrix {
        &self.dtheta
    }

    pub fn rotation(&self) -> &SparseSymOperator {
        &self.rotation
    }

    pub fn kinetic_potential(&self) -> &SparseSymOperator {
        &self.kinetic_potential
    }

    pub fn linear(&self) -> &SparseSymOperator {
        &self.linear
    }

    /// Realified weights (the mass diagonal).
    pub fn weights(&self) -> Vec<f64> {
        self.grid.realified_weights()
    }

    fn check(&self, phi: &ComplexField) -> Result<(), ModelError> {
        if !Arc::ptr_eq(phi.grid(), &self.grid) && **phi.grid() != *self.grid {
            return Err(ModelError::GridMismatch);
        }
        Ok(())
    }

    fn check_normalized(&self, phi: &ComplexField) -> Result<(), ModelError> {
        self.check(phi)?;
        if !phi.is_normalized() {
            return Err(ModelError::NotNormalized(phi.mass_norm_sq()));
        }
        Ok(())
    }

    pub fn energy(&self, phi: &ComplexField) -> Result<f64, ModelError> {
        self.check(phi)?;
        self.energy_values(phi.values())
    }

    /// Energy of a raw realified vector, evaluated term by term.
    pub fn energy_values(&self, x: &[f64]) -> Result<f64, ModelError> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(self.energy_terms(x).total())
    }

    pub fn energy_terms(&self, x: &[f64]) -> EnergyTerms {
        let n = self.grid.n_nodes();
        let nt = self.grid.ntheta();
        let mut potential = 0.0;
        let mut interaction = 0.0;
        for i in 0..self.grid.nr() {
            let w = self.grid.ring_weight(i);
            let (mut pv, mut pf) = (0.0, 0.0);
            for p in i * nt..(i + 1) * nt {
                let rho = x[p] * x[p] + x[n + p] * x[n + p];
                pv += self.potential.values[p] * rho;
                pf += self.nonlinearity.big_f(rho);
            }
            potential += w * pv;
            interaction += w * pf;
        }
        EnergyTerms {
            kinetic: self.kinetic.quad_form(x),
            potential,
            rotation: self.omega * self.rotation.quad_form(x),
            interaction,
        }
    }

    pub fn euclid_grad(&self, phi: &ComplexField) -> Result<Vec<f64>, ModelError> {
        self.check(phi)?;
        Ok(self.grad_values(phi.values()))
    }

    /// `H_φ φ` for a raw realified vector.
    pub fn grad_values(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.linear.apply(x);
        self.add_nonlinear_diag(x, x, &mut g);
        g
    }

    /// `y += W f(ρ_φ) v`.
    fn add_nonlinear_diag(&self, phi: &[f64], v: &[f64], y: &mut [f64]) {
        if self.nonlinearity.kind == NonlinearityKind::None {
            return;
        }
        let n = self.grid.n_nodes();
        let nt = self.grid.ntheta();
        for i in 0..self.grid.nr() {
            let w = self.grid.ring_weight(i);
            for p in i * nt..(i + 1) * nt {
                let rho = phi[p] * phi[p] + phi[n + p] * phi[n + p];
                let c = w * self.nonlinearity.f(rho);
                y[p] += c * v[p];
                y[n + p] += c * v[n + p];
            }
        }
    }

    pub fn lambda_tilde(&self, phi: &ComplexField) -> Result<f64, ModelError> {
        self.check_normalized(phi)?;
        Ok(dot(phi.values(), &self.grad_values(phi.values())))
    }

    pub fn residual_inf(&self, phi: &ComplexField) -> Result<f64, ModelError> {
        self.check_normalized(phi)?;
        let g = self.grad_values(phi.values());
        let lambda = dot(phi.values(), &g);
        Ok(self.residual_from(phi.values(), &g, lambda))
    }

    /// `max_p |W⁻¹ g - λ φ|` over nodes.
    pub fn residual_from(&self, x: &[f64], grad: &[f64], lambda: f64) -> f64 {
        let n = self.grid.n_nodes();
        let nt = self.grid.ntheta();
        let mut m = 0.0_f64;
        for i in 0..self.grid.nr() {
            let w = self.grid.ring_weight(i);
            for p in i * nt..(i + 1) * nt {
                let re = grad[p] / w - lambda * x[p];
                let im = grad[n + p] / w - lambda * x[n + p];
                m = m.max(re.hypot(im));
            }
        }
        m
    }

    /// Gradient, energy, `λ̃` and residual with a single operator application.
    /// The energy uses `½ (φᵀ lin φ + Σ w F)`, which agrees with
    /// [`ModelInstance::energy`] up to rounding.
    pub fn evaluate(&self, x: &[f64]) -> Evaluation {
        let n = self.grid.n_nodes();
        let nt = self.grid.ntheta();
        let mut grad = self.linear.apply(x);
        let lin_form = dot(x, &grad);
        let mut interaction = 0.0;
        for i in 0..self.grid.nr() {
            let w = self.grid.ring_weight(i);
            let mut pf = 0.0;
            for p in i * nt..(i + 1) * nt {
                let rho = x[p] * x[p] + x[n + p] * x[n + p];
                pf += self.nonlinearity.big_f(rho);
                if self.nonlinearity.kind != NonlinearityKind::None {
                    let c = w * self.nonlinearity.f(rho);
                    grad[p] += c * x[p];
                    grad[n + p] += c * x[n + p];
                }
            }
            interaction += w * pf;
        }
        let lambda_tilde = dot(x, &grad);
        let residual_inf = self.residual_from(x, &grad, lambda_tilde);
        Evaluation { grad, energy: 0.5 * (lin_form + interaction), lambda_tilde, residual_inf }
    }

    pub fn hessian_apply(&self, phi: &ComplexField, v: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check(phi)?;
        Ok(self.hessian_apply_values(phi.values(), v))
    }

    /// `E''(φ) v = H_φ v + 2 W f'(ρ) (φ·v) φ` per node.
    pub fn hessian_apply_values(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut y = self.linear.apply(v);
        if self.nonlinearity.kind == NonlinearityKind::None {
            return y;
        }
        let n = self.grid.n_nodes();
        let nt = self.grid.ntheta();
        for i in 0..self.grid.nr() {
            let w = self.grid.ring_weight(i);
            for p in i * nt..(i + 1) * nt {
                let (a, b) = (x[p], x[n + p]);
                let rho = a * a + b * b;
                let c = w * self.nonlinearity.f(rho);
                let proj = 2.0 * w * self.nonlinearity.f_prime(rho) * (a * v[p] + b * v[n + p]);
                y[p] += c * v[p] + proj * a;
                y[n + p] += c * v[n + p] + proj * b;
            }
        }
        y
    }

    /// Assembled `E''(φ)` on the pattern of [`ModelInstance::linear`].
    pub fn hessian_matrix(&self, x: &[f64]) -> SparseSymOperator {
        let mut h = self.linear.clone();
        if self.nonlinearity.kind == NonlinearityKind::None {
            return h;
        }
        let n = self.grid.n_nodes();
        let nt = self.grid.ntheta();
        let m = h.matrix_mut();
        for i in 0..self.grid.nr() {
            let w = self.grid.ring_weight(i);
            for p in i * nt..(i + 1) * nt {
                let (a, b) = (x[p], x[n + p]);
                let rho = a * a + b * b;
                let c = w * self.nonlinearity.f(rho);
                let d = 2.0 * w * self.nonlinearity.f_prime(rho);
                let slots = [
                    (p, p, c + d * a * a),
                    (n + p, n + p, c + d * b * b),
                    (p, n + p, d * a * b),
                    (n + p, p, d * a * b),
                ];
                for (r, col, val) in slots {
                    let k = m.position(r, col).expect("hessian pattern is padded");
                    m.values_mut()[k] += val;
                }
            }
        }
        h
    }

    /// Nodal `L_z φ = -i ∂_Θ φ`, realified as `(D b, -D a)`.
    pub fn lz_apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.grid.n_nodes();
        let da = self.dtheta.mul_vec(&x[..n]);
        let db = self.dtheta.mul_vec(&x[n..]);
        let mut out = db;
        out.extend(da.into_iter().map(|v| -v));
        out
    }

    /// Nodal `∂_Θ φ = i L_z φ`, realified as `(D a, D b)`.
    pub fn dtheta_apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.grid.n_nodes();
        let mut out = self.dtheta.mul_vec(&x[..n]);
        out.extend(self.dtheta.mul_vec(&x[n..]));
        out
    }

    /// `⟨φ, L_z φ⟩` (real).
    pub fn angular_momentum(&self, x: &[f64]) -> f64 {
        -self.rotation.quad_form(x)
    }
}

/// The four contributions inside `E = ½ (kinetic + potential + rotation + interaction)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyTerms {
    pub kinetic: f64,
    pub potential: f64,
    pub rotation: f64,
    pub interaction: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        0.5 * (self.kinetic + self.potential + self.rotation + self.interaction)
    }
}
