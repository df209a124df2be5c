//! Rate constants of the preconditioned iteration at a ground state.
//!
//! `μ` and `L` are the extremal eigenvalues of the pencil
//! `(E''(φ_g) - λ̃ W, P)` on `{v : (φ_g, v) = 0, (v, kᵢ)_P = 0}`. `P` is the
//! operator the solver actually inverts, i.e. the factored metric `L Lᵀ`.

pub mod dense;
pub mod lobpcg;

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use faer::linalg::solvers::DenseSolveCore;

use crate::field::{l2_inner, times_i, ComplexField};
use crate::model::ModelInstance;
use crate::precond::{FactorizedMetric, Ordering, PrecondKind};
use crate::riemann::tangent_project_l2;
use crate::sparse::{axpy, dot};

use self::lobpcg::{lobpcg, LobpcgOptions};

/// Largest realified dimension handled by the dense path.
pub const DENSE_CAP: usize = 8192;
/// Kernel vectors whose `P`-norm falls below this after projection are dropped.
pub const KERNEL_DROP: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum SpectrumError {
    #[error("phase generator iφ degenerated (P-norm {0:e})")]
    DegenerateKernel(f64),
    #[error("metric is not positive definite on the constrained subspace")]
    MetricNotPositive,
    #[error("eigensolver failure: {0}")]
    EigenSolver(String),
    #[error("smallest constrained quotient {mu:e} is negative; the Morse–Bott structure does not hold at this state")]
    NegativeMu { mu: f64, l: f64 },
    #[error("dense path requested for dimension {dim} above the cap {cap}")]
    TooLarge { dim: usize, cap: usize },
}

/// `P`-orthonormal tangent basis of the symmetry directions.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    pub vectors: Vec<Vec<f64>>,
    /// Whether `i L_z φ` survived the degeneracy test.
    pub has_rotation: bool,
}

impl KernelBasis {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `P`-Gram matrix (row-major).
    pub fn gram(&self, metric: &FactorizedMetric) -> Vec<f64> {
        let k = self.len();
        let pv: Vec<Vec<f64>> = self.vectors.iter().map(|v| metric.apply_factored(v)).collect();
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] = dot(&self.vectors[i], &pv[j]);
            }
        }
        g
    }
}

/// `k₁ = iφ`, and `k₂ = i L_z φ = ∂_Θ φ` when `include_rotation`, projected
/// to the tangent space and orthonormalized in the factored metric.
pub fn kernel_basis(
    model: &ModelInstance,
    phi: &ComplexField,
    metric: &FactorizedMetric,
    include_rotation: bool,
) -> Result<KernelBasis, SpectrumError> {
    let mut raw = vec![times_i(phi.values())];
    if include_rotation {
        raw.push(model.dtheta_apply(phi.values()));
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut pbasis: Vec<Vec<f64>> = Vec::new();
    for (k, v) in raw.into_iter().enumerate() {
        let mut v = tangent_project_l2(phi, &v);
        for (b, pb) in basis.iter().zip(&pbasis) {
            let c = dot(&v, pb);
            axpy(-c, b, &mut v);
        }
        let pv = metric.apply_factored(&v);
        let nrm = dot(&v, &pv).max(0.0).sqrt();
        if nrm < KERNEL_DROP {
            if k == 0 {
                return Err(SpectrumError::DegenerateKernel(nrm));
            }
            continue;
        }
        basis.push(v.iter().map(|x| x / nrm).collect());
        pbasis.push(pv.iter().map(|x| x / nrm).collect());
    }
    let has_rotation = basis.len() == 2;
    Ok(KernelBasis { vectors: basis, has_rotation })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverChoice {
    /// Dense when `2N ≤ dense_cap`, iterative otherwise.
    Auto,
    Dense,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    pub solver: SolverChoice,
    pub dense_cap: usize,
    /// Relative residual tolerance of the iterative path.
    pub tol: f64,
    /// Stagnation window and relative tolerance for the largest
    /// eigenvalue, which sits in a tight cluster for good metrics.
    pub stall_window: usize,
    pub stall_tol: f64,
    pub max_iters: usize,
    pub block: usize,
    /// Number of lowest tangent-only eigenvalues inspected by the
    /// Morse–Bott check.
    pub q: usize,
    /// Zero-mode threshold relative to `L`.
    pub theta_factor: f64,
    pub seed: u64,
    /// Also compute `L` without kernel deflation.
    pub undeflated: bool,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            solver: SolverChoice::Auto,
            dense_cap: DENSE_CAP,
            tol: 1e-9,
            stall_window: 100,
            stall_tol: 1e-9,
            max_iters: 20000,
            block: 4,
            q: 6,
            theta_factor: 1e-6,
            seed: 0,
            undeflated: true,
        }
    }
}

impl SpectrumOptions {
    fn use_dense(&self, dim: usize) -> Result<bool, SpectrumError> {
        match self.solver {
            SolverChoice::Auto => Ok(dim <= self.dense_cap),
            SolverChoice::Dense if dim > self.dense_cap => Err(SpectrumError::TooLarge { dim, cap: self.dense_cap }),
            SolverChoice::Dense => Ok(true),
            SolverChoice::Iterative => Ok(false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverUsed {
    Dense,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricInfo {
    pub kind: PrecondKind,
    pub ordering: Ordering,
    pub drop_tol: f64,
    pub sigma0: f64,
    pub factor_nnz: usize,
    pub shift: f64,
}

impl MetricInfo {
    pub fn of(metric: &FactorizedMetric) -> Self {
        let s = metric.spec();
        Self {
            kind: s.kind,
            ordering: s.ordering,
            drop_tol: s.drop_tol,
            sigma0: s.sigma0,
            factor_nnz: metric.stats().factor_nnz,
            shift: metric.shift(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub mu: f64,
    pub l: f64,
    pub kappa: f64,
    /// `L` computed with only the tangency constraint.
    pub l_undeflated: Option<f64>,
    pub tau_opt: f64,
    pub rho_opt: f64,
    /// `ρ_τ` at `τ = 1`.
    pub rho_1: f64,
    pub solver: SolverUsed,
    pub deflation_dim: usize,
    pub lambda_tilde: Option<f64>,
    /// `|λ̃ - λ_P|` at the state.
    pub lambda_discrepancy: Option<f64>,
    pub residual_inf: Option<f64>,
    pub metric: MetricInfo,
    /// Set when the state was not certified as converged.
    pub unreliable: bool,
}

/// `max(|1 - τ μ|, |1 - τ L|)`.
pub fn rho_tau(mu: f64, l: f64, tau: f64) -> f64 {
    (1.0 - tau * mu).abs().max((1.0 - tau * l).abs())
}

/// `2 / (L + μ)`.
pub fn tau_opt(mu: f64, l: f64) -> f64 {
    2.0 / (l + mu)
}

impl RateConstants {
    pub fn from_mu_l(mu: f64, l: f64) -> Self {
        Self {
            mu,
            l,
            kappa: l / mu,
            l_undeflated: None,
            tau_opt: tau_opt(mu, l),
            rho_opt: (l - mu) / (l + mu),
            rho_1: rho_tau(mu, l, 1.0),
            solver: SolverUsed::Dense,
            deflation_dim: 0,
            lambda_tilde: None,
            lambda_discrepancy: None,
            residual_inf: None,
            metric: MetricInfo {
                kind: PrecondKind::OptimalShifted,
                ordering: Ordering::Amd,
                drop_tol: 0.0,
                sigma0: 0.0,
                factor_nnz: 0,
                shift: 0.0,
            },
            unreliable: false,
        }
    }

    pub fn rho_tau(&self, tau: f64) -> f64 {
        rho_tau(self.mu, self.l, tau)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("constants serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Spectral data of the pencil at one state.
struct Pencil<'a> {
    model: &'a ModelInstance,
    phi: &'a ComplexField,
    metric: &'a FactorizedMetric,
    lambda: f64,
    weights: Vec<f64>,
}

impl<'a> Pencil<'a> {
    fn new(model: &'a ModelInstance, phi: &'a ComplexField, metric: &'a FactorizedMetric) -> Self {
        let lambda = model.evaluate(phi.values()).lambda_tilde;
        Self { model, phi, metric, lambda, weights: model.weights() }
    }

    fn a(&self, v: &[f64]) -> Vec<f64> {
        let mut y = self.model.hessian_apply_values(self.phi.values(), v);
        for ((yi, vi), wi) in y.iter_mut().zip(v).zip(&self.weights) {
            *yi -= self.lambda * wi * vi;
        }
        y
    }

    fn p(&self, v: &[f64]) -> Vec<f64> {
        self.metric.apply_factored(v)
    }

    /// Dual constraint vectors: `W φ` and, when deflating, `P kᵢ`.
    fn constraints(&self, kernel: Option<&KernelBasis>) -> Vec<Vec<f64>> {
        let mut c = vec![self.phi.values().iter().zip(&self.weights).map(|(x, w)| x * w).collect::<Vec<f64>>()];
        if let Some(k) = kernel {
            c.extend(k.vectors.iter().map(|v| self.p(v)));
        }
        c
    }

    fn dense_eigenvalues(&self, kernel: Option<&KernelBasis>) -> Result<Vec<f64>, SpectrumError> {
        let n = self.model.dim();
        let mut a = self.model.hessian_matrix(self.phi.values()).matrix().to_dense_row_major();
        for i in 0..n {
            a[i * n + i] -= self.lambda * self.weights[i];
        }
        let a = dense::to_mat(n, &a);
        let p = dense_factored(self.metric);
        dense::constrained_eigenvalues(a, p, &self.constraints(kernel))
    }

    /// `P`-orthogonal projector onto `{v : Cᵀ v = 0}`.
    fn projector(&self, kernel: Option<&KernelBasis>) -> Projector {
        let c = self.constraints(kernel);
        let y: Vec<Vec<f64>> = c.iter().map(|ci| self.metric.apply_inverse(ci)).collect();
        let m = c.len();
        let g = faer::Mat::from_fn(m, m, |i, j| 0.5 * (dot(&c[i], &y[j]) + dot(&c[j], &y[i])));
        let ginv = g.llt(faer::Side::Lower).map(|l| l.inverse()).expect("constraint Gram matrix is SPD");
        Projector { c, y, ginv }
    }

    fn iterative(&self, kernel: Option<&KernelBasis>, largest: bool, nev: usize, opts: &SpectrumOptions, scale: Option<f64>) -> lobpcg::LobpcgResult {
        let proj = self.projector(kernel);
        let block = opts.block.max(nev + 2);
        let x0 = start_block(self.phi, block, opts.seed);
        let a = |v: &[f64]| self.a(v);
        let p = |v: &[f64]| self.p(v);
        let t = |v: &[f64]| self.metric.apply_inverse(v);
        let pr = |v: &[f64]| proj.apply(v);
        let (stall_window, stall_tol) = if largest { (opts.stall_window, opts.stall_tol) } else { (0, 0.0) };
        let lo = LobpcgOptions { block, max_iters: opts.max_iters, tol: opts.tol, scale, largest, stall_window, stall_tol };
        lobpcg(x0, &a, &p, &t, &pr, nev, &lo)
    }
}

struct Projector {
    c: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    ginv: faer::Mat<f64>,
}

impl Projector {
    /// `v - Y G⁻¹ Cᵀ v`.
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let m = self.c.len();
        let ct: Vec<f64> = self.c.iter().map(|c| dot(c, v)).collect();
        let mut out = v.to_vec();
        for i in 0..m {
            let coef: f64 = (0..m).map(|j| self.ginv[(i, j)] * ct[j]).sum();
            axpy(-coef, &self.y[i], &mut out);
        }
        out
    }
}

fn start_block(phi: &ComplexField, block: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let amp: Vec<f64> = phi.values().iter().map(|v| v.abs()).collect();
    (0..block)
        .map(|_| amp.iter().map(|a| (a + 1e-3) * rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Dense `Πᵀ L Lᵀ Π` of a factored metric.
pub fn dense_factored(metric: &FactorizedMetric) -> faer::Mat<f64> {
    let n = metric.dim();
    let f = metric.factor();
    let mut l = faer::Mat::<f64>::zeros(n, n);
    for j in 0..n {
        for p in f.col_ptr()[j]..f.col_ptr()[j + 1] {
            l[(f.row_idx()[p], j)] = f.values()[p];
        }
    }
    let llt = &l * l.transpose();
    drop(l);
    let inv = crate::precond::inverse_permutation(metric.permutation());
    faer::Mat::from_fn(n, n, |i, j| llt[(inv[i], inv[j])])
}

/// Eigenvalues of the deflated pencil, ascending (dense path only).
pub fn constrained_spectrum(
    model: &ModelInstance,
    phi: &ComplexField,
    metric: &FactorizedMetric,
    kernel: Option<&KernelBasis>,
) -> Result<Vec<f64>, SpectrumError> {
    Pencil::new(model, phi, metric).dense_eigenvalues(kernel)
}

/// Reported by [`rate_constants`] so callers can inspect the eigenvectors.
#[derive(Debug, Clone)]
pub struct IterativeDetail {
    pub mu_vector: Vec<f64>,
    pub l_vector: Vec<f64>,
    pub iterations: (usize, usize, usize),
    pub converged: bool,
}

pub fn rate_constants(
    model: &ModelInstance,
    phi: &ComplexField,
    metric: &FactorizedMetric,
    kernel: &KernelBasis,
    opts: &SpectrumOptions,
) -> Result<RateConstants, SpectrumError> {
    rate_constants_detailed(model, phi, metric, kernel, opts).map(|(c, _)| c)
}

pub fn rate_constants_detailed(
    model: &ModelInstance,
    phi: &ComplexField,
    metric: &FactorizedMetric,
    kernel: &KernelBasis,
    opts: &SpectrumOptions,
) -> Result<(RateConstants, Option<IterativeDetail>), SpectrumError> {
    let pencil = Pencil::new(model, phi, metric);
    let ev = model.evaluate(phi.values());
    let (mu, l, l_und, solver, detail) = if opts.use_dense(model.dim())? {
        let defl = pencil.dense_eigenvalues(Some(kernel))?;
        let l_und = if opts.undeflated { Some(*pencil.dense_eigenvalues(None)?.last().unwrap()) } else { None };
        (defl[0], *defl.last().unwrap(), l_und, SolverUsed::Dense, None)
    } else {
        let hi = pencil.iterative(Some(kernel), true, 1, opts, None);
        let hi_und = opts.undeflated.then(|| pencil.iterative(None, true, 1, opts, None));
        let lo = pencil.iterative(Some(kernel), false, 1, opts, Some(hi.values[0].abs()));
        let und_ok = hi_und.as_ref().is_none_or(|h| h.converged || h.stalled);
        let detail = IterativeDetail {
            mu_vector: lo.vectors[0].clone(),
            l_vector: hi.vectors[0].clone(),
            iterations: (lo.iterations, hi.iterations, hi_und.as_ref().map_or(0, |h| h.iterations)),
            converged: lo.converged && (hi.converged || hi.stalled) && und_ok,
        };
        if !detail.converged {
            return Err(SpectrumError::EigenSolver(format!("LOBPCG did not converge within {} iterations", opts.max_iters)));
        }
        (lo.values[0], hi.values[0], hi_und.map(|h| h.values[0]), SolverUsed::Iterative, Some(detail))
    };
    if mu < -1e-8 {
        return Err(SpectrumError::NegativeMu { mu, l });
    }
    let lambda_p = {
        let w = model.weights();
        let wphi: Vec<f64> = phi.values().iter().zip(&w).map(|(x, w)| x * w).collect();
        let (u, v) = metric.apply_inverse2(&ev.grad, &wphi);
        dot(&wphi, &u) / dot(&wphi, &v)
    };
    let mut c = RateConstants::from_mu_l(mu, l);
    c.l_undeflated = l_und;
    c.solver = solver;
    c.deflation_dim = kernel.len();
    c.lambda_tilde = Some(ev.lambda_tilde);
    c.lambda_discrepancy = Some((ev.lambda_tilde - lambda_p).abs());
    c.residual_inf = Some(ev.residual_inf);
    c.metric = MetricInfo::of(metric);
    Ok((c, detail))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorseBottReport {
    /// Lowest tangent-only eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    pub l: f64,
    pub threshold: f64,
    pub near_zero: usize,
    pub kernel_dim: usize,
    /// First eigenvalue above the near-zero cluster.
    pub next: Option<f64>,
    pub consistent: bool,
    /// Rayleigh quotient of `k₁ = iφ` in the pencil.
    pub phase_mode_quotient: f64,
    pub residual_inf: f64,
    pub unreliable: bool,
}

impl MorseBottReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }
}

/// Counts the tangent-only eigenvalues below `θ₀ = theta_factor · L`.
/// `l` defaults to the largest tangent-only eigenvalue.
pub fn morse_bott_check(
    model: &ModelInstance,
    phi: &ComplexField,
    metric: &FactorizedMetric,
    kernel: &KernelBasis,
    opts: &SpectrumOptions,
) -> MorseBottReport {
    let pencil = Pencil::new(model, phi, metric);
    let q = opts.q.max(kernel.len() + 1);
    let ev = model.evaluate(phi.values());
    let (eigenvalues, l) = match opts.use_dense(model.dim()) {
        Ok(true) => match pencil.dense_eigenvalues(None) {
            Ok(all) => (all.iter().take(q).copied().collect(), *all.last().unwrap()),
            Err(_) => (Vec::new(), f64::NAN),
        },
        _ => {
            let hi = pencil.iterative(None, true, 1, opts, None);
            let lo = pencil.iterative(None, false, q, opts, Some(hi.values[0].abs()));
            (lo.values, hi.values[0])
        }
    };
    let threshold = opts.theta_factor * l;
    let near_zero = eigenvalues.iter().filter(|&&e| e < threshold).count();
    let next = eigenvalues.get(near_zero).copied();
    let consistent = near_zero == kernel.len() && next.is_some_and(|e| e > 10.0 * threshold);
    let k1 = tangent_project_l2(phi, &times_i(phi.values()));
    let phase_mode_quotient = dot(&k1, &pencil.a(&k1)) / l2_inner(model.grid(), &k1, &k1);
    MorseBottReport {
        eigenvalues,
        l,
        threshold,
        near_zero,
        kernel_dim: kernel.len(),
        next,
        consistent,
        phase_mode_quotient,
        residual_inf: ev.residual_inf,
        unreliable: false,
    }
}

/// Eigenvalue list as CSV `index,value`.
pub fn write_eigenvalues_csv<W: Write>(values: &[f64], mut out: W) -> io::Result<()> {
    writeln!(out, "index,value")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{i},{v:.17e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rates() {
        let c = RateConstants::from_mu_l(6.41e-4, 1.25622795);
        assert!((c.rho_tau(1.0) - 0.999359).abs() < 5e-7);
        assert!((c.tau_opt - 1.5912558).abs() < 5e-8);
        assert!((c.rho_opt - 0.998980).abs() < 5e-7);
        // The tabulated κ carries more digits of μ than the tabulated μ.
        for (l, kappa, mu, rho1) in [(1.25622795, 1960.58, 6.41e-4, 0.999359), (1.64263642, 36584.33, 4.49e-5, 0.999955)] {
            let c = RateConstants::from_mu_l(l / kappa, l);
            assert!((c.mu - mu).abs() < 0.005 * mu);
            assert!((c.kappa - kappa).abs() < 1e-9 * kappa);
            assert!((c.rho_1 - rho1).abs() < 5e-7);
        }
    }

    #[test]
    fn degenerate_equal_constants() {
        let c = RateConstants::from_mu_l(2.0, 2.0);
        assert_eq!(c.rho_tau(0.5), 0.0);
        assert_eq!(c.tau_opt, 0.5);
        assert_eq!(c.rho_opt, 0.0);
    }

    #[test]
    fn json_roundtrip() {
        let c = RateConstants::from_mu_l(0.25, 1.5);
        let back = RateConstants::from_json(&c.to_json()).unwrap();
        assert_eq!(back.mu, c.mu);
        assert_eq!(back.l, c.l);
        assert_eq!(back, c);
    }
}
