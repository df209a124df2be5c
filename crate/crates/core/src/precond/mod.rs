//! Metric operators `P_φ` and their incomplete Cholesky factorizations.
//!
//! [`FactorizedMetric::metric_inner`] uses the assembled matrix while
//! [`FactorizedMetric::apply_inverse`] uses the incomplete factor, so for a
//! positive drop tolerance the two are not exact inverses of each other.

pub mod amd;
pub mod ichol;

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::ComplexField;
use crate::model::ModelInstance;
use crate::sparse::{CsrMatrix, SparseSymOperator};

pub use self::amd::{amd_ordering, cholesky_fill, inverse_permutation, natural_ordering};
pub use self::ichol::{Breakdown, LowerFactor};

/// Number of shift doublings tried before giving up.
pub const MAX_SHIFT_DOUBLINGS: usize = 60;
/// Initial shift relative to the largest diagonal entry.
pub const INITIAL_SHIFT_FACTOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum PrecondError {
    #[error("invalid preconditioner spec: {0}")]
    InvalidSpec(String),
    #[error("assembled metric has non-finite entries")]
    NonFinite,
    #[error("factorization broke down after {attempts} shifted restarts (last pivot {pivot:e} at column {column})")]
    Breakdown { attempts: usize, column: usize, pivot: f64 },
    #[error("metric of kind {0:?} needs a normalized state")]
    NotNormalized(PrecondKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecondKind {
    IdentityMass,
    KineticPlusPotential,
    /// `E''(φ)`.
    Hessian,
    /// `E''(φ) - (λ̃_φ - σ₀) W`.
    OptimalShifted,
}

impl PrecondKind {
    pub fn depends_on_state(self) -> bool {
        matches!(self, PrecondKind::Hessian | PrecondKind::OptimalShifted)
    }

    pub fn name(self) -> &'static str {
        match self {
            PrecondKind::IdentityMass => "identity-mass",
            PrecondKind::KineticPlusPotential => "kinetic-plus-potential",
            PrecondKind::Hessian => "hessian",
            PrecondKind::OptimalShifted => "optimal-shifted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::IdentityMass, Self::KineticPlusPotential, Self::Hessian, Self::OptimalShifted]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    Amd,
    Natural,
}

impl Ordering {
    pub fn name(self) -> &'static str {
        match self {
            Ordering::Amd => "amd",
            Ordering::Natural => "natural",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "amd" => Some(Ordering::Amd),
            "natural" => Some(Ordering::Natural),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecondSpec {
    pub kind: PrecondKind,
    pub sigma0: f64,
    pub drop_tol: f64,
    pub ordering: Ordering,
    /// Iterations between rebuilds.
    pub refresh: usize,
}

impl PrecondSpec {
    pub fn new(kind: PrecondKind) -> Self {
        Self { kind, sigma0: 0.1, drop_tol: 1e-5, ordering: Ordering::Amd, refresh: 100 }
    }

    pub fn identity_mass() -> Self {
        Self::new(PrecondKind::IdentityMass)
    }

    pub fn with_sigma0(mut self, sigma0: f64) -> Self {
        self.sigma0 = sigma0;
        self
    }

    pub fn with_drop_tol(mut self, drop_tol: f64) -> Self {
        self.drop_tol = drop_tol;
        self
    }

    pub fn with_ordering(mut self, ordering: Ordering) -> Self {
        self.ordering = ordering;
        self
    }

    pub fn with_refresh(mut self, refresh: usize) -> Self {
        self.refresh = refresh;
        self
    }

    pub fn validate(&self) -> Result<(), PrecondError> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(PrecondError::InvalidSpec(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        if !(self.drop_tol >= 0.0 && self.drop_tol.is_finite()) {
            return Err(PrecondError::InvalidSpec(format!("drop_tol must be nonnegative, got {}", self.drop_tol)));
        }
        if self.refresh == 0 {
            return Err(PrecondError::InvalidSpec("refresh must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub kind: PrecondKind,
    pub ordering: Ordering,
    pub drop_tol: f64,
    pub dim: usize,
    /// Nonzeros of the lower triangle of the assembled matrix.
    pub matrix_lower_nnz: usize,
    pub factor_nnz: usize,
    pub fill_ratio: f64,
    /// Number of restarts with a diagonal shift.
    pub shift_count: usize,
    /// Coefficient `α` of the applied shift `α W` (0 when none was needed).
    pub shift: f64,
    pub build_ms: f64,
}

impl BuildStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

/// Caches fill-reducing orderings by sparsity pattern.
#[derive(Debug, Default, Clone)]
pub struct OrderingCache {
    entries: HashMap<(u64, Ordering), Arc<Vec<usize>>>,
}

impl OrderingCache {
    pub fn ordering(&mut self, pattern: &CsrMatrix, ordering: Ordering) -> Arc<Vec<usize>> {
        let key = (pattern_hash(pattern), ordering);
        self.entries
            .entry(key)
            .or_insert_with(|| {
                Arc::new(match ordering {
                    Ordering::Amd => amd_ordering(pattern),
                    Ordering::Natural => natural_ordering(pattern.nrows()),
                })
            })
            .clone()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn pattern_hash(m: &CsrMatrix) -> u64 {
    let mut h = DefaultHasher::new();
    m.nrows().hash(&mut h);
    m.row_ptr().hash(&mut h);
    m.col_idx().hash(&mut h);
    h.finish()
}

/// Bitwise fingerprint of a state, used to tag the metric's base point.
pub fn state_id(x: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in x {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// A symmetric positive-definite metric and its incomplete factor.
#[derive(Debug, Clone)]
pub struct FactorizedMetric {
    spec: PrecondSpec,
    matrix: SparseSymOperator,
    perm: Arc<Vec<usize>>,
    perm_inv: Vec<usize>,
    factor: LowerFactor,
    base_id: u64,
    stats: BuildStats,
}

/// Assembles the metric matrix of `spec.kind` at `phi`.
pub fn assemble_metric(model: &ModelInstance, phi: &ComplexField, spec: &PrecondSpec) -> Result<SparseSymOperator, PrecondError> {
    if spec.kind.depends_on_state() && !phi.is_normalized() {
        return Err(PrecondError::NotNormalized(spec.kind));
    }
    let x = phi.values();
    let m = match spec.kind {
        PrecondKind::IdentityMass => model.mass().clone(),
        PrecondKind::KineticPlusPotential => model.kinetic_potential().clone(),
        PrecondKind::Hessian => model.hessian_matrix(x),
        PrecondKind::OptimalShifted => {
            let lambda = model.evaluate(x).lambda_tilde;
            model.hessian_matrix(x).combine(1.0, model.mass(), -(lambda - spec.sigma0))
        }
    };
    Ok(m)
}

pub fn build_metric(model: &ModelInstance, phi: &ComplexField, spec: &PrecondSpec) -> Result<FactorizedMetric, PrecondError> {
    build_metric_cached(model, phi, spec, &mut OrderingCache::default())
}

pub fn build_metric_cached(
    model: &ModelInstance,
    phi: &ComplexField,
    spec: &PrecondSpec,
    cache: &mut OrderingCache,
) -> Result<FactorizedMetric, PrecondError> {
    spec.validate()?;
    let start = Instant::now();
    let matrix = assemble_metric(model, phi, spec)?;
    let mut metric = factorize(matrix, &model.weights(), spec, cache, start)?;
    metric.base_id = state_id(phi.values());
    Ok(metric)
}

/// Factorizes an already assembled SPD-intended matrix. `shift_diag` is the
/// diagonal used for breakdown shifts (the mass weights for grid metrics).
pub fn factorize(
    matrix: SparseSymOperator,
    shift_diag: &[f64],
    spec: &PrecondSpec,
    cache: &mut OrderingCache,
    start: Instant,
) -> Result<FactorizedMetric, PrecondError> {
    spec.validate()?;
    if !matrix.matrix().is_finite() {
        return Err(PrecondError::NonFinite);
    }
    let n = matrix.dim();
    assert_eq!(shift_diag.len(), n);
    let perm = cache.ordering(matrix.matrix(), spec.ordering);
    let perm_inv = inverse_permutation(&perm);
    let lower = ichol::permuted_lower(matrix.matrix(), &perm, &perm_inv);
    let permuted_shift: Vec<f64> = perm.iter().map(|&p| shift_diag[p]).collect();

    let max_diag = matrix.matrix().diagonal().iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    let mut alpha = 0.0;
    let mut shift_count = 0;
    let mut shift = vec![0.0; n];
    let factor = loop {
        match ichol::ict(&lower, &shift, spec.drop_tol) {
            Ok(f) => break f,
            Err(b) => {
                if shift_count == MAX_SHIFT_DOUBLINGS {
                    return Err(PrecondError::Breakdown { attempts: shift_count, column: b.column, pivot: b.pivot });
                }
                alpha = if alpha == 0.0 { INITIAL_SHIFT_FACTOR * max_diag.max(f64::MIN_POSITIVE) } else { 2.0 * alpha };
                shift_count += 1;
                for (s, w) in shift.iter_mut().zip(&permuted_shift) {
                    *s = alpha * w;
                }
            }
        }
    };
    let lower_nnz = lower.row_idx.len();
    let stats = BuildStats {
        kind: spec.kind,
        ordering: spec.ordering,
        drop_tol: spec.drop_tol,
        dim: n,
        matrix_lower_nnz: lower_nnz,
        factor_nnz: factor.nnz(),
        fill_ratio: factor.nnz() as f64 / lower_nnz as f64,
        shift_count,
        shift: alpha,
        build_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(FactorizedMetric { spec: *spec, matrix, perm, perm_inv, factor, base_id: 0, stats })
}

impl FactorizedMetric {
    pub fn spec(&self) -> &PrecondSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// The assembled (unshifted, unfactorized) metric matrix.
    pub fn matrix(&self) -> &SparseSymOperator {
        &self.matrix
    }

    pub fn factor(&self) -> &LowerFactor {
        &self.factor
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn shift(&self) -> f64 {
        self.stats.shift
    }

    pub fn base_id(&self) -> u64 {
        self.base_id
    }

    pub fn stats(&self) -> &BuildStats {
        &self.stats
    }

    /// Solves `(Πᵀ L Lᵀ Π) x = b`.
    pub fn apply_inverse(&self, b: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        self.factor.forward(&mut y);
        self.factor.backward(&mut y);
        self.unpermute(&y)
    }

    /// Two solves sharing each pass over the factor.
    pub fn apply_inverse2(&self, b1: &[f64], b2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut y1: Vec<f64> = self.perm.iter().map(|&p| b1[p]).collect();
        let mut y2: Vec<f64> = self.perm.iter().map(|&p| b2[p]).collect();
        self.factor.forward2(&mut y1, &mut y2);
        self.factor.backward2(&mut y1, &mut y2);
        (self.unpermute(&y1), self.unpermute(&y2))
    }

    fn unpermute(&self, y: &[f64]) -> Vec<f64> {
        (0..y.len()).map(|i| y[self.perm_inv[i]]).collect()
    }

    /// `(Πᵀ L Lᵀ Π) x`, the operator actually inverted by the solves.
    pub fn apply_factored(&self, x: &[f64]) -> Vec<f64> {
        let xp: Vec<f64> = self.perm.iter().map(|&p| x[p]).collect();
        self.unpermute(&self.factor.apply_llt(&xp))
    }

    /// `uᵀ P v` with the assembled matrix.
    pub fn metric_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.matrix.bilinear(u, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{PolarGrid, PotentialSpec};
    use crate::model::Nonlinearity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ModelInstance {
        let grid = Arc::new(PolarGrid::new(4.0, 8, 16).unwrap());
        ModelInstance::new(grid, PotentialSpec::Harmonic, 0.5, Nonlinearity::cubic(20.0), 0.2).unwrap()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn state(m: &ModelInstance) -> ComplexField {
        ComplexField::from_values(m.grid().clone(), random(m.dim(), 11)).normalized().unwrap()
    }

    #[test]
    fn identity_mass_inverts_weights() {
        let m = model();
        let phi = state(&m);
        let metric = build_metric(&m, &phi, &PrecondSpec::identity_mass()).unwrap();
        let w = m.weights();
        let v = random(m.dim(), 3);
        let b: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a * b).collect();
        let x = metric.apply_inverse(&b);
        for (a, b) in x.iter().zip(&v) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-300) * 4.0);
        }
        let d = metric.factor().diagonal();
        let pw: Vec<f64> = metric.permutation().iter().map(|&p| w[p].sqrt()).collect();
        for (a, b) in d.iter().zip(&pw) {
            assert!((a - b).abs() <= 1e-15 * b);
        }
        assert!(metric.apply_inverse(&vec![0.0; m.dim()]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exact_factor_roundtrip() {
        let m = model();
        let phi = state(&m);
        for kind in [PrecondKind::KineticPlusPotential, PrecondKind::Hessian] {
            for ordering in [Ordering::Amd, Ordering::Natural] {
                let spec = PrecondSpec::new(kind).with_drop_tol(0.0).with_ordering(ordering);
                let metric = build_metric(&m, &phi, &spec).unwrap();
                assert_eq!(metric.stats().shift_count, 0);
                let x = random(m.dim(), 5);
                let b = metric.matrix().apply(&x);
                let y = metric.apply_inverse(&b);
                let err = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-10, "{kind:?} {ordering:?} {err}");
            }
        }
    }

    #[test]
    fn factored_roundtrip_with_dropping() {
        let m = model();
        let phi = state(&m);
        let spec = PrecondSpec::new(PrecondKind::OptimalShifted).with_drop_tol(1e-3);
        let metric = build_metric(&m, &phi, &spec).unwrap();
        let x = random(m.dim(), 6);
        let y = metric.apply_inverse(&metric.apply_factored(&x));
        let rel = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            / x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(rel <= 1e-12, "{rel}");
        assert!(metric.factor().diagonal().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn indefinite_matrix_is_shifted() {
        let m = model();
        let phi = state(&m);
        // Away from a minimizer the shifted Hessian is indefinite.
        assert!(PrecondSpec::new(PrecondKind::OptimalShifted).with_sigma0(-1.0).validate().is_err());
        let spec = PrecondSpec::new(PrecondKind::OptimalShifted).with_sigma0(1e-12).with_drop_tol(0.0);
        let metric = build_metric(&m, &phi, &spec).unwrap();
        assert!(metric.stats().shift_count > 0);
        assert!(metric.shift() > 0.0);
    }

    #[test]
    fn metric_inner_is_symmetric() {
        let m = model();
        let phi = state(&m);
        let metric = build_metric(&m, &phi, &PrecondSpec::new(PrecondKind::KineticPlusPotential)).unwrap();
        let (u, v) = (random(m.dim(), 7), random(m.dim(), 8));
        let a = metric.metric_inner(&u, &v);
        let b = metric.metric_inner(&v, &u);
        assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        assert!(metric.metric_inner(&u, &u) > 0.0);
    }

    #[test]
    fn ordering_cache_reuses_patterns() {
        let m = model();
        let phi = state(&m);
        let mut cache = OrderingCache::default();
        let spec = PrecondSpec::new(PrecondKind::Hessian);
        build_metric_cached(&m, &phi, &spec, &mut cache).unwrap();
        build_metric_cached(&m, &phi, &spec.with_sigma0(0.5), &mut cache).unwrap();
        build_metric_cached(&m, &phi, &PrecondSpec::new(PrecondKind::OptimalShifted), &mut cache).unwrap();
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn state_dependent_kinds_need_normalized_state() {
        let m = model();
        let phi = ComplexField::from_values(m.grid().clone(), random(m.dim(), 9));
        let err = build_metric(&m, &phi, &PrecondSpec::new(PrecondKind::Hessian)).unwrap_err();
        assert_eq!(err, PrecondError::NotNormalized(PrecondKind::Hessian));
        assert!(build_metric(&m, &phi, &PrecondSpec::identity_mass()).is_ok());
    }

    #[test]
    fn stats_serialize() {
        let m = model();
        let phi = state(&m);
        let metric = build_metric(&m, &phi, &PrecondSpec::identity_mass()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&metric.stats().to_json()).unwrap();
        assert_eq!(v["kind"], "identity-mass");
        assert_eq!(v["fill_ratio"], 1.0);
    }
}
