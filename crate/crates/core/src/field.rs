//! Complex grid functions stored in realified blocked layout.

use std::sync::Arc;

use crate::grid::PolarGrid;

/// Tolerance on `|‖φ‖² - 1|` for the normalized marker.
pub const NORMALIZED_TOL: f64 = 1e-12;

/// A complex field on a [`PolarGrid`]: `values[..N]` are real parts,
/// `values[N..]` imaginary parts.
#[derive(Debug, Clone)]
pub struct ComplexField {
    grid: Arc<PolarGrid>,
    values: Vec<f64>,
    normalized: bool,
}

impl ComplexField {
    /// Panics when the length does not match the grid or an entry is not finite.
    pub fn from_values(grid: Arc<PolarGrid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.dim(), "field length does not match grid");
        assert!(values.iter().all(|v| v.is_finite()), "field has non-finite entries");
        let normalized = (mass_norm_sq(&grid, &values) - 1.0).abs() <= NORMALIZED_TOL;
        Self { grid, values, normalized }
    }

    /// Fallible variant of [`ComplexField::from_values`].
    pub fn try_from_values(grid: Arc<PolarGrid>, values: Vec<f64>) -> Option<Self> {
        if values.len() != grid.dim() || !values.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some(Self::from_values(grid, values))
    }

    pub fn from_parts(grid: Arc<PolarGrid>, re: &[f64], im: &[f64]) -> Self {
        let mut values = re.to_vec();
        values.extend_from_slice(im);
        Self::from_values(grid, values)
    }

    pub fn zeros(grid: Arc<PolarGrid>) -> Self {
        let dim = grid.dim();
        Self::from_values(grid, vec![0.0; dim])
    }

    pub fn grid(&self) -> &Arc<PolarGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn re(&self) -> &[f64] {
        &self.values[..self.grid.n_nodes()]
    }

    pub fn im(&self) -> &[f64] {
        &self.values[self.grid.n_nodes()..]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `‖φ‖²_{L²}` under the grid quadrature.
    pub fn mass_norm_sq(&self) -> f64 {
        mass_norm_sq(&self.grid, &self.values)
    }

    pub fn mass_norm(&self) -> f64 {
        self.mass_norm_sq().sqrt()
    }

    /// Returns `φ / ‖φ‖`, or `None` for a vanishing field.
    pub fn normalized(&self) -> Option<Self> {
        let nrm = self.mass_norm();
        if !(nrm > 0.0) {
            return None;
        }
        let values = self.values.iter().map(|v| v / nrm).collect();
        Some(Self::from_values(self.grid.clone(), values))
    }

    /// `e^{iα} φ`.
    pub fn phase_rotated(&self, alpha: f64) -> Self {
        Self::from_values(self.grid.clone(), phase_rotate(&self.values, alpha))
    }

    /// Rigid rotation by `k` angular cells.
    pub fn grid_rotated(&self, k: isize) -> Self {
        Self::from_values(self.grid.clone(), self.grid.rotate_realified(&self.values, k))
    }

    /// `i φ`.
    pub fn times_i(&self) -> Self {
        Self::from_values(self.grid.clone(), times_i(&self.values))
    }

    /// Pointwise density `|φ|²`.
    pub fn density(&self) -> Vec<f64> {
        density(&self.values)
    }
}

/// `Σ w |φ|²` for a realified vector.
pub fn mass_norm_sq(grid: &PolarGrid, x: &[f64]) -> f64 {
    l2_inner(grid, x, x)
}

/// Real `L²` inner product `Re ∫ u v̄` on realified vectors.
pub fn l2_inner(grid: &PolarGrid, u: &[f64], v: &[f64]) -> f64 {
    let n = grid.n_nodes();
    let nt = grid.ntheta();
    let mut total = 0.0;
    for i in 0..grid.nr() {
        let mut ring = 0.0;
        for p in i * nt..(i + 1) * nt {
            ring += u[p] * v[p] + u[n + p] * v[n + p];
        }
        total += grid.ring_weight(i) * ring;
    }
    total
}

pub fn phase_rotate(x: &[f64], alpha: f64) -> Vec<f64> {
    let n = x.len() / 2;
    let (s, c) = alpha.sin_cos();
    let mut out = vec![0.0; x.len()];
    for p in 0..n {
        out[p] = c * x[p] - s * x[n + p];
        out[n + p] = s * x[p] + c * x[n + p];
    }
    out
}

pub fn times_i(x: &[f64]) -> Vec<f64> {
    let n = x.len() / 2;
    let mut out = vec![0.0; x.len()];
    for p in 0..n {
        out[p] = -x[n + p];
        out[n + p] = x[p];
    }
    out
}

pub fn density(x: &[f64]) -> Vec<f64> {
    let n = x.len() / 2;
    (0..n).map(|p| x[p] * x[p] + x[n + p] * x[n + p]).collect()
}
