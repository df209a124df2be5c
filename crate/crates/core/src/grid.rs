//! Polar mesh on the disk and assembly of the discrete operators.
//!
//! Nodes sit at half-integer radii `r_{i+1/2} = (i + 1/2) h_r` and equispaced
//! angles `Θ_j = j h_Θ`. Node `(i, j)` has flat index `i * ntheta + j`.
//! Complex fields are realified in blocked layout: the first `N` coordinates
//! hold real parts, the next `N` imaginary parts, with `N = nr * ntheta`.
//!
//! All operators absorb the quadrature weights `w_i = r_{i+1/2} h_r h_Θ`, so
//! every bilinear form is a plain dot product against a symmetric matrix.
//! The radial direction uses the second-order conservative flux form (zero
//! flux through `r = 0`, homogeneous Dirichlet wall at `r = R`); the angular
//! direction uses periodic eighth-order central differences.

use std::f64::consts::PI;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::{CsrMatrix, SparseSymOperator, SymmetricBuilder};

/// Eighth-order central first derivative: `u'_j ≈ Σ_k c_k (u_{j+k} - u_{j-k}) / h`
/// for `k = 1..=4`.
pub const D1_COEFFS: [f64; 4] = [4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0];

/// Eighth-order central second derivative:
/// `u''_j ≈ (c_0 u_j + Σ_k c_k (u_{j+k} + u_{j-k})) / h²` for `k = 1..=4`.
pub const D2_CENTER: f64 = -205.0 / 72.0;
pub const D2_COEFFS: [f64; 4] = [8.0 / 5.0, -1.0 / 5.0, 8.0 / 315.0, -1.0 / 560.0];

/// Half-width of the angular stencils.
pub const ANGULAR_HALF_WIDTH: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("radius must be positive and finite, got {0}")]
    Radius(f64),
    #[error("nr must be at least 4, got {0}")]
    RadialCount(usize),
    #[error("ntheta must be even and at least 16, got {0}")]
    AngularCount(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarGrid {
    radius: f64,
    nr: usize,
    ntheta: usize,
    hr: f64,
    htheta: f64,
    r_nodes: Vec<f64>,
    /// One weight per ring; every node of ring `i` carries `ring_weights[i]`.
    ring_weights: Vec<f64>,
}

impl PolarGrid {
    pub fn new(radius: f64, nr: usize, ntheta: usize) -> Result<Self, GridError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GridError::Radius(radius));
        }
        if nr < 4 {
            return Err(GridError::RadialCount(nr));
        }
        if ntheta < 16 || ntheta % 2 != 0 {
            return Err(GridError::AngularCount(ntheta));
        }
        let hr = radius / nr as f64;
        let htheta = 2.0 * PI / ntheta as f64;
        let r_nodes: Vec<f64> = (0..nr).map(|i| (i as f64 + 0.5) * hr).collect();
        let ring_weights = r_nodes.iter().map(|r| r * hr * htheta).collect();
        Ok(Self { radius, nr, ntheta, hr, htheta, r_nodes, ring_weights })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn nr(&self) -> usize {
        self.nr
    }

    pub fn ntheta(&self) -> usize {
        self.ntheta
    }

    pub fn hr(&self) -> f64 {
        self.hr
    }

    pub fn htheta(&self) -> f64 {
        self.htheta
    }

    pub fn r_nodes(&self) -> &[f64] {
        &self.r_nodes
    }

    pub fn theta(&self, j: usize) -> f64 {
        j as f64 * self.htheta
    }

    /// Number of nodes `N`.
    pub fn n_nodes(&self) -> usize {
        self.nr * self.ntheta
    }

    /// Realified dimension `2N`.
    pub fn dim(&self) -> usize {
        2 * self.n_nodes()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ntheta + j
    }

    /// Flat index of node `(i, j + offset)` with periodic wrap in Θ.
    pub fn shifted_index(&self, i: usize, j: usize, offset: isize) -> usize {
        let nt = self.ntheta as isize;
        let jj = (j as isize + offset).rem_euclid(nt) as usize;
        i * self.ntheta + jj
    }

    pub fn ring_weight(&self, i: usize) -> f64 {
        self.ring_weights[i]
    }

    /// Per-node quadrature weights (length `N`).
    pub fn weights(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.n_nodes());
        for &wi in &self.ring_weights {
            w.extend(std::iter::repeat(wi).take(self.ntheta));
        }
        w
    }

    /// Quadrature weights repeated on both realified components (length `2N`).
    pub fn realified_weights(&self) -> Vec<f64> {
        let w = self.weights();
        let mut out = w.clone();
        out.extend_from_slice(&w);
        out
    }

    /// Cartesian coordinates of node `(i, j)`.
    pub fn xy(&self, i: usize, j: usize) -> (f64, f64) {
        let (s, c) = self.theta(j).sin_cos();
        (self.r_nodes[i] * c, self.r_nodes[i] * s)
    }

    /// Samples `f(r, Θ)` at every node in flat order.
    pub fn sample(&self, mut f: impl FnMut(f64, f64) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_nodes());
        for i in 0..self.nr {
            for j in 0..self.ntheta {
                out.push(f(self.r_nodes[i], self.theta(j)));
            }
        }
        out
    }

    /// Rotates a nodal array by `k` angular cells: `out[i, j] = v[i, j - k]`.
    pub fn rotate_nodal(&self, v: &[f64], k: isize) -> Vec<f64> {
        assert_eq!(v.len(), self.n_nodes());
        let mut out = vec![0.0; v.len()];
        for i in 0..self.nr {
            for j in 0..self.ntheta {
                out[self.shifted_index(i, j, k)] = v[self.index(i, j)];
            }
        }
        out
    }

    /// Rotates a realified field by `k` angular cells (both components).
    pub fn rotate_realified(&self, x: &[f64], k: isize) -> Vec<f64> {
        let n = self.n_nodes();
        assert_eq!(x.len(), 2 * n);
        let mut out = self.rotate_nodal(&x[..n], k);
        out.extend(self.rotate_nodal(&x[n..], k));
        out
    }
}

/// Realified mass matrix: the quadrature weights on both components.
pub fn assemble_mass(grid: &PolarGrid) -> SparseSymOperator {
    SparseSymOperator::new(CsrMatrix::identity_scaled(&grid.realified_weights()), true)
}

/// Nodal (`N x N`) matrix of the form `u ↦ ½∫|∇u|²` with weights absorbed.
pub fn kinetic_block(grid: &PolarGrid) -> CsrMatrix {
    let n = grid.n_nodes();
    let (hr, ht) = (grid.hr(), grid.htheta());
    let mut b = SymmetricBuilder::new(n);

    // Radial fluxes through the interior interfaces r = (i+1) h_r.
    for i in 0..grid.nr() - 1 {
        let r_face = (i + 1) as f64 * hr;
        let e = 0.5 * r_face * ht / hr;
        for j in 0..grid.ntheta() {
            let p = grid.index(i, j);
            let q = grid.index(i + 1, j);
            b.add(p, p, e);
            b.add(q, q, e);
            b.add(q, p, -e);
        }
    }
    // Wall at r = R sits half a cell from the outermost ring.
    let wall = grid.radius() * ht / hr;
    for j in 0..grid.ntheta() {
        let p = grid.index(grid.nr() - 1, j);
        b.add(p, p, wall);
    }

    // Angular part: -½ w/r² ∂²_Θ.
    for i in 0..grid.nr() {
        let r = grid.r_nodes()[i];
        let scale = -0.5 * grid.ring_weight(i) / (r * r * ht * ht);
        for j in 0..grid.ntheta() {
            let p = grid.index(i, j);
            b.add(p, p, scale * D2_CENTER);
            for (k, c) in D2_COEFFS.iter().enumerate() {
                // Each unordered pair (j, j+k+1) is visited once from its left end.
                let q = grid.shifted_index(i, j, k as isize + 1);
                b.add(q, p, scale * c);
            }
        }
    }
    b.build()
}

/// Realified kinetic operator: identical blocks on the real and imaginary parts.
pub fn assemble_kinetic(grid: &PolarGrid) -> SparseSymOperator {
    SparseSymOperator::new(block_diag2(&kinetic_block(grid)), true)
}

/// Periodic eighth-order antisymmetric first difference in Θ (`N x N`,
/// unweighted). `D[p, p+k] = c_k / h_Θ`, `D[p, p-k] = -c_k / h_Θ`.
pub fn assemble_dtheta(grid: &PolarGrid) -> CsrMatrix {
    let ht = grid.htheta();
    let mut t = Vec::with_capacity(grid.n_nodes() * 2 * ANGULAR_HALF_WIDTH);
    for i in 0..grid.nr() {
        for j in 0..grid.ntheta() {
            let p = grid.index(i, j);
            for (k, c) in D1_COEFFS.iter().enumerate() {
                let off = k as isize + 1;
                let v = c / ht;
                t.push((p, grid.shifted_index(i, j, off), v));
                t.push((p, grid.shifted_index(i, j, -off), -v));
            }
        }
    }
    CsrMatrix::from_triplets(grid.n_nodes(), grid.n_nodes(), &t)
}

/// Realified weighted rotation block `[[0, -W D], [W D, 0]]`, the matrix of
/// the form `x ↦ -⟨φ, L_z φ⟩` with `L_z = -i ∂_Θ`. Multiply by `Ω` for the
/// rotating-frame term.
pub fn assemble_rotation(grid: &PolarGrid, dtheta: &CsrMatrix) -> SparseSymOperator {
    let n = grid.n_nodes();
    let mut t = Vec::with_capacity(2 * dtheta.nnz());
    for p in 0..n {
        let w = grid.ring_weight(p / grid.ntheta());
        for (q, d) in dtheta.row(p) {
            let wd = w * d;
            // (W D)[p, q] goes to block (im, re); its negation to (re, im).
            t.push((n + p, q, wd));
            t.push((q, n + p, wd));
        }
    }
    let m = CsrMatrix::from_triplets(2 * n, 2 * n, &t);
    SparseSymOperator::new(m, false)
}

/// `[[B, 0], [0, B]]`.
pub fn block_diag2(block: &CsrMatrix) -> CsrMatrix {
    let n = block.nrows();
    let mut t = Vec::with_capacity(2 * block.nnz());
    for i in 0..n {
        for (j, v) in block.row(i) {
            t.push((i, j, v));
            t.push((n + i, n + j, v));
        }
    }
    CsrMatrix::from_triplets(2 * n, 2 * n, &t)
}

/// Trapping potential description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PotentialSpec {
    /// `V(x) = |x|² / 2`.
    Harmonic,
    /// Radial table `(r, V)` with strictly increasing `r`, linearly
    /// interpolated and held constant outside the table.
    RadialTable(Vec<(f64, f64)>),
    Zero,
}

impl PotentialSpec {
    pub fn is_radial(&self) -> bool {
        true
    }

    pub fn eval_radial(&self, r: f64) -> f64 {
        match self {
            PotentialSpec::Harmonic => 0.5 * r * r,
            PotentialSpec::Zero => 0.0,
            PotentialSpec::RadialTable(table) => interpolate(table, r),
        }
    }
}

fn interpolate(table: &[(f64, f64)], r: f64) -> f64 {
    match table {
        [] => 0.0,
        [(_, v)] => *v,
        _ => {
            if r <= table[0].0 {
                return table[0].1;
            }
            let last = table[table.len() - 1];
            if r >= last.0 {
                return last.1;
            }
            let k = table.partition_point(|(x, _)| *x <= r);
            let (r0, v0) = table[k - 1];
            let (r1, v1) = table[k];
            v0 + (v1 - v0) * (r - r0) / (r1 - r0)
        }
    }
}

/// Potential samples plus the outcome of the trap-dominance check
/// `V - (1+K)/2 Ω² r² ≥ 0` on every node.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPotential {
    pub values: Vec<f64>,
    pub dominance_ok: bool,
    /// Smallest value of `V - (1+K)/2 Ω² r²` over the nodes.
    pub dominance_margin: f64,
}

pub fn sample_potential(grid: &PolarGrid, spec: &PotentialSpec, omega: f64, k_dominance: f64) -> SampledPotential {
    let values = grid.sample(|r, _| spec.eval_radial(r));
    let coef = 0.5 * (1.0 + k_dominance) * omega * omega;
    let mut margin = f64::INFINITY;
    for i in 0..grid.nr() {
        let r = grid.r_nodes()[i];
        for j in 0..grid.ntheta() {
            margin = margin.min(values[grid.index(i, j)] - coef * r * r);
        }
    }
    SampledPotential { values, dominance_ok: margin >= 0.0, dominance_margin: margin }
}

/// Writes a realified field as CSV `i,j,r,theta,re,im`, row-major with the
/// radial index outermost.
pub fn write_field_csv<W: Write>(grid: &PolarGrid, values: &[f64], mut out: W) -> io::Result<()> {
    let n = grid.n_nodes();
    assert_eq!(values.len(), 2 * n);
    writeln!(out, "i,j,r,theta,re,im")?;
    for i in 0..grid.nr() {
        for j in 0..grid.ntheta() {
            let p = grid.index(i, j);
            writeln!(
                out,
                "{i},{j},{:.17e},{:.17e},{:.17e},{:.17e}",
                grid.r_nodes()[i],
                grid.theta(j),
                values[p],
                values[n + p]
            )?;
        }
    }
    Ok(())
}

/// Parses the CSV written by [`write_field_csv`]. Rows may appear in any
/// order but every node must be present exactly once.
pub fn read_field_csv(grid: &PolarGrid, text: &str) -> Result<Vec<f64>, String> {
    let n = grid.n_nodes();
    let mut values = vec![f64::NAN; 2 * n];
    let mut seen = vec![false; n];
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "i,j,r,theta,re,im" => {}
        other => return Err(format!("unexpected field header {other:?}")),
    }
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(format!("line {}: expected 6 columns", lineno + 2));
        }
        let parse_idx = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("line {}: {e}", lineno + 2));
        let parse_f = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("line {}: {e}", lineno + 2));
        let (i, j) = (parse_idx(cols[0])?, parse_idx(cols[1])?);
        if i >= grid.nr() || j >= grid.ntheta() {
            return Err(format!("line {}: node ({i},{j}) outside grid", lineno + 2));
        }
        let p = grid.index(i, j);
        if seen[p] {
            return Err(format!("line {}: duplicate node ({i},{j})", lineno + 2));
        }
        seen[p] = true;
        values[p] = parse_f(cols[4])?;
        values[n + p] = parse_f(cols[5])?;
    }
    if seen.iter().any(|s| !s) {
        return Err("field file does not cover every grid node".into());
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PolarGrid {
        PolarGrid::new(1.0, 4, 16).unwrap()
    }

    #[test]
    fn half_integer_nodes() {
        let g = small();
        assert_eq!(g.r_nodes(), &[0.125, 0.375, 0.625, 0.875]);
        assert_eq!(g.hr(), 0.25);
        assert!(g.r_nodes().iter().all(|&r| r > 0.0 && r < g.radius()));
    }

    #[test]
    fn weights_sum_to_disk_area() {
        let g = small();
        let total: f64 = g.weights().iter().sum();
        assert!((total - PI).abs() < 1e-14, "{total}");
        let g = PolarGrid::new(3.5, 17, 40).unwrap();
        let total: f64 = g.weights().iter().sum();
        assert!((total - PI * 3.5 * 3.5).abs() < 1e-12);
    }

    #[test]
    fn fig1_mesh_sizes() {
        let g = PolarGrid::new(12.0, 256, 1024).unwrap();
        assert_eq!(g.hr(), 12.0 / 256.0);
        assert_eq!(g.htheta(), 2.0 * PI / 1024.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(PolarGrid::new(1.0, 4, 17), Err(GridError::AngularCount(17)));
        assert_eq!(PolarGrid::new(1.0, 4, 14), Err(GridError::AngularCount(14)));
        assert_eq!(PolarGrid::new(0.0, 4, 16), Err(GridError::Radius(0.0)));
        assert_eq!(PolarGrid::new(-1.0, 4, 16), Err(GridError::Radius(-1.0)));
        assert_eq!(PolarGrid::new(1.0, 3, 16), Err(GridError::RadialCount(3)));
    }

    #[test]
    fn kinetic_is_symmetric_and_positive_on_constants() {
        let g = small();
        let k = assemble_kinetic(&g);
        assert_eq!(k.matrix().symmetry_defect(), 0.0);
        let ones = vec![1.0; g.dim()];
        assert!(k.quad_form(&ones) > 0.0);
    }

    #[test]
    fn dtheta_antisymmetric_and_kills_constants() {
        let g = small();
        let d = assemble_dtheta(&g);
        assert_eq!(d.antisymmetry_defect(), 0.0);
        let y = d.mul_vec(&vec![1.0; g.n_nodes()]);
        assert!(y.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn rotation_block_is_symmetric() {
        let g = small();
        let r = assemble_rotation(&g, &assemble_dtheta(&g));
        assert_eq!(r.matrix().symmetry_defect(), 0.0);
    }

    #[test]
    fn mass_of_unit_field_is_area() {
        let g = small();
        let m = assemble_mass(&g);
        let mut one = vec![1.0; g.n_nodes()];
        one.extend(vec![0.0; g.n_nodes()]);
        assert!((m.quad_form(&one) - PI).abs() < 1e-14);
        assert!(m.matrix().diagonal().iter().all(|&w| w > 0.0));
    }

    #[test]
    fn mass_norm_is_phase_invariant() {
        let g = small();
        let m = assemble_mass(&g);
        let n = g.n_nodes();
        let x: Vec<f64> = (0..2 * n).map(|k| ((k * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let alpha: f64 = 0.7;
        let (s, c) = alpha.sin_cos();
        let mut y = vec![0.0; 2 * n];
        for p in 0..n {
            y[p] = c * x[p] - s * x[n + p];
            y[n + p] = s * x[p] + c * x[n + p];
        }
        assert!((m.quad_form(&x) - m.quad_form(&y)).abs() < 1e-13);
    }

    #[test]
    fn harmonic_potential_samples() {
        let g = PolarGrid::new(4.0, 4, 16).unwrap();
        // r nodes are 0.5, 1.5, 2.5, 3.5
        let v = sample_potential(&g, &PotentialSpec::Harmonic, 0.0, 0.2);
        assert_eq!(v.values[g.index(1, 3)], 0.5 * 1.5 * 1.5);
        assert_eq!(PotentialSpec::Harmonic.eval_radial(2.0), 2.0);
    }

    #[test]
    fn dominance_check() {
        let g = PolarGrid::new(12.0, 32, 16).unwrap();
        // 1/2 >= (1.2/2) * 0.81 = 0.486 at every radius
        let v = sample_potential(&g, &PotentialSpec::Harmonic, 0.9, 0.2);
        assert!(v.dominance_ok);
        let v = sample_potential(&g, &PotentialSpec::Harmonic, 0.99, 0.2);
        assert!(!v.dominance_ok);
        let z = sample_potential(&g, &PotentialSpec::Zero, 0.0, 0.2);
        assert!(z.values.iter().all(|&x| x == 0.0));
        assert!(z.dominance_ok);
    }

    #[test]
    fn radial_table_interpolates() {
        let spec = PotentialSpec::RadialTable(vec![(0.0, 0.0), (1.0, 2.0), (2.0, 2.0)]);
        assert_eq!(spec.eval_radial(0.5), 1.0);
        assert_eq!(spec.eval_radial(3.0), 2.0);
    }

    #[test]
    fn field_csv_roundtrip() {
        let g = small();
        let x: Vec<f64> = (0..g.dim()).map(|k| (k as f64).sin()).collect();
        let mut buf = Vec::new();
        write_field_csv(&g, &x, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("i,j,r,theta,re,im\n0,0,"));
        let back = read_field_csv(&g, &text).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn rotation_commutes_with_operators() {
        let g = PolarGrid::new(2.0, 6, 24).unwrap();
        let k = assemble_kinetic(&g);
        let d = assemble_dtheta(&g);
        let x: Vec<f64> = (0..g.dim()).map(|k| ((k * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        for shift in [1isize, 5, -3] {
            let lhs = g.rotate_realified(&k.apply(&x), shift);
            let rhs = k.apply(&g.rotate_realified(&x, shift));
            let err = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-13, "{err}");
            let xn = &x[..g.n_nodes()];
            let lhs = g.rotate_nodal(&d.mul_vec(xn), shift);
            let rhs = d.mul_vec(&g.rotate_nodal(xn, shift));
            let err = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-13, "{err}");
        }
    }
}
