//! Compressed sparse row storage and the symmetric operator wrapper used for
//! every realified bilinear form (kinetic, rotation, mass, Hessian, metric).

use std::io::{self, Write};

use rayon::prelude::*;

/// Rows per rayon task in parallel mat-vec. Below this the product runs
/// serially.
const PAR_ROW_CHUNK: usize = 4096;

/// Plain CSR matrix. Column indices within each row are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from coordinate triplets. Duplicates are summed in
    /// insertion order; explicit zeros are kept as structural entries.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        // Stable bucket by row keeps insertion order for duplicate summation.
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let p = next[r];
            cols[p] = c;
            vals[p] = v;
            next[r] += 1;
        }

        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for r in 0..nrows {
            let (lo, hi) = (counts[r], counts[r + 1]);
            order.clear();
            order.extend(lo..hi);
            order.sort_by_key(|&p| cols[p]);
            let mut last: Option<usize> = None;
            for &p in &order {
                if last == Some(cols[p]) {
                    *values.last_mut().unwrap() += vals[p];
                } else {
                    col_idx.push(cols[p]);
                    values.push(vals[p]);
                    last = Some(cols[p]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn identity_scaled(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: diag.to_vec(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi].iter().copied().zip(self.values[lo..hi].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(p) => self.values[lo + p],
            Err(_) => 0.0,
        }
    }

    /// Storage slot of entry `(i, j)` if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi].binary_search(&j).ok().map(|p| lo + p)
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `y = A x`. Each row is reduced left to right in column order, so the
    /// result is bitwise identical regardless of the thread count.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        let row = |(i, yi): (usize, &mut f64)| {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[p] * x[self.col_idx[p]];
            }
            *yi = acc;
        };
        if self.nrows >= 2 * PAR_ROW_CHUNK && rayon::current_num_threads() > 1 {
            y.par_iter_mut().enumerate().with_min_len(PAR_ROW_CHUNK).for_each(row);
        } else {
            y.iter_mut().enumerate().for_each(row);
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nrows);
        let mut total = 0.0;
        for (i, xi) in x.iter().enumerate() {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[p] * y[self.col_idx[p]];
            }
            total += xi * acc;
        }
        total
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut triplets = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                triplets.push((j, i, v));
            }
        }
        Self::from_triplets(self.ncols, self.nrows, &triplets)
    }

    /// `max |A - Aᵀ|` over all stored entries of either matrix.
    pub fn symmetry_defect(&self) -> f64 {
        self.transpose_defect(1.0)
    }

    /// `max |A + Aᵀ|`, zero for an exactly antisymmetric matrix.
    pub fn antisymmetry_defect(&self) -> f64 {
        self.transpose_defect(-1.0)
    }

    fn transpose_defect(&self, sign: f64) -> f64 {
        let t = self.transpose();
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - sign * t.get(i, j)).abs());
            }
            for (j, v) in t.row(i) {
                worst = worst.max((self.get(i, j) - sign * v).abs());
            }
        }
        worst
    }

    /// `alpha * self + beta * other` on the union pattern.
    pub fn add(&self, alpha: f64, other: &CsrMatrix, beta: f64) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.nrows {
            triplets.extend(self.row(i).map(|(j, v)| (i, j, alpha * v)));
            triplets.extend(other.row(i).map(|(j, v)| (i, j, beta * v)));
        }
        Self::from_triplets(self.nrows, self.ncols, &triplets)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_dense_row_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows * self.ncols];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                out[i * self.ncols + j] = v;
            }
        }
        out
    }

    /// Debug dump: one `row,col,value` line per stored entry.
    pub fn write_coo<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "row,col,value")?;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                writeln!(out, "{i},{j},{v:.17e}")?;
            }
        }
        Ok(())
    }
}

/// Accumulates entries of a symmetric matrix so that `A[i][j]` and `A[j][i]`
/// are produced from the same floating-point sum, making the assembled
/// matrix exactly equal to its transpose.
#[derive(Debug, Default)]
pub struct SymmetricBuilder {
    dim: usize,
    lower: Vec<(usize, usize, f64)>,
}

impl SymmetricBuilder {
    pub fn new(dim: usize) -> Self {
        Self { dim, lower: Vec::new() }
    }

    /// Adds `v` to entry `(i, j)` and to its mirror `(j, i)`. For `i == j`
    /// the diagonal receives `v` once.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        self.lower.push((r, c, v));
    }

    pub fn build(self) -> CsrMatrix {
        let lower = CsrMatrix::from_triplets(self.dim, self.dim, &self.lower);
        let mut full = Vec::with_capacity(2 * lower.nnz());
        for i in 0..self.dim {
            for (j, v) in lower.row(i) {
                full.push((i, j, v));
                if i != j {
                    full.push((j, i, v));
                }
            }
        }
        CsrMatrix::from_triplets(self.dim, self.dim, &full)
    }
}

/// A real symmetric matrix on realified coordinates. The full pattern is
/// stored (both triangles), which keeps mat-vec a single pass.
#[derive(Debug, Clone)]
pub struct SparseSymOperator {
    matrix: CsrMatrix,
    /// Advisory only; set by constructors that know the operator is SPD.
    positive_definite: bool,
}

impl SparseSymOperator {
    /// Wraps a matrix that must already be exactly symmetric.
    pub fn new(matrix: CsrMatrix, positive_definite: bool) -> Self {
        assert_eq!(matrix.nrows(), matrix.ncols());
        debug_assert_eq!(matrix.symmetry_defect(), 0.0, "operator is not symmetric");
        Self { matrix, positive_definite }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn is_symmetric(&self) -> bool {
        true
    }

    pub fn is_positive_definite(&self) -> bool {
        self.positive_definite
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(x)
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.mul_vec_into(x, y)
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.matrix.bilinear(x, x)
    }

    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.matrix.bilinear(x, y)
    }

    /// `alpha * self + beta * other`; symmetry is preserved exactly because
    /// mirrored entries see identical operands.
    pub fn combine(&self, alpha: f64, other: &SparseSymOperator, beta: f64) -> Self {
        Self {
            matrix: self.matrix.add(alpha, &other.matrix, beta),
            positive_definite: false,
        }
    }

    /// Caller must keep the matrix symmetric.
    pub(crate) fn matrix_mut(&mut self) -> &mut CsrMatrix {
        &mut self.matrix
    }

    pub fn with_positive_definite(mut self, flag: bool) -> Self {
        self.positive_definite = flag;
        self
    }
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}
