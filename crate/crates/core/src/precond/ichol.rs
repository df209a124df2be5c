//! Threshold incomplete Cholesky factorization (left-looking, CSC).

use crate::sparse::CsrMatrix;

/// Lower-triangular factor in compressed sparse column form with sorted row
/// indices; the diagonal entry leads every column.
#[derive(Debug, Clone)]
pub struct LowerFactor {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

/// The pivot of column `column` was not positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    pub column: usize,
    pub pivot: f64,
}

impl LowerFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.values[self.col_ptr[j]]).collect()
    }

    /// Solves `L y = b` in place.
    pub fn forward(&self, x: &mut [f64]) {
        for j in 0..self.n {
            let (lo, hi) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let xj = x[j] / self.values[lo];
            x[j] = xj;
            for p in lo + 1..hi {
                x[self.row_idx[p]] -= self.values[p] * xj;
            }
        }
    }

    /// Solves `Lᵀ y = b` in place.
    pub fn backward(&self, x: &mut [f64]) {
        for j in (0..self.n).rev() {
            let (lo, hi) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let mut acc = x[j];
            for p in lo + 1..hi {
                acc -= self.values[p] * x[self.row_idx[p]];
            }
            x[j] = acc / self.values[lo];
        }
    }

    /// Forward substitution for two right-hand sides sharing one pass over `L`.
    pub fn forward2(&self, x: &mut [f64], y: &mut [f64]) {
        for j in 0..self.n {
            let (lo, hi) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let d = self.values[lo];
            let (xj, yj) = (x[j] / d, y[j] / d);
            x[j] = xj;
            y[j] = yj;
            for p in lo + 1..hi {
                let (r, v) = (self.row_idx[p], self.values[p]);
                x[r] -= v * xj;
                y[r] -= v * yj;
            }
        }
    }

    pub fn backward2(&self, x: &mut [f64], y: &mut [f64]) {
        for j in (0..self.n).rev() {
            let (lo, hi) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let (mut ax, mut ay) = (x[j], y[j]);
            for p in lo + 1..hi {
                let (r, v) = (self.row_idx[p], self.values[p]);
                ax -= v * x[r];
                ay -= v * y[r];
            }
            let d = self.values[lo];
            x[j] = ax / d;
            y[j] = ay / d;
        }
    }

    /// `L Lᵀ x`.
    pub fn apply_llt(&self, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.n];
        for j in 0..self.n {
            let mut acc = 0.0;
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += self.values[p] * x[self.row_idx[p]];
            }
            t[j] = acc;
        }
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * t[j];
            }
        }
        y
    }

    /// Dense row-major `L` (small problems only).
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                d[self.row_idx[p] * self.n + j] = self.values[p];
            }
        }
        d
    }
}

/// Lower triangle of `A[perm][:, perm] + shift * diag(shift_diag[perm])`
/// as sorted CSC columns.
pub(crate) struct PermutedLower {
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

pub(crate) fn permuted_lower(a: &CsrMatrix, perm: &[usize], inv: &[usize]) -> PermutedLower {
    let n = a.nrows();
    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx = Vec::with_capacity(a.nnz() / 2 + n);
    let mut values = Vec::with_capacity(a.nnz() / 2 + n);
    let mut scratch: Vec<(usize, f64)> = Vec::new();
    col_ptr.push(0);
    for (j, &pj) in perm.iter().enumerate() {
        // Column j of the permuted matrix is row perm[j] of A by symmetry.
        scratch.clear();
        scratch.extend(a.row(pj).map(|(c, v)| (inv[c], v)).filter(|&(i, _)| i >= j));
        scratch.sort_unstable_by_key(|&(i, _)| i);
        if scratch.first().map(|&(i, _)| i) != Some(j) {
            scratch.insert(0, (j, 0.0));
        }
        for &(i, v) in &scratch {
            row_idx.push(i);
            values.push(v);
        }
        col_ptr.push(row_idx.len());
    }
    PermutedLower { col_ptr, row_idx, values }
}

/// Incomplete Cholesky with threshold dropping: a computed entry `L[i, j]`
/// (`i > j`) is discarded when `|L[i, j]| < drop_tol * ‖Ã[j.., j]‖₁`.
/// `diag_shift[j]` is added to the pivot before factorizing column `j`.
pub(crate) fn ict(a: &PermutedLower, diag_shift: &[f64], drop_tol: f64) -> Result<LowerFactor, Breakdown> {
    let n = a.col_ptr.len() - 1;
    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx: Vec<usize> = Vec::with_capacity(a.row_idx.len());
    let mut values: Vec<f64> = Vec::with_capacity(a.row_idx.len());
    col_ptr.push(0);

    // Row lists: columns k < j whose next unused entry sits in row `r`.
    const NIL: usize = usize::MAX;
    let mut head = vec![NIL; n];
    let mut next = vec![NIL; n];
    let mut first = vec![0usize; n];

    let mut acc = vec![0.0; n];
    let mut mark = vec![false; n];
    let mut pattern: Vec<usize> = Vec::new();

    for j in 0..n {
        pattern.clear();
        let mut col_norm = 0.0;
        for p in a.col_ptr[j]..a.col_ptr[j + 1] {
            let i = a.row_idx[p];
            acc[i] = a.values[p];
            col_norm += a.values[p].abs();
            mark[i] = true;
            pattern.push(i);
        }
        acc[j] += diag_shift[j];

        let mut k = head[j];
        while k != NIL {
            let next_k = next[k];
            let lo = first[k];
            let hi = col_ptr[k + 1];
            let ljk = values[lo];
            for p in lo..hi {
                let i = row_idx[p];
                if !mark[i] {
                    mark[i] = true;
                    acc[i] = 0.0;
                    pattern.push(i);
                }
                acc[i] -= values[p] * ljk;
            }
            first[k] = lo + 1;
            if lo + 1 < hi {
                let r = row_idx[lo + 1];
                next[k] = head[r];
                head[r] = k;
            }
            k = next_k;
        }

        let pivot = acc[j];
        if !(pivot > 0.0 && pivot.is_finite()) {
            return Err(Breakdown { column: j, pivot });
        }
        let d = pivot.sqrt();
        let threshold = drop_tol * col_norm;
        pattern.sort_unstable();
        debug_assert_eq!(pattern[0], j);
        row_idx.push(j);
        values.push(d);
        for &i in &pattern[1..] {
            let v = acc[i] / d;
            if drop_tol == 0.0 || v.abs() >= threshold {
                row_idx.push(i);
                values.push(v);
            }
        }
        for &i in &pattern {
            mark[i] = false;
            acc[i] = 0.0;
        }
        let start = col_ptr[j];
        col_ptr.push(row_idx.len());
        if start + 1 < row_idx.len() {
            first[j] = start + 1;
            let r = row_idx[start + 1];
            next[j] = head[r];
            head[r] = j;
        }
    }
    Ok(LowerFactor { n, col_ptr, row_idx, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precond::amd::natural_ordering;

    fn factor(a: &CsrMatrix, drop_tol: f64) -> Result<LowerFactor, Breakdown> {
        let n = a.nrows();
        let perm = natural_ordering(n);
        let lower = permuted_lower(a, &perm, &perm);
        ict(&lower, &vec![0.0; n], drop_tol)
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 4.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 3.0)]);
        let l = factor(&a, 0.0).unwrap();
        let d = l.to_dense();
        assert_eq!(d[0], 2.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 1.0);
        assert!((d[3] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn breakdown_is_reported() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        let err = factor(&a, 0.0).unwrap_err();
        assert_eq!(err.column, 1);
        assert!(err.pivot < 0.0);
    }

    #[test]
    fn exact_factor_of_tridiagonal_solves() {
        let n = 40;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &t);
        let l = factor(&a, 0.0).unwrap();
        assert_eq!(l.nnz(), 2 * n - 1);
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b = a.mul_vec(&x);
        l.forward(&mut b);
        l.backward(&mut b);
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-14);
        }
        let y = l.apply_llt(&x);
        let z = a.mul_vec(&x);
        for (u, v) in y.iter().zip(&z) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn two_rhs_solves_match_single() {
        let a = CsrMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 5.0), (1, 1, 6.0), (2, 2, 7.0), (0, 2, 1.0), (2, 0, 1.0), (1, 2, 2.0), (2, 1, 2.0)],
        );
        let l = factor(&a, 0.0).unwrap();
        let (mut x, mut y) = (vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.25]);
        let (mut x1, mut y1) = (x.clone(), y.clone());
        l.forward2(&mut x, &mut y);
        l.backward2(&mut x, &mut y);
        l.forward(&mut x1);
        l.backward(&mut x1);
        l.forward(&mut y1);
        l.backward(&mut y1);
        assert_eq!(x, x1);
        assert_eq!(y, y1);
    }

    #[test]
    fn dropping_reduces_fill() {
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 10.0));
            for k in [1, 7] {
                if i + k < n {
                    t.push((i, i + k, -1.0));
                    t.push((i + k, i, -1.0));
                }
            }
        }
        let a = CsrMatrix::from_triplets(n, n, &t);
        let exact = factor(&a, 0.0).unwrap();
        let inc = factor(&a, 1e-2).unwrap();
        assert!(inc.nnz() < exact.nnz());
        assert!(inc.diagonal().iter().all(|d| *d > 0.0));
    }
}
