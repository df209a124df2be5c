//! Dense constrained generalized eigensolver for small problems.

use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{get_global_parallelism, Mat, Side};

use super::SpectrumError;

/// Row-major dense symmetric matrix helper.
pub(crate) fn to_mat(n: usize, data: &[f64]) -> Mat<f64> {
    Mat::from_fn(n, n, |i, j| data[i * n + j])
}

/// Applies the Householder reflector that maps `c[k..]` to a multiple of
/// `e_k` to both sides of `a` and `p` and to the columns `k..` of `cons`.
fn reflect(a: &mut Mat<f64>, p: &mut Mat<f64>, cons: &mut [Vec<f64>], k: usize) {
    let n = a.nrows();
    let x = &cons[k];
    let norm = x[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let alpha = if x[k] >= 0.0 { -norm } else { norm };
    let mut v = vec![0.0; n];
    v[k..].copy_from_slice(&x[k..]);
    v[k] -= alpha;
    let vv: f64 = v[k..].iter().map(|t| t * t).sum();
    if vv == 0.0 {
        return;
    }
    let beta = 2.0 / vv;
    for c in cons.iter_mut().skip(k) {
        let s = beta * (k..n).map(|i| v[i] * c[i]).sum::<f64>();
        for i in k..n {
            c[i] -= s * v[i];
        }
    }
    for m in [a, p] {
        // H M H with H = I - β v vᵀ as a symmetric rank-2 update.
        let mut pv = vec![0.0; n];
        for j in k..n {
            let vj = v[j];
            if vj != 0.0 {
                let col = m.col(j);
                for i in 0..n {
                    pv[i] += col[i] * vj;
                }
            }
        }
        pv.iter_mut().for_each(|t| *t *= beta);
        let kk = 0.5 * beta * (k..n).map(|i| v[i] * pv[i]).sum::<f64>();
        let w: Vec<f64> = (0..n).map(|i| pv[i] - kk * v[i]).collect();
        for j in 0..n {
            let (vj, wj) = (v[j], w[j]);
            let mut col = m.col_mut(j);
            for i in 0..n {
                col[i] -= v[i] * wj + w[i] * vj;
            }
        }
    }
}

/// All eigenvalues (ascending) of `A x = λ P x` restricted to
/// `{x : cᵢᵀ x = 0}`. `a` and `p` are dense symmetric, `p` positive definite
/// on the constrained subspace.
pub fn constrained_eigenvalues(a: Mat<f64>, p: Mat<f64>, constraints: &[Vec<f64>]) -> Result<Vec<f64>, SpectrumError> {
    let n = a.nrows();
    let m = constraints.len();
    let mut a = a;
    let mut p = p;
    let mut cons = constraints.to_vec();
    for k in 0..m {
        reflect(&mut a, &mut p, &mut cons, k);
    }
    let d = n - m;
    let at = Mat::from_fn(d, d, |i, j| 0.5 * (a[(m + i, m + j)] + a[(m + j, m + i)]));
    let pt = Mat::from_fn(d, d, |i, j| 0.5 * (p[(m + i, m + j)] + p[(m + j, m + i)]));
    drop(a);
    drop(p);
    let llt = pt.llt(Side::Lower).map_err(|_| SpectrumError::MetricNotPositive)?;
    let g = llt.L();
    let par = get_global_parallelism();
    let mut x = at;
    solve_lower_triangular_in_place(g, x.as_mut(), par);
    let mut y = x.transpose().to_owned();
    drop(x);
    solve_lower_triangular_in_place(g, y.as_mut(), par);
    let c = Mat::from_fn(d, d, |i, j| 0.5 * (y[(i, j)] + y[(j, i)]));
    drop(y);
    c.self_adjoint_eigenvalues(Side::Lower).map_err(|_| SpectrumError::EigenSolver("dense eigensolver did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pencil_with_coordinate_constraint() {
        // A = diag(1,2,3,4), P = diag(1,1,2,2); constraint removes e_2.
        let a = Mat::from_fn(4, 4, |i, j| if i == j { (i + 1) as f64 } else { 0.0 });
        let p = Mat::from_fn(4, 4, |i, j| if i == j { if i < 2 { 1.0 } else { 2.0 } } else { 0.0 });
        let ev = constrained_eigenvalues(a, p, &[vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(ev.len(), 3);
        for (x, y) in ev.iter().zip([1.0, 1.5, 2.0]) {
            assert!((x - y).abs() < 1e-14, "{ev:?}");
        }
    }

    #[test]
    fn oblique_constraint_matches_explicit_basis() {
        // Constraint x0 + x1 = 0 leaves span{(1,-1,0), (0,0,1)}.
        let a = Mat::from_fn(3, 3, |i, j| [[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]][i][j]);
        let p = Mat::<f64>::identity(3, 3);
        let ev = constrained_eigenvalues(a, p, &[vec![1.0, 1.0, 0.0]]).unwrap();
        // Reduced A in the orthonormal basis: [[1.5, -1/√2], [-1/√2, 4]].
        let (t, det): (f64, f64) = (5.5, 1.5 * 4.0 - 0.5);
        let disc = (t * t / 4.0 - det).sqrt();
        assert!((ev[0] - (t / 2.0 - disc)).abs() < 1e-14);
        assert!((ev[1] - (t / 2.0 + disc)).abs() < 1e-14);
    }
}
