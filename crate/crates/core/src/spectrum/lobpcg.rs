//! Locally optimal block preconditioned conjugate gradient eigensolver for
//! `A x = θ P x` on the range of a `P`-orthogonal projector.

use faer::{Mat, Side};

use crate::sparse::dot;

pub type Operator<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LobpcgOptions {
    pub block: usize,
    pub max_iters: usize,
    /// Converged when `‖A x - θ P x‖_{P⁻¹} ≤ tol · scale`.
    pub tol: f64,
    /// Residual scale; the largest `|θ|` in the block when `None`.
    pub scale: Option<f64>,
    /// Seek the largest eigenvalues instead of the smallest.
    pub largest: bool,
    /// Also stop once no wanted Ritz value moved by more than
    /// `stall_tol · |θ|` over the last `stall_window` iterations (0 disables).
    pub stall_window: usize,
    pub stall_tol: f64,
}

impl Default for LobpcgOptions {
    fn default() -> Self {
        Self { block: 4, max_iters: 5000, tol: 1e-10, scale: None, largest: false, stall_window: 0, stall_tol: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LobpcgResult {
    /// Ritz values sorted toward the target end (ascending for smallest,
    /// descending for largest).
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Residual criterion met.
    pub converged: bool,
    /// Stopped by the stagnation criterion.
    pub stalled: bool,
}

struct Block {
    x: Vec<Vec<f64>>,
    ax: Vec<Vec<f64>>,
    px: Vec<Vec<f64>>,
}

fn combine(cols: &[&Vec<f64>], coef: &Mat<f64>, j: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, c) in cols.iter().enumerate() {
        let s = coef[(i, j)];
        if s != 0.0 {
            out.iter_mut().zip(c.iter()).for_each(|(o, v)| *o += s * v);
        }
    }
    out
}

/// Rayleigh–Ritz on the span of `s` (with precomputed `A s`, `P s`): returns
/// the coefficient matrix of the lowest `k` Ritz vectors and their values.
/// Directions whose Gram eigenvalue falls below `1e-13` of the largest are
/// discarded.
fn rayleigh_ritz(s: &[&Vec<f64>], as_: &[&Vec<f64>], ps: &[&Vec<f64>], k: usize) -> Option<(Mat<f64>, Vec<f64>)> {
    let m = s.len();
    let mut g = Mat::<f64>::zeros(m, m);
    let mut h = Mat::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let gij = 0.5 * (dot(s[i], ps[j]) + dot(s[j], ps[i]));
            let hij = 0.5 * (dot(s[i], as_[j]) + dot(s[j], as_[i]));
            g[(i, j)] = gij;
            g[(j, i)] = gij;
            h[(i, j)] = hij;
            h[(j, i)] = hij;
        }
    }
    // Jacobi scaling before the Gram eigendecomposition.
    let d: Vec<f64> = (0..m).map(|i| 1.0 / g[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let gs = Mat::from_fn(m, m, |i, j| g[(i, j)] * d[i] * d[j]);
    let eg = gs.self_adjoint_eigen(Side::Lower).ok()?;
    let gmax = (0..m).map(|i| eg.S()[i]).fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..m).filter(|&i| eg.S()[i] > 1e-13 * gmax).collect();
    if keep.len() < k {
        return None;
    }
    let r = keep.len();
    // Z = D U_k Λ_k^{-1/2}
    let z = Mat::from_fn(m, r, |i, c| d[i] * eg.U()[(i, keep[c])] / eg.S()[keep[c]].sqrt());
    let hr = z.transpose() * &h * &z;
    let hr = Mat::from_fn(r, r, |i, j| 0.5 * (hr[(i, j)] + hr[(j, i)]));
    let eh = hr.self_adjoint_eigen(Side::Lower).ok()?;
    let coef = &z * eh.U().get(.., 0..k);
    let vals = (0..k).map(|i| eh.S()[i]).collect();
    Some((coef, vals))
}

/// `x0` supplies the initial block (at least `opts.block` vectors).
/// `project` must map into the constrained subspace and be `P`-orthogonal;
/// `t` is the preconditioner.
#[allow(clippy::too_many_arguments)]
pub fn lobpcg(
    x0: Vec<Vec<f64>>,
    a_op: Operator<'_>,
    p_op: Operator<'_>,
    t_op: Operator<'_>,
    project: Operator<'_>,
    nev: usize,
    opts: &LobpcgOptions,
) -> LobpcgResult {
    let b = opts.block.max(nev);
    assert!(x0.len() >= b, "initial block too small");
    let n = x0[0].len();
    let sign = if opts.largest { -1.0 } else { 1.0 };
    let a = |v: &[f64]| -> Vec<f64> {
        let mut y = a_op(v);
        if sign < 0.0 {
            y.iter_mut().for_each(|t| *t = -*t);
        }
        y
    };

    let mut blk = {
        let x: Vec<Vec<f64>> = x0.into_iter().take(b).map(|v| project(&v)).collect();
        let ax: Vec<Vec<f64>> = x.iter().map(|v| a(v)).collect();
        let px: Vec<Vec<f64>> = x.iter().map(|v| p_op(v)).collect();
        Block { x, ax, px }
    };
    let mut theta;
    {
        let s: Vec<&Vec<f64>> = blk.x.iter().collect();
        let sa: Vec<&Vec<f64>> = blk.ax.iter().collect();
        let sp: Vec<&Vec<f64>> = blk.px.iter().collect();
        let (coef, vals) = rayleigh_ritz(&s, &sa, &sp, b).expect("initial block is linearly independent");
        blk = Block {
            x: (0..b).map(|j| combine(&s, &coef, j, n)).collect(),
            ax: (0..b).map(|j| combine(&sa, &coef, j, n)).collect(),
            px: (0..b).map(|j| combine(&sp, &coef, j, n)).collect(),
        };
        theta = vals;
    }

    let mut dirs: Option<Block> = None;
    let mut residuals = vec![f64::INFINITY; b];
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;
    let mut history: std::collections::VecDeque<Vec<f64>> = std::collections::VecDeque::new();
    for it in 0..opts.max_iters {
        iterations = it + 1;
        let scale = opts.scale.unwrap_or_else(|| theta.iter().fold(0.0_f64, |m, t| m.max(t.abs())));
        let mut w = Vec::new();
        let mut active = Vec::new();
        for j in 0..b {
            let r: Vec<f64> = blk.ax[j].iter().zip(&blk.px[j]).map(|(a, p)| a - theta[j] * p).collect();
            // Norm of the projected preconditioned residual; the components
            // along the constraints are multipliers, not errors.
            let wj = project(&t_op(&r));
            residuals[j] = dot(&r, &wj).max(0.0).sqrt();
            if residuals[j] > opts.tol * scale {
                active.push(j);
                w.push(wj);
            }
        }
        if active.iter().all(|&j| j >= nev) {
            converged = true;
            break;
        }
        if opts.stall_window > 0 {
            history.push_back(theta[..nev].to_vec());
            if history.len() > opts.stall_window {
                let old = history.pop_front().unwrap();
                if old.iter().zip(&theta).all(|(o, t)| (o - t).abs() <= opts.stall_tol * t.abs()) {
                    stalled = true;
                    break;
                }
            }
        }
        let aw: Vec<Vec<f64>> = w.iter().map(|v| a(v)).collect();
        let pw: Vec<Vec<f64>> = w.iter().map(|v| p_op(v)).collect();
        // Normalize new directions in the P-norm.
        let mut wb = Block { x: w, ax: aw, px: pw };
        for k in 0..wb.x.len() {
            let nrm = dot(&wb.x[k], &wb.px[k]).max(0.0).sqrt();
            if nrm > 0.0 {
                for v in [&mut wb.x[k], &mut wb.ax[k], &mut wb.px[k]] {
                    v.iter_mut().for_each(|t| *t /= nrm);
                }
            }
        }
        let mut s: Vec<&Vec<f64>> = blk.x.iter().chain(wb.x.iter()).collect();
        let mut sa: Vec<&Vec<f64>> = blk.ax.iter().chain(wb.ax.iter()).collect();
        let mut sp: Vec<&Vec<f64>> = blk.px.iter().chain(wb.px.iter()).collect();
        if let Some(d) = &dirs {
            s.extend(d.x.iter());
            sa.extend(d.ax.iter());
            sp.extend(d.px.iter());
        }
        let rr = rayleigh_ritz(&s, &sa, &sp, b).or_else(|| {
            // Restart without the previous directions.
            let k = b + wb.x.len();
            rayleigh_ritz(&s[..k], &sa[..k], &sp[..k], b)
        });
        let Some((coef, vals)) = rr else { break };
        let used = coef.nrows();
        let new_x: Vec<Vec<f64>> = (0..b).map(|j| combine(&s[..used], &coef, j, n)).collect();
        let new_ax: Vec<Vec<f64>> = (0..b).map(|j| combine(&sa[..used], &coef, j, n)).collect();
        let new_px: Vec<Vec<f64>> = (0..b).map(|j| combine(&sp[..used], &coef, j, n)).collect();
        // Conjugate directions: the non-X part of the update.
        let mut tail = coef.clone();
        for i in 0..b {
            for j in 0..b {
                tail[(i, j)] = 0.0;
            }
        }
        let mut d = Block {
            x: (0..b).map(|j| combine(&s[..used], &tail, j, n)).collect(),
            ax: (0..b).map(|j| combine(&sa[..used], &tail, j, n)).collect(),
            px: (0..b).map(|j| combine(&sp[..used], &tail, j, n)).collect(),
        };
        for k in 0..b {
            let nrm = dot(&d.x[k], &d.px[k]).max(0.0).sqrt();
            if nrm > 0.0 {
                for v in [&mut d.x[k], &mut d.ax[k], &mut d.px[k]] {
                    v.iter_mut().for_each(|t| *t /= nrm);
                }
            }
        }
        blk = Block { x: new_x, ax: new_ax, px: new_px };
        theta = vals;
        dirs = Some(d);
        if (it + 1) % 20 == 0 {
            // Refresh the recurrences to limit drift.
            blk.x = blk.x.iter().map(|v| project(v)).collect();
            blk.ax = blk.x.iter().map(|v| a(v)).collect();
            blk.px = blk.x.iter().map(|v| p_op(v)).collect();
            let s: Vec<&Vec<f64>> = blk.x.iter().collect();
            let sa: Vec<&Vec<f64>> = blk.ax.iter().collect();
            let sp: Vec<&Vec<f64>> = blk.px.iter().collect();
            if let Some((coef, vals)) = rayleigh_ritz(&s, &sa, &sp, b) {
                blk = Block {
                    x: (0..b).map(|j| combine(&s, &coef, j, n)).collect(),
                    ax: (0..b).map(|j| combine(&sa, &coef, j, n)).collect(),
                    px: (0..b).map(|j| combine(&sp, &coef, j, n)).collect(),
                };
                theta = vals;
            }
        }
    }
    LobpcgResult {
        values: theta.iter().take(nev).map(|t| sign * t).collect(),
        vectors: blk.x.into_iter().take(nev).collect(),
        residuals: residuals.into_iter().take(nev).collect(),
        iterations,
        converged,
        stalled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pencil_extremes() {
        let n = 200;
        let diag: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let pd: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i * 7) % 5) as f64).collect();
        let a = |v: &[f64]| v.iter().zip(&diag).map(|(x, d)| x * d).collect::<Vec<_>>();
        let p = |v: &[f64]| v.iter().zip(&pd).map(|(x, d)| x * d).collect::<Vec<_>>();
        let t = |v: &[f64]| v.iter().zip(&pd).map(|(x, d)| x / d).collect::<Vec<_>>();
        let id = |v: &[f64]| v.to_vec();
        let mut exact: Vec<f64> = diag.iter().zip(&pd).map(|(a, b)| a / b).collect();
        exact.sort_by(f64::total_cmp);
        let x0: Vec<Vec<f64>> = (0..4).map(|k| (0..n).map(|i| ((i * (k + 3)) as f64).sin() + 0.1).collect()).collect();
        let opts = LobpcgOptions { block: 4, max_iters: 2000, tol: 1e-10, ..Default::default() };
        let lo = lobpcg(x0.clone(), &a, &p, &t, &id, 1, &opts);
        assert!(lo.converged);
        assert!((lo.values[0] - exact[0]).abs() < 1e-9 * exact[0], "{:?} vs {}", lo.values, exact[0]);
        let hi = lobpcg(x0, &a, &p, &t, &id, 1, &LobpcgOptions { largest: true, ..opts });
        assert!(hi.converged);
        assert!((hi.values[0] - exact[n - 1]).abs() < 1e-9 * exact[n - 1]);
    }
}
