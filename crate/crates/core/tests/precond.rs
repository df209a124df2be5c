mod common;

use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::small_vortex;
use gprg_core::field::times_i;
use gprg_core::precond::{build_metric, factorize, OrderingCache};
use gprg_core::riemann::initial_guess;
use gprg_core::{ComplexField, CsrMatrix, InitialGuess, Ordering, PrecondKind, PrecondSpec, SparseSymOperator};

fn random_spd(n: usize, seed: u64) -> CsrMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Vec::new();
    let mut row_sum = vec![0.0; n];
    for i in 0..n {
        for _ in 0..3 {
            let j = rng.random_range(0..n);
            if j != i {
                let v: f64 = rng.random_range(-1.0..1.0);
                t.push((i, j, v));
                t.push((j, i, v));
                row_sum[i] += v.abs();
                row_sum[j] += v.abs();
            }
        }
    }
    for (i, s) in row_sum.iter().enumerate() {
        t.push((i, i, s + rng.random_range(0.1..1.0)));
    }
    CsrMatrix::from_triplets(n, n, &t)
}

fn to_dense(m: &CsrMatrix) -> Mat<f64> {
    let mut d = Mat::<f64>::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for (j, v) in m.row(i) {
            d[(i, j)] = v;
        }
    }
    d
}

#[test]
fn exact_factor_solves_like_a_dense_solver() {
    let n = 50;
    let a = random_spd(n, 5);
    let dense = to_dense(&a);
    let llt = dense.llt(Side::Lower).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for ordering in [Ordering::Amd, Ordering::Natural] {
        let spec = PrecondSpec::new(PrecondKind::KineticPlusPotential).with_drop_tol(0.0).with_ordering(ordering);
        let metric = factorize(SparseSymOperator::new(a.clone(), true), &vec![1.0; n], &spec, &mut OrderingCache::default(), Instant::now()).unwrap();
        assert_eq!(metric.stats().shift_count, 0);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = metric.apply_inverse(&b);
        let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
        let want = llt.solve(&rhs);
        let err = (0..n).map(|i| (x[i] - want[(i, 0)]).powi(2)).sum::<f64>().sqrt();
        let norm = (0..n).map(|i| want[(i, 0)].powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-10 * norm, "{ordering:?}: {err}");
        assert!(metric.apply_inverse(&vec![0.0; n]).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn exact_factor_reproduces_permuted_matrix() {
    let model = common::model(4.0, 8, 16, 0.5, 20.0);
    let phi = initial_guess(&model, InitialGuess::vortex(1), 0);
    for kind in [PrecondKind::KineticPlusPotential, PrecondKind::OptimalShifted] {
        let metric = build_metric(&model, &phi, &PrecondSpec::new(kind).with_drop_tol(0.0)).unwrap();
        let n = metric.dim();
        let l = metric.factor().to_dense();
        let perm = metric.permutation();
        let a = metric.matrix().matrix();
        let shift = metric.shift();
        let w = model.weights();
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..=i {
                let llt: f64 = (0..=j).map(|k| l[i * n + k] * l[j * n + k]).sum();
                let mut aij = a.get(perm[i], perm[j]);
                if i == j {
                    aij += shift * w[perm[i]];
                }
                diff += (llt - aij).powi(2);
                norm += aij * aij;
            }
        }
        assert!((diff / norm).sqrt() <= 1e-12, "{kind:?}");
    }
}

#[test]
fn amd_factor_is_sparser_than_natural() {
    let r = small_vortex();
    let base = PrecondSpec::new(PrecondKind::OptimalShifted).with_sigma0(0.1).with_drop_tol(1e-5);
    let amd = build_metric(&r.model, &r.phi, &base.with_ordering(Ordering::Amd)).unwrap();
    let natural = build_metric(&r.model, &r.phi, &base.with_ordering(Ordering::Natural)).unwrap();
    assert_eq!(amd.stats().matrix_lower_nnz, natural.stats().matrix_lower_nnz);
    assert!(amd.stats().factor_nnz < natural.stats().factor_nnz, "{} vs {}", amd.stats().factor_nnz, natural.stats().factor_nnz);
}

#[test]
fn hessian_is_positive_along_the_phase_mode() {
    let r = small_vortex();
    let metric = build_metric(&r.model, &r.phi, &PrecondSpec::new(PrecondKind::Hessian)).unwrap();
    let k = times_i(r.phi.values());
    assert!(metric.metric_inner(&k, &k) > 0.0);
}

#[test]
fn metric_inner_is_symmetric_and_coercive() {
    let model = common::small(0.8);
    let phi = initial_guess(&model, InitialGuess::vortex(1), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [PrecondKind::IdentityMass, PrecondKind::KineticPlusPotential] {
        let metric = build_metric(&model, &phi, &PrecondSpec::new(kind)).unwrap();
        for _ in 0..5 {
            let u: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (uv, vu) = (metric.metric_inner(&u, &v), metric.metric_inner(&v, &u));
            assert!((uv - vu).abs() <= 1e-12 * uv.abs().max(1.0));
            assert!(metric.metric_inner(&u, &u) > 0.0);
        }
    }
}

/// Fastest of `reps` solves, in seconds.
fn solve_time(metric: &gprg_core::FactorizedMetric, b: &[f64], reps: usize) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(metric.apply_inverse(std::hint::black_box(b)));
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn solve_time_does_not_track_the_shift() {
    let r = small_vortex();
    let b = r.phi.values().to_vec();
    let times: Vec<f64> = [1e-1, 1e-3]
        .iter()
        .map(|&s| {
            let spec = PrecondSpec::new(PrecondKind::OptimalShifted).with_sigma0(s);
            solve_time(&build_metric(&r.model, &r.phi, &spec).unwrap(), &b, 50)
        })
        .collect();
    let ratio = times[0].max(times[1]) / times[0].min(times[1]);
    assert!(ratio <= 2.0, "{times:?}");
}

/// Largest `|uᵀ(P_φ - P_ψ)v| / (‖u‖_W ‖v‖_W ‖φ - ψ‖∞)` over random probes.
fn lipschitz_proxy(nr: usize, ntheta: usize, eps: f64) -> f64 {
    let model = common::model(6.0, nr, ntheta, 0.5, 50.0);
    let psi = initial_guess(&model, InitialGuess::vortex(1), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let env = psi.density().iter().map(|d| d.sqrt()).fold(0.0, f64::max);
    let moved: Vec<f64> = psi.values().iter().map(|v| v + eps * env * rng.random_range(-1.0..1.0)).collect();
    let phi = ComplexField::from_values(psi.grid().clone(), moved).normalized().unwrap();
    let n = model.grid().n_nodes();
    let dist = (0..n)
        .map(|p| (phi.values()[p] - psi.values()[p]).hypot(phi.values()[n + p] - psi.values()[n + p]))
        .fold(0.0, f64::max);
    let spec = PrecondSpec::new(PrecondKind::Hessian);
    let (pa, pb) = (build_metric(&model, &phi, &spec).unwrap(), build_metric(&model, &psi, &spec).unwrap());
    let w = model.weights();
    let wnorm = |u: &[f64]| u.iter().zip(&w).map(|(a, b)| a * a * b).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        // Smooth probes: low angular modes times a radial envelope.
        let (a, b) = (rng.random_range(0..4) as f64, rng.random_range(0..4) as f64);
        let grid = model.grid();
        let mut u = vec![0.0; 2 * n];
        let mut v = vec![0.0; 2 * n];
        for p in 0..n {
            let (r, t) = (grid.r_nodes()[p / ntheta], grid.theta(p % ntheta));
            let e = (-r * r / 4.0).exp();
            u[p] = e * (a * t).cos();
            v[n + p] = e * (b * t).sin() + e;
        }
        let d = pa.metric_inner(&u, &v) - pb.metric_inner(&u, &v);
        worst = worst.max(d.abs() / (wnorm(&u) * wnorm(&v) * dist));
    }
    worst
}

#[test]
fn metric_is_lipschitz_in_the_state() {
    let coarse = lipschitz_proxy(16, 32, 1e-4);
    let fine = lipschitz_proxy(32, 64, 1e-4);
    let smaller_step = lipschitz_proxy(32, 64, 1e-5);
    for c in [coarse, fine, smaller_step] {
        assert!(c.is_finite() && c > 0.0);
    }
    assert!(fine / coarse < 3.0 && coarse / fine < 3.0, "{coarse} vs {fine}");
    assert!(fine / smaller_step < 3.0 && smaller_step / fine < 3.0, "{fine} vs {smaller_step}");
}
