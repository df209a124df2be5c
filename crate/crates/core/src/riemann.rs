//! Sphere-constrained geometry and the preconditioned Riemannian gradient
//! iteration.

use std::collections::VecDeque;
use std::io::{self, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{l2_inner, ComplexField};
use crate::model::{ModelError, ModelInstance};
use crate::precond::{build_metric_cached, BuildStats, FactorizedMetric, OrderingCache, PrecondError, PrecondSpec};
use crate::sparse::dot;

#[derive(Debug, Error, PartialEq)]
pub enum RiemannError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Precond(#[from] PrecondError),
    #[error("metric is not positive on the state: (φ, P⁻¹Wφ) = {0:e}")]
    BrokenMetric(f64),
    #[error("retraction denominator vanished")]
    VanishingNorm,
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule")]
pub enum StepRule {
    Fixed { tau: f64 },
    /// `τ = 2 / (L + μ)`.
    Optimal { mu: f64, l: f64 },
}

impl StepRule {
    pub fn tau(&self) -> f64 {
        match *self {
            StepRule::Fixed { tau } => tau,
            StepRule::Optimal { mu, l } => 2.0 / (l + mu),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub precond: PrecondSpec,
    pub max_iters: usize,
    /// Overrides the run-wide step rule for this stage.
    pub step: Option<StepRule>,
}

impl Stage {
    pub fn new(precond: PrecondSpec, max_iters: usize) -> Self {
        Self { precond, max_iters, step: None }
    }

    pub fn with_step(mut self, step: StepRule) -> Self {
        self.step = Some(step);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRGConfig {
    pub step: StepRule,
    pub stages: Vec<Stage>,
    /// Stop once `residual_inf ≤ tol`.
    pub tol: f64,
    pub max_total_iters: usize,
    /// Keep `φⁿ` when `n % snapshot_stride == 0`; 0 disables snapshots.
    pub snapshot_stride: usize,
    /// Keep only the newest snapshots; 0 keeps all.
    pub snapshot_capacity: usize,
}

impl PRGConfig {
    pub fn new(step: StepRule, stages: Vec<Stage>, tol: f64) -> Self {
        Self { step, stages, tol, max_total_iters: usize::MAX, snapshot_stride: 0, snapshot_capacity: 0 }
    }

    pub fn with_snapshots(mut self, stride: usize, capacity: usize) -> Self {
        self.snapshot_stride = stride;
        self.snapshot_capacity = capacity;
        self
    }

    pub fn with_max_total_iters(mut self, cap: usize) -> Self {
        self.max_total_iters = cap;
        self
    }

    pub fn validate(&self) -> Result<(), RiemannError> {
        let bad = |m: String| Err(RiemannError::InvalidConfig(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        for rule in std::iter::once(&self.step).chain(self.stages.iter().filter_map(|s| s.step.as_ref())) {
            let tau = rule.tau();
            if !(tau > 0.0 && tau.is_finite()) {
                return bad(format!("step size must be positive, got {tau}"));
            }
        }
        for s in &self.stages {
            s.precond.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub n: usize,
    pub energy: f64,
    pub lambda_tilde: f64,
    pub lambda_p: f64,
    pub residual_inf: f64,
    /// Step taken from this iterate (0 for the last one).
    pub tau: f64,
    /// `‖g‖_P` in the factored metric.
    pub grad_pnorm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub n: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "event")]
pub enum TraceEvent {
    StageStarted { n: usize, stage: usize },
    MetricBuilt { n: usize, stats: BuildStats },
    NonMonotoneEnergy { n: usize, increase: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    IterationLimit,
}

#[derive(Debug, Clone, Default)]
pub struct IterTrace {
    pub entries: Vec<TraceEntry>,
    pub snapshots: VecDeque<Snapshot>,
    pub events: Vec<TraceEvent>,
    pub stop: Option<StopReason>,
}

impl IterTrace {
    pub fn converged(&self) -> bool {
        self.stop == Some(StopReason::Converged)
    }

    pub fn last(&self) -> Option<&TraceEntry> {
        self.entries.last()
    }

    pub fn warnings(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| matches!(e, TraceEvent::NonMonotoneEnergy { .. }))
    }

    pub fn energies(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.energy).collect()
    }

    /// CSV with a leading `# <json>` metadata line.
    pub fn write_csv<W: Write>(&self, meta: &serde_json::Value, mut out: W) -> io::Result<()> {
        writeln!(out, "# {}", serde_json::to_string(meta).map_err(io::Error::other)?)?;
        writeln!(out, "n,energy,lambda_tilde,lambda_p,residual_inf,tau,grad_pnorm,wall_ms")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                e.n, e.energy, e.lambda_tilde, e.lambda_p, e.residual_inf, e.tau, e.grad_pnorm, e.wall_ms
            )?;
        }
        Ok(())
    }

    /// Parses [`IterTrace::write_csv`] output; returns the metadata (or
    /// `Null` when absent) and a trace without snapshots.
    pub fn read_csv(text: &str) -> Result<(serde_json::Value, IterTrace), String> {
        let mut meta = serde_json::Value::Null;
        let mut trace = IterTrace::default();
        let mut header_seen = false;
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(json) = line.strip_prefix('#') {
                meta = serde_json::from_str(json.trim()).map_err(|e| format!("line {}: bad metadata: {e}", k + 1))?;
                continue;
            }
            if !header_seen {
                if line != "n,energy,lambda_tilde,lambda_p,residual_inf,tau,grad_pnorm,wall_ms" {
                    return Err(format!("line {}: unexpected trace header", k + 1));
                }
                header_seen = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(format!("line {}: expected 8 columns", k + 1));
            }
            let f = |i: usize| cols[i].parse::<f64>().map_err(|e| format!("line {}: {e}", k + 1));
            trace.entries.push(TraceEntry {
                n: cols[0].parse().map_err(|e| format!("line {}: {e}", k + 1))?,
                energy: f(1)?,
                lambda_tilde: f(2)?,
                lambda_p: f(3)?,
                residual_inf: f(4)?,
                tau: f(5)?,
                grad_pnorm: f(6)?,
                wall_ms: f(7)?,
            });
        }
        if !header_seen {
            return Err("missing trace header".into());
        }
        Ok((meta, trace))
    }
}

/// `v - (φ, v) φ`.
pub fn tangent_project_l2(phi: &ComplexField, v: &[f64]) -> Vec<f64> {
    let c = l2_inner(phi.grid(), phi.values(), v);
    v.iter().zip(phi.values()).map(|(vi, pi)| vi - c * pi).collect()
}

/// Preconditioned Riemannian gradient at `phi`.
#[derive(Debug, Clone)]
pub struct RiemannianGrad {
    pub g: Vec<f64>,
    pub lambda_p: f64,
    /// `‖g‖_P` in the factored metric.
    pub pnorm: f64,
}

pub fn riemannian_grad(model: &ModelInstance, phi: &ComplexField, metric: &FactorizedMetric) -> Result<RiemannianGrad, RiemannError> {
    if !phi.is_normalized() {
        return Err(ModelError::NotNormalized(phi.mass_norm_sq()).into());
    }
    let grad = model.grad_values(phi.values());
    riemannian_grad_from(model, phi, metric, &grad)
}

/// As [`riemannian_grad`] with `H_φ φ` already computed.
pub fn riemannian_grad_from(
    model: &ModelInstance,
    phi: &ComplexField,
    metric: &FactorizedMetric,
    grad: &[f64],
) -> Result<RiemannianGrad, RiemannError> {
    let x = phi.values();
    let w = model.weights();
    let wphi: Vec<f64> = w.iter().zip(x).map(|(a, b)| a * b).collect();
    let (u, v) = metric.apply_inverse2(grad, &wphi);
    let den = dot(&wphi, &v);
    if !(den > 0.0) {
        return Err(RiemannError::BrokenMetric(den));
    }
    let lambda_p = dot(&wphi, &u) / den;
    let g: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - lambda_p * b).collect();
    // The factored metric maps g to grad - λ_P W φ.
    let sq: f64 = g.iter().zip(grad.iter().zip(&wphi)).map(|(gi, (hi, mi))| gi * (hi - lambda_p * mi)).sum();
    Ok(RiemannianGrad { g, lambda_p, pnorm: sq.max(0.0).sqrt() })
}

/// `(φ + τ d) / ‖φ + τ d‖`.
pub fn retract(phi: &ComplexField, d: &[f64], tau: f64) -> Result<ComplexField, RiemannError> {
    let y: Vec<f64> = phi.values().iter().zip(d).map(|(p, di)| p + tau * di).collect();
    let nrm = l2_inner(phi.grid(), &y, &y).sqrt();
    if !(nrm > 0.0 && nrm.is_finite()) {
        return Err(RiemannError::VanishingNorm);
    }
    Ok(ComplexField::from_values(phi.grid().clone(), y.into_iter().map(|v| v / nrm).collect()))
}

/// Runs the staged iteration from `phi0`.
pub fn prg_run(model: &ModelInstance, phi0: &ComplexField, config: &PRGConfig) -> Result<(IterTrace, ComplexField), RiemannError> {
    config.validate()?;
    if !phi0.is_normalized() {
        return Err(ModelError::NotNormalized(phi0.mass_norm_sq()).into());
    }
    let start = Instant::now();
    let mut cache = OrderingCache::default();
    let mut trace = IterTrace::default();
    let mut phi = phi0.clone();
    let mut n = 0usize;
    let mut prev_energy = f64::INFINITY;

    let snapshot = |trace: &mut IterTrace, n: usize, phi: &ComplexField| {
        if config.snapshot_stride > 0 && n % config.snapshot_stride == 0 {
            if config.snapshot_capacity > 0 && trace.snapshots.len() == config.snapshot_capacity {
                trace.snapshots.pop_front();
            }
            trace.snapshots.push_back(Snapshot { n, values: phi.values().to_vec() });
        }
    };

    let mut metric: Option<FactorizedMetric> = None;
    'stages: for (si, stage) in config.stages.iter().enumerate() {
        trace.events.push(TraceEvent::StageStarted { n, stage: si });
        let tau = stage.step.unwrap_or(config.step).tau();
        let last_stage = si + 1 == config.stages.len();
        let mut k = 0usize;
        loop {
            if k == stage.max_iters && !last_stage {
                continue 'stages;
            }
            if k % stage.precond.refresh == 0 {
                let m = build_metric_cached(model, &phi, &stage.precond, &mut cache)?;
                trace.events.push(TraceEvent::MetricBuilt { n, stats: m.stats().clone() });
                metric = Some(m);
            }
            let m = metric.as_ref().expect("metric built at stage start");
            let ev = model.evaluate(phi.values());
            let rg = riemannian_grad_from(model, &phi, m, &ev.grad)?;
            if ev.energy > prev_energy + 10.0 * f64::EPSILON * prev_energy.abs() {
                trace.events.push(TraceEvent::NonMonotoneEnergy { n, increase: ev.energy - prev_energy });
            }
            prev_energy = ev.energy;
            let converged = ev.residual_inf <= config.tol;
            let capped = n >= config.max_total_iters || k == stage.max_iters;
            let step = if converged || capped { 0.0 } else { tau };
            trace.entries.push(TraceEntry {
                n,
                energy: ev.energy,
                lambda_tilde: ev.lambda_tilde,
                lambda_p: rg.lambda_p,
                residual_inf: ev.residual_inf,
                tau: step,
                grad_pnorm: rg.pnorm,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            snapshot(&mut trace, n, &phi);
            if converged || capped {
                trace.stop = Some(if converged { StopReason::Converged } else { StopReason::IterationLimit });
                break 'stages;
            }
            let d: Vec<f64> = rg.g.iter().map(|v| -v).collect();
            phi = retract(&phi, &d, step)?;
            n += 1;
            k += 1;
        }
    }
    if config.snapshot_stride > 0 && trace.snapshots.back().map(|s| s.n) != Some(n) {
        if config.snapshot_capacity > 0 && trace.snapshots.len() == config.snapshot_capacity {
            trace.snapshots.pop_front();
        }
        trace.snapshots.push_back(Snapshot { n, values: phi.values().to_vec() });
    }
    Ok((trace, phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialGuess {
    /// Multiply by `(x + iy)^winding`.
    pub winding: u32,
    /// Relative amplitude of the seeded complex noise (0 for none).
    pub noise: f64,
}

impl InitialGuess {
    pub const NOISE_AMPLITUDE: f64 = 0.1;

    pub fn gaussian() -> Self {
        Self { winding: 0, noise: 0.0 }
    }

    pub fn vortex(m: u32) -> Self {
        Self { winding: m, noise: 0.0 }
    }

    pub fn perturbed() -> Self {
        Self { winding: 0, noise: Self::NOISE_AMPLITUDE }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    /// Parses `gaussian`, `vortex:<m>`, `perturbed` or `vortex-perturbed:<m>`.
    pub fn parse(s: &str) -> Option<Self> {
        let (head, m) = match s.split_once(':') {
            Some((h, m)) => (h, Some(m.parse::<u32>().ok()?)),
            None => (s, None),
        };
        match (head, m) {
            ("gaussian", None) => Some(Self::gaussian()),
            ("perturbed", None) => Some(Self::perturbed()),
            ("vortex", Some(m)) => Some(Self::vortex(m)),
            ("vortex-perturbed", Some(m)) => Some(Self::vortex(m).with_noise(Self::NOISE_AMPLITUDE)),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match (self.winding, self.noise > 0.0) {
            (0, false) => "gaussian".into(),
            (0, true) => "perturbed".into(),
            (m, false) => format!("vortex:{m}"),
            (m, true) => format!("vortex-perturbed:{m}"),
        }
    }
}

/// `exp(-r²/2) (x+iy)^m`, plus `noise · exp(-r²/2) · ξ` with `ξ` uniform in
/// the unit square of the complex plane, normalized.
pub fn initial_guess(model: &ModelInstance, kind: InitialGuess, seed: u64) -> ComplexField {
    let grid = model.grid();
    let n = grid.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; 2 * n];
    for i in 0..grid.nr() {
        for j in 0..grid.ntheta() {
            let p = grid.index(i, j);
            let (px, py) = grid.xy(i, j);
            let env = (-(px * px + py * py) / 2.0).exp();
            let (mut re, mut im) = (env, 0.0);
            for _ in 0..kind.winding {
                (re, im) = (re * px - im * py, re * py + im * px);
            }
            if kind.noise > 0.0 {
                re += kind.noise * env * rng.random_range(-1.0..1.0);
                im += kind.noise * env * rng.random_range(-1.0..1.0);
            }
            x[p] = re;
            x[n + p] = im;
        }
    }
    ComplexField::from_values(grid.clone(), x).normalized().expect("initial guess has positive mass")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::times_i;
    use crate::grid::{PolarGrid, PotentialSpec};
    use crate::model::Nonlinearity;
    use crate::precond::{build_metric, PrecondKind};
    use std::sync::Arc;

    fn model() -> ModelInstance {
        let grid = Arc::new(PolarGrid::new(5.0, 10, 16).unwrap());
        ModelInstance::new(grid, PotentialSpec::Harmonic, 0.4, Nonlinearity::cubic(10.0), 0.2).unwrap()
    }

    #[test]
    fn projection_examples() {
        let m = model();
        let phi = initial_guess(&m, InitialGuess::perturbed(), 1);
        let p = tangent_project_l2(&phi, phi.values());
        assert!(p.iter().all(|v| v.abs() < 1e-15));
        let iphi = times_i(phi.values());
        assert_eq!(tangent_project_l2(&phi, &iphi), iphi);
        let v: Vec<f64> = (0..m.dim()).map(|k| (k as f64 * 0.37).cos()).collect();
        let once = tangent_project_l2(&phi, &v);
        let twice = tangent_project_l2(&phi, &once);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(l2_inner(m.grid(), phi.values(), &once).abs() < 1e-13);
    }

    #[test]
    fn retraction_of_zero_direction_is_identity() {
        let m = model();
        let phi = initial_guess(&m, InitialGuess::gaussian(), 0);
        let r = retract(&phi, &vec![0.0; m.dim()], 0.7).unwrap();
        for (a, b) in r.values().iter().zip(phi.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        let neg: Vec<f64> = phi.values().to_vec();
        assert_eq!(retract(&phi, &neg, -1.0).unwrap_err(), RiemannError::VanishingNorm);
    }

    #[test]
    fn gradient_is_tangent_and_phase_invariant() {
        let m = model();
        let phi = initial_guess(&m, InitialGuess::perturbed(), 2);
        let spec = PrecondSpec::new(PrecondKind::KineticPlusPotential);
        let metric = build_metric(&m, &phi, &spec).unwrap();
        let rg = riemannian_grad(&m, &phi, &metric).unwrap();
        assert!(l2_inner(m.grid(), phi.values(), &rg.g).abs() < 1e-12);
        let psi = phi.phase_rotated(1.1);
        let rg2 = riemannian_grad(&m, &psi, &metric).unwrap();
        assert!((rg.lambda_p - rg2.lambda_p).abs() < 1e-13 * rg.lambda_p.abs());
    }

    #[test]
    fn vortex_guess_winds_once() {
        let m = model();
        let phi = initial_guess(&m, InitialGuess::vortex(1), 0);
        let g = m.grid();
        let n = g.n_nodes();
        for i in [0, 3, 7] {
            let mut total = 0.0;
            for j in 0..g.ntheta() {
                let (p, q) = (g.index(i, j), g.index(i, (j + 1) % g.ntheta()));
                let a = phi.values()[n + p].atan2(phi.values()[p]);
                let b = phi.values()[n + q].atan2(phi.values()[q]);
                let mut d = b - a;
                while d > std::f64::consts::PI {
                    d -= 2.0 * std::f64::consts::PI;
                }
                while d < -std::f64::consts::PI {
                    d += 2.0 * std::f64::consts::PI;
                }
                total += d;
            }
            assert!((total / (2.0 * std::f64::consts::PI) - 1.0).abs() < 1e-12);
        }
        // |φ| / (r e^{-r²/2}) is constant, so the field vanishes like r.
        let profile = |i: usize| {
            let r = g.r_nodes()[i];
            phi.values()[g.index(i, 0)].hypot(phi.values()[n + g.index(i, 0)]) / (r * (-r * r / 2.0).exp())
        };
        assert!((profile(0) / profile(4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn initial_guess_is_deterministic() {
        let m = model();
        let a = initial_guess(&m, InitialGuess::perturbed(), 42);
        let b = initial_guess(&m, InitialGuess::perturbed(), 42);
        let c = initial_guess(&m, InitialGuess::perturbed(), 43);
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
        assert!((initial_guess(&m, InitialGuess::gaussian(), 0).mass_norm_sq() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn parse_initial_guess() {
        for s in ["gaussian", "perturbed", "vortex:2", "vortex-perturbed:1"] {
            assert_eq!(InitialGuess::parse(s).unwrap().name(), s);
        }
        assert!(InitialGuess::parse("vortex").is_none());
        assert!(InitialGuess::parse("swirl:1").is_none());
    }

    #[test]
    fn run_converges_and_keeps_unit_mass() {
        let m = model();
        let phi0 = initial_guess(&m, InitialGuess::perturbed(), 3);
        let spec = PrecondSpec::new(PrecondKind::OptimalShifted).with_drop_tol(0.0).with_refresh(10);
        let cfg = PRGConfig::new(StepRule::Fixed { tau: 1.0 }, vec![Stage::new(spec, 2000)], 1e-10).with_snapshots(1, 0);
        let (trace, phi) = prg_run(&m, &phi0, &cfg).unwrap();
        assert!(trace.converged(), "{:?}", trace.last());
        assert_eq!(trace.entries.len(), trace.last().unwrap().n + 1);
        for s in &trace.snapshots {
            let f = ComplexField::from_values(m.grid().clone(), s.values.clone());
            assert!((f.mass_norm_sq() - 1.0).abs() < 1e-14);
        }
        assert_eq!(trace.snapshots.back().unwrap().values, phi.values());
        // Restarting at the converged state stops immediately.
        let (again, _) = prg_run(&m, &phi, &cfg).unwrap();
        assert_eq!(again.entries.len(), 1);
        assert!(again.converged());
    }

    #[test]
    fn stages_hand_over_and_cap() {
        let m = model();
        let phi0 = initial_guess(&m, InitialGuess::gaussian(), 0);
        let s1 = Stage::new(PrecondSpec::new(PrecondKind::Hessian).with_refresh(3), 5);
        let s2 = Stage::new(PrecondSpec::new(PrecondKind::OptimalShifted), 4);
        let cfg = PRGConfig::new(StepRule::Fixed { tau: 1.0 }, vec![s1, s2], 1e-30);
        let (trace, _) = prg_run(&m, &phi0, &cfg).unwrap();
        assert_eq!(trace.stop, Some(StopReason::IterationLimit));
        let ns: Vec<usize> = trace.entries.iter().map(|e| e.n).collect();
        assert_eq!(ns, (0..=9).collect::<Vec<_>>());
        assert_eq!(trace.last().unwrap().tau, 0.0);
        let builds = trace.events.iter().filter(|e| matches!(e, TraceEvent::MetricBuilt { .. })).count();
        // Stage one rebuilds at k = 0, 3 and stage two at k = 0.
        assert_eq!(builds, 3);
    }

    #[test]
    fn trace_csv_roundtrip() {
        let m = model();
        let phi0 = initial_guess(&m, InitialGuess::gaussian(), 0);
        let cfg = PRGConfig::new(StepRule::Fixed { tau: 0.5 }, vec![Stage::new(PrecondSpec::identity_mass(), 3)], 1e-30);
        let (trace, _) = prg_run(&m, &phi0, &cfg).unwrap();
        let mut buf = Vec::new();
        let meta = serde_json::json!({"hash": "abc"});
        trace.write_csv(&meta, &mut buf).unwrap();
        let (meta2, back) = IterTrace::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.entries, trace.entries);
    }

    #[test]
    fn config_validation() {
        let st = Stage::new(PrecondSpec::identity_mass(), 1);
        assert!(PRGConfig::new(StepRule::Fixed { tau: 0.0 }, vec![st], 1e-6).validate().is_err());
        assert!(PRGConfig::new(StepRule::Fixed { tau: 1.0 }, vec![], 1e-6).validate().is_err());
        assert!(PRGConfig::new(StepRule::Fixed { tau: 1.0 }, vec![st], 0.0).validate().is_err());
        assert!(PRGConfig::new(StepRule::Optimal { mu: 0.1, l: 1.9 }, vec![st], 1e-6).validate().is_ok());
    }
}
