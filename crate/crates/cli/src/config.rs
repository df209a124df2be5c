//! Flat `section.key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones. Stages are numbered from 1:
//!
//! ```text
//! solve.stage.1.kind = hessian
//! solve.stage.1.iters = 300
//! solve.stage.2.kind = optimal-shifted
//! solve.stage.2.iters = 5000
//! ```
//!
//! Giving any stage key replaces the default stage list.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use gprg_core::diagnostics::TailWindow;
use gprg_core::grid::GridError;
use gprg_core::model::ModelError;
use gprg_core::spectrum::{SolverChoice, SpectrumOptions};
use gprg_core::{
    InitialGuess, ModelInstance, Nonlinearity, NonlinearityKind, Ordering, PRGConfig, PolarGrid, PotentialSpec,
    PrecondKind, PrecondSpec, RateConstants, Stage, StepRule,
};

const PAPER_FIG1: &str = include_str!("../configs/paper_fig1.conf");
const BESSEL_CHECK: &str = include_str!("../configs/bessel_check.conf");
const SMALL_VORTEX: &str = include_str!("../configs/small_vortex.conf");

pub const PACKAGED: [(&str, &str); 3] =
    [("paper_fig1", PAPER_FIG1), ("bessel_check", BESSEL_CHECK), ("small_vortex", SMALL_VORTEX)];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("{key}: unknown key")]
    UnknownKey { key: String },
    #[error("{key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlock {
    pub radius: f64,
    pub nr: usize,
    pub ntheta: usize,
    pub potential: PotentialSpec,
    pub omega: f64,
    pub nonlinearity: NonlinearityKind,
    pub eta: f64,
    pub eta_lhy: f64,
    pub k_dominance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepChoice {
    Fixed(f64),
    /// `μ, L` given inline or resolved from a constants file.
    Optimal { mu: f64, l: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageBlock {
    pub precond: PrecondSpec,
    pub iters: usize,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveBlock {
    pub step: StepChoice,
    pub tol: f64,
    pub max_iters: Option<usize>,
    pub guess: InitialGuess,
    pub seed: u64,
    pub snapshot_stride: usize,
    pub snapshot_capacity: usize,
    pub stages: Vec<StageBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumBlock {
    pub metric: PrecondSpec,
    pub solver: SolverChoice,
    pub dense_cap: usize,
    pub q: usize,
    pub theta_factor: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub undeflated: bool,
    pub residual_threshold: f64,
    pub compare_orderings: bool,
    pub sigma_sweep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatesBlock {
    pub window: usize,
    pub guard: Option<usize>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub solve: SolveBlock,
    pub spectrum: SpectrumBlock,
    pub rates: RatesBlock,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelBlock {
                radius: 8.0,
                nr: 32,
                ntheta: 64,
                potential: PotentialSpec::Harmonic,
                omega: 0.8,
                nonlinearity: NonlinearityKind::Cubic,
                eta: 100.0,
                eta_lhy: 0.0,
                k_dominance: 0.2,
            },
            solve: SolveBlock {
                step: StepChoice::Fixed(1.0),
                tol: 1e-10,
                max_iters: None,
                guess: InitialGuess::vortex(1),
                seed: 0,
                snapshot_stride: 0,
                snapshot_capacity: 0,
                stages: vec![
                    StageBlock { precond: PrecondSpec::new(PrecondKind::Hessian), iters: 300, tau: None },
                    StageBlock { precond: PrecondSpec::new(PrecondKind::OptimalShifted), iters: 5000, tau: None },
                ],
            },
            spectrum: SpectrumBlock {
                metric: PrecondSpec::new(PrecondKind::OptimalShifted),
                solver: SolverChoice::Auto,
                dense_cap: gprg_core::spectrum::DENSE_CAP,
                q: 6,
                theta_factor: 1e-6,
                tol: 1e-9,
                max_iters: 20000,
                seed: 0,
                undeflated: true,
                residual_threshold: 1e-8,
                compare_orderings: true,
                sigma_sweep: vec![1.0, 0.3, 0.1],
            },
            rates: RatesBlock { window: 100, guard: None, bias: 1e-3 },
            output_dir: "out".into(),
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>().map_err(|_| invalid(key, format!("expected a number, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse::<usize>().map_err(|_| invalid(key, format!("expected a nonnegative integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64, ConfigError> {
    v.parse::<u64>().map_err(|_| invalid(key, format!("expected a nonnegative integer, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got {v:?}"))),
    }
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

fn nonnegative(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be nonnegative, got {v}")))
    }
}

fn parse_optional_usize(key: &str, v: &str) -> Result<Option<usize>, ConfigError> {
    if v == "none" || v == "auto" {
        Ok(None)
    } else {
        parse_usize(key, v).map(Some)
    }
}

fn parse_potential(key: &str, v: &str) -> Result<PotentialSpec, ConfigError> {
    match v {
        "harmonic" => Ok(PotentialSpec::Harmonic),
        "zero" => Ok(PotentialSpec::Zero),
        _ => {
            let Some(body) = v.strip_prefix("table:") else {
                return Err(invalid(key, format!("expected harmonic, zero or table:r:v,r:v,..., got {v:?}")));
            };
            let mut table = Vec::new();
            for pair in body.split(',') {
                let (r, val) = pair.split_once(':').ok_or_else(|| invalid(key, format!("bad table entry {pair:?}")))?;
                table.push((parse_f64(key, r.trim())?, parse_f64(key, val.trim())?));
            }
            if table.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                return Err(invalid(key, "table radii must be strictly increasing"));
            }
            Ok(PotentialSpec::RadialTable(table))
        }
    }
}

fn potential_name(p: &PotentialSpec) -> String {
    match p {
        PotentialSpec::Harmonic => "harmonic".into(),
        PotentialSpec::Zero => "zero".into(),
        PotentialSpec::RadialTable(t) => {
            let body: Vec<String> = t.iter().map(|(r, v)| format!("{r:?}:{v:?}")).collect();
            format!("table:{}", body.join(","))
        }
    }
}

fn parse_nonlinearity(key: &str, v: &str) -> Result<NonlinearityKind, ConfigError> {
    match v {
        "cubic" => Ok(NonlinearityKind::Cubic),
        "logarithmic" => Ok(NonlinearityKind::Logarithmic),
        "lhy" => Ok(NonlinearityKind::Lhy),
        "none" => Ok(NonlinearityKind::None),
        _ => Err(invalid(key, format!("expected cubic, logarithmic, lhy or none, got {v:?}"))),
    }
}

fn nonlinearity_name(k: NonlinearityKind) -> &'static str {
    match k {
        NonlinearityKind::Cubic => "cubic",
        NonlinearityKind::Logarithmic => "logarithmic",
        NonlinearityKind::Lhy => "lhy",
        NonlinearityKind::None => "none",
    }
}

fn parse_solver(key: &str, v: &str) -> Result<SolverChoice, ConfigError> {
    match v {
        "auto" => Ok(SolverChoice::Auto),
        "dense" => Ok(SolverChoice::Dense),
        "iterative" => Ok(SolverChoice::Iterative),
        _ => Err(invalid(key, format!("expected auto, dense or iterative, got {v:?}"))),
    }
}

fn solver_name(s: SolverChoice) -> &'static str {
    match s {
        SolverChoice::Auto => "auto",
        SolverChoice::Dense => "dense",
        SolverChoice::Iterative => "iterative",
    }
}

/// Applies one metric key (`kind`, `sigma0`, `drop_tol`, `ordering`,
/// `refresh`); returns false when `field` is not one of them.
fn apply_precond(spec: &mut PrecondSpec, key: &str, field: &str, v: &str) -> Result<bool, ConfigError> {
    match field {
        "kind" => {
            spec.kind = PrecondKind::parse(v).ok_or_else(|| {
                invalid(key, format!("expected identity-mass, kinetic-plus-potential, hessian or optimal-shifted, got {v:?}"))
            })?
        }
        "sigma0" => spec.sigma0 = positive(key, parse_f64(key, v)?)?,
        "drop_tol" => spec.drop_tol = nonnegative(key, parse_f64(key, v)?)?,
        "ordering" => spec.ordering = Ordering::parse(v).ok_or_else(|| invalid(key, format!("expected amd or natural, got {v:?}")))?,
        "refresh" => {
            spec.refresh = match v {
                "never" => usize::MAX,
                _ => parse_usize(key, v)?,
            };
            if spec.refresh == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Splits config text into `(line, key, value)` triples.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: k + 1, text: line.to_string() })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: k + 1, text: line.to_string() });
        }
        out.push((k + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Reads `source` (a path or the name of a packaged config), then
    /// applies `overrides`.
    pub fn load(source: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match source {
            Some(s) => Self::source_text(s)?,
            None => String::new(),
        };
        Self::parse_with(&text, overrides)
    }

    fn source_text(source: &str) -> Result<String, ConfigError> {
        if !Path::new(source).exists() {
            if let Some((_, text)) = PACKAGED.iter().find(|(name, _)| *name == source) {
                return Ok(text.to_string());
            }
        }
        std::fs::read_to_string(source).map_err(|e| ConfigError::Read { path: source.to_string(), msg: e.to_string() })
    }

    /// Parses `text`, then applies `overrides` (each `key=value`).
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut all = entries(text)?;
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: o.clone() })?;
            all.push((0, key.trim().to_string(), value.trim().to_string()));
        }
        let mut cfg = Self::default();
        let mut stages: BTreeMap<usize, Vec<(String, String, String)>> = BTreeMap::new();
        let (mut mu, mut l, mut step) = (None, None, None);
        for (_, key, v) in &all {
            let v = v.as_str();
            if let Some(rest) = key.strip_prefix("solve.stage.") {
                let (idx, field) = rest.split_once('.').ok_or_else(|| ConfigError::UnknownKey { key: key.clone() })?;
                let idx: usize = idx.parse().map_err(|_| invalid(key, "stage index must be a positive integer"))?;
                if idx == 0 {
                    return Err(invalid(key, "stages are numbered from 1"));
                }
                stages.entry(idx).or_default().push((key.clone(), field.to_string(), v.to_string()));
                continue;
            }
            if let Some(field) = key.strip_prefix("spectrum.") {
                if apply_precond(&mut cfg.spectrum.metric, key, field, v)? {
                    continue;
                }
            }
            let m = &mut cfg.model;
            let s = &mut cfg.solve;
            let sp = &mut cfg.spectrum;
            match key.as_str() {
                "model.radius" => m.radius = parse_f64(key, v)?,
                "model.nr" => m.nr = parse_usize(key, v)?,
                "model.ntheta" => m.ntheta = parse_usize(key, v)?,
                "model.potential" => m.potential = parse_potential(key, v)?,
                "model.omega" => m.omega = parse_f64(key, v)?,
                "model.nonlinearity" => m.nonlinearity = parse_nonlinearity(key, v)?,
                "model.eta" => m.eta = parse_f64(key, v)?,
                "model.eta_lhy" => m.eta_lhy = parse_f64(key, v)?,
                "model.k_dominance" => m.k_dominance = nonnegative(key, parse_f64(key, v)?)?,
                "solve.step" => match v {
                    "fixed" | "optimal" => step = Some(v.to_string()),
                    _ => return Err(invalid(key, format!("expected fixed or optimal, got {v:?}"))),
                },
                "solve.tau" => s.step = StepChoice::Fixed(positive(key, parse_f64(key, v)?)?),
                "solve.mu" => mu = Some(positive(key, parse_f64(key, v)?)?),
                "solve.l" => l = Some(positive(key, parse_f64(key, v)?)?),
                "solve.constants" => {
                    let text = std::fs::read_to_string(v).map_err(|e| invalid(key, format!("cannot read {v}: {e}")))?;
                    let c = RateConstants::from_json(&text).map_err(|e| invalid(key, format!("{v}: {e}")))?;
                    (mu, l) = (Some(c.mu), Some(c.l));
                }
                "solve.tol" => s.tol = positive(key, parse_f64(key, v)?)?,
                "solve.max_iters" => s.max_iters = parse_optional_usize(key, v)?,
                "solve.guess" => {
                    s.guess = InitialGuess::parse(v)
                        .ok_or_else(|| invalid(key, format!("expected gaussian, perturbed, vortex:m or vortex-perturbed:m, got {v:?}")))?
                }
                "solve.seed" => s.seed = parse_u64(key, v)?,
                "solve.snapshot_stride" => s.snapshot_stride = parse_usize(key, v)?,
                "solve.snapshot_capacity" => s.snapshot_capacity = parse_usize(key, v)?,
                "spectrum.solver" => sp.solver = parse_solver(key, v)?,
                "spectrum.dense_cap" => sp.dense_cap = parse_usize(key, v)?,
                "spectrum.q" => sp.q = parse_usize(key, v)?,
                "spectrum.theta_factor" => sp.theta_factor = positive(key, parse_f64(key, v)?)?,
                "spectrum.tol" => sp.tol = positive(key, parse_f64(key, v)?)?,
                "spectrum.max_iters" => sp.max_iters = parse_usize(key, v)?,
                "spectrum.seed" => sp.seed = parse_u64(key, v)?,
                "spectrum.undeflated" => sp.undeflated = parse_bool(key, v)?,
                "spectrum.residual_threshold" => sp.residual_threshold = positive(key, parse_f64(key, v)?)?,
                "spectrum.compare_orderings" => sp.compare_orderings = parse_bool(key, v)?,
                "spectrum.sigma_sweep" => {
                    sp.sigma_sweep = if v.is_empty() || v == "none" {
                        Vec::new()
                    } else {
                        v.split(',').map(|x| parse_f64(key, x.trim()).and_then(|x| positive(key, x))).collect::<Result<_, _>>()?
                    }
                }
                "rates.window" => {
                    cfg.rates.window = parse_usize(key, v)?;
                    if cfg.rates.window == 0 {
                        return Err(invalid(key, "must be at least 1"));
                    }
                }
                "rates.guard" => cfg.rates.guard = parse_optional_usize(key, v)?,
                "rates.bias" => cfg.rates.bias = positive(key, parse_f64(key, v)?)?,
                "output.dir" => cfg.output_dir = v.to_string(),
                _ => return Err(ConfigError::UnknownKey { key: key.clone() }),
            }
        }
        match step.as_deref() {
            Some("optimal") => match (mu, l) {
                (Some(mu), Some(l)) if mu <= l => cfg.solve.step = StepChoice::Optimal { mu, l },
                (Some(_), Some(_)) => return Err(invalid("solve.mu", "must not exceed solve.l")),
                _ => return Err(invalid("solve.step", "optimal needs solve.mu and solve.l or solve.constants from a prior spectrum run")),
            },
            _ => {
                if mu.is_some() || l.is_some() {
                    return Err(invalid("solve.step", "solve.mu, solve.l and solve.constants need solve.step = optimal"));
                }
            }
        }
        if !stages.is_empty() {
            cfg.solve.stages = parse_stages(stages)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.grid()?;
        let m = &self.model;
        if !(m.omega >= 0.0 && m.omega.is_finite()) {
            return Err(invalid("model.omega", format!("must be finite and nonnegative, got {}", m.omega)));
        }
        self.nonlinearity().validate().map_err(|e| match e {
            ModelError::Coupling { name, value } => invalid(&format!("model.{name}"), format!("must be finite and nonnegative, got {value}")),
            other => invalid("model.nonlinearity", other.to_string()),
        })?;
        if self.spectrum.q == 0 {
            return Err(invalid("spectrum.q", "must be at least 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PolarGrid, ConfigError> {
        let m = &self.model;
        PolarGrid::new(m.radius, m.nr, m.ntheta).map_err(|e| {
            let key = match e {
                GridError::Radius(_) => "model.radius",
                GridError::RadialCount(_) => "model.nr",
                GridError::AngularCount(_) => "model.ntheta",
            };
            invalid(key, e.to_string())
        })
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        let m = &self.model;
        Nonlinearity { kind: m.nonlinearity, eta: m.eta, eta_lhy: m.eta_lhy }
    }

    pub fn build_model(&self) -> Result<ModelInstance, ConfigError> {
        let m = &self.model;
        ModelInstance::new(Arc::new(self.grid()?), m.potential.clone(), m.omega, self.nonlinearity(), m.k_dominance)
            .map_err(|e| invalid("model", e.to_string()))
    }

    pub fn prg_config(&self) -> PRGConfig {
        let s = &self.solve;
        let step = match s.step {
            StepChoice::Fixed(tau) => StepRule::Fixed { tau },
            StepChoice::Optimal { mu, l } => StepRule::Optimal { mu, l },
        };
        let stages = s
            .stages
            .iter()
            .map(|st| {
                let stage = Stage::new(st.precond, st.iters);
                match st.tau {
                    Some(tau) => stage.with_step(StepRule::Fixed { tau }),
                    None => stage,
                }
            })
            .collect();
        let cfg = PRGConfig::new(step, stages, s.tol).with_snapshots(s.snapshot_stride, s.snapshot_capacity);
        match s.max_iters {
            Some(cap) => cfg.with_max_total_iters(cap),
            None => cfg,
        }
    }

    pub fn spectrum_options(&self) -> SpectrumOptions {
        let sp = &self.spectrum;
        SpectrumOptions {
            solver: sp.solver,
            dense_cap: sp.dense_cap,
            tol: sp.tol,
            max_iters: sp.max_iters,
            q: sp.q,
            theta_factor: sp.theta_factor,
            seed: sp.seed,
            undeflated: sp.undeflated,
            ..SpectrumOptions::default()
        }
    }

    pub fn tail_window(&self) -> TailWindow {
        TailWindow { window: self.rates.window, guard: self.rates.guard, bias: self.rates.bias }
    }

    /// Every key with its resolved value; parsing the result gives back an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut t = String::new();
        let m = &self.model;
        let _ = writeln!(t, "model.radius = {:?}", m.radius);
        let _ = writeln!(t, "model.nr = {}", m.nr);
        let _ = writeln!(t, "model.ntheta = {}", m.ntheta);
        let _ = writeln!(t, "model.potential = {}", potential_name(&m.potential));
        let _ = writeln!(t, "model.omega = {:?}", m.omega);
        let _ = writeln!(t, "model.nonlinearity = {}", nonlinearity_name(m.nonlinearity));
        let _ = writeln!(t, "model.eta = {:?}", m.eta);
        let _ = writeln!(t, "model.eta_lhy = {:?}", m.eta_lhy);
        let _ = writeln!(t, "model.k_dominance = {:?}", m.k_dominance);
        let s = &self.solve;
        match s.step {
            StepChoice::Fixed(tau) => {
                let _ = writeln!(t, "solve.step = fixed\nsolve.tau = {tau:?}");
            }
            StepChoice::Optimal { mu, l } => {
                let _ = writeln!(t, "solve.step = optimal\nsolve.mu = {mu:?}\nsolve.l = {l:?}");
            }
        }
        let _ = writeln!(t, "solve.tol = {:?}", s.tol);
        let _ = writeln!(t, "solve.max_iters = {}", s.max_iters.map_or("none".into(), |c| c.to_string()));
        let _ = writeln!(t, "solve.guess = {}", s.guess.name());
        let _ = writeln!(t, "solve.seed = {}", s.seed);
        let _ = writeln!(t, "solve.snapshot_stride = {}", s.snapshot_stride);
        let _ = writeln!(t, "solve.snapshot_capacity = {}", s.snapshot_capacity);
        for (k, st) in s.stages.iter().enumerate() {
            let p = format!("solve.stage.{}", k + 1);
            let _ = writeln!(t, "{p}.kind = {}", st.precond.kind.name());
            let _ = writeln!(t, "{p}.iters = {}", st.iters);
            let _ = writeln!(t, "{p}.refresh = {}", refresh_text(st.precond.refresh));
            let _ = writeln!(t, "{p}.sigma0 = {:?}", st.precond.sigma0);
            let _ = writeln!(t, "{p}.drop_tol = {:?}", st.precond.drop_tol);
            let _ = writeln!(t, "{p}.ordering = {}", st.precond.ordering.name());
            if let Some(tau) = st.tau {
                let _ = writeln!(t, "{p}.tau = {tau:?}");
            }
        }
        let sp = &self.spectrum;
        let _ = writeln!(t, "spectrum.kind = {}", sp.metric.kind.name());
        let _ = writeln!(t, "spectrum.sigma0 = {:?}", sp.metric.sigma0);
        let _ = writeln!(t, "spectrum.drop_tol = {:?}", sp.metric.drop_tol);
        let _ = writeln!(t, "spectrum.ordering = {}", sp.metric.ordering.name());
        let _ = writeln!(t, "spectrum.solver = {}", solver_name(sp.solver));
        let _ = writeln!(t, "spectrum.dense_cap = {}", sp.dense_cap);
        let _ = writeln!(t, "spectrum.q = {}", sp.q);
        let _ = writeln!(t, "spectrum.theta_factor = {:?}", sp.theta_factor);
        let _ = writeln!(t, "spectrum.tol = {:?}", sp.tol);
        let _ = writeln!(t, "spectrum.max_iters = {}", sp.max_iters);
        let _ = writeln!(t, "spectrum.seed = {}", sp.seed);
        let _ = writeln!(t, "spectrum.undeflated = {}", sp.undeflated);
        let _ = writeln!(t, "spectrum.residual_threshold = {:?}", sp.residual_threshold);
        let _ = writeln!(t, "spectrum.compare_orderings = {}", sp.compare_orderings);
        let sweep: Vec<String> = sp.sigma_sweep.iter().map(|s| format!("{s:?}")).collect();
        let _ = writeln!(t, "spectrum.sigma_sweep = {}", if sweep.is_empty() { "none".into() } else { sweep.join(",") });
        let _ = writeln!(t, "rates.window = {}", self.rates.window);
        let _ = writeln!(t, "rates.guard = {}", self.rates.guard.map_or("auto".into(), |g| g.to_string()));
        let _ = writeln!(t, "rates.bias = {:?}", self.rates.bias);
        let _ = writeln!(t, "output.dir = {}", self.output_dir);
        t
    }

    /// SHA-256 of [`RunConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn refresh_text(r: usize) -> String {
    if r == usize::MAX {
        "never".into()
    } else {
        r.to_string()
    }
}

fn parse_stages(stages: BTreeMap<usize, Vec<(String, String, String)>>) -> Result<Vec<StageBlock>, ConfigError> {
    let mut out = Vec::new();
    for (expected, (idx, fields)) in (1..).zip(stages) {
        if idx != expected {
            return Err(invalid(&format!("solve.stage.{idx}"), format!("stage {expected} is missing")));
        }
        let prefix = format!("solve.stage.{idx}");
        let kind_key = format!("{prefix}.kind");
        let kind = fields
            .iter()
            .rev()
            .find(|(_, f, _)| f == "kind")
            .ok_or_else(|| invalid(&kind_key, "required"))?;
        let kind = PrecondKind::parse(&kind.2).ok_or_else(|| invalid(&kind_key, format!("unknown metric kind {:?}", kind.2)))?;
        let mut stage = StageBlock { precond: PrecondSpec::new(kind), iters: 0, tau: None };
        let mut iters = None;
        for (key, field, v) in &fields {
            if apply_precond(&mut stage.precond, key, field, v)? {
                continue;
            }
            match field.as_str() {
                "iters" => iters = Some(parse_usize(key, v)?),
                "tau" => stage.tau = Some(positive(key, parse_f64(key, v)?)?),
                _ => return Err(ConfigError::UnknownKey { key: key.clone() }),
            }
        }
        stage.iters = iters.ok_or_else(|| invalid(&format!("{prefix}.iters"), "required"))?;
        out.push(stage);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse_with(text, &[])
    }

    #[test]
    fn echo_roundtrips() {
        for (name, text) in PACKAGED {
            let cfg = parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            let back = parse(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg, "{name}");
            assert_eq!(back.hash(), cfg.hash());
        }
        let odd = parse("model.potential = table:0:0,2.5:1.25\nsolve.guess = vortex-perturbed:2\n").unwrap();
        assert_eq!(parse(&odd.to_text()).unwrap(), odd);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            ("model.ntheta = 63", "model.ntheta"),
            ("model.nr = two", "model.nr"),
            ("model.radius = -1", "model.radius"),
            ("model.eta = -5", "model.eta"),
            ("model.omega = nan", "model.omega"),
            ("solve.stage.1.iters = 10", "solve.stage.1.kind"),
            ("solve.stage.1.kind = hessian", "solve.stage.1.iters"),
            ("solve.stage.1.kind = hessian\nsolve.stage.1.iters = 1\nsolve.stage.3.kind = hessian", "solve.stage.3"),
            ("solve.stage.1.kind = hessian\nsolve.stage.1.iters = 1\nsolve.stage.1.sigma0 = 0", "solve.stage.1.sigma0"),
            ("solve.step = optimal", "solve.step"),
            ("solve.mu = 0.1", "solve.step"),
            ("spectrum.ordering = rcm", "spectrum.ordering"),
            ("model.colour = red", "model.colour"),
        ];
        for (text, key) in cases {
            let err = parse(text).unwrap_err().to_string();
            assert!(err.starts_with(key), "{text:?} gave {err:?}");
        }
        assert!(matches!(parse("model.radius 3"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn overrides_apply_last() {
        let cfg = RunConfig::parse_with("model.omega = 0.5", &["model.omega=0.25".into()]).unwrap();
        assert_eq!(cfg.model.omega, 0.25);
        let cfg = parse("solve.step = optimal\nsolve.mu = 0.5\nsolve.l = 1").unwrap();
        assert!((cfg.prg_config().step.tau() - 2.0 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn packaged_fig1_matches_the_reference_run() {
        let cfg = RunConfig::load(Some("paper_fig1"), &[]).unwrap();
        assert_eq!((cfg.model.radius, cfg.model.nr, cfg.model.ntheta), (12.0, 256, 1024));
        assert_eq!((cfg.model.eta, cfg.model.omega), (500.0, 0.9));
        let [hess, opt] = cfg.solve.stages.as_slice() else { panic!("two stages") };
        assert_eq!((hess.precond.kind, hess.iters, hess.precond.refresh), (PrecondKind::Hessian, 10_000, 100));
        assert_eq!(opt.precond.kind, PrecondKind::OptimalShifted);
        assert_eq!((opt.precond.sigma0, opt.precond.drop_tol, opt.precond.ordering), (0.1, 1e-5, Ordering::Amd));
    }
}
