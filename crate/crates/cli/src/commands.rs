use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use gprg_core::diagnostics::{phi_errors, q_ratios_from};
use gprg_core::grid::{read_field_csv, write_field_csv};
use gprg_core::precond::{build_metric, BuildStats};
use gprg_core::riemann::{initial_guess, prg_run, TraceEvent};
use gprg_core::spectrum::{kernel_basis, morse_bott_check, rate_constants, write_eigenvalues_csv, MorseBottReport};
use gprg_core::{ComplexField, IterTrace, ModelInstance, NonlinearityKind, Ordering, PotentialSpec, PrecondSpec, RateConstants};

use crate::check::{self, Fault};
use crate::config::{ConfigError, RunConfig};

/// First positive zero of `J₀`.
const J01: f64 = 2.404_825_557_695_773;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// Missing or malformed input files and bad flags.
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let mut f = create(dir, name)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(runtime)
}

fn finish<W: Write>(r: std::io::Result<()>, mut w: W) -> Result<(), CliError> {
    r.and_then(|_| w.flush()).map_err(runtime)
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))
}

fn load_state(model: &ModelInstance, path: &Path) -> Result<ComplexField, CliError> {
    let text = read_input(path)?;
    let values = read_field_csv(model.grid(), &text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let phi = ComplexField::try_from_values(model.grid().clone(), values)
        .ok_or_else(|| CliError::Input(format!("{}: field has non-finite values", path.display())))?;
    if !phi.is_normalized() {
        return Err(CliError::Input(format!("{}: field is not normalized (mass {})", path.display(), phi.mass_norm_sq())));
    }
    Ok(phi)
}

/// Exact ground-state energy when the instance is the free particle in a disk.
fn bessel_oracle(cfg: &RunConfig) -> Option<f64> {
    let m = &cfg.model;
    let free = m.potential == PotentialSpec::Zero && m.omega == 0.0 && m.nonlinearity == NonlinearityKind::None;
    free.then(|| J01 * J01 / (4.0 * m.radius * m.radius))
}

fn last_build(trace: &IterTrace) -> Option<&BuildStats> {
    trace.events.iter().rev().find_map(|e| match e {
        TraceEvent::MetricBuilt { stats, .. } => Some(stats),
        _ => None,
    })
}

pub fn solve(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let prg = cfg.prg_config();
    prg.validate().map_err(|e| CliError::Input(format!("solve: {e}")))?;
    prepare_out(out)?;
    write_text(out, "config.txt", &cfg.to_text())?;
    let hash = cfg.hash();

    let phi0 = initial_guess(&model, cfg.solve.guess, cfg.solve.seed);
    let start = Instant::now();
    let (trace, phi) = prg_run(&model, &phi0, &prg).map_err(runtime)?;
    let wall_s = start.elapsed().as_secs_f64();
    let last = *trace.last().ok_or_else(|| runtime("solver produced no iterates"))?;

    let meta = json!({ "config_sha256": hash, "version": env!("CARGO_PKG_VERSION") });
    let mut w = create(out, "trace.csv")?;
    finish(trace.write_csv(&meta, &mut w), w)?;
    let mut w = create(out, "field.csv")?;
    finish(write_field_csv(model.grid(), phi.values(), &mut w), w)?;

    if !trace.snapshots.is_empty() {
        let metric = build_metric(&model, &phi, &cfg.spectrum.metric).map_err(runtime)?;
        let errors = phi_errors(&trace, &phi, &metric);
        let pnorm = metric.metric_inner(phi.values(), phi.values()).max(0.0).sqrt();
        let mut w = create(out, "phi_errors.csv")?;
        let r = (|| {
            writeln!(w, "# phi_g_pnorm={pnorm:.17e}")?;
            writeln!(w, "n,error")?;
            for (n, e) in &errors {
                writeln!(w, "{n},{e:.17e}")?;
            }
            Ok(())
        })();
        finish(r, w)?;
    }

    let ev = model.evaluate(phi.values());
    let oracle = bessel_oracle(cfg).map(|e| json!({ "energy": e, "relative_error": (ev.energy - e).abs() / e }));
    let run = json!({
        "config_sha256": hash,
        "version": env!("CARGO_PKG_VERSION"),
        "iterations": last.n,
        "stop": trace.stop,
        "converged": trace.converged(),
        "energy": ev.energy,
        "lambda_tilde": ev.lambda_tilde,
        "lambda_p": last.lambda_p,
        "residual_inf": ev.residual_inf,
        "angular_momentum": model.angular_momentum(phi.values()),
        "mass_defect": (phi.mass_norm() - 1.0).abs(),
        "wall_s": wall_s,
        "metric_builds": trace.events.iter().filter(|e| matches!(e, TraceEvent::MetricBuilt { .. })).count(),
        "last_build": last_build(&trace),
        "energy_increases": trace.warnings().count(),
        "oracle": oracle,
    });
    write_text(out, "run.json", &serde_json::to_string_pretty(&run).map_err(runtime)?)?;

    println!(
        "{} after {} iterations: E = {:.12e}, lambda = {:.12e}, residual = {:.3e} ({:.1} s)",
        if trace.converged() { "converged" } else { "stopped at the iteration limit" },
        last.n,
        ev.energy,
        ev.lambda_tilde,
        ev.residual_inf,
        wall_s
    );
    if let Some(e) = bessel_oracle(cfg) {
        println!("free-particle oracle {e:.12e}, relative error {:.3e}", (ev.energy - e).abs() / e);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

struct SpectrumRow {
    constants: RateConstants,
    stats: BuildStats,
}

fn constants_for(model: &ModelInstance, phi: &ComplexField, cfg: &RunConfig, spec: &PrecondSpec) -> Result<SpectrumRow, CliError> {
    let metric = build_metric(model, phi, spec).map_err(runtime)?;
    let kernel = kernel_basis(model, phi, &metric, true).map_err(runtime)?;
    let constants = rate_constants(model, phi, &metric, &kernel, &cfg.spectrum_options()).map_err(runtime)?;
    Ok(SpectrumRow { constants, stats: metric.stats().clone() })
}

fn morse_bott(model: &ModelInstance, phi: &ComplexField, cfg: &RunConfig) -> Result<MorseBottReport, CliError> {
    let metric = build_metric(model, phi, &cfg.spectrum.metric).map_err(runtime)?;
    let kernel = kernel_basis(model, phi, &metric, true).map_err(runtime)?;
    Ok(morse_bott_check(model, phi, &metric, &kernel, &cfg.spectrum_options()))
}

pub fn spectrum(cfg: &RunConfig, state: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let phi = load_state(&model, state)?;
    let residual = model.residual_inf(&phi).map_err(runtime)?;
    let threshold = cfg.spectrum.residual_threshold;
    let unreliable = residual > threshold;
    if unreliable && !force {
        return Err(runtime(format!(
            "state residual {residual:.3e} is above spectrum.residual_threshold = {threshold:e}; pass --force to analyze it anyway"
        )));
    }
    prepare_out(out)?;
    write_text(out, "config.txt", &cfg.to_text())?;

    let base = cfg.spectrum.metric;
    let mut main = constants_for(&model, &phi, cfg, &base)?;
    main.constants.unreliable = unreliable;
    write_text(out, "constants.json", &main.constants.to_json())?;

    let mut mb = morse_bott(&model, &phi, cfg)?;
    mb.unreliable = unreliable;
    write_text(out, "morse_bott.json", &mb.to_json())?;
    let mut w = create(out, "eigenvalues.csv")?;
    finish(write_eigenvalues_csv(&mb.eigenvalues, &mut w), w)?;

    let mut rows = vec![(base.ordering, main)];
    if cfg.spectrum.compare_orderings {
        let other = match base.ordering {
            Ordering::Amd => Ordering::Natural,
            Ordering::Natural => Ordering::Amd,
        };
        let mut row = constants_for(&model, &phi, cfg, &base.with_ordering(other))?;
        row.constants.unreliable = unreliable;
        write_text(out, &format!("constants_{}.json", other.name()), &row.constants.to_json())?;
        rows.push((other, row));
    }
    let mut w = create(out, "table.csv")?;
    let r = (|| {
        writeln!(w, "ordering,mu,l,kappa,factor_nnz,fill_ratio,shift,build_ms")?;
        for (ordering, row) in &rows {
            let (c, s) = (&row.constants, &row.stats);
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{},{:.17e},{:.17e},{:.3}",
                ordering.name(),
                c.mu,
                c.l,
                c.kappa,
                s.factor_nnz,
                s.fill_ratio,
                s.shift,
                s.build_ms
            )?;
        }
        Ok(())
    })();
    finish(r, w)?;

    if !cfg.spectrum.sigma_sweep.is_empty() {
        let sweep: Vec<(f64, Result<SpectrumRow, CliError>)> = cfg
            .spectrum
            .sigma_sweep
            .par_iter()
            .map(|&s| (s, constants_for(&model, &phi, cfg, &base.with_sigma0(s))))
            .collect();
        let mut w = create(out, "sweep.csv")?;
        let mut r = writeln!(w, "sigma0,mu,l,kappa");
        for (s, row) in sweep {
            let c = row?.constants;
            r = r.and_then(|_| writeln!(w, "{s:.17e},{:.17e},{:.17e},{:.17e}", c.mu, c.l, c.kappa));
        }
        finish(r, w)?;
    }

    for (ordering, row) in &rows {
        let c = &row.constants;
        println!("{:<8} mu = {:.6e}  L = {:.9}  kappa = {:.6e}  nnz(L) = {}", ordering.name(), c.mu, c.l, c.kappa, row.stats.factor_nnz);
    }
    println!(
        "Morse-Bott: {} eigenvalues below {:.3e}, kernel dimension {}, {}",
        mb.near_zero,
        mb.threshold,
        mb.kernel_dim,
        if mb.consistent { "consistent" } else { "INCONSISTENT" }
    );
    if unreliable {
        println!("warning: residual {residual:.3e} above threshold; results flagged unreliable");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

/// Parses `phi_errors.csv`; returns the errors and `‖φ_g‖_P`.
fn read_errors(path: &Path) -> Result<(Vec<(usize, f64)>, f64), CliError> {
    let text = read_input(path)?;
    let bad = |k: usize, m: &str| CliError::Input(format!("{}:{}: {m}", path.display(), k + 1));
    let mut pnorm = None;
    let mut errors = Vec::new();
    let mut header = false;
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(v) = line.strip_prefix("# phi_g_pnorm=") {
            pnorm = Some(v.parse::<f64>().map_err(|_| bad(k, "bad phi_g_pnorm"))?);
            continue;
        }
        if !header {
            if line != "n,error" {
                return Err(bad(k, "expected header n,error"));
            }
            header = true;
            continue;
        }
        let (n, e) = line.split_once(',').ok_or_else(|| bad(k, "expected two columns"))?;
        errors.push((n.parse().map_err(|_| bad(k, "bad iteration index"))?, e.parse().map_err(|_| bad(k, "bad error value"))?));
    }
    let pnorm = pnorm.ok_or_else(|| CliError::Input(format!("{}: missing # phi_g_pnorm= line", path.display())))?;
    Ok((errors, pnorm))
}

pub fn rates(cfg: &RunConfig, trace_path: &Path, constants_path: &Path, errors_path: Option<PathBuf>, out: &Path) -> Result<(), CliError> {
    let text = read_input(trace_path)?;
    let (_, trace) = IterTrace::read_csv(&text).map_err(|e| CliError::Input(format!("{}: {e}", trace_path.display())))?;
    let text = read_input(constants_path)?;
    let constants = RateConstants::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", constants_path.display())))?;
    let errors_path = errors_path.or_else(|| {
        let sibling = trace_path.with_file_name("phi_errors.csv");
        sibling.exists().then_some(sibling)
    });
    let (errors, pnorm) = match &errors_path {
        Some(p) => read_errors(p)?,
        None => (Vec::new(), 0.0),
    };
    let tau = trace
        .entries
        .iter()
        .rev()
        .map(|e| e.tau)
        .find(|&t| t > 0.0)
        .ok_or_else(|| CliError::Input(format!("{}: no step sizes recorded", trace_path.display())))?;
    let energies: Vec<(usize, f64)> = trace.entries.iter().map(|e| (e.n, e.energy)).collect();
    let report = q_ratios_from(&energies, &errors, 1e3 * f64::EPSILON * pnorm, &cfg.tail_window())
        .map_err(runtime)?
        .with_theory(constants.rho_tau(tau));

    prepare_out(out)?;
    let mut value: serde_json::Value = serde_json::from_str(&report.to_json()).map_err(runtime)?;
    value["tau"] = json!(tau);
    value["constants_unreliable"] = json!(constants.unreliable);
    write_text(out, "rates.json", &serde_json::to_string_pretty(&value).map_err(runtime)?)?;
    let mut w = create(out, "q.csv")?;
    finish(report.write_q_csv(&mut w), w)?;

    println!("regime: {}", serde_json::to_value(report.regime).map_err(runtime)?.as_str().unwrap_or("?"));
    println!("tau = {tau:.6e}, rho_tau = {:.6}", report.rho_tau.unwrap_or(f64::NAN));
    println!("tail Q_E = {:.6} over n in [{}, {}]", report.q_e_tail.mean, report.q_e_tail.first_n, report.q_e_tail.last_n);
    match report.q_phi_tail {
        Some(t) => println!("tail Q_phi = {:.6} over n in [{}, {}]", t.mean, t.first_n, t.last_n),
        None => println!("tail Q_phi unavailable (no snapshot errors)"),
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

pub fn check(filter: Option<&str>, fault: Option<Fault>) -> Result<(), CliError> {
    if let Some(f) = filter {
        if !check::is_known(f) {
            return Err(CliError::Input(format!("--filter: unknown group or check {f:?} (groups: {})", check::groups().join(", "))));
        }
    }
    let outcomes = check::run(filter, fault);
    println!("{:<12} {:<28} {:<6} {:>9}  detail", "group", "check", "result", "ms");
    for o in &outcomes {
        println!("{:<12} {:<28} {:<6} {:>9.1}  {}", o.group, o.name, if o.pass { "PASS" } else { "FAIL" }, o.ms, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        return Err(runtime(format!("{failed} checks failed")));
    }
    Ok(())
}

pub fn export_density(cfg: &RunConfig, state: &Path, out: &Path) -> Result<(), CliError> {
    let model = cfg.build_model()?;
    let phi = load_state(&model, state)?;
    prepare_out(out)?;
    let grid = model.grid();
    let density = phi.density();
    let mut w = create(out, "density.csv")?;
    let r = (|| {
        writeln!(w, "i,j,r,theta,x,y,density")?;
        for i in 0..grid.nr() {
            for j in 0..grid.ntheta() {
                let (x, y) = grid.xy(i, j);
                let p = grid.index(i, j);
                writeln!(w, "{i},{j},{:.17e},{:.17e},{x:.17e},{y:.17e},{:.17e}", grid.r_nodes()[i], grid.theta(j), density[p])?;
            }
        }
        Ok(())
    })();
    finish(r, w)?;
    println!("wrote {}", out.join("density.csv").display());
    Ok(())
}
