//! `gprg`: ground states of the rotating Gross–Pitaevskii energy on a disk.

mod check;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use check::Fault;
use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "gprg", version, about = "Preconditioned Riemannian gradient solver for rotating condensates")]
struct Cli {
    /// Config file, or one of the packaged configs: paper_fig1, bessel_check, small_vortex.
    #[arg(long, global = true, value_name = "PATH|NAME")]
    config: Option<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Initial-guess seed (overrides `solve.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` assignment applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver and write trace.csv, field.csv and run.json.
    Solve,
    /// Rate constants and the Morse–Bott report at a converged state.
    Spectrum {
        /// Field CSV written by `solve`.
        #[arg(long)]
        state: PathBuf,
        /// Analyze a state whose residual is above the threshold.
        #[arg(long)]
        force: bool,
    },
    /// Observed convergence ratios compared with the predicted rate.
    Rates {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        constants: PathBuf,
        /// Snapshot errors; defaults to phi_errors.csv next to the trace.
        #[arg(long)]
        errors: Option<PathBuf>,
    },
    /// Small-scale self-tests against independent oracles.
    Check {
        /// Run only one group (grid, model, precond, riemann, spectrum, diagnostics) or check.
        #[arg(long)]
        filter: Option<String>,
        /// Inject a known defect to confirm the checks catch it.
        #[arg(long, value_enum)]
        fault: Option<Fault>,
    },
    /// Write |φ|² with Cartesian coordinates for plotting.
    ExportDensity {
        #[arg(long)]
        state: PathBuf,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("GP_THREADS") else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Input(format!("GP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("solve.seed={seed}"));
    }
    Ok(RunConfig::load(cli.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    if let Command::Check { filter, fault } = &cli.command {
        return commands::check(filter.as_deref(), *fault);
    }
    let cfg = load_config(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    match &cli.command {
        Command::Solve => commands::solve(&cfg, &out),
        Command::Spectrum { state, force } => commands::spectrum(&cfg, state, &out, *force),
        Command::Rates { trace, constants, errors } => commands::rates(&cfg, trace, constants, errors.clone(), &out),
        Command::ExportDensity { state } => commands::export_density(&cfg, state, &out),
        Command::Check { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
