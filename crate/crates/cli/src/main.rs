mod commands;
mod config;
mod error;

use clap::{ArgAction, Args, Parser, Subcommand};
use config::{FixTarget, Overrides};
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CODES: &str = "\
Exit codes: 0 success, 2 input or config error, 3 not identifiable or degenerate, 4 solver failure.
Every run writes resolved_config.toml into --out; pass it back with --config to reproduce the run.";

const SWEEP_COLUMNS: &str = "\
sweep.csv columns (one row per trial, signed errors, estimate minus truth):
  sigma_r            radar ego-velocity noise σ [m/s]
  sigma_c            corner pixel noise σ [px]
  trial              trial index within the cell
  status             ok | not_converged | diverged | singular | failed | sim_failed
  rot_err_deg        angle of R_est·R_trueᵀ [deg] (non-negative)
  trans_err_x_cm     translation error, x [cm]
  trans_err_y_cm     translation error, y [cm]
  trans_err_z_cm     translation error, z [cm]
  trans_err_norm_cm  translation error norm [cm]
  alpha_err_pct      (α_est − α_true)/α_true [%]
  tau_err_ms         τ_est − τ_true [ms]
Failed trials carry NaN errors. sweep_summary.json holds per-cell medians of absolute errors.";

const REPORT_FIELDS: &str = "\
report.json: status, dataset, error, summary {translation_cm, rpy_rad, scale, time_offset_ms},
calibration (extrinsic_rotation, extrinsic_rotation_rpy [rad], extrinsic_translation [m], scale,
time_offset [s], costs, prior_cost_fraction, iterations, covariance 8x8 in the order
[δθ_x, δθ_y, δθ_z, t_x, t_y, t_z, α, τ]), preprocessing, identifiability, warnings.
--dump-trajectory writes trajectory.json (knot grid, control points, quaternions wxyz).";

#[derive(Debug, Parser)]
#[command(name = "spatiocal", version, about = "Spatiotemporal radar-camera calibration from motion", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Run configuration (TOML, or JSON by extension)
    #[arg(long, global = true, env = "SPATIOCAL_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for simulation, sweep and RANSAC
    #[arg(long, global = true, env = "SPATIOCAL_SEED", value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, env = "SPATIOCAL_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for sweeps
    #[arg(long, global = true, env = "SPATIOCAL_THREADS")]
    threads: Option<usize>,
    /// Knot spacing [s]
    #[arg(long, global = true, env = "SPATIOCAL_KNOT_DT")]
    knot_dt: Option<f64>,
    /// Spline order k
    #[arg(long, global = true, env = "SPATIOCAL_SPLINE_ORDER")]
    spline_order: Option<usize>,
    /// Largest admissible |τ| [s]
    #[arg(long, global = true, env = "SPATIOCAL_TAU_BOUND")]
    tau_bound: Option<f64>,
    /// Hold parameters at their initial values
    #[arg(long, global = true, env = "SPATIOCAL_FIX", value_enum, value_delimiter = ',')]
    fix: Vec<FixTarget>,
    /// Extrinsic prior JSON
    #[arg(long, global = true, env = "SPATIOCAL_PRIOR")]
    prior: Option<PathBuf>,
    /// Negate radar range rates at ingestion
    #[arg(long, global = true, env = "SPATIOCAL_FLIP_DOPPLER_SIGN")]
    flip_doppler_sign: bool,
    /// Write the fitted trajectory as JSON
    #[arg(long, global = true, env = "SPATIOCAL_DUMP_TRAJECTORY")]
    dump_trajectory: bool,
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[arg(short, long, global = true, action = ArgAction::Count, conflicts_with = "verbose")]
    quiet: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a simulated dataset with ground truth
    Simulate,
    /// Calibrate a dataset described by a metadata JSON
    #[command(after_help = REPORT_FIELDS)]
    Calibrate { dataset: Option<PathBuf> },
    /// Excitation analysis of a dataset or a dumped trajectory
    Identifiability { input: Option<PathBuf> },
    /// Monte-Carlo noise sweep
    #[command(after_help = SWEEP_COLUMNS)]
    Sweep {
        #[arg(long)]
        trials: Option<usize>,
        /// Radar noise levels [m/s], comma separated
        #[arg(long, value_delimiter = ',')]
        sigma_radar: Vec<f64>,
        /// Pixel noise levels [px], comma separated
        #[arg(long, value_delimiter = ',')]
        sigma_pixel: Vec<f64>,
    },
}

fn init_logging(verbose: u8, quiet: u8) {
    let level = match (verbose, quiet) {
        (_, q) if q >= 2 => log::LevelFilter::Off,
        (_, 1) => log::LevelFilter::Error,
        (0, _) => log::LevelFilter::Warn,
        (1, _) => log::LevelFilter::Info,
        (2, _) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let mut o = Overrides {
        seed: g.seed,
        out: g.out,
        threads: g.threads,
        knot_dt: g.knot_dt,
        spline_order: g.spline_order,
        tau_bound: g.tau_bound,
        fix: g.fix,
        prior: g.prior,
        flip_doppler_sign: g.flip_doppler_sign,
        dump_trajectory: g.dump_trajectory,
        ..Default::default()
    };
    match &cli.command {
        Command::Calibrate { dataset: input } | Command::Identifiability { input } => o.input = input.clone(),
        Command::Sweep { trials, sigma_radar, sigma_pixel } => {
            o.trials = *trials;
            o.sigma_radar = sigma_radar.clone();
            o.sigma_pixel = sigma_pixel.clone();
        }
        Command::Simulate => {}
    }
    let cfg = config::resolve(g.config.as_deref(), &o)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Calibrate { .. } => commands::calibrate(&cfg),
        Command::Identifiability { .. } => commands::identifiability(&cfg),
        Command::Sweep { .. } => commands::sweep(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose, cli.global.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
