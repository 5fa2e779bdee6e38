use crate::config::{write_snapshot, RunConfig};
use crate::error::CliError;
use serde::Serialize;
use spatiocal::identifiability::{trajectory_excitation_scan, IdentifiabilityReport, PRECHECK_RATE_HZ};
use spatiocal::io::{self, FittedTrajectory, TRAJECTORY_FILE};
use spatiocal::pipeline::{load_dataset, preprocess, run_pipeline, PipelineError, PreprocessReport};
use spatiocal::residuals::{CalibrationState, CameraPoseMeasurement};
use spatiocal::sim::{self, CellSummary, SweepConfig};
use spatiocal::solver::{initialize_state, CalibrationReport, SolverError};
use std::fs;
use std::path::{Path, PathBuf};

pub const REPORT_FILE: &str = "report.json";
pub const IDENTIFIABILITY_FILE: &str = "identifiability.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.json";
pub const TRUTH_TRAJECTORY_FILE: &str = "ground_truth_trajectory.json";

fn create_out(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Config(format!("{}: {e}", cfg.out.display())))?;
    Ok(&cfg.out)
}

fn require_input(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.input
        .as_deref()
        .ok_or_else(|| CliError::Config("no input file given (positional argument or `input` key)".into()))
}

fn camera_span(camera: &[CameraPoseMeasurement]) -> [f64; 2] {
    match (camera.first(), camera.last()) {
        (Some(a), Some(b)) => [a.timestamp, b.timestamp],
        _ => [0.0, 0.0],
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let data = sim::simulate(&cfg.sim)?;
    let out = create_out(cfg)?;
    let mut written = io::write_sim_dataset(out, &data)?;
    if cfg.dump_trajectory {
        let p = out.join(TRUTH_TRAJECTORY_FILE);
        io::write_json(&p, &FittedTrajectory::from_state(&data.truth, [0.0, cfg.sim.duration]))?;
        written.push(p);
    }
    written.push(write_snapshot(cfg, out)?);
    let rms = &data.report.reprojection_rms;
    let mean_rms = rms.iter().sum::<f64>() / rms.len().max(1) as f64;
    let t = &data.truth;
    let rpy = t.extrinsic_rotation.to_roll_pitch_yaw();
    println!(
        "simulated {:.1} s: {} radar, {} camera ({} / {} dropped, mean reprojection rms {:.3} px)",
        cfg.sim.duration,
        data.radar.len(),
        data.camera.len(),
        data.report.radar_dropped,
        data.report.camera_dropped,
        mean_rms
    );
    println!(
        "truth: t_cm = [{:.3}, {:.3}, {:.3}]  rpy_rad = [{:.5}, {:.5}, {:.5}]  alpha = {:.6}  tau_ms = {:.3}",
        t.extrinsic_translation.x * 100.0,
        t.extrinsic_translation.y * 100.0,
        t.extrinsic_translation.z * 100.0,
        rpy[0],
        rpy[1],
        rpy[2],
        t.scale,
        t.time_offset * 1e3
    );
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// Human-facing units of a calibration result.
#[derive(Debug, Clone, Serialize)]
struct Summary {
    translation_cm: [f64; 3],
    rpy_rad: [f64; 3],
    scale: f64,
    time_offset_ms: f64,
}

impl Summary {
    fn of(r: &CalibrationReport) -> Self {
        Summary {
            translation_cm: (r.extrinsic_translation * 100.0).into(),
            rpy_rad: r.extrinsic_rotation_rpy,
            scale: r.scale,
            time_offset_ms: r.time_offset * 1e3,
        }
    }
}

#[derive(Debug, Serialize)]
struct ReportFile {
    status: String,
    dataset: PathBuf,
    error: Option<String>,
    summary: Option<Summary>,
    calibration: Option<CalibrationReport>,
    preprocessing: Option<PreprocessReport>,
    identifiability: Option<IdentifiabilityReport>,
    warnings: Vec<String>,
}

fn print_summary(r: &CalibrationReport) {
    let s = Summary::of(r);
    println!("converged: {} ({:?}, {} iterations)", r.converged, r.termination, r.iterations);
    println!(
        "translation [cm]: {:.3} {:.3} {:.3}",
        s.translation_cm[0], s.translation_cm[1], s.translation_cm[2]
    );
    println!("roll pitch yaw [rad]: {:.5} {:.5} {:.5}", s.rpy_rad[0], s.rpy_rad[1], s.rpy_rad[2]);
    println!("scale: {:.6}", s.scale);
    println!("time offset [ms]: {:.3}", s.time_offset_ms);
    println!("final cost: {:.6e} (prior fraction {:.3e})", r.final_cost, r.prior_cost_fraction);
}

pub fn calibrate(cfg: &RunConfig) -> Result<(), CliError> {
    let input = require_input(cfg)?;
    let dataset = load_dataset(input)?;
    let prior = cfg.prior.as_deref().map(io::read_prior).transpose()?;
    let out = create_out(cfg)?;
    write_snapshot(cfg, out)?;
    let report_path = out.join(REPORT_FILE);
    let mut file = ReportFile {
        status: "ok".into(),
        dataset: input.to_path_buf(),
        error: None,
        summary: None,
        calibration: None,
        preprocessing: None,
        identifiability: None,
        warnings: Vec::new(),
    };
    match run_pipeline(&dataset, prior, &cfg.pipeline, &cfg.solver) {
        Ok(res) => {
            print_summary(&res.calibration);
            for w in &res.warnings {
                println!("warning: {w}");
            }
            if cfg.dump_trajectory {
                let p = out.join(TRAJECTORY_FILE);
                io::write_json(&p, &FittedTrajectory::from_state(&res.calibration.state, camera_span(&dataset.camera)))?;
                println!("wrote {}", p.display());
            }
            file.summary = Some(Summary::of(&res.calibration));
            file.calibration = Some(res.calibration);
            file.preprocessing = Some(res.preprocessing);
            file.identifiability = res.identifiability;
            file.warnings = res.warnings;
            io::write_json(&report_path, &file)?;
            println!("wrote {}", report_path.display());
            Ok(())
        }
        Err(e) => {
            file.status = match &e {
                PipelineError::Solver(SolverError::NotConverged(_)) => "not_converged",
                PipelineError::Solver(SolverError::DivergedNumerically(_)) => "diverged",
                PipelineError::Solver(SolverError::SingularHessian(_)) => "singular",
                PipelineError::NotIdentifiable(_) => "not_identifiable",
                _ => "failed",
            }
            .into();
            file.error = Some(e.to_string());
            if let PipelineError::Solver(se) = &e {
                if let Some(r) = se.best_report() {
                    print_summary(r);
                    file.summary = Some(Summary::of(r));
                    file.calibration = Some(r.clone());
                }
            }
            if let PipelineError::NotIdentifiable(r) = &e {
                file.identifiability = Some((**r).clone());
            }
            io::write_json(&report_path, &file)?;
            println!("wrote {}", report_path.display());
            Err(e.into())
        }
    }
}

#[derive(Debug, Serialize)]
struct IdentifiabilityFile {
    source: PathBuf,
    verdict: &'static str,
    conditions: Vec<String>,
    report: IdentifiabilityReport,
}

fn state_from_input(cfg: &RunConfig, input: &Path) -> Result<(CalibrationState, [f64; 2]), CliError> {
    let value: serde_json::Value = io::read_json(input)?;
    if value.get("trajectory").is_some() {
        let fitted: FittedTrajectory = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
        let state = fitted.to_state().map_err(|e| CliError::Config(format!("{}: {e}", input.display())))?;
        return Ok((state, fitted.span));
    }
    let dataset = load_dataset(input)?;
    let (meas, _) = preprocess(&dataset, &cfg.pipeline)?;
    let state = initialize_state(&meas, &cfg.solver)?;
    Ok((state, camera_span(&meas.camera)))
}

pub fn identifiability(cfg: &RunConfig) -> Result<(), CliError> {
    let input = require_input(cfg)?;
    let (state, span) = state_from_input(cfg, input)?;
    let report = trajectory_excitation_scan(&state, PRECHECK_RATE_HZ, (span[0], span[1]))
        .map_err(PipelineError::from)?;
    let conditions: Vec<String> = report.degenerate_motions.iter().map(|m| m.to_string()).collect();
    let ok = report.identifiable && conditions.is_empty();
    let out = create_out(cfg)?;
    write_snapshot(cfg, out)?;
    let path = out.join(IDENTIFIABILITY_FILE);
    println!("verdict: {}", if ok { "identifiable" } else { "not identifiable" });
    println!("rank: {} of 8 ({} samples)", report.rank, report.n_samples);
    println!("min singular value: {:.6e}", report.min_singular_value);
    if report.weakly_excited && ok {
        println!("warning: weak excitation; consider an extrinsic prior");
    }
    for c in &conditions {
        println!("violated: {c}");
    }
    let mut summary = conditions.clone();
    if !report.identifiable {
        summary.push(format!("rank {} < 8", report.rank));
    }
    let file = IdentifiabilityFile {
        source: input.to_path_buf(),
        verdict: if ok { "identifiable" } else { "not_identifiable" },
        conditions,
        report,
    };
    io::write_json(&path, &file)?;
    println!("wrote {}", path.display());
    if ok {
        Ok(())
    } else {
        Err(CliError::NotIdentifiable(summary.join("; ")))
    }
}

#[derive(Debug, Serialize)]
struct SweepSummaryFile {
    elapsed_s: f64,
    trials_per_cell: usize,
    cells: Vec<CellSummary>,
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let sc = SweepConfig {
        sigma_radar: cfg.sweep.sigma_radar.clone(),
        sigma_pixel: cfg.sweep.sigma_pixel.clone(),
        trials: cfg.sweep.trials,
        seed: cfg.sweep.seed,
        base: cfg.sim.clone(),
        solver: cfg.solver.clone(),
    };
    let out = create_out(cfg)?;
    write_snapshot(cfg, out)?;
    let result = sim::run_noise_sweep(&sc)?;
    let csv = out.join(SWEEP_FILE);
    sim::write_sweep_csv(&result.rows, &csv)?;
    let cells = sim::summarize_sweep(&result.rows);
    println!(
        "{:>8} {:>8} {:>6} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}",
        "sigma_r", "sigma_c", "ok", "rot_deg", "trans_cm", "alpha_pct", "tau_ms", "t<=15cm", "tau<=30"
    );
    for c in &cells {
        println!(
            "{:>8} {:>8} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.2} {:>8.2}",
            c.sigma_r,
            c.sigma_c,
            format!("{}/{}", c.ok, c.trials),
            c.median_rot_err_deg,
            c.median_trans_err_cm,
            c.median_alpha_err_pct,
            c.median_tau_err_ms,
            c.frac_trans_within_15cm,
            c.frac_tau_within_30ms
        );
    }
    let summary = out.join(SWEEP_SUMMARY_FILE);
    io::write_json(&summary, &SweepSummaryFile { elapsed_s: result.elapsed_s, trials_per_cell: sc.trials, cells })?;
    println!("{} trials in {:.1} s", result.rows.len(), result.elapsed_s);
    println!("wrote {}", csv.display());
    println!("wrote {}", summary.display());
    Ok(())
}
