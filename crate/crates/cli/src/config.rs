//! Run configuration: a TOML or JSON file, overridden by `SPATIOCAL_*`
//! environment variables, overridden by flags.

use crate::error::CliError;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use spatiocal::pipeline::PipelineConfig;
use spatiocal::sim::SimConfig;
use spatiocal::solver::ProblemConfig;
use std::path::{Path, PathBuf};

pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixTarget {
    Alpha,
    Tau,
    Extrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub sigma_radar: Vec<f64>,
    pub sigma_pixel: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid { sigma_radar: vec![0.05, 0.2], sigma_pixel: vec![0.1, 0.4], trials: 50, seed: 0 }
    }
}

/// Everything a command needs; written back out as the resolved snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset metadata or trajectory file for `calibrate` / `identifiability`.
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub prior: Option<PathBuf>,
    pub dump_trajectory: bool,
    pub threads: Option<usize>,
    pub sim: SimConfig,
    pub solver: ProblemConfig,
    pub pipeline: PipelineConfig,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            out: PathBuf::from("."),
            prior: None,
            dump_trajectory: false,
            threads: None,
            sim: SimConfig::default(),
            solver: ProblemConfig::default(),
            pipeline: PipelineConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

/// Values taken from flags or the environment; `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub knot_dt: Option<f64>,
    pub spline_order: Option<usize>,
    pub tau_bound: Option<f64>,
    pub fix: Vec<FixTarget>,
    pub prior: Option<PathBuf>,
    pub flip_doppler_sign: bool,
    pub dump_trajectory: bool,
    pub trials: Option<usize>,
    pub sigma_radar: Vec<f64>,
    pub sigma_pixel: Vec<f64>,
}

pub fn load_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: RunConfig = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let rebase = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    cfg.input.as_mut().map(rebase);
    cfg.prior.as_mut().map(rebase);
    rebase(&mut cfg.out);
    Ok(cfg)
}

pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match file {
        Some(p) => load_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &o.input {
        cfg.input = Some(p.clone());
    }
    if let Some(p) = &o.out {
        cfg.out = p.clone();
    }
    if let Some(p) = &o.prior {
        cfg.prior = Some(p.clone());
    }
    if cfg.prior.is_some() {
        cfg.solver.use_prior = true;
    }
    if let Some(s) = o.seed {
        cfg.sim.seed = s;
        cfg.sweep.seed = s;
        cfg.pipeline.ransac.seed = s;
    }
    if let Some(n) = o.threads {
        cfg.threads = Some(n);
    }
    if let Some(dt) = o.knot_dt {
        cfg.sim.knot_spacing = dt;
        cfg.solver.knot_spacing = dt;
    }
    if let Some(k) = o.spline_order {
        cfg.sim.spline_order = k;
        cfg.solver.spline_order = k;
    }
    if let Some(b) = o.tau_bound {
        cfg.solver.tau_bound = b;
    }
    for f in &o.fix {
        match f {
            FixTarget::Alpha => cfg.solver.fix_scale = true,
            FixTarget::Tau => cfg.solver.fix_time_offset = true,
            FixTarget::Extrinsics => cfg.solver.fix_extrinsics = true,
        }
    }
    cfg.pipeline.flip_doppler_sign |= o.flip_doppler_sign;
    cfg.dump_trajectory |= o.dump_trajectory;
    if let Some(n) = o.trials {
        cfg.sweep.trials = n;
    }
    if !o.sigma_radar.is_empty() {
        cfg.sweep.sigma_radar = o.sigma_radar.clone();
    }
    if !o.sigma_pixel.is_empty() {
        cfg.sweep.sigma_pixel = o.sigma_pixel.clone();
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    // TOML integers are signed 64-bit
    let max = i64::MAX as u64;
    for (name, seed) in [("sim.seed", cfg.sim.seed), ("sweep.seed", cfg.sweep.seed), ("pipeline.ransac.seed", cfg.pipeline.ransac.seed)] {
        if seed > max {
            return Err(CliError::Config(format!("{name} must not exceed {max}")));
        }
    }
    if cfg.threads == Some(0) {
        return Err(CliError::Config("threads must be at least 1".into()));
    }
    cfg.sim.validate().map_err(|e| CliError::Config(format!("sim: {e}")))?;
    cfg.solver.validate().map_err(|e| CliError::Config(format!("solver: {e}")))?;
    Ok(())
}

/// Snapshot with absolute paths so it can be replayed from any directory.
pub fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<PathBuf, CliError> {
    let mut snap = cfg.clone();
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    snap.input = snap.input.as_deref().map(abs);
    snap.prior = snap.prior.as_deref().map(abs);
    snap.out = abs(&snap.out);
    let text = toml::to_string_pretty(&snap).map_err(|e| CliError::Config(format!("snapshot: {e}")))?;
    let path = dir.join(SNAPSHOT_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let o = Overrides {
            seed: Some(i64::MAX as u64),
            knot_dt: Some(0.05),
            fix: vec![FixTarget::Tau],
            out: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let cfg = resolve(None, &o).unwrap();
        let path = write_snapshot(&cfg, dir.path()).unwrap();
        let back = load_file(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "input = \"data/dataset.json\"\n[solver]\ntau_bound = 0.2\nknot_spacing = 0.2\n").unwrap();
        let cfg = resolve(Some(&p), &Overrides { knot_dt: Some(0.05), ..Default::default() }).unwrap();
        assert_eq!(cfg.solver.tau_bound, 0.2);
        assert_eq!(cfg.solver.knot_spacing, 0.05);
        assert_eq!(cfg.input.unwrap(), dir.path().join("data/dataset.json"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[solver]\nknot_spacin = 0.2\n").unwrap();
        let err = resolve(Some(&p), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("knot_spacin"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
