//! Ingestion, preprocessing and orchestration from dataset files to a report.

use crate::egovel::{ransac_ego_velocity, EgoVelocityError, EgoVelocityMeasurement, RadarScan, RansacConfig};
use crate::geometry::{log_so3, Mat3, Rotation, Vec3};
use crate::identifiability::{
    trajectory_excitation_scan, IdentifiabilityError, IdentifiabilityReport, PRECHECK_RATE_HZ,
};
use crate::io::{self, IoError, Metadata, PoseCovariance, RadarFormat};
use crate::residuals::{CalibrationState, CameraPoseMeasurement, ExtrinsicPrior};
use crate::solver::{initialize_state, solve, CalibrationReport, Measurements, ProblemConfig, SolverError};
use nalgebra::SVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("query time {t} outside stream span [{start}, {end}]")]
    OutOfSpan { t: f64, start: f64, end: f64 },
    #[error("{0} stream is empty after preprocessing")]
    EmptyStream(&'static str),
    #[error("trajectory is not identifiable (rank {}, min singular value {:.3e}){}", .0.rank, .0.min_singular_value, conditions(.0))]
    NotIdentifiable(Box<IdentifiabilityReport>),
    #[error(transparent)]
    Identifiability(#[from] IdentifiabilityError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn conditions(r: &IdentifiabilityReport) -> String {
    if r.degenerate_motions.is_empty() {
        String::new()
    } else {
        let names: Vec<String> = r.degenerate_motions.iter().map(|m| m.to_string()).collect();
        format!(": {}", names.join(", "))
    }
}

impl PipelineError {
    /// 2 for input problems, 3 for identifiability, 4 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Io(_)
            | PipelineError::InvalidConfig(_)
            | PipelineError::OutOfSpan { .. }
            | PipelineError::EmptyStream(_) => 2,
            PipelineError::NotIdentifiable(_) | PipelineError::Identifiability(_) => 3,
            PipelineError::Solver(SolverError::InvalidConfig(_)) => 2,
            PipelineError::Solver(SolverError::SingularHessian(_)) => 3,
            PipelineError::Solver(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MedianFilterConfig {
    pub enabled: bool,
    /// Full width of the centered window (s).
    pub window: f64,
    /// Rejection threshold in standard deviations.
    pub threshold: f64,
}

impl Default for MedianFilterConfig {
    fn default() -> Self {
        Self::radar()
    }
}

impl MedianFilterConfig {
    pub fn radar() -> Self {
        MedianFilterConfig { enabled: true, window: 0.2, threshold: 3.0 }
    }

    pub fn camera() -> Self {
        MedianFilterConfig { enabled: true, window: 0.85, threshold: 3.0 }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.window > 0.0 && self.threshold > 0.0) {
            return Err(PipelineError::InvalidConfig("median filter window and threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub total: usize,
    /// Indices of rejected samples in the input stream.
    pub rejected: Vec<usize>,
    /// Samples passed through because their window held fewer than 3 samples
    /// or extended past either end of the stream.
    pub sparse_windows: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Whether `window[center]` deviates from the componentwise window median by
/// more than `threshold` leave-one-out standard deviations in any component.
fn is_outlier<const D: usize>(window: &[SVector<f64, D>], center: usize, threshold: f64) -> bool {
    let n = window.len();
    (0..D).any(|k| {
        let mut col: Vec<f64> = window.iter().map(|v| v[k]).collect();
        let med = median(&mut col);
        let others: Vec<f64> = window.iter().enumerate().filter(|(i, _)| *i != center).map(|(_, v)| v[k]).collect();
        let mean = others.iter().sum::<f64>() / others.len() as f64;
        let var = others.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 2) as f64;
        (window[center][k] - med).abs() > threshold * var.sqrt()
    })
}

fn window_bounds(times: &[f64], i: usize, half: f64) -> (usize, usize) {
    let lo = times.partition_point(|&t| t < times[i] - half);
    let hi = times.partition_point(|&t| t <= times[i] + half);
    (lo, hi)
}

/// Rejection mask for a sorted stream of timestamped vectors.
pub fn median_outlier_filter<const D: usize>(
    stream: &[(f64, SVector<f64, D>)],
    cfg: &MedianFilterConfig,
) -> Result<(Vec<(f64, SVector<f64, D>)>, FilterReport), PipelineError> {
    cfg.validate()?;
    let times: Vec<f64> = stream.iter().map(|s| s.0).collect();
    check_sorted(&times)?;
    let values: Vec<SVector<f64, D>> = stream.iter().map(|s| s.1).collect();
    let mut report = FilterReport { total: stream.len(), ..Default::default() };
    let mut kept = Vec::with_capacity(stream.len());
    for i in 0..stream.len() {
        let (lo, hi) = window_bounds(&times, i, 0.5 * cfg.window);
        if sparse(&times, i, lo, hi, cfg.window) {
            report.sparse_windows += 1;
        } else if is_outlier(&values[lo..hi], i - lo, cfg.threshold) {
            report.rejected.push(i);
            continue;
        }
        kept.push(stream[i]);
    }
    Ok((kept, report))
}

/// Fewer than 3 samples, or a window cut off by either end of the stream.
fn sparse(times: &[f64], i: usize, lo: usize, hi: usize, window: f64) -> bool {
    let half = 0.5 * window;
    hi - lo < 3 || times[i] - half < times[0] || times[i] + half > times[times.len() - 1]
}

fn check_sorted(times: &[f64]) -> Result<(), PipelineError> {
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(PipelineError::InvalidConfig("stream is not time-sorted".into()));
    }
    Ok(())
}

/// Camera filter on `[r_c^{wc}; log(R_cw·R̄ᵀ)]`, with `R̄` the chordal mean of
/// the window.
pub fn camera_outlier_filter(
    camera: &[CameraPoseMeasurement],
    cfg: &MedianFilterConfig,
) -> Result<(Vec<CameraPoseMeasurement>, FilterReport), PipelineError> {
    cfg.validate()?;
    let times: Vec<f64> = camera.iter().map(|m| m.timestamp).collect();
    check_sorted(&times)?;
    let mut report = FilterReport { total: camera.len(), ..Default::default() };
    let mut kept = Vec::with_capacity(camera.len());
    for i in 0..camera.len() {
        let (lo, hi) = window_bounds(&times, i, 0.5 * cfg.window);
        if sparse(&times, i, lo, hi, cfg.window) {
            report.sparse_windows += 1;
            kept.push(camera[i]);
            continue;
        }
        let sum = camera[lo..hi].iter().fold(Mat3::zeros(), |acc, m| acc + m.rotation.matrix());
        let mean_t = Rotation::from_matrix_projected(&sum).transpose();
        let window: Vec<SVector<f64, 6>> = camera[lo..hi]
            .iter()
            .map(|m| {
                let d = log_so3(&(m.rotation * mean_t));
                SVector::<f64, 6>::new(m.translation.x, m.translation.y, m.translation.z, d.x, d.y, d.z)
            })
            .collect();
        if is_outlier(&window, i - lo, cfg.threshold) {
            report.rejected.push(i);
        } else {
            kept.push(camera[i]);
        }
    }
    Ok((kept, report))
}

/// Componentwise linear interpolation of a sorted stream.
pub fn interpolate_linear<const D: usize>(
    stream: &[(f64, SVector<f64, D>)],
    queries: &[f64],
) -> Result<Vec<SVector<f64, D>>, PipelineError> {
    if stream.is_empty() {
        return Err(PipelineError::EmptyStream("interpolation"));
    }
    let (start, end) = (stream[0].0, stream[stream.len() - 1].0);
    queries
        .iter()
        .map(|&t| {
            if !(t >= start && t <= end) {
                return Err(PipelineError::OutOfSpan { t, start, end });
            }
            let i = stream.partition_point(|s| s.0 <= t);
            if i == stream.len() {
                return Ok(stream[i - 1].1);
            }
            let (a, b) = (&stream[i - 1], &stream[i]);
            let s = (t - a.0) / (b.0 - a.0);
            Ok(a.1 + (b.1 - a.1) * s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RadarData {
    Scans(Vec<RadarScan>),
    Velocities(Vec<EgoVelocityMeasurement>),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub radar: RadarData,
    pub camera: Vec<CameraPoseMeasurement>,
    pub metadata: Metadata,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads `dataset.json` and the files it references.
pub fn load_dataset(metadata_path: &Path) -> Result<Dataset, PipelineError> {
    let metadata: Metadata = io::read_json(metadata_path)?;
    match &metadata.units {
        Some(u) => u.check()?,
        None => return Err(IoError::UnitMismatch("metadata declares no units".into()).into()),
    }
    let base = metadata_path.parent().unwrap_or(Path::new("."));
    let d = metadata.covariance_defaults;
    let radar_path = resolve(base, &metadata.radar);
    let radar = match metadata.radar_format {
        RadarFormat::Scans => RadarData::Scans(io::read_radar_scans(&radar_path)?),
        RadarFormat::EgoVelocity => RadarData::Velocities(io::read_ego_velocities(
            &radar_path,
            Mat3::identity() * d.radar_sigma.powi(2),
        )?),
    };
    let sidecar = match &metadata.camera_covariance {
        Some(p) => Some(io::read_json::<io::CameraCovarianceSidecar>(&resolve(base, p))?),
        None => None,
    };
    let camera = io::read_camera_poses(
        &resolve(base, &metadata.camera),
        sidecar.as_ref(),
        PoseCovariance::isotropic(d.camera_rotation_sigma, d.camera_translation_sigma),
    )?;
    Ok(Dataset { radar, camera, metadata })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ransac: RansacConfig,
    pub radar_filter: MedianFilterConfig,
    pub camera_filter: MedianFilterConfig,
    /// Negate range rates (or ego-velocities) at ingestion.
    pub flip_doppler_sign: bool,
    pub identifiability_check: bool,
    /// Solve even when the precheck fails.
    pub allow_unidentifiable: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ransac: RansacConfig::default(),
            radar_filter: MedianFilterConfig::radar(),
            camera_filter: MedianFilterConfig::camera(),
            flip_doppler_sign: false,
            identifiability_check: true,
            allow_unidentifiable: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RansacSummary {
    pub scans: usize,
    pub accepted: usize,
    pub too_few_detections: usize,
    pub no_consensus: usize,
    pub degenerate: usize,
    pub invalid: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PreprocessReport {
    pub ransac: Option<RansacSummary>,
    pub radar_filter: Option<FilterReport>,
    pub camera_filter: Option<FilterReport>,
    pub n_radar: usize,
    pub n_camera: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineOutput {
    pub calibration: CalibrationReport,
    pub preprocessing: PreprocessReport,
    pub identifiability: Option<IdentifiabilityReport>,
    pub warnings: Vec<String>,
}

/// Seed of scan `index` derived from the master seed.
pub fn scan_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn estimate_ego_velocities(scans: &[RadarScan], cfg: &RansacConfig) -> (Vec<EgoVelocityMeasurement>, RansacSummary) {
    let results: Vec<Result<EgoVelocityMeasurement, EgoVelocityError>> = scans
        .par_iter()
        .enumerate()
        .map(|(i, s)| ransac_ego_velocity(s, &RansacConfig { seed: scan_seed(cfg.seed, i), ..*cfg }))
        .collect();
    let mut summary = RansacSummary { scans: scans.len(), ..Default::default() };
    let mut out = Vec::with_capacity(scans.len());
    for r in results {
        match r {
            Ok(m) => {
                summary.accepted += 1;
                out.push(m);
            }
            Err(EgoVelocityError::TooFewDetections(_)) => summary.too_few_detections += 1,
            Err(EgoVelocityError::NoConsensus { .. }) => summary.no_consensus += 1,
            Err(EgoVelocityError::DegenerateGeometry { .. }) => summary.degenerate += 1,
            Err(EgoVelocityError::InvalidDetection(_)) => summary.invalid += 1,
        }
    }
    (out, summary)
}

/// RANSAC and median filtering; returns solver-ready streams.
pub fn preprocess(dataset: &Dataset, cfg: &PipelineConfig) -> Result<(Measurements, PreprocessReport), PipelineError> {
    let mut report = PreprocessReport::default();
    let mut radar = match &dataset.radar {
        RadarData::Scans(scans) => {
            let flipped: Vec<RadarScan>;
            let scans = if cfg.flip_doppler_sign {
                flipped = scans
                    .iter()
                    .map(|s| {
                        let mut s = s.clone();
                        s.detections.iter_mut().for_each(|d| d.range_rate = -d.range_rate);
                        s
                    })
                    .collect();
                &flipped
            } else {
                scans
            };
            let (v, summary) = estimate_ego_velocities(scans, &cfg.ransac);
            report.ransac = Some(summary);
            v
        }
        RadarData::Velocities(v) => {
            let mut v = v.clone();
            if cfg.flip_doppler_sign {
                v.iter_mut().for_each(|m| m.velocity = -m.velocity);
            }
            v
        }
    };
    let mut camera = dataset.camera.clone();
    if cfg.radar_filter.enabled {
        let stream: Vec<(f64, Vec3)> = radar.iter().map(|m| (m.timestamp, m.velocity)).collect();
        let (_, r) = median_outlier_filter(&stream, &cfg.radar_filter)?;
        let mut reject = r.rejected.iter().peekable();
        let mut i = 0;
        radar.retain(|_| {
            let drop = reject.next_if_eq(&&i).is_some();
            i += 1;
            !drop
        });
        report.radar_filter = Some(r);
    }
    if cfg.camera_filter.enabled {
        let (kept, r) = camera_outlier_filter(&camera, &cfg.camera_filter)?;
        camera = kept;
        report.camera_filter = Some(r);
    }
    if radar.is_empty() {
        return Err(PipelineError::EmptyStream("radar"));
    }
    if camera.is_empty() {
        return Err(PipelineError::EmptyStream("camera"));
    }
    report.n_radar = radar.len();
    report.n_camera = camera.len();
    Ok((Measurements { radar, camera, prior: None }, report))
}

/// Excitation scan of an initialized state; `Err(NotIdentifiable)` when rank
/// is deficient or a degenerate motion is detected and no prior is available.
pub fn identifiability_precheck(
    state: &CalibrationState,
    span: (f64, f64),
    has_prior: bool,
    allow: bool,
    warnings: &mut Vec<String>,
) -> Result<IdentifiabilityReport, PipelineError> {
    let report = trajectory_excitation_scan(state, PRECHECK_RATE_HZ, span)?;
    let failed = !report.identifiable || !report.degenerate_motions.is_empty();
    if failed && !(has_prior || allow) {
        return Err(PipelineError::NotIdentifiable(Box::new(report)));
    }
    if failed {
        warnings.push(format!(
            "trajectory is not identifiable (rank {}); relying on {}",
            report.rank,
            if has_prior { "the extrinsic prior" } else { "an explicit override" }
        ));
    } else if report.weakly_excited {
        warnings.push(format!(
            "weak excitation (min singular value {:.3e}); consider an extrinsic prior",
            report.min_singular_value
        ));
    }
    for w in &warnings[..] {
        log::warn!("{w}");
    }
    Ok(report)
}

/// Preprocessing, identifiability precheck, initialization and solve.
pub fn run_pipeline(
    dataset: &Dataset,
    prior: Option<ExtrinsicPrior>,
    cfg: &PipelineConfig,
    problem: &ProblemConfig,
) -> Result<PipelineOutput, PipelineError> {
    let (mut meas, preprocessing) = preprocess(dataset, cfg)?;
    meas.prior = prior;
    let use_prior = problem.use_prior && meas.prior.is_some();
    let state = initialize_state(&meas, problem)?;
    let mut warnings = Vec::new();
    let identifiability = if cfg.identifiability_check {
        let span = (meas.camera[0].timestamp, meas.camera[meas.camera.len() - 1].timestamp);
        Some(identifiability_precheck(&state, span, use_prior, cfg.allow_unidentifiable, &mut warnings)?)
    } else {
        None
    };
    let calibration = solve(state, &meas, problem)?;
    Ok(PipelineOutput { calibration, preprocessing, identifiability, warnings })
}
