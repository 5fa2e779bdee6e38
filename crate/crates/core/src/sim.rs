//! Synthetic radar-camera datasets and the Monte-Carlo noise sweep.
//!
//! The world frame is the checkerboard frame: the target lies in the plane
//! `z = 0`, centered on the origin, and the camera moves around `(0, 0, −2)`
//! looking along `+z`. Camera poses are recovered from noisy corner pixels
//! against an assumed square size, which sets the monocular scale
//! `α = assumed / true`.

use crate::egovel::{direction_vector, EgoVelocityMeasurement, RadarDetection, RadarScan};
use crate::geometry::{exp_so3, Mat3, Rotation, Vec3};
use crate::identifiability::{
    build_identifiability_matrix, motion_sample, DegenerateMotion, IdentifiabilityError, PRECHECK_RATE_HZ,
};
use crate::residuals::{CalibrationState, CameraPoseMeasurement};
use crate::solver::{calibrate, Measurements, ProblemConfig, SolverError};
use crate::spline::{KnotGrid, RotationSpline, SplineError, SplinePair, TranslationSpline};
use nalgebra::{Matrix6, SMatrix, Vector2, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Floor on the radar standard deviation attached to measurements (m/s).
pub const RADAR_SIGMA_FLOOR: f64 = 0.01;
/// Floor on the pixel standard deviation used for pose covariances (px).
pub const PIXEL_SIGMA_FLOOR: f64 = 0.01;

const RADAR_STREAM: u64 = 1;
const CAMERA_STREAM: u64 = 2;
const SCAN_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("degenerate trajectory: {}", describe(.motions, *.rank))]
    ConfigDegenerate { motions: Vec<DegenerateMotion>, rank: usize },
    #[error("target not visible at any of {0} camera ticks")]
    TargetNotVisible(usize),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Identifiability(#[from] IdentifiabilityError),
    #[error("pose solve failed at t = {0}")]
    PoseSolve(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn describe(motions: &[DegenerateMotion], rank: usize) -> String {
    let mut parts: Vec<String> = motions.iter().map(|m| m.to_string()).collect();
    parts.push(format!("identifiability rank {rank} < 8"));
    parts.join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryParams {
    pub center: [f64; 3],
    /// Constant drift added to the camera position (m/s).
    pub velocity: [f64; 3],
    pub translation_amplitude: [f64; 3],
    pub translation_frequency: [f64; 3],
    pub translation_phase: [f64; 3],
    pub rotation_amplitude: [f64; 3],
    pub rotation_frequency: [f64; 3],
    pub rotation_phase: [f64; 3],
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            center: [0.0, 0.0, -2.0],
            velocity: [0.0; 3],
            translation_amplitude: [0.5, 0.5, 0.5],
            translation_frequency: [0.3, 0.45, 0.6],
            translation_phase: [0.0, 1.1, 2.3],
            rotation_amplitude: [0.4, 0.4, 0.4],
            rotation_frequency: [0.35, 0.5, 0.7],
            rotation_phase: [0.6, 1.9, 2.9],
        }
    }
}

impl TrajectoryParams {
    /// Camera pose `(R_wc, p_wc)` at `t`.
    pub fn camera_pose(&self, t: f64) -> (Rotation, Vec3) {
        let s = |a: &[f64; 3], f: &[f64; 3], p: &[f64; 3], i: usize| a[i] * (2.0 * PI * f[i] * t + p[i]).sin();
        let pos = Vec3::from_fn(|i, _| {
            self.center[i] + self.velocity[i] * t + s(&self.translation_amplitude, &self.translation_frequency, &self.translation_phase, i)
        });
        let theta = Vec3::from_fn(|i, _| s(&self.rotation_amplitude, &self.rotation_frequency, &self.rotation_phase, i));
        (exp_so3(&theta), pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics { focal: 600.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }
}

impl Intrinsics {
    pub fn project(&self, p: &Vec3) -> Vector2<f64> {
        Vector2::new(self.focal * p.x / p.z + self.cx, self.focal * p.y / p.z + self.cy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    pub rows: usize,
    pub cols: usize,
    pub square_size: f64,
    pub assumed_square_size: f64,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec { rows: 6, cols: 9, square_size: 0.04, assumed_square_size: 0.048 }
    }
}

impl TargetSpec {
    /// Corner positions in the target frame for a given square size.
    pub fn corners(&self, square: f64) -> Vec<Vec3> {
        let x0 = -0.5 * (self.cols - 1) as f64;
        let y0 = -0.5 * (self.rows - 1) as f64;
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(Vec3::new((x0 + j as f64) * square, (y0 + i as f64) * square, 0.0));
            }
        }
        out
    }
}

/// Raw Doppler scan synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub detections: usize,
    pub outlier_fraction: f64,
    /// Range-rate noise on inliers (m/s).
    pub range_rate_sigma: f64,
    pub azimuth_limit: f64,
    pub elevation_limit: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            detections: 60,
            outlier_fraction: 0.1,
            range_rate_sigma: 0.0,
            azimuth_limit: 60f64.to_radians(),
            elevation_limit: 20f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub duration: f64,
    pub radar_rate: f64,
    pub camera_rate: f64,
    pub sigma_radar: f64,
    pub sigma_pixel: f64,
    /// Roll, pitch, yaw of `R_cr` (rad).
    pub extrinsic_rotation_rpy: [f64; 3],
    /// `r_c^{rc}` (m).
    pub extrinsic_translation: [f64; 3],
    pub time_offset: f64,
    pub trajectory: TrajectoryParams,
    pub intrinsics: Intrinsics,
    pub target: TargetSpec,
    pub spline_order: usize,
    pub knot_spacing: f64,
    pub seed: u64,
    /// Skip the excitation check.
    pub allow_degenerate: bool,
    pub scans: Option<ScanConfig>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: 60.0,
            radar_rate: 20.0,
            camera_rate: 30.0,
            sigma_radar: 0.05,
            sigma_pixel: 0.1,
            extrinsic_rotation_rpy: [-1.62, 0.05, -1.48],
            extrinsic_translation: [0.06, -0.11, 0.04],
            time_offset: -0.02,
            trajectory: TrajectoryParams::default(),
            intrinsics: Intrinsics::default(),
            target: TargetSpec::default(),
            spline_order: 4,
            knot_spacing: 0.1,
            seed: 0,
            allow_degenerate: false,
            scans: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.duration) {
            return bad("duration must be positive");
        }
        if !pos(self.radar_rate) || !pos(self.camera_rate) {
            return bad("rates must be positive");
        }
        if !(self.sigma_radar >= 0.0 && self.sigma_pixel >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !pos(self.target.square_size) {
            return bad("square_size must be positive");
        }
        if self.target.assumed_square_size == 0.0 || !self.target.assumed_square_size.is_finite() {
            return bad("assumed_square_size must be non-zero");
        }
        if self.target.rows < 2 || self.target.cols < 2 {
            return bad("target needs at least 2x2 corners");
        }
        if !pos(self.intrinsics.focal) {
            return bad("focal length must be positive");
        }
        if !pos(self.knot_spacing) || !(2..=crate::spline::MAX_ORDER).contains(&self.spline_order) {
            return bad("invalid spline order or knot spacing");
        }
        if let Some(s) = &self.scans {
            if s.detections < 3 || !(0.0..1.0).contains(&s.outlier_fraction) || s.range_rate_sigma < 0.0 {
                return bad("invalid scan config");
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.target.assumed_square_size / self.target.square_size
    }

    pub fn extrinsic_rotation(&self) -> Rotation {
        let [r, p, y] = self.extrinsic_rotation_rpy;
        Rotation::from_roll_pitch_yaw(r, p, y)
    }

    pub fn camera_times(&self) -> Vec<f64> {
        ticks(self.duration, self.camera_rate)
    }

    pub fn radar_times(&self) -> Vec<f64> {
        ticks(self.duration, self.radar_rate)
    }

    /// Grid the solver builds from an undecimated camera stream.
    pub fn grid(&self) -> Result<KnotGrid, SplineError> {
        let t = self.camera_times();
        KnotGrid::covering(t[0], t[t.len() - 1], self.knot_spacing, self.spline_order)
    }

    pub fn problem_config(&self) -> ProblemConfig {
        ProblemConfig { spline_order: self.spline_order, knot_spacing: self.knot_spacing, ..Default::default() }
    }
}

fn ticks(duration: f64, rate: f64) -> Vec<f64> {
    let n = (duration * rate + 1e-9).floor() as usize;
    (0..=n).map(|k| k as f64 / rate).collect()
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SynthReport {
    pub radar_dropped: usize,
    pub camera_dropped: usize,
    /// Per-frame corner reprojection RMS after the pose solve (px).
    #[serde(skip)]
    pub reprojection_rms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub config: SimConfig,
    pub trajectory: SplinePair,
    pub radar: Vec<EgoVelocityMeasurement>,
    pub camera: Vec<CameraPoseMeasurement>,
    pub scans: Option<Vec<RadarScan>>,
    pub truth: CalibrationState,
    pub report: SynthReport,
}

impl SimDataset {
    pub fn measurements(&self) -> Measurements {
        Measurements { radar: self.radar.clone(), camera: self.camera.clone(), prior: None }
    }
}

/// Ground-truth calibration with the given radar trajectory.
pub fn truth_state(cfg: &SimConfig, trajectory: SplinePair) -> CalibrationState {
    let t = cfg.extrinsic_translation;
    CalibrationState {
        trajectory,
        extrinsic_rotation: cfg.extrinsic_rotation(),
        extrinsic_translation: Vec3::new(t[0], t[1], t[2]),
        scale: cfg.scale(),
        time_offset: cfg.time_offset,
    }
}

/// Radar trajectory `(R_wr, r_r^{wr})` sampled onto spline control points.
pub fn generate_trajectory(cfg: &SimConfig) -> Result<SplinePair, SimError> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let r_cr = cfg.extrinsic_rotation();
    let c = Vec3::from(cfg.extrinsic_translation);
    let mut rot = Vec::with_capacity(grid.n_control);
    let mut trans = Vec::with_capacity(grid.n_control);
    for i in 0..grid.n_control {
        let (r_wc, p_wc) = cfg.trajectory.camera_pose(grid.control_time(i));
        let r_wr = r_wc * r_cr;
        let p_wr = p_wc + r_wc * c;
        rot.push(r_wr);
        trans.push(-(r_wr.transpose() * p_wr));
    }
    let pair = SplinePair {
        translation: TranslationSpline::new(grid, trans)?,
        rotation: RotationSpline::new(grid, rot)?,
    };
    if !cfg.allow_degenerate {
        let state = truth_state(cfg, pair.clone());
        let step = 1.0 / PRECHECK_RATE_HZ;
        let mut samples = Vec::new();
        let mut t = grid.start();
        while t < grid.end() {
            if grid.contains(t + state.time_offset) {
                samples.push(motion_sample(&pair, &state, t)?);
            }
            t += step;
        }
        let report = build_identifiability_matrix(&samples)?;
        if !report.degenerate_motions.is_empty() || report.rank < 8 {
            return Err(SimError::ConfigDegenerate { motions: report.degenerate_motions, rank: report.rank });
        }
    }
    Ok(pair)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gauss3<R: Rng>(rng: &mut R) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Noise-free radar velocity `h = −ṙ − ω × r` at spline time `t`.
pub fn radar_velocity(pair: &SplinePair, t: f64) -> Result<Vec3, SplineError> {
    let tr = pair.translation.eval(t)?;
    let (_, w) = pair.rotation.eval(t)?;
    Ok(-tr.velocity - w.cross(&tr.position))
}

/// Radar ego-velocities at every radar tick whose shifted time lies on the spline.
pub fn synth_radar(cfg: &SimConfig, pair: &SplinePair) -> (Vec<EgoVelocityMeasurement>, usize) {
    let mut rng = stream(cfg.seed, RADAR_STREAM);
    let sigma = cfg.sigma_radar.max(RADAR_SIGMA_FLOOR);
    let mut out = Vec::new();
    let mut dropped = 0;
    for t in cfg.radar_times() {
        let noise = gauss3(&mut rng) * cfg.sigma_radar;
        match radar_velocity(pair, t + cfg.time_offset) {
            Ok(h) => out.push(EgoVelocityMeasurement {
                timestamp: t,
                velocity: h + noise,
                covariance: Mat3::identity() * (sigma * sigma),
                n_inliers: 0,
                n_outliers: 0,
            }),
            Err(_) => dropped += 1,
        }
    }
    (out, dropped)
}

/// Raw Doppler scans consistent with the noise-free ego-velocity at each tick.
pub fn synth_scans(cfg: &SimConfig, scan: &ScanConfig, pair: &SplinePair) -> Vec<RadarScan> {
    let mut rng = stream(cfg.seed, SCAN_STREAM);
    let mut out = Vec::new();
    for t in cfg.radar_times() {
        let Ok(h) = radar_velocity(pair, t + cfg.time_offset) else { continue };
        let n_out = (scan.detections as f64 * scan.outlier_fraction).round() as usize;
        let detections = (0..scan.detections)
            .map(|i| {
                let az = rng.random_range(-scan.azimuth_limit..=scan.azimuth_limit);
                let el = rng.random_range(-scan.elevation_limit..=scan.elevation_limit);
                let range = rng.random_range(1.0..30.0);
                let z: f64 = rng.sample(StandardNormal);
                let mut d = RadarDetection::new(range, az, el, 0.0);
                d.range_rate = direction_vector(&d).dot(&h) + scan.range_rate_sigma * z;
                if i < n_out {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    d.range_rate += sign * rng.random_range(1.0..5.0);
                }
                d
            })
            .collect();
        out.push(RadarScan { timestamp: t, detections });
    }
    out
}

/// Gauss-Newton pose of the camera from corner pixels, `R_cw` left-perturbed.
#[derive(Debug, Clone, Copy)]
pub struct PoseSolve {
    pub rotation: Rotation,
    pub translation: Vec3,
    pub covariance: Matrix6<f64>,
    pub rms: f64,
}

pub fn solve_pose(
    points: &[Vec3],
    pixels: &[Vector2<f64>],
    intrinsics: &Intrinsics,
    init: (Rotation, Vec3),
    sigma: f64,
) -> Option<PoseSolve> {
    let (mut r, mut t) = init;
    let f = intrinsics.focal;
    let normal = |r: &Rotation, t: &Vec3| {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        let mut sq = 0.0;
        for (p, z) in points.iter().zip(pixels) {
            let pc = r * p + t;
            if pc.z <= 0.0 {
                return None;
            }
            let e = z - intrinsics.project(&pc);
            let iz = 1.0 / pc.z;
            let dpi = SMatrix::<f64, 2, 3>::new(f * iz, 0.0, -f * pc.x * iz * iz, 0.0, f * iz, -f * pc.y * iz * iz);
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * -crate::geometry::skew(&(r * p))));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dpi);
            jtj += j.transpose() * j;
            jtr += j.transpose() * e;
            sq += e.norm_squared();
        }
        Some((jtj, jtr, sq))
    };
    for _ in 0..20 {
        let (jtj, jtr, _) = normal(&r, &t)?;
        let step = jtj.cholesky()?.solve(&jtr);
        r = r.perturb_left(&step.fixed_rows::<3>(0).into_owned()).renormalized();
        t += step.fixed_rows::<3>(3);
        if step.amax() < 1e-13 {
            break;
        }
    }
    let (jtj, _, sq) = normal(&r, &t)?;
    let inv = jtj.cholesky()?.inverse();
    Some(PoseSolve {
        rotation: r,
        translation: t,
        covariance: inv * (sigma * sigma),
        rms: (sq / (2 * points.len()) as f64).sqrt(),
    })
}

/// True `(R_cw, r_c^{wc})` at true scale from the radar spline.
pub fn true_camera_pose(cfg: &SimConfig, pair: &SplinePair, t: f64) -> Option<(Rotation, Vec3)> {
    let r_cr = cfg.extrinsic_rotation();
    let (r_wr, _) = pair.rotation.eval(t).ok()?;
    let r = pair.translation.eval(t).ok()?.position;
    Some((r_cr * r_wr.transpose(), r_cr * r + Vec3::from(cfg.extrinsic_translation)))
}

/// Camera poses from noisy corner observations against the assumed target size.
pub fn synth_camera(
    cfg: &SimConfig,
    pair: &SplinePair,
) -> Result<(Vec<CameraPoseMeasurement>, usize, Vec<f64>), SimError> {
    let mut rng = stream(cfg.seed, CAMERA_STREAM);
    let true_pts = cfg.target.corners(cfg.target.square_size);
    let assumed_pts = cfg.target.corners(cfg.target.assumed_square_size);
    let ratio = cfg.scale();
    let sigma = cfg.sigma_pixel.max(PIXEL_SIGMA_FLOOR);
    let times = cfg.camera_times();
    let mut out = Vec::with_capacity(times.len());
    let mut rms = Vec::with_capacity(times.len());
    let mut dropped = 0;
    for &t in &times {
        let Some((r_cw, t_cw)) = true_camera_pose(cfg, pair, t) else {
            dropped += 1;
            continue;
        };
        let noise: Vec<Vector2<f64>> = true_pts
            .iter()
            .map(|_| Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * cfg.sigma_pixel)
            .collect();
        if true_pts.iter().any(|p| (r_cw * p + t_cw).z <= 1e-6) {
            dropped += 1;
            continue;
        }
        let pixels: Vec<Vector2<f64>> = true_pts
            .iter()
            .zip(&noise)
            .map(|(p, n)| cfg.intrinsics.project(&(r_cw * p + t_cw)) + n)
            .collect();
        let pose = solve_pose(&assumed_pts, &pixels, &cfg.intrinsics, (r_cw, t_cw * ratio), sigma)
            .ok_or(SimError::PoseSolve(t))?;
        rms.push(pose.rms);
        out.push(CameraPoseMeasurement {
            timestamp: t,
            rotation: pose.rotation,
            translation: pose.translation,
            rotation_covariance: pose.covariance.fixed_view::<3, 3>(0, 0).into_owned(),
            translation_covariance: pose.covariance.fixed_view::<3, 3>(3, 3).into_owned(),
        });
    }
    if out.is_empty() {
        return Err(SimError::TargetNotVisible(times.len()));
    }
    Ok((out, dropped, rms))
}

pub fn simulate(cfg: &SimConfig) -> Result<SimDataset, SimError> {
    let trajectory = generate_trajectory(cfg)?;
    let (radar, radar_dropped) = synth_radar(cfg, &trajectory);
    let (camera, camera_dropped, reprojection_rms) = synth_camera(cfg, &trajectory)?;
    let scans = cfg.scans.as_ref().map(|s| synth_scans(cfg, s, &trajectory));
    Ok(SimDataset {
        config: cfg.clone(),
        truth: truth_state(cfg, trajectory.clone()),
        trajectory,
        radar,
        camera,
        scans,
        report: SynthReport { radar_dropped, camera_dropped, reprojection_rms },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sigma_radar: Vec<f64>,
    pub sigma_pixel: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub base: SimConfig,
    pub solver: ProblemConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sigma_radar: vec![0.05, 0.2],
            sigma_pixel: vec![0.1, 0.4],
            trials: 50,
            seed: 0,
            base: SimConfig::default(),
            solver: ProblemConfig::default(),
        }
    }
}

impl SweepConfig {
    /// Noise cells in row-major `(σ_r, σ_c)` order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.sigma_radar
            .iter()
            .flat_map(|&r| self.sigma_pixel.iter().map(move |&c| (r, c)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_r: f64,
    pub sigma_c: f64,
    pub trial: usize,
    pub status: String,
    pub rot_err_deg: f64,
    pub trans_err_x_cm: f64,
    pub trans_err_y_cm: f64,
    pub trans_err_z_cm: f64,
    pub trans_err_norm_cm: f64,
    pub alpha_err_pct: f64,
    pub tau_err_ms: f64,
}

impl SweepRow {
    fn failed(sigma_r: f64, sigma_c: f64, trial: usize, status: &str) -> Self {
        SweepRow {
            sigma_r,
            sigma_c,
            trial,
            status: status.to_string(),
            rot_err_deg: f64::NAN,
            trans_err_x_cm: f64::NAN,
            trans_err_y_cm: f64::NAN,
            trans_err_z_cm: f64::NAN,
            trans_err_norm_cm: f64::NAN,
            alpha_err_pct: f64::NAN,
            tau_err_ms: f64::NAN,
        }
    }
}

/// Calibration errors against the truth, in degrees, cm, percent and ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationErrors {
    pub rotation_deg: f64,
    pub translation_cm: Vec3,
    pub scale_pct: f64,
    pub time_offset_ms: f64,
}

pub fn calibration_errors(
    truth: &CalibrationState,
    rotation: &Rotation,
    translation: &Vec3,
    scale: f64,
    time_offset: f64,
) -> CalibrationErrors {
    CalibrationErrors {
        rotation_deg: (*rotation * truth.extrinsic_rotation.transpose()).angle().to_degrees(),
        translation_cm: (translation - truth.extrinsic_translation) * 100.0,
        scale_pct: (scale - truth.scale) / truth.scale * 100.0,
        time_offset_ms: (time_offset - truth.time_offset) * 1e3,
    }
}

/// Per-trial seed from `(seed, cell, trial)`.
pub fn trial_seed(seed: u64, cell: usize, trial: usize) -> u64 {
    let mut z = seed ^ ((cell as u64) << 40) ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn run_trial(cfg: &SimConfig, solver: &ProblemConfig, trial: usize) -> SweepRow {
    let (sr, sc) = (cfg.sigma_radar, cfg.sigma_pixel);
    let data = match simulate(cfg) {
        Ok(d) => d,
        Err(e) => {
            log::warn!("trial {trial} ({sr}, {sc}): simulation failed: {e}");
            return SweepRow::failed(sr, sc, trial, "sim_failed");
        }
    };
    let (status, report) = match calibrate(&data.measurements(), solver) {
        Ok(r) => ("ok", r),
        Err(e) => match e {
            SolverError::NotConverged(r) => ("not_converged", *r),
            SolverError::DivergedNumerically(_) => return SweepRow::failed(sr, sc, trial, "diverged"),
            SolverError::SingularHessian(_) => return SweepRow::failed(sr, sc, trial, "singular"),
            other => {
                log::warn!("trial {trial} ({sr}, {sc}): {other}");
                return SweepRow::failed(sr, sc, trial, "failed");
            }
        },
    };
    let e = calibration_errors(
        &data.truth,
        &report.extrinsic_rotation,
        &report.extrinsic_translation,
        report.scale,
        report.time_offset,
    );
    SweepRow {
        sigma_r: sr,
        sigma_c: sc,
        trial,
        status: status.to_string(),
        rot_err_deg: e.rotation_deg,
        trans_err_x_cm: e.translation_cm.x,
        trans_err_y_cm: e.translation_cm.y,
        trans_err_z_cm: e.translation_cm.z,
        trans_err_norm_cm: e.translation_cm.norm(),
        alpha_err_pct: e.scale_pct,
        tau_err_ms: e.time_offset_ms,
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub elapsed_s: f64,
}

/// Runs every `(cell, trial)` in parallel; failures become rows with a status.
pub fn run_noise_sweep(cfg: &SweepConfig) -> Result<SweepResult, SimError> {
    cfg.base.validate()?;
    if cfg.sigma_radar.iter().chain(&cfg.sigma_pixel).any(|s| !(*s >= 0.0)) {
        return Err(SimError::InvalidConfig("noise levels must be non-negative".into()));
    }
    generate_trajectory(&cfg.base)?;
    let start = Instant::now();
    let jobs: Vec<(usize, f64, f64, usize)> = cfg
        .cells()
        .into_iter()
        .enumerate()
        .flat_map(|(ci, (r, c))| (0..cfg.trials).map(move |t| (ci, r, c, t)))
        .collect();
    let rows = jobs
        .into_par_iter()
        .map(|(ci, sr, sc, trial)| {
            let sim = SimConfig {
                sigma_radar: sr,
                sigma_pixel: sc,
                seed: trial_seed(cfg.seed, ci, trial),
                ..cfg.base.clone()
            };
            let row = run_trial(&sim, &cfg.solver, trial);
            log::debug!("cell ({sr}, {sc}) trial {trial}: {}", row.status);
            row
        })
        .collect();
    Ok(SweepResult { rows, elapsed_s: start.elapsed().as_secs_f64() })
}

/// Per-cell statistics of a sweep; medians are over absolute errors of the
/// trials that produced an estimate, fractions over all trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub sigma_r: f64,
    pub sigma_c: f64,
    pub trials: usize,
    pub ok: usize,
    pub median_rot_err_deg: f64,
    pub median_trans_err_cm: f64,
    pub median_alpha_err_pct: f64,
    pub median_tau_err_ms: f64,
    /// Fraction of trials with translation error ≤ 15 cm.
    pub frac_trans_within_15cm: f64,
    /// Fraction of trials with |τ error| ≤ 30 ms.
    pub frac_tau_within_30ms: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Summaries in order of first appearance of each `(σ_r, σ_c)` cell.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<CellSummary> {
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if !cells.contains(&(r.sigma_r, r.sigma_c)) {
            cells.push((r.sigma_r, r.sigma_c));
        }
    }
    cells
        .into_iter()
        .map(|(sr, sc)| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.sigma_r == sr && r.sigma_c == sc).collect();
            let abs = |f: fn(&SweepRow) -> f64| cell.iter().map(|r| f(r).abs()).collect::<Vec<_>>();
            let frac = |ok: &dyn Fn(&SweepRow) -> bool| {
                cell.iter().filter(|r| ok(r)).count() as f64 / cell.len() as f64
            };
            CellSummary {
                sigma_r: sr,
                sigma_c: sc,
                trials: cell.len(),
                ok: cell.iter().filter(|r| r.status == "ok").count(),
                median_rot_err_deg: median(&abs(|r| r.rot_err_deg)),
                median_trans_err_cm: median(&abs(|r| r.trans_err_norm_cm)),
                median_alpha_err_pct: median(&abs(|r| r.alpha_err_pct)),
                median_tau_err_ms: median(&abs(|r| r.tau_err_ms)),
                frac_trans_within_15cm: frac(&|r| r.trans_err_norm_cm <= 15.0),
                frac_tau_within_30ms: frac(&|r| r.tau_err_ms.abs() <= 30.0),
            }
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>, SimError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
