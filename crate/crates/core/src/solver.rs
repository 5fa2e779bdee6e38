//! Batch Levenberg–Marquardt over the calibration state.
//!
//! Cost: `Σ ‖W·e‖²` over all radar, camera-rotation, camera-translation and
//! (optionally) prior residuals, with `W = L⁻¹` for `Σ = L·Lᵀ`.
//!
//! Parameter layout: control point `m` owns columns `6m..6m+6` as
//! `[δp(3), δR(3)]`; the eight calibration columns follow as
//! `[δR_cr(3), r_c^{rc}(3), α, τ]`.

use crate::egovel::EgoVelocityMeasurement;
use crate::geometry::{exp_so3, log_so3, skew, Mat3, Rotation, Vec3};
use crate::linalg::{CalibMatrix, NormalEquations};
use crate::residuals::{
    linearize_camera, linearize_prior, linearize_radar, CalibrationState, CameraPoseMeasurement, ExtrinsicPrior,
    Linearization, CALIB_ROTATION, CALIB_SCALE, CALIB_TIME_OFFSET, CALIB_TRANSLATION, N_CALIB,
};
use crate::spline::{KnotGrid, RotationSpline, SplineError, SplinePair, TranslationSpline};
use nalgebra::{DMatrix, DVector, Matrix4, SMatrix, SVector, SymmetricEigen, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Covariance condition number beyond which the Hessian is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationInit {
    /// Align camera-derived velocities with radar velocities.
    #[default]
    Align,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub spline_order: usize,
    pub knot_spacing: f64,
    pub tau_bound: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub cost_tolerance: f64,
    pub parameter_tolerance: f64,
    pub use_prior: bool,
    pub huber: bool,
    pub huber_scale: f64,
    pub fix_scale: bool,
    pub fix_time_offset: bool,
    pub fix_extrinsics: bool,
    pub initial_scale: f64,
    pub initial_time_offset: f64,
    pub tau_grid_search: bool,
    pub tau_grid_samples: usize,
    pub rotation_init: RotationInit,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            spline_order: 4,
            knot_spacing: 0.1,
            tau_bound: 0.5,
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            parameter_tolerance: 1e-12,
            use_prior: false,
            huber: false,
            huber_scale: 1.345,
            fix_scale: false,
            fix_time_offset: false,
            fix_extrinsics: false,
            initial_scale: 1.0,
            initial_time_offset: 0.0,
            tau_grid_search: true,
            tau_grid_samples: 21,
            rotation_init: RotationInit::Align,
        }
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if !(2..=crate::spline::MAX_ORDER).contains(&self.spline_order) {
            return bad("spline_order must be in 2..=10");
        }
        if !(self.knot_spacing > 0.0 && self.knot_spacing.is_finite()) {
            return bad("knot_spacing must be positive");
        }
        if !(self.tau_bound >= 0.0 && self.tau_bound.is_finite()) {
            return bad("tau_bound must be non-negative");
        }
        if self.gradient_tolerance <= 0.0 || self.cost_tolerance <= 0.0 || self.parameter_tolerance <= 0.0 {
            return bad("tolerances must be positive");
        }
        if self.huber_scale <= 0.0 {
            return bad("huber_scale must be positive");
        }
        if self.initial_scale <= 0.0 {
            return bad("initial_scale must be positive");
        }
        if self.initial_time_offset.abs() > self.tau_bound {
            return bad("initial_time_offset outside tau_bound");
        }
        if self.tau_grid_samples < 2 && self.tau_grid_search {
            return bad("tau_grid_samples must be at least 2");
        }
        Ok(())
    }

    pub fn fixed_mask(&self) -> [bool; N_CALIB] {
        let mut m = [false; N_CALIB];
        if self.fix_extrinsics {
            m[..6].fill(true);
        }
        m[CALIB_SCALE] = self.fix_scale;
        m[CALIB_TIME_OFFSET] = self.fix_time_offset;
        m
    }
}

/// Measurements feeding one calibration.
#[derive(Debug, Clone, Default)]
pub struct Measurements {
    pub radar: Vec<EgoVelocityMeasurement>,
    pub camera: Vec<CameraPoseMeasurement>,
    pub prior: Option<ExtrinsicPrior>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub radar: f64,
    pub camera_rotation: f64,
    pub camera_translation: f64,
    pub prior: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.radar + self.camera_rotation + self.camera_translation + self.prior
    }

    pub fn prior_fraction(&self) -> f64 {
        let t = self.total();
        if t > 0.0 {
            (self.prior / t).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    CostTolerance,
    ParameterTolerance,
    ZeroCost,
    NoFurtherDecrease,
    MaxIterations,
    NonFinite,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations | Termination::NonFinite)
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Termination::GradientTolerance => "gradient tolerance",
            Termination::CostTolerance => "relative cost tolerance",
            Termination::ParameterTolerance => "parameter tolerance",
            Termination::ZeroCost => "zero cost",
            Termination::NoFurtherDecrease => "no further decrease",
            Termination::MaxIterations => "maximum iterations",
            Termination::NonFinite => "non-finite cost",
        };
        f.write_str(s)
    }
}

/// Null-space diagnostics when the calibration block is singular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularInfo {
    pub condition: f64,
    /// Order: `[δR_cr x,y,z, r_c^{rc} x,y,z, α, τ]`.
    pub null_direction: [f64; N_CALIB],
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub converged: bool,
    pub termination: Termination,
    pub extrinsic_rotation: Rotation,
    pub extrinsic_rotation_rpy: [f64; 3],
    pub extrinsic_translation: Vec3,
    pub scale: f64,
    pub time_offset: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub cost_breakdown: CostBreakdown,
    pub prior_cost_fraction: f64,
    pub iterations: usize,
    pub covariance: Option<[[f64; N_CALIB]; N_CALIB]>,
    pub singular: Option<SingularInfo>,
    pub fixed: Vec<String>,
    pub n_radar: usize,
    pub n_radar_dropped: usize,
    pub n_camera: usize,
    #[serde(skip)]
    pub state: CalibrationState,
    /// Gauss-Newton information of the calibration block (Schur complement).
    #[serde(skip)]
    pub information: Option<CalibMatrix>,
    #[serde(skip)]
    pub fixed_mask: [bool; N_CALIB],
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("cost became non-finite after {} iterations", .0.iterations)]
    DivergedNumerically(Box<CalibrationReport>),
    #[error("not converged after {} iterations (final cost {:.6e})", .0.iterations, .0.final_cost)]
    NotConverged(Box<CalibrationReport>),
    #[error("singular Hessian (condition {:.3e}); null direction {:?}", .0.condition, .0.null_direction)]
    SingularHessian(SingularInfo),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

impl SolverError {
    /// Best-so-far report carried by convergence failures.
    pub fn best_report(&self) -> Option<&CalibrationReport> {
        match self {
            SolverError::DivergedNumerically(r) | SolverError::NotConverged(r) => Some(r),
            _ => None,
        }
    }
}

const FIXED_NAMES: [&str; N_CALIB] = [
    "extrinsic_rotation_x",
    "extrinsic_rotation_y",
    "extrinsic_rotation_z",
    "extrinsic_translation_x",
    "extrinsic_translation_y",
    "extrinsic_translation_z",
    "scale",
    "time_offset",
];

/// Whitening `W = L⁻¹` of an SPD covariance.
fn whitening<const D: usize>(cov: &SMatrix<f64, D, D>) -> Result<SMatrix<f64, D, D>, SolverError> {
    let sym = (cov + cov.transpose()) * 0.5;
    let chol = nalgebra::Cholesky::new(sym)
        .ok_or_else(|| SolverError::InsufficientData("measurement covariance is not positive definite".into()))?;
    let l = chol.l();
    l.try_inverse()
        .ok_or_else(|| SolverError::InsufficientData("measurement covariance is singular".into()))
}

/// Measurements after domain filtering, with precomputed whitening.
struct Problem<'a> {
    radar: Vec<(&'a EgoVelocityMeasurement, Mat3)>,
    camera: Vec<(&'a CameraPoseMeasurement, Mat3, Mat3)>,
    prior: Option<(ExtrinsicPrior, SMatrix<f64, 6, 6>)>,
    dropped_radar: usize,
    fixed: [bool; N_CALIB],
    huber: Option<f64>,
    tau_bound: f64,
}

impl<'a> Problem<'a> {
    fn new(
        grid: &KnotGrid,
        meas: &'a Measurements,
        cfg: &ProblemConfig,
        fixed_extra: Option<[bool; N_CALIB]>,
        include_radar: bool,
    ) -> Result<Self, SolverError> {
        let mut radar = Vec::new();
        let mut dropped = 0;
        if include_radar {
            for m in &meas.radar {
                if grid.contains(m.timestamp - cfg.tau_bound) && grid.contains(m.timestamp + cfg.tau_bound) {
                    radar.push((m, whitening(&m.covariance)?));
                } else {
                    dropped += 1;
                }
            }
        }
        let mut camera = Vec::new();
        for m in &meas.camera {
            if grid.contains(m.timestamp) {
                camera.push((m, whitening(&m.rotation_covariance)?, whitening(&m.translation_covariance)?));
            }
        }
        let prior = if cfg.use_prior {
            let p = meas
                .prior
                .ok_or_else(|| SolverError::InvalidConfig("use_prior set but no prior supplied".into()))?;
            if !(p.sigma_translation > 0.0 && p.sigma_rotation > 0.0) {
                return Err(SolverError::InvalidConfig("prior sigmas must be positive".into()));
            }
            Some((p, whitening(&p.covariance())?))
        } else {
            None
        };
        Ok(Problem {
            radar,
            camera,
            prior,
            dropped_radar: dropped,
            fixed: fixed_extra.unwrap_or_else(|| cfg.fixed_mask()),
            huber: cfg.huber.then_some(cfg.huber_scale),
            tau_bound: cfg.tau_bound,
        })
    }

    /// Robust weight and cost of a whitened residual norm.
    fn robust(&self, sq: f64) -> (f64, f64) {
        match self.huber {
            Some(k) if sq > k * k => {
                let n = sq.sqrt();
                (k / n, 2.0 * k * n - k * k)
            }
            _ => (1.0, sq),
        }
    }

    fn cost(&self, state: &CalibrationState) -> Result<CostBreakdown, SolverError> {
        let radar: Result<Vec<f64>, SplineError> = self
            .radar
            .par_iter()
            .map(|(m, w)| {
                let e = w * linearize_radar(state, m, false)?.residual;
                Ok(self.robust(e.norm_squared()).1)
            })
            .collect();
        let cam: Result<Vec<(f64, f64)>, SplineError> = self
            .camera
            .par_iter()
            .map(|(m, wr, wt)| {
                let (lr, lt) = linearize_camera(state, m, false)?;
                Ok((
                    self.robust((wr * lr.residual).norm_squared()).1,
                    self.robust((wt * lt.residual).norm_squared()).1,
                ))
            })
            .collect();
        let cam = cam?;
        let prior = self
            .prior
            .as_ref()
            .map(|(p, w)| (w * linearize_prior(state, p, false).residual).norm_squared())
            .unwrap_or(0.0);
        Ok(CostBreakdown {
            radar: radar?.iter().sum(),
            camera_rotation: cam.iter().map(|c| c.0).sum(),
            camera_translation: cam.iter().map(|c| c.1).sum(),
            prior,
        })
    }

    fn add_block<const D: usize>(&self, ne: &mut NormalEquations, lin: &Linearization<D>, w: &SMatrix<f64, D, D>) {
        let e = w * lin.residual;
        let (weight, _) = self.robust(e.norm_squared());
        let sw = weight.sqrt();
        let k = lin.d_translation.len();
        let cols = 6 * k;
        let mut jt = vec![0.0; D * cols];
        for i in 0..k {
            let a = w * lin.d_translation[i] * sw;
            let b = w * lin.d_rotation[i] * sw;
            for r in 0..D {
                for c in 0..3 {
                    jt[r * cols + 6 * i + c] = a[(r, c)];
                    jt[r * cols + 6 * i + 3 + c] = b[(r, c)];
                }
            }
        }
        let jc_m = w * lin.d_calib * sw;
        let mut jc = vec![0.0; D * N_CALIB];
        for r in 0..D {
            for c in 0..N_CALIB {
                if !self.fixed[c] {
                    jc[r * N_CALIB + c] = jc_m[(r, c)];
                }
            }
        }
        let es: Vec<f64> = (e * sw).iter().copied().collect();
        ne.accumulate(D, 6 * lin.first_control, &jt, cols, &jc, &es);
    }

    fn normal_equations(&self, state: &CalibrationState) -> Result<(NormalEquations, [bool; N_CALIB]), SolverError> {
        let grid = state.trajectory.grid();
        let mut ne = NormalEquations::zeros(6 * grid.n_control, 6 * grid.order - 1);
        let radar: Result<Vec<_>, SplineError> =
            self.radar.par_iter().map(|(m, _)| linearize_radar(state, m, true)).collect();
        for (lin, (_, w)) in radar?.iter().zip(&self.radar) {
            self.add_block(&mut ne, lin, w);
        }
        let cam: Result<Vec<_>, SplineError> =
            self.camera.par_iter().map(|(m, _, _)| linearize_camera(state, m, true)).collect();
        for ((lr, lt), (_, wr, wt)) in cam?.iter().zip(&self.camera) {
            self.add_block(&mut ne, lr, wr);
            self.add_block(&mut ne, lt, wt);
        }
        if let Some((p, w)) = &self.prior {
            self.add_block(&mut ne, &linearize_prior(state, p, true), w);
        }
        let pinned = ne.pin_unused(&self.fixed);
        Ok((ne, pinned))
    }

    fn apply(&self, state: &CalibrationState, traj: &[f64], calib: &SVector<f64, N_CALIB>) -> CalibrationState {
        let mut s = state.clone();
        for (m, p) in s.trajectory.translation.control_points.iter_mut().enumerate() {
            *p += Vec3::new(traj[6 * m], traj[6 * m + 1], traj[6 * m + 2]);
        }
        for (m, r) in s.trajectory.rotation.control_points.iter_mut().enumerate() {
            let d = Vec3::new(traj[6 * m + 3], traj[6 * m + 4], traj[6 * m + 5]);
            *r = (exp_so3(&d) * *r).renormalized();
        }
        let dr = calib.fixed_rows::<3>(CALIB_ROTATION).into_owned();
        s.extrinsic_rotation = (exp_so3(&dr) * s.extrinsic_rotation).renormalized();
        s.extrinsic_translation += calib.fixed_rows::<3>(CALIB_TRANSLATION);
        let alpha = s.scale + calib[CALIB_SCALE];
        s.scale = if alpha > 0.0 { alpha } else { s.scale * 0.1 };
        s.time_offset = (s.time_offset + calib[CALIB_TIME_OFFSET]).clamp(-self.tau_bound, self.tau_bound);
        s
    }
}

struct LmOutcome {
    state: CalibrationState,
    initial_cost: f64,
    cost: CostBreakdown,
    iterations: usize,
    termination: Termination,
}

fn levenberg_marquardt(
    problem: &Problem<'_>,
    mut state: CalibrationState,
    cfg: &ProblemConfig,
) -> Result<LmOutcome, SolverError> {
    let mut cost = problem.cost(&state)?;
    let initial_cost = cost.total();
    let mut lambda = 1e-4;
    let mut iterations = 0;
    if !initial_cost.is_finite() {
        return Ok(LmOutcome { state, initial_cost, cost, iterations, termination: Termination::NonFinite });
    }
    let termination = loop {
        if cost.total() < 1e-20 {
            break Termination::ZeroCost;
        }
        if iterations >= cfg.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let (ne, _) = problem.normal_equations(&state)?;
        let g_inf = ne
            .g_traj
            .iter()
            .chain(ne.g_calib.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if g_inf < cfg.gradient_tolerance {
            break Termination::GradientTolerance;
        }
        let mut accepted = None;
        while lambda < 1e32 {
            if let Some(step) = ne.damped(lambda).solve_step() {
                let candidate = problem.apply(&state, &step.traj, &step.calib);
                let c = problem.cost(&candidate)?;
                if c.total().is_finite() && c.total() < cost.total() {
                    let step_inf = step
                        .traj
                        .iter()
                        .chain(step.calib.iter())
                        .fold(0.0f64, |m, v| m.max(v.abs()));
                    accepted = Some((candidate, c, step_inf));
                    lambda = (lambda / 10.0).max(1e-12);
                    break;
                }
            }
            lambda *= 10.0;
        }
        let Some((candidate, c, step_inf)) = accepted else {
            break Termination::NoFurtherDecrease;
        };
        let rel = (cost.total() - c.total()) / cost.total();
        state = candidate;
        cost = c;
        log::debug!("lm iter {iterations}: cost {:.6e} lambda {lambda:.1e}", cost.total());
        if rel < cfg.cost_tolerance {
            break Termination::CostTolerance;
        }
        if step_inf < cfg.parameter_tolerance {
            break Termination::ParameterTolerance;
        }
    };
    Ok(LmOutcome { state, initial_cost, cost, iterations, termination })
}

/// Marginal information of the calibration block, or singularity details.
fn calibration_information(
    problem: &Problem<'_>,
    state: &CalibrationState,
) -> Result<(CalibMatrix, [bool; N_CALIB]), SolverError> {
    let (ne, pinned) = problem.normal_equations(state)?;
    let s = ne.schur_complement().ok_or(SolverError::SingularHessian(SingularInfo {
        condition: f64::INFINITY,
        null_direction: [0.0; N_CALIB],
    }))?;
    Ok((s, pinned))
}

fn invert_information(info: &CalibMatrix, fixed: &[bool; N_CALIB]) -> Result<CalibMatrix, SingularInfo> {
    let free: Vec<usize> = (0..N_CALIB).filter(|&i| !fixed[i]).collect();
    let n = free.len();
    if n == 0 {
        return Ok(CalibMatrix::zeros());
    }
    let sub = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (info[(free[i], free[j])] + info[(free[j], free[i])]));
    let eig = SymmetricEigen::new(sub.clone());
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let lmax = eig.eigenvalues.max();
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if !(lmin > 0.0) || condition > SINGULAR_CONDITION {
        let mut null_direction = [0.0; N_CALIB];
        for (k, &i) in free.iter().enumerate() {
            null_direction[i] = eig.eigenvectors[(k, imin)];
        }
        return Err(SingularInfo { condition, null_direction });
    }
    let inv = sub.try_inverse().ok_or(SingularInfo { condition, null_direction: [0.0; N_CALIB] })?;
    let mut out = CalibMatrix::zeros();
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            out[(i, j)] = inv[(a, b)];
        }
    }
    Ok(out)
}

/// Marginal covariance of `(δR_cr, r_c^{rc}, α, τ)`; fixed parameters get
/// zero rows and columns.
pub fn marginal_covariance(report: &CalibrationReport) -> Result<CalibMatrix, SolverError> {
    match &report.information {
        Some(info) => invert_information(info, &report.fixed_mask).map_err(SolverError::SingularHessian),
        None => Err(SolverError::SingularHessian(report.singular.clone().unwrap_or(SingularInfo {
            condition: f64::INFINITY,
            null_direction: [0.0; N_CALIB],
        }))),
    }
}

/// Spline grid used by [`initialize_state`] for a camera stream.
pub fn problem_grid(camera: &[CameraPoseMeasurement], cfg: &ProblemConfig) -> Result<KnotGrid, SolverError> {
    let k = cfg.spline_order;
    if camera.len() < k.max(3) {
        return Err(SolverError::InsufficientData(format!(
            "need at least {} camera poses, got {}",
            k.max(3),
            camera.len()
        )));
    }
    let t0 = camera[0].timestamp;
    let t1 = camera[camera.len() - 1].timestamp;
    if t1 - t0 <= k as f64 * cfg.knot_spacing {
        return Err(SolverError::InsufficientData(format!(
            "camera poses span {:.3} s, need more than {:.3} s",
            t1 - t0,
            k as f64 * cfg.knot_spacing
        )));
    }
    Ok(KnotGrid::covering(t0, t1, cfg.knot_spacing, k)?)
}

/// Interpolates the camera stream (`R_wc`, `r_c^{wc}`) at `t`, clamped to its span.
fn interpolate_camera(camera: &[CameraPoseMeasurement], t: f64) -> (Rotation, Vec3) {
    let i = camera.partition_point(|m| m.timestamp <= t);
    if i == 0 {
        return (camera[0].rotation.transpose(), camera[0].translation);
    }
    if i >= camera.len() {
        let last = &camera[camera.len() - 1];
        return (last.rotation.transpose(), last.translation);
    }
    let (a, b) = (&camera[i - 1], &camera[i]);
    let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
    let qa = a.rotation.transpose();
    let qb = b.rotation.transpose();
    let rot = qa * exp_so3(&(log_so3(&(qa.transpose() * qb)) * s));
    (rot, a.translation + (b.translation - a.translation) * s)
}

/// Fits a spline pair to the camera stream alone: rotation `R_wc`,
/// translation `r_c^{wc}`.
pub fn fit_camera_spline(
    camera: &[CameraPoseMeasurement],
    cfg: &ProblemConfig,
) -> Result<SplinePair, SolverError> {
    let grid = problem_grid(camera, cfg)?;
    let mut rots = Vec::with_capacity(grid.n_control);
    let mut trans = Vec::with_capacity(grid.n_control);
    for m in 0..grid.n_control {
        let (r, p) = interpolate_camera(camera, grid.control_time(m));
        rots.push(r);
        trans.push(p);
    }
    let state = CalibrationState {
        trajectory: SplinePair {
            translation: TranslationSpline::new(grid, trans)?,
            rotation: RotationSpline::new(grid, rots)?,
        },
        extrinsic_rotation: Rotation::identity(),
        extrinsic_translation: Vec3::zeros(),
        scale: 1.0,
        time_offset: 0.0,
    };
    let meas = Measurements { radar: Vec::new(), camera: camera.to_vec(), prior: None };
    let fit_cfg = ProblemConfig { use_prior: false, huber: false, ..cfg.clone() };
    let problem = Problem::new(&grid, &meas, &fit_cfg, Some([true; N_CALIB]), false)?;
    let out = levenberg_marquardt(&problem, state, &fit_cfg)?;
    if !out.cost.total().is_finite() {
        return Err(SolverError::InsufficientData("camera spline fit diverged".into()));
    }
    Ok(out.state.trajectory)
}

/// Camera-frame velocity `u = −Ṗ − ω_c × P` of the camera spline and `ω_c`.
fn camera_velocity(cam: &SplinePair, t: f64) -> Option<(Vec3, Vec3)> {
    let tr = cam.translation.eval(t).ok()?;
    let (_, w) = cam.rotation.eval(t).ok()?;
    Some((-tr.velocity - w.cross(&tr.position), w))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.len() < 3 {
        return f64::NEG_INFINITY;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return f64::NEG_INFINITY;
    }
    sab / (saa * sbb).sqrt()
}

/// Time offset maximizing the correlation between radar and camera speeds.
pub fn grid_search_time_offset(
    radar: &[EgoVelocityMeasurement],
    cam: &SplinePair,
    bound: f64,
    samples: usize,
) -> f64 {
    let grid = cam.grid();
    let usable: Vec<&EgoVelocityMeasurement> = radar
        .iter()
        .filter(|m| grid.contains(m.timestamp - bound) && grid.contains(m.timestamp + bound))
        .collect();
    if usable.len() < 3 || samples < 2 || bound == 0.0 {
        return 0.0;
    }
    let h_speed: Vec<f64> = usable.iter().map(|m| m.velocity.norm()).collect();
    let step = 2.0 * bound / (samples - 1) as f64;
    let scores: Vec<f64> = (0..samples)
        .map(|i| {
            let tau = -bound + i as f64 * step;
            let c_speed: Vec<f64> = usable
                .iter()
                .map(|m| camera_velocity(cam, m.timestamp + tau).map(|(u, _)| u.norm()).unwrap_or(0.0))
                .collect();
            pearson(&h_speed, &c_speed)
        })
        .collect();
    let best = (0..samples)
        .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(samples / 2);
    let mut tau = -bound + best as f64 * step;
    // parabolic refinement
    if best > 0 && best + 1 < samples {
        let (a, b, c) = (scores[best - 1], scores[best], scores[best + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 && denom.is_finite() {
            tau += (0.5 * (a - c) / denom).clamp(-0.5, 0.5) * step;
        }
    }
    tau.clamp(-bound, bound)
}

/// Rotation `R` minimizing `Σ‖R·a_i − b_i‖²`.
fn kabsch(a: &[Vec3], b: &[Vec3]) -> Option<Rotation> {
    let mut h = Mat3::zeros();
    for (x, y) in a.iter().zip(b) {
        h += y * x.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    if svd.singular_values[1] <= 1e-12 * svd.singular_values[0].max(1e-300) {
        return None;
    }
    let d = (u * vt).determinant().signum();
    let m = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt;
    Some(Rotation::from_matrix_unchecked(m))
}

/// Relative eigenvalue below which a direction of the alignment normal
/// equations is taken from the seed instead of the data.
const ALIGN_EIGEN_RATIO: f64 = 1e-4;

/// Least squares `ata·x = atb` on the well-determined eigen-directions; the
/// remaining directions keep the component of `seed`.
fn truncated_solve(ata: DMatrix<f64>, atb: DVector<f64>, seed: DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(ata);
    let lmax = eig.eigenvalues.max();
    let mut x = DVector::zeros(atb.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        x += if lmax > 0.0 && l > lmax * ALIGN_EIGEN_RATIO { v * (v.dot(&atb) / l) } else { v * v.dot(&seed) };
    }
    x
}

/// Aligns camera velocities `u = α·R·h − ω_c × d` (`d = α·r_c^{rc}`) with
/// radar velocities. Returns `(R, α, r_c^{rc})`. Directions the motion does
/// not excite fall back to `seed`.
fn align_extrinsics(
    h: &[Vec3],
    u: &[Vec3],
    w: &[Vec3],
    rotation: Option<Rotation>,
    lever: Option<Vec3>,
    scale: Option<f64>,
    seed: (Rotation, Vec3),
) -> (Rotation, f64, Vec3) {
    let mut r = rotation.unwrap_or(seed.0);
    let mut c = lever.unwrap_or(seed.1);
    let mut alpha = scale.unwrap_or(1.0);
    for _ in 0..4 {
        if rotation.is_none() {
            let d = c * alpha;
            let target: Vec<Vec3> = u.iter().zip(w).map(|(ui, wi)| ui + wi.cross(&d)).collect();
            if let Some(k) = kabsch(h, &target) {
                r = k;
            }
        }
        match (scale, lever) {
            (None, None) => {
                let mut ata = Matrix4::zeros();
                let mut atb = Vector4::zeros();
                for ((hi, ui), wi) in h.iter().zip(u).zip(w) {
                    let rh = r * hi;
                    let mut a = SMatrix::<f64, 3, 4>::zeros();
                    a.fixed_view_mut::<3, 1>(0, 0).copy_from(&rh);
                    a.fixed_view_mut::<3, 3>(0, 1).copy_from(&(-skew(wi)));
                    ata += a.transpose() * a;
                    atb += a.transpose() * ui;
                }
                let d = seed.1 * alpha;
                let x = truncated_solve(
                    DMatrix::from_column_slice(4, 4, ata.as_slice()),
                    DVector::from_column_slice(atb.as_slice()),
                    DVector::from_column_slice(&[alpha, d.x, d.y, d.z]),
                );
                if x[0] > 0.0 {
                    alpha = x[0];
                    c = Vec3::new(x[1], x[2], x[3]) / x[0];
                } else {
                    c = seed.1;
                    alpha = scalar_scale(h, u, w, &r, &c).unwrap_or(alpha);
                }
            }
            (None, Some(cl)) => {
                alpha = scalar_scale(h, u, w, &r, &cl).unwrap_or(alpha);
            }
            (Some(a), None) => {
                // u + ω×(α c) = α R h  →  −skew(ω)·c·α = u − αRh
                let mut ata = Mat3::zeros();
                let mut atb = Vec3::zeros();
                for ((hi, ui), wi) in h.iter().zip(u).zip(w) {
                    let m = -skew(wi) * a;
                    ata += m.transpose() * m;
                    atb += m.transpose() * (ui - (r * hi) * a);
                }
                let x = truncated_solve(
                    DMatrix::from_column_slice(3, 3, ata.as_slice()),
                    DVector::from_column_slice(atb.as_slice()),
                    DVector::from_column_slice(seed.1.as_slice()),
                );
                c = Vec3::new(x[0], x[1], x[2]);
            }
            (Some(_), Some(_)) => {}
        }
    }
    (r, alpha, c)
}

fn scalar_scale(h: &[Vec3], u: &[Vec3], w: &[Vec3], r: &Rotation, c: &Vec3) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((hi, ui), wi) in h.iter().zip(u).zip(w) {
        let m = r * hi - wi.cross(c);
        num += ui.dot(&m);
        den += m.norm_squared();
    }
    let a = num / den;
    (den > 0.0 && a > 0.0 && a.is_finite()).then_some(a)
}

/// Initial state from camera-only spline fit, time-offset grid search and
/// velocity alignment.
pub fn initialize_state(meas: &Measurements, cfg: &ProblemConfig) -> Result<CalibrationState, SolverError> {
    cfg.validate()?;
    let cam = fit_camera_spline(&meas.camera, cfg)?;
    let grid = *cam.grid();

    let tau = if cfg.fix_time_offset || !cfg.tau_grid_search {
        cfg.initial_time_offset
    } else {
        grid_search_time_offset(&meas.radar, &cam, cfg.tau_bound, cfg.tau_grid_samples)
    };

    let mut h = Vec::new();
    let mut u = Vec::new();
    let mut w = Vec::new();
    for m in &meas.radar {
        if !(grid.contains(m.timestamp - cfg.tau_bound) && grid.contains(m.timestamp + cfg.tau_bound)) {
            continue;
        }
        if let Some((ui, wi)) = camera_velocity(&cam, m.timestamp + tau) {
            h.push(m.velocity);
            u.push(ui);
            w.push(wi);
        }
    }
    if h.len() < 3 {
        return Err(SolverError::InsufficientData(format!(
            "only {} radar measurements fall inside the camera span",
            h.len()
        )));
    }

    let prior = if cfg.use_prior { meas.prior } else { None };
    let seed = prior.map_or((Rotation::identity(), Vec3::zeros()), |p| (p.transform.rotation, p.transform.translation));
    let (known_rot, known_lever) = match (cfg.fix_extrinsics, cfg.rotation_init) {
        (true, _) => (Some(seed.0), Some(seed.1)),
        (false, RotationInit::Identity) => (Some(seed.0), None),
        (false, RotationInit::Align) => (None, None),
    };
    let known_scale = cfg.fix_scale.then_some(cfg.initial_scale);
    let (r_cr, alpha, lever) = align_extrinsics(&h, &u, &w, known_rot, known_lever, known_scale, seed);

    // right-multiplication and affine maps carry the camera spline to the radar frame
    let rt = r_cr.transpose();
    let rotation = RotationSpline::new(grid, cam.rotation.control_points.iter().map(|q| *q * r_cr).collect())?;
    let translation = TranslationSpline::new(
        grid,
        cam.translation
            .control_points
            .iter()
            .map(|p| rt * (p / alpha - lever))
            .collect(),
    )?;
    Ok(CalibrationState {
        trajectory: SplinePair { translation, rotation },
        extrinsic_rotation: r_cr,
        extrinsic_translation: lever,
        scale: alpha,
        time_offset: tau,
    })
}

fn fixed_names(mask: &[bool; N_CALIB]) -> Vec<String> {
    mask.iter()
        .zip(FIXED_NAMES)
        .filter(|(f, _)| **f)
        .map(|(_, n)| n.to_string())
        .collect()
}

/// Runs Levenberg–Marquardt from `state` on all residual families.
pub fn solve(
    state: CalibrationState,
    meas: &Measurements,
    cfg: &ProblemConfig,
) -> Result<CalibrationReport, SolverError> {
    cfg.validate()?;
    let grid = *state.trajectory.grid();
    let problem = Problem::new(&grid, meas, cfg, None, true)?;
    if problem.radar.len() < 3 {
        return Err(SolverError::InsufficientData(format!(
            "{} radar measurements inside the spline domain",
            problem.radar.len()
        )));
    }
    if problem.camera.len() < cfg.spline_order {
        return Err(SolverError::InsufficientData(format!(
            "{} camera measurements inside the spline domain",
            problem.camera.len()
        )));
    }
    let out = levenberg_marquardt(&problem, state, cfg)?;

    let (information, singular, covariance, fixed_mask) = match calibration_information(&problem, &out.state) {
        Ok((info, mask)) => match invert_information(&info, &mask) {
            Ok(cov) => (Some(info), None, Some(cov), mask),
            Err(s) => (Some(info), Some(s), None, mask),
        },
        Err(SolverError::SingularHessian(s)) => (None, Some(s), None, problem.fixed),
        Err(e) => return Err(e),
    };
    let s = &out.state;
    let report = CalibrationReport {
        converged: out.termination.converged(),
        termination: out.termination,
        extrinsic_rotation: s.extrinsic_rotation,
        extrinsic_rotation_rpy: s.extrinsic_rotation.to_roll_pitch_yaw(),
        extrinsic_translation: s.extrinsic_translation,
        scale: s.scale,
        time_offset: s.time_offset,
        initial_cost: out.initial_cost,
        final_cost: out.cost.total(),
        cost_breakdown: out.cost,
        prior_cost_fraction: out.cost.prior_fraction(),
        iterations: out.iterations,
        covariance: covariance.map(|c| std::array::from_fn(|i| std::array::from_fn(|j| c[(i, j)]))),
        singular,
        fixed: fixed_names(&problem.fixed),
        n_radar: problem.radar.len(),
        n_radar_dropped: problem.dropped_radar,
        n_camera: problem.camera.len(),
        state: out.state,
        information,
        fixed_mask,
    };
    match report.termination {
        Termination::NonFinite => Err(SolverError::DivergedNumerically(Box::new(report))),
        Termination::MaxIterations => Err(SolverError::NotConverged(Box::new(report))),
        _ => Ok(report),
    }
}

/// Initializes and solves in one call.
pub fn calibrate(meas: &Measurements, cfg: &ProblemConfig) -> Result<CalibrationReport, SolverError> {
    let state = initialize_state(meas, cfg)?;
    solve(state, meas, cfg)
}

/// Total whitened cost of `state`.
pub fn evaluate_cost(state: &CalibrationState, meas: &Measurements, cfg: &ProblemConfig) -> Result<CostBreakdown, SolverError> {
    let problem = Problem::new(state.trajectory.grid(), meas, cfg, None, true)?;
    problem.cost(state)
}
