//! Local identifiability of `(r_c^{rc}, R_cr, α, τ)`.
//!
//! Each sample contributes the gradient of the scaled camera velocity
//! `h = α(R_cr·v(t+τ) − ω_c × r_c^{rc})` with respect to the calibration,
//! a 3×8 block row. The stacked matrix has full column rank 8 exactly when the
//! calibration is locally determined by the motion.

use crate::geometry::{left_jacobian_so3, log_so3, skew, Rotation, Vec3};
use crate::residuals::CalibrationState;
use crate::spline::{SplineError, SplinePair};
use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Relative rank tolerance on singular values.
pub const RANK_TOLERANCE: f64 = 1e-8;
/// Minimum singular value below which excitation is reported as weak.
pub const EXCITATION_THRESHOLD: f64 = 1e-3;
/// Tolerance of the degenerate-motion tests.
pub const DEGENERACY_EPSILON: f64 = 1e-6;
/// Sample rate used by the solver precheck.
pub const PRECHECK_RATE_HZ: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentifiabilityError {
    #[error("need at least {needed} motion samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSample {
    pub t: f64,
    /// Radar velocity in the radar frame at `t + τ`.
    pub velocity: Vec3,
    pub velocity_dot: Vec3,
    /// Angular velocity in the camera frame at `t`.
    pub omega: Vec3,
    pub extrinsic_rotation: Rotation,
    pub extrinsic_translation: Vec3,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateMotion {
    NoRotation,
    NoTranslation,
    NoAcceleration,
    SingleRotationAxis,
    SingleTranslationDirection,
}

impl fmt::Display for DegenerateMotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegenerateMotion::NoRotation => "no rotation",
            DegenerateMotion::NoTranslation => "no translation",
            DegenerateMotion::NoAcceleration => "no linear acceleration",
            DegenerateMotion::SingleRotationAxis => "single rotation axis (angular velocities pairwise parallel)",
            DegenerateMotion::SingleTranslationDirection => {
                "single translation direction (velocities pairwise parallel)"
            }
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentifiabilityReport {
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
    pub n_samples: usize,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub min_singular_value: f64,
    pub identifiable: bool,
    pub weakly_excited: bool,
    pub degenerate_motions: Vec<DegenerateMotion>,
}

/// `[ −α·ω^ | −α(R v)^·J_l(log R) | R v − ω × r | α R v̇ ]`
pub fn lie_gradient_row(s: &MotionSample) -> SMatrix<f64, 3, 8> {
    let r = s.extrinsic_rotation;
    let rv = r * s.velocity;
    let a = s.scale;
    let j = left_jacobian_so3(&log_so3(&r));
    let mut row = SMatrix::<f64, 3, 8>::zeros();
    row.fixed_view_mut::<3, 3>(0, 0).copy_from(&(skew(&s.omega) * -a));
    row.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&rv) * j * -a));
    row.fixed_view_mut::<3, 1>(0, 6)
        .copy_from(&(rv - s.omega.cross(&s.extrinsic_translation)));
    row.fixed_view_mut::<3, 1>(0, 7).copy_from(&(r * s.velocity_dot * a));
    row
}

pub fn build_identifiability_matrix(samples: &[MotionSample]) -> Result<IdentifiabilityReport, IdentifiabilityError> {
    if samples.len() < 3 {
        return Err(IdentifiabilityError::TooFewSamples { needed: 3, got: samples.len() });
    }
    let mut o = DMatrix::zeros(3 * samples.len(), 8);
    for (i, s) in samples.iter().enumerate() {
        o.fixed_view_mut::<3, 8>(3 * i, 0).copy_from(&lie_gradient_row(s));
    }
    let mut singular_values: Vec<f64> = o.clone().svd(false, false).singular_values.iter().copied().collect();
    singular_values.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let smax = singular_values[0];
    let rank = if smax > 0.0 {
        singular_values.iter().filter(|&&s| s > smax * RANK_TOLERANCE).count()
    } else {
        0
    };
    let min_singular_value = *singular_values.last().unwrap_or(&0.0);
    Ok(IdentifiabilityReport {
        matrix: o,
        n_samples: samples.len(),
        singular_values,
        rank,
        min_singular_value,
        identifiable: rank == 8,
        weakly_excited: min_singular_value < EXCITATION_THRESHOLD,
        degenerate_motions: degenerate_motion_check(samples),
    })
}

fn all_pairs_parallel(v: &[Vec3], eps: f64) -> bool {
    let max_sq = v.iter().map(|x| x.norm_squared()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    for i in 0..v.len() {
        for j in 0..i {
            worst = worst.max(v[i].cross(&v[j]).norm());
        }
    }
    worst < eps * max_sq
}

pub fn degenerate_motion_check(samples: &[MotionSample]) -> Vec<DegenerateMotion> {
    let eps = DEGENERACY_EPSILON;
    let mut out = Vec::new();
    let omegas: Vec<Vec3> = samples.iter().map(|s| s.omega).collect();
    let vels: Vec<Vec3> = samples.iter().map(|s| s.velocity).collect();
    let no_rotation = omegas.iter().all(|w| w.norm() < eps);
    let no_translation = vels.iter().all(|v| v.norm() < eps);
    if no_rotation {
        out.push(DegenerateMotion::NoRotation);
    }
    if no_translation {
        out.push(DegenerateMotion::NoTranslation);
    }
    if samples.iter().all(|s| s.velocity_dot.norm() < eps) {
        out.push(DegenerateMotion::NoAcceleration);
    }
    if samples.len() >= 2 {
        if !no_rotation && all_pairs_parallel(&omegas, eps) {
            out.push(DegenerateMotion::SingleRotationAxis);
        }
        if !no_translation && all_pairs_parallel(&vels, eps) {
            out.push(DegenerateMotion::SingleTranslationDirection);
        }
    }
    out
}

/// Motion sample at camera time `t` for a radar-frame trajectory.
pub fn motion_sample(traj: &SplinePair, state: &CalibrationState, t: f64) -> Result<MotionSample, SplineError> {
    let tt = t + state.time_offset;
    let tr = traj.translation.eval(tt)?;
    let rot = traj.rotation.eval_full(tt, false)?;
    let (r, v, w, wd) = (tr.position, tr.velocity, rot.omega, rot.omega_dot);
    let (_, w_now) = traj.rotation.eval(t)?;
    Ok(MotionSample {
        t,
        velocity: -v - w.cross(&r),
        velocity_dot: -tr.acceleration - wd.cross(&r) - w.cross(&v),
        omega: state.extrinsic_rotation * w_now,
        extrinsic_rotation: state.extrinsic_rotation,
        extrinsic_translation: state.extrinsic_translation,
        scale: state.scale,
    })
}

/// Samples the state's trajectory at `rate_hz` wherever the shifted time
/// `t + τ` falls inside `span`, and analyzes the result.
pub fn trajectory_excitation_scan(
    state: &CalibrationState,
    rate_hz: f64,
    span: (f64, f64),
) -> Result<IdentifiabilityReport, IdentifiabilityError> {
    let traj = &state.trajectory;
    let grid = traj.grid();
    let (lo, hi) = (span.0.max(grid.start()), span.1.min(grid.end()));
    let step = 1.0 / rate_hz;
    let mut samples = Vec::new();
    let mut t = lo - state.time_offset;
    while t + state.time_offset <= hi {
        if grid.contains(t) && grid.contains(t + state.time_offset) {
            samples.push(motion_sample(traj, state, t)?);
        }
        t += step;
    }
    build_identifiability_matrix(&samples)
}
