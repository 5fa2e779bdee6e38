//! Residuals of the batch problem and their analytic Jacobians.
//!
//! Frames: the rotation spline stores `R_wr(t)` and the translation spline
//! stores `r_r^{wr}(t)`, the world origin seen from the radar. The camera
//! observes `R_cw = R_cr·R_wrᵀ` and `r_c^{wc} = α(R_cr·r_r^{wr} + r_c^{rc})`.
//! With `ω` the body rate of `R_wr` (`ω^ = R_wrᵀṘ_wr`), the radar velocity in
//! its own frame is `h = −ṙ − ω × r`.
//!
//! Perturbations: translation control points, `r_c^{rc}`, `α` and `τ` are
//! additive; rotation control points and `R_cr` use `R ← exp(δ^)·R`.

use crate::egovel::EgoVelocityMeasurement;
use crate::geometry::{
    d_left_jacobian_inv_times, left_jacobian_inv_so3, log_so3, right_jacobian_inv_so3, skew, Mat3, RigidTransform,
    Rotation, Vec3,
};
use crate::spline::{Basis, SplineError, SplinePair};
use nalgebra::{SMatrix, SVector, Vector6};
use serde::{Deserialize, Serialize};

/// Number of calibration parameters: `[δR_cr(3), r_c^{rc}(3), α, τ]`.
pub const N_CALIB: usize = 8;
pub const CALIB_ROTATION: usize = 0;
pub const CALIB_TRANSLATION: usize = 3;
pub const CALIB_SCALE: usize = 6;
pub const CALIB_TIME_OFFSET: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationState {
    pub trajectory: SplinePair,
    pub extrinsic_rotation: Rotation,
    pub extrinsic_translation: Vec3,
    pub scale: f64,
    pub time_offset: f64,
}

impl CalibrationState {
    pub fn extrinsics(&self) -> RigidTransform {
        RigidTransform::new(self.extrinsic_rotation, self.extrinsic_translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPoseMeasurement {
    pub timestamp: f64,
    /// `R_cw`
    pub rotation: Rotation,
    /// `r_c^{wc}`, arbitrary scale
    pub translation: Vec3,
    pub rotation_covariance: Mat3,
    pub translation_covariance: Mat3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicPrior {
    pub transform: RigidTransform,
    pub sigma_translation: f64,
    pub sigma_rotation: f64,
}

impl ExtrinsicPrior {
    pub const DEFAULT_SIGMA_TRANSLATION: f64 = 0.1;
    pub const DEFAULT_SIGMA_ROTATION: f64 = 30.0 * std::f64::consts::PI / 180.0;

    pub fn new(transform: RigidTransform) -> Self {
        ExtrinsicPrior {
            transform,
            sigma_translation: Self::DEFAULT_SIGMA_TRANSLATION,
            sigma_rotation: Self::DEFAULT_SIGMA_ROTATION,
        }
    }

    pub fn covariance(&self) -> SMatrix<f64, 6, 6> {
        let t = self.sigma_translation * self.sigma_translation;
        let r = self.sigma_rotation * self.sigma_rotation;
        SMatrix::<f64, 6, 6>::from_diagonal(&Vector6::new(t, t, t, r, r, r))
    }
}

/// Residual of dimension `D` with Jacobians for every state block it touches.
///
/// `d_translation[i]` and `d_rotation[i]` belong to control point
/// `first_control + i`; both are empty for residuals that do not touch the
/// trajectory.
#[derive(Debug, Clone)]
pub struct Linearization<const D: usize> {
    pub residual: SVector<f64, D>,
    pub first_control: usize,
    pub d_translation: Vec<SMatrix<f64, D, 3>>,
    pub d_rotation: Vec<SMatrix<f64, D, 3>>,
    pub d_calib: SMatrix<f64, D, N_CALIB>,
}

impl<const D: usize> Linearization<D> {
    fn value_only(residual: SVector<f64, D>) -> Self {
        Linearization {
            residual,
            first_control: 0,
            d_translation: Vec::new(),
            d_rotation: Vec::new(),
            d_calib: SMatrix::zeros(),
        }
    }
}

pub fn radar_velocity_residual(
    state: &CalibrationState,
    m: &EgoVelocityMeasurement,
) -> Result<(Vec3, Mat3), SplineError> {
    Ok((linearize_radar(state, m, false)?.residual, m.covariance))
}

pub fn linearize_radar(
    state: &CalibrationState,
    m: &EgoVelocityMeasurement,
    jacobians: bool,
) -> Result<Linearization<3>, SplineError> {
    let traj = &state.trajectory;
    let basis = traj.grid().basis(m.timestamp + state.time_offset)?;
    let tr = traj.translation.eval_basis(&basis);
    let rot = traj.rotation.eval_basis(&basis, jacobians);
    let (r, w) = (tr.position, rot.omega);
    let e = m.velocity + tr.velocity + w.cross(&r);
    if !jacobians {
        return Ok(Linearization::value_only(e));
    }
    let k = basis.order;
    let w_hat = skew(&w);
    let minus_r_hat = -skew(&r);
    let mut lin = Linearization {
        residual: e,
        first_control: basis.segment,
        d_translation: Vec::with_capacity(k),
        d_rotation: Vec::with_capacity(k),
        d_calib: SMatrix::zeros(),
    };
    for i in 0..k {
        lin.d_translation
            .push(Mat3::identity() * basis.weight_dot(i) + w_hat * basis.weight(i));
        lin.d_rotation.push(minus_r_hat * rot.jac_omega[i]);
    }
    let d_tau = tr.acceleration + rot.omega_dot.cross(&r) + w.cross(&tr.velocity);
    lin.d_calib.fixed_view_mut::<3, 1>(0, CALIB_TIME_OFFSET).copy_from(&d_tau);
    Ok(lin)
}

pub fn camera_rotation_residual(
    state: &CalibrationState,
    m: &CameraPoseMeasurement,
) -> Result<(Vec3, Mat3), SplineError> {
    Ok((linearize_camera_rotation(state, m, false)?.residual, m.rotation_covariance))
}

pub fn linearize_camera_rotation(
    state: &CalibrationState,
    m: &CameraPoseMeasurement,
    jacobians: bool,
) -> Result<Linearization<3>, SplineError> {
    let basis = state.trajectory.grid().basis(m.timestamp)?;
    linearize_camera_rotation_at(state, m, &basis, jacobians)
}

fn linearize_camera_rotation_at(
    state: &CalibrationState,
    m: &CameraPoseMeasurement,
    basis: &Basis,
    jacobians: bool,
) -> Result<Linearization<3>, SplineError> {
    let rot = state.trajectory.rotation.eval_basis(basis, jacobians);
    let r_cr = state.extrinsic_rotation;
    let e = log_so3(&(m.rotation * rot.rotation * r_cr.transpose()));
    if !jacobians {
        return Ok(Linearization::value_only(e));
    }
    let jinv = right_jacobian_inv_so3(&e);
    let through = jinv * r_cr.matrix();
    let mut lin = Linearization {
        residual: e,
        first_control: basis.segment,
        d_translation: vec![Mat3::zeros(); basis.order],
        d_rotation: rot.jac_rotation.iter().map(|j| through * j).collect(),
        d_calib: SMatrix::zeros(),
    };
    lin.d_calib.fixed_view_mut::<3, 3>(0, CALIB_ROTATION).copy_from(&(-jinv));
    Ok(lin)
}

pub fn camera_translation_residual(
    state: &CalibrationState,
    m: &CameraPoseMeasurement,
) -> Result<(Vec3, Mat3), SplineError> {
    Ok((linearize_camera_translation(state, m, false)?.residual, m.translation_covariance))
}

pub fn linearize_camera_translation(
    state: &CalibrationState,
    m: &CameraPoseMeasurement,
    jacobians: bool,
) -> Result<Linearization<3>, SplineError> {
    let basis = state.trajectory.grid().basis(m.timestamp)?;
    linearize_camera_translation_at(state, m, &basis, jacobians)
}

fn linearize_camera_translation_at(
    state: &CalibrationState,
    m: &CameraPoseMeasurement,
    basis: &Basis,
    jacobians: bool,
) -> Result<Linearization<3>, SplineError> {
    let r = state.trajectory.translation.eval_basis(basis).position;
    let rr = state.extrinsic_rotation * r;
    let alpha = state.scale;
    let e = m.translation - (rr + state.extrinsic_translation) * alpha;
    if !jacobians {
        return Ok(Linearization::value_only(e));
    }
    let r_cr = *state.extrinsic_rotation.matrix();
    let mut lin = Linearization {
        residual: e,
        first_control: basis.segment,
        d_translation: (0..basis.order).map(|i| r_cr * (-alpha * basis.weight(i))).collect(),
        d_rotation: vec![Mat3::zeros(); basis.order],
        d_calib: SMatrix::zeros(),
    };
    lin.d_calib.fixed_view_mut::<3, 3>(0, CALIB_ROTATION).copy_from(&(skew(&rr) * alpha));
    lin.d_calib
        .fixed_view_mut::<3, 3>(0, CALIB_TRANSLATION)
        .copy_from(&(Mat3::identity() * -alpha));
    lin.d_calib
        .fixed_view_mut::<3, 1>(0, CALIB_SCALE)
        .copy_from(&(-(rr + state.extrinsic_translation)));
    Ok(lin)
}

/// Both camera residuals from one spline lookup.
pub fn linearize_camera(
    state: &CalibrationState,
    m: &CameraPoseMeasurement,
    jacobians: bool,
) -> Result<(Linearization<3>, Linearization<3>), SplineError> {
    let basis = state.trajectory.grid().basis(m.timestamp)?;
    Ok((
        linearize_camera_rotation_at(state, m, &basis, jacobians)?,
        linearize_camera_translation_at(state, m, &basis, jacobians)?,
    ))
}

/// `log_se3(T_cr⁻¹·T_prior)` as `[ρ; φ]` with its covariance.
pub fn prior_residual(state: &CalibrationState, p: &ExtrinsicPrior) -> (Vector6<f64>, SMatrix<f64, 6, 6>) {
    (linearize_prior(state, p, false).residual, p.covariance())
}

pub fn linearize_prior(state: &CalibrationState, p: &ExtrinsicPrior, jacobians: bool) -> Linearization<6> {
    let r_cr = state.extrinsic_rotation;
    let r_p = p.transform.rotation;
    let dt = p.transform.translation - state.extrinsic_translation;
    let phi = log_so3(&(r_cr.transpose() * r_p));
    let jl_inv = left_jacobian_inv_so3(&phi);
    let w = r_cr.transpose() * dt;
    let rho = jl_inv * w;
    let e = Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z);
    if !jacobians {
        return Linearization::value_only(e);
    }
    let rt = r_cr.matrix().transpose();
    let d_phi = -jl_inv * rt;
    let d_rho = jl_inv * rt * skew(&dt) + d_left_jacobian_inv_times(&phi, &w) * d_phi;
    let mut lin = Linearization::value_only(e);
    lin.d_calib.fixed_view_mut::<3, 3>(0, CALIB_ROTATION).copy_from(&d_rho);
    lin.d_calib.fixed_view_mut::<3, 3>(3, CALIB_ROTATION).copy_from(&d_phi);
    lin.d_calib.fixed_view_mut::<3, 3>(0, CALIB_TRANSLATION).copy_from(&(-jl_inv * rt));
    lin
}
