//! Rotation and rigid-transform primitives on SO(3) / SE(3).
//!
//! Rotations are stored as 3x3 matrices. Tangent vectors are axis-angle
//! vectors in R³ (direction = axis, norm = angle in radians). Perturbations
//! follow the left convention throughout the crate: `R ← exp(δ^) · R`.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the closed forms switch to truncated Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Distance from π under which `log_so3` recovers the axis from the symmetric part.
const NEAR_PI: f64 = 1e-3;

/// Skew-symmetric matrix such that `skew(v) * s == v.cross(&s)`.
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]; reads the antisymmetric part of `m`.
#[inline]
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn exp_so3(phi: &Vec3) -> Rotation {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let k2 = k * k;
    let m = if theta < SMALL_ANGLE {
        Mat3::identity() + k + k2 * 0.5 + k2 * k / 6.0
    } else {
        Mat3::identity() + k * (theta.sin() / theta) + k2 * ((1.0 - theta.cos()) / theta2)
    };
    Rotation(m)
}

/// Matrix logarithm of a rotation, returned as an axis-angle vector with
/// norm in [0, π].
///
/// At exactly π the axis sign is ambiguous; the axis is taken from the
/// column with the largest diagonal entry and oriented so that its first
/// nonzero component is positive.
pub fn log_so3(r: &Rotation) -> Vec3 {
    let m = &r.0;
    let w = vee(m);
    let s = w.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);

    if theta < SMALL_ANGLE {
        // theta / sin(theta) ≈ 1 + theta²/6
        return w * (1.0 + s * s / 6.0);
    }
    if PI - theta > NEAR_PI {
        return w * (theta / s);
    }

    // Near π the antisymmetric part vanishes; recover the axis from
    // (R + Rᵀ)/2 = cosθ·I + (1 − cosθ)·a·aᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let aat = (sym - Mat3::identity() * c) / (1.0 - c);
    let mut best = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vec3 = aat.column(best).into_owned();
    axis /= axis.norm();
    let flip = if s > 1e-12 {
        axis.dot(&w) < 0.0
    } else {
        !first_nonzero_positive(&axis)
    };
    if flip {
        axis = -axis;
    }
    axis * theta
}

fn first_nonzero_positive(v: &Vec3) -> bool {
    for i in 0..3 {
        if v[i].abs() > 1e-12 {
            return v[i] > 0.0;
        }
    }
    true
}

/// Left Jacobian of SO(3):
/// `J(φ) = Σ_{n≥0} (φ^)ⁿ / (n+1)!`.
pub fn left_jacobian_so3(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        Mat3::identity() + k * 0.5 + k2 / 6.0 + k2 * k / 24.0
    } else {
        Mat3::identity()
            + k * ((1.0 - theta.cos()) / theta2)
            + k2 * ((theta - theta.sin()) / (theta2 * theta))
    }
}

/// Closed-form inverse of [`left_jacobian_so3`].
pub fn left_jacobian_inv_so3(phi: &Vec3) -> Mat3 {
    let k = skew(phi);
    let k2 = k * k;
    Mat3::identity() - k * 0.5 + k2 * jl_inv_beta(phi.norm())
}

/// Right Jacobian, `J_r(φ) = J_l(−φ) = J_l(φ)ᵀ`.
#[inline]
pub fn right_jacobian_so3(phi: &Vec3) -> Mat3 {
    left_jacobian_so3(phi).transpose()
}

#[inline]
pub fn right_jacobian_inv_so3(phi: &Vec3) -> Mat3 {
    left_jacobian_inv_so3(phi).transpose()
}

/// Coefficient of (φ^)² in the inverse left Jacobian,
/// `1/θ² − (1 + cosθ) / (2θ sinθ)`.
fn jl_inv_beta(theta: f64) -> f64 {
    if theta < 1e-2 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta) - 0.5 / (theta * (0.5 * theta).tan())
    }
}

/// Derivative of [`jl_inv_beta`] with respect to θ.
fn jl_inv_beta_prime(theta: f64) -> f64 {
    if theta < 0.1 {
        let t2 = theta * theta;
        theta / 360.0 + t2 * theta / 7560.0 + t2 * t2 * theta / 201600.0
    } else {
        let half = 0.5 * theta;
        let s = half.sin();
        -2.0 / (theta * theta * theta)
            + 0.5 / (theta * theta * half.tan())
            + 0.25 / (theta * s * s)
    }
}

/// Jacobian of `J_l⁻¹(φ)·x` with respect to φ, holding x fixed.
pub fn d_left_jacobian_inv_times(phi: &Vec3, x: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let beta = jl_inv_beta(theta);
    let pdx = phi.dot(x);
    let k2x = phi * pdx - x * phi.norm_squared();
    let mut d = skew(x) * 0.5
        + (phi * x.transpose() + Mat3::identity() * pdx - x * phi.transpose() * 2.0) * beta;
    if theta > 0.0 {
        d += k2x * phi.transpose() * (jl_inv_beta_prime(theta) / theta);
    }
    d
}

/// An element of SO(3).
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wraps a matrix that is already orthonormal with det +1.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary matrix onto the nearest rotation (SVD).
    pub fn from_matrix_projected(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    pub fn from_quaternion_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Rotation(*q.to_rotation_matrix().matrix())
    }

    /// Unit quaternion `[w, x, y, z]` with w ≥ 0.
    pub fn to_quaternion_wxyz(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    /// Builds `Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_roll_pitch_yaw(roll: f64, pitch: f64, yaw: f64) -> Self {
        let r = nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw);
        Rotation(*r.matrix())
    }

    /// Inverse of [`Rotation::from_roll_pitch_yaw`].
    pub fn to_roll_pitch_yaw(&self) -> [f64; 3] {
        let (r, p, y) = nalgebra::Rotation3::from_matrix_unchecked(self.0).euler_angles();
        [r, p, y]
    }

    #[inline]
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    #[inline]
    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    #[inline]
    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn log(&self) -> Vec3 {
        log_so3(self)
    }

    pub fn exp(phi: &Vec3) -> Self {
        exp_so3(phi)
    }

    /// Rotation angle in [0, π].
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// `exp(δ^) · self`.
    pub fn perturb_left(&self, delta: &Vec3) -> Rotation {
        exp_so3(delta) * *self
    }

    /// Gram-Schmidt cleanup of accumulated round-off.
    pub fn renormalized(&self) -> Rotation {
        let c0 = self.0.column(0).normalize();
        let c1 = self.0.column(1);
        let c1 = (c1 - c0 * c0.dot(&c1)).normalize();
        let c2 = c0.cross(&c1);
        Rotation(Mat3::from_columns(&[c0, c1, c2]))
    }

    /// Largest entry of |RᵀR − I|.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).abs().max()
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.to_quaternion_wxyz();
        write!(
            f,
            "Rotation(w: {:.6}, x: {:.6}, y: {:.6}, z: {:.6})",
            q[0], q[1], q[2], q[3]
        )
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    #[inline]
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    #[inline]
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for Rotation {
    type Output = Vec3;
    #[inline]
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    #[inline]
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Serialized as a `[w, x, y, z]` unit quaternion.
impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_quaternion_wxyz().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let q = <[f64; 4]>::deserialize(d)?;
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(serde::de::Error::custom("quaternion must have nonzero finite norm"));
        }
        Ok(Rotation::from_quaternion_wxyz(q[0], q[1], q[2], q[3]))
    }
}

/// Rigid-body transform `T = [R t; 0 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * *p + self.translation
    }

    /// se(3) logarithm as `[ρ; φ]` (translation block first).
    pub fn log(&self) -> Vector6<f64> {
        let phi = self.rotation.log();
        let rho = left_jacobian_inv_so3(&phi) * self.translation;
        Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
    }

    /// Inverse of [`RigidTransform::log`].
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let rho = Vec3::new(xi[0], xi[1], xi[2]);
        let phi = Vec3::new(xi[3], xi[4], xi[5]);
        RigidTransform {
            rotation: exp_so3(&phi),
            translation: left_jacobian_so3(&phi) * rho,
        }
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}
