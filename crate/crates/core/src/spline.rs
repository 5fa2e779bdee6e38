//! Uniform cumulative B-splines on R³ and SO(3).
//!
//! A spline of order `k` over a uniform knot grid evaluates segment `i`
//! (`t_i ≤ t < t_{i+1}`) from control points `i .. i+k-1`. Values are
//! written in cumulative form:
//!
//! ```text
//! p(u) = p_i + Σ_{j=1}^{k-1} λ_j(u) (p_{i+j} − p_{i+j-1})
//! R(u) = R_i · Π_{j=1}^{k-1} exp(λ_j(u) · log(R_{i+j-1}ᵀ R_{i+j}))
//! ```
//!
//! with `λ(u) = M̃_k · [1, u, …, u^{k-1}]ᵀ`.

use crate::geometry::{exp_so3, log_so3, right_jacobian_inv_so3, right_jacobian_so3, skew, Mat3, Rotation, Vec3};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

pub const MAX_ORDER: usize = 10;
pub const DEFAULT_ORDER: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("spline order {0} outside supported range 1..={MAX_ORDER}")]
    InvalidOrder(usize),
    #[error("time {t} outside spline domain [{start}, {end})")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("knot spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("order {order} spline needs at least {order} control points, got {got}")]
    TooFewControlPoints { order: usize, got: usize },
    #[error("grid expects {expected} control points, got {got}")]
    ControlPointCount { expected: usize, got: usize },
}

fn binomial(n: usize, r: usize) -> f64 {
    if r > n {
        return 0.0;
    }
    let r = r.min(n - r);
    let mut out = 1.0;
    for i in 0..r {
        out = out * (n - i) as f64 / (i + 1) as f64;
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// The k×k cumulative mixing matrix `M̃_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix(DMatrix<f64>);

impl MixingMatrix {
    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    fn compute(k: usize) -> Self {
        // m[s][n] = C(k-1, n)/(k-1)! · Σ_{l=s}^{k-1} (-1)^{l-s} C(k, l-s) (k-1-l)^{k-1-n}
        let norm = factorial(k - 1);
        let mut m = DMatrix::zeros(k, k);
        for s in 0..k {
            for n in 0..k {
                let mut acc = 0.0;
                for l in s..k {
                    let sign = if (l - s) % 2 == 0 { 1.0 } else { -1.0 };
                    acc += sign * binomial(k, l - s) * ((k - 1 - l) as f64).powi((k - 1 - n) as i32);
                }
                m[(s, n)] = binomial(k - 1, n) / norm * acc;
            }
        }
        // cumulative sums from the bottom row up
        let mut cum = DMatrix::zeros(k, k);
        for a in (0..k).rev() {
            for n in 0..k {
                cum[(a, n)] = m[(a, n)] + if a + 1 < k { cum[(a + 1, n)] } else { 0.0 };
            }
        }
        MixingMatrix(cum)
    }
}

static MIXING_CACHE: [OnceLock<MixingMatrix>; MAX_ORDER] = [const { OnceLock::new() }; MAX_ORDER];

/// Cached mixing matrix for order `k`.
pub fn mixing_matrix(k: usize) -> Result<&'static MixingMatrix, SplineError> {
    if !(1..=MAX_ORDER).contains(&k) {
        return Err(SplineError::InvalidOrder(k));
    }
    Ok(MIXING_CACHE[k - 1].get_or_init(|| MixingMatrix::compute(k)))
}

/// Uniform knot grid. Control point `i` sits at knot `t0 + i·dt`; the valid
/// query domain is `[t0, t0 + (n_control − k + 1)·dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_control: usize,
    pub order: usize,
}

impl KnotGrid {
    pub fn new(t0: f64, dt: f64, n_control: usize, order: usize) -> Result<Self, SplineError> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(SplineError::InvalidOrder(order));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SplineError::InvalidSpacing(dt));
        }
        if n_control < order {
            return Err(SplineError::TooFewControlPoints { order, got: n_control });
        }
        Ok(KnotGrid { t0, dt, n_control, order })
    }

    /// Smallest grid starting at `t_start` whose domain contains `t_end`.
    pub fn covering(t_start: f64, t_end: f64, dt: f64, order: usize) -> Result<Self, SplineError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SplineError::InvalidSpacing(dt));
        }
        let span = (t_end - t_start).max(0.0);
        let segments = (span / dt + 1e-9).floor() as usize + 1;
        Self::new(t_start, dt, segments + order - 1, order)
    }

    pub fn n_segments(&self) -> usize {
        self.n_control + 1 - self.order
    }

    pub fn start(&self) -> f64 {
        self.t0
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.n_segments() as f64 * self.dt
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start() && t < self.end()
    }

    /// Time around which control point `i` has the most influence.
    pub fn control_time(&self, i: usize) -> f64 {
        self.t0 + (i as f64 - (self.order as f64 - 2.0) / 2.0) * self.dt
    }

    /// Segment index and normalized time `u ∈ [0, 1)` for `t`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64), SplineError> {
        if !self.contains(t) {
            return Err(SplineError::OutOfDomain {
                t,
                start: self.start(),
                end: self.end(),
            });
        }
        let x = (t - self.t0) / self.dt;
        let seg = (x.floor() as usize).min(self.n_segments() - 1);
        let u = (x - seg as f64).clamp(0.0, 1.0 - f64::EPSILON);
        Ok((seg, u))
    }

    /// Cumulative basis values and their first two time derivatives at `t`.
    pub fn basis(&self, t: f64) -> Result<Basis, SplineError> {
        let (segment, u) = self.locate(t)?;
        Ok(Basis::new(self.order, segment, u, self.dt))
    }
}

/// Cumulative basis `λ_j` (j = 0..k) at one time, with derivatives in 1/s, 1/s².
#[derive(Debug, Clone, Copy)]
pub struct Basis {
    pub order: usize,
    pub segment: usize,
    pub u: f64,
    pub lambda: [f64; MAX_ORDER],
    pub dlambda: [f64; MAX_ORDER],
    pub ddlambda: [f64; MAX_ORDER],
}

impl Basis {
    pub fn new(order: usize, segment: usize, u: f64, dt: f64) -> Self {
        let m = mixing_matrix(order).expect("order validated by grid").as_matrix();
        let mut powers = [0.0; MAX_ORDER];
        let mut d1 = [0.0; MAX_ORDER];
        let mut d2 = [0.0; MAX_ORDER];
        powers[0] = 1.0;
        for n in 1..order {
            powers[n] = powers[n - 1] * u;
            d1[n] = n as f64 * powers[n - 1];
            if n >= 2 {
                d2[n] = (n * (n - 1)) as f64 * powers[n - 2];
            }
        }
        let mut lambda = [0.0; MAX_ORDER];
        let mut dlambda = [0.0; MAX_ORDER];
        let mut ddlambda = [0.0; MAX_ORDER];
        for j in 0..order {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for n in 0..order {
                let mjn = m[(j, n)];
                a += mjn * powers[n];
                b += mjn * d1[n];
                c += mjn * d2[n];
            }
            lambda[j] = a;
            dlambda[j] = b / dt;
            ddlambda[j] = c / (dt * dt);
        }
        Basis { order, segment, u, lambda, dlambda, ddlambda }
    }

    /// Non-cumulative weight of control point `segment + m`: `λ_m − λ_{m+1}`.
    #[inline]
    pub fn weight(&self, m: usize) -> f64 {
        self.lambda[m] - self.next(&self.lambda, m)
    }

    #[inline]
    pub fn weight_dot(&self, m: usize) -> f64 {
        self.dlambda[m] - self.next(&self.dlambda, m)
    }

    #[inline]
    pub fn weight_ddot(&self, m: usize) -> f64 {
        self.ddlambda[m] - self.next(&self.ddlambda, m)
    }

    #[inline]
    fn next(&self, arr: &[f64; MAX_ORDER], m: usize) -> f64 {
        if m + 1 < self.order {
            arr[m + 1]
        } else {
            0.0
        }
    }
}

/// Position, velocity and acceleration of a translation spline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationEval {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationSpline {
    pub grid: KnotGrid,
    pub control_points: Vec<Vec3>,
}

impl TranslationSpline {
    pub fn new(grid: KnotGrid, control_points: Vec<Vec3>) -> Result<Self, SplineError> {
        if control_points.len() != grid.n_control {
            return Err(SplineError::ControlPointCount {
                expected: grid.n_control,
                got: control_points.len(),
            });
        }
        Ok(TranslationSpline { grid, control_points })
    }

    pub fn constant(grid: KnotGrid, value: Vec3) -> Self {
        TranslationSpline { grid, control_points: vec![value; grid.n_control] }
    }

    pub fn order(&self) -> usize {
        self.grid.order
    }

    pub fn eval(&self, t: f64) -> Result<TranslationEval, SplineError> {
        Ok(self.eval_basis(&self.grid.basis(t)?))
    }

    pub fn eval_basis(&self, b: &Basis) -> TranslationEval {
        let base = b.segment;
        let mut position = self.control_points[base];
        let mut velocity = Vec3::zeros();
        let mut acceleration = Vec3::zeros();
        for j in 1..b.order {
            let d = self.control_points[base + j] - self.control_points[base + j - 1];
            position += d * b.lambda[j];
            velocity += d * b.dlambda[j];
            acceleration += d * b.ddlambda[j];
        }
        TranslationEval { position, velocity, acceleration }
    }
}

/// Orientation, body-frame angular velocity and angular acceleration.
///
/// `skew(omega) = Rᵀ·Ṙ`. The optional Jacobians are with respect to a left
/// perturbation `R_m ← exp(δ^)·R_m` of each active control point
/// `segment .. segment + k`; `jac_rotation[i]` maps δ to the right-local
/// change of the output, i.e. `R(t) ← R(t)·exp((J·δ)^)`.
#[derive(Debug, Clone)]
pub struct RotationEval {
    pub segment: usize,
    pub rotation: Rotation,
    pub omega: Vec3,
    pub omega_dot: Vec3,
    pub jac_rotation: Vec<Mat3>,
    pub jac_omega: Vec<Mat3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSpline {
    pub grid: KnotGrid,
    pub control_points: Vec<Rotation>,
}

impl RotationSpline {
    pub fn new(grid: KnotGrid, control_points: Vec<Rotation>) -> Result<Self, SplineError> {
        if control_points.len() != grid.n_control {
            return Err(SplineError::ControlPointCount {
                expected: grid.n_control,
                got: control_points.len(),
            });
        }
        Ok(RotationSpline { grid, control_points })
    }

    pub fn constant(grid: KnotGrid, value: Rotation) -> Self {
        RotationSpline { grid, control_points: vec![value; grid.n_control] }
    }

    pub fn order(&self) -> usize {
        self.grid.order
    }

    /// Orientation and body angular velocity.
    pub fn eval(&self, t: f64) -> Result<(Rotation, Vec3), SplineError> {
        let e = self.eval_basis(&self.grid.basis(t)?, false);
        Ok((e.rotation, e.omega))
    }

    pub fn eval_full(&self, t: f64, with_jacobians: bool) -> Result<RotationEval, SplineError> {
        Ok(self.eval_basis(&self.grid.basis(t)?, with_jacobians))
    }

    pub fn eval_basis(&self, b: &Basis, with_jacobians: bool) -> RotationEval {
        let k = b.order;
        let base = b.segment;
        let cps = &self.control_points[base..base + k];

        // relative rotations D_j = R_{j-1}ᵀ R_j, φ_j = log(D_j), A_j = exp(λ_j φ_j)
        let mut deltas = [Mat3::identity(); MAX_ORDER];
        let mut phis = [Vec3::zeros(); MAX_ORDER];
        let mut a = [Mat3::identity(); MAX_ORDER];
        for j in 1..k {
            let d = cps[j - 1].transpose() * cps[j];
            phis[j] = log_so3(&d);
            deltas[j] = *d.matrix();
            a[j] = *exp_so3(&(phis[j] * b.lambda[j])).matrix();
        }

        let mut r = *cps[0].matrix();
        let mut omega = Vec3::zeros();
        let mut omega_dot = Vec3::zeros();
        for j in 1..k {
            r *= a[j];
            let at = a[j].transpose();
            let rotated = at * omega;
            let rate = phis[j] * b.dlambda[j];
            omega_dot = at * omega_dot + phis[j] * b.ddlambda[j] - rate.cross(&rotated);
            omega = rotated + rate;
        }

        let mut out = RotationEval {
            segment: base,
            rotation: Rotation::from_matrix_unchecked(r),
            omega,
            omega_dot,
            jac_rotation: Vec::new(),
            jac_omega: Vec::new(),
        };
        if !with_jacobians {
            return out;
        }

        // suffix products P_j = A_{j+1} ⋯ A_{k-1}, stored transposed
        let mut p_t = [Mat3::identity(); MAX_ORDER];
        for j in (0..k.saturating_sub(1)).rev() {
            p_t[j] = (a[j + 1] * p_t[j + 1].transpose()).transpose();
        }

        // sensitivities of R (right-local) and ω to each φ_j
        let mut d_r_d_phi = [Mat3::zeros(); MAX_ORDER];
        let mut d_w_d_phi = [Mat3::zeros(); MAX_ORDER];
        let mut partial = Vec3::zeros();
        for j in 1..k {
            let jr = right_jacobian_so3(&(phis[j] * b.lambda[j])) * b.lambda[j];
            d_r_d_phi[j] = p_t[j] * jr;
            d_w_d_phi[j] = p_t[j] * b.dlambda[j] + skew(&partial) * p_t[j] * jr;
            partial += p_t[j] * (phis[j] * b.dlambda[j]);
        }

        // chain through φ_j = log(R_{j-1}ᵀ R_j) to right perturbations of control points
        let mut jr_inv = [Mat3::zeros(); MAX_ORDER];
        for j in 1..k {
            jr_inv[j] = right_jacobian_inv_so3(&phis[j]);
        }
        out.jac_rotation.reserve(k);
        out.jac_omega.reserve(k);
        for i in 0..k {
            let mut jr = if i == 0 { p_t[0] } else { Mat3::zeros() };
            let mut jw = Mat3::zeros();
            if i >= 1 {
                jr += d_r_d_phi[i] * jr_inv[i];
                jw += d_w_d_phi[i] * jr_inv[i];
            }
            if i + 1 < k {
                let back = jr_inv[i + 1] * deltas[i + 1].transpose();
                jr -= d_r_d_phi[i + 1] * back;
                jw -= d_w_d_phi[i + 1] * back;
            }
            // right perturbation ε of R_m equals left perturbation δ = R_m ε
            let rt = cps[i].matrix().transpose();
            out.jac_rotation.push(jr * rt);
            out.jac_omega.push(jw * rt);
        }
        out
    }
}

/// Translation and rotation splines sharing one knot grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SplinePair {
    pub translation: TranslationSpline,
    pub rotation: RotationSpline,
}

impl SplinePair {
    pub fn grid(&self) -> &KnotGrid {
        &self.translation.grid
    }

    pub fn to_dump(&self) -> TrajectoryDump {
        TrajectoryDump {
            order: self.grid().order,
            t0: self.grid().t0,
            dt: self.grid().dt,
            translation: self.translation.control_points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            rotation: self.rotation.control_points.iter().map(|r| r.to_quaternion_wxyz()).collect(),
        }
    }

    pub fn from_dump(dump: &TrajectoryDump) -> Result<Self, SplineError> {
        if dump.rotation.len() != dump.translation.len() {
            return Err(SplineError::ControlPointCount {
                expected: dump.translation.len(),
                got: dump.rotation.len(),
            });
        }
        let grid = KnotGrid::new(dump.t0, dump.dt, dump.translation.len(), dump.order)?;
        let translation = TranslationSpline::new(
            grid,
            dump.translation.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(),
        )?;
        let rotation = RotationSpline::new(
            grid,
            dump.rotation
                .iter()
                .map(|q| Rotation::from_quaternion_wxyz(q[0], q[1], q[2], q[3]))
                .collect(),
        )?;
        Ok(SplinePair { translation, rotation })
    }
}

/// JSON layout for fitted trajectories; rotations are `[w, x, y, z]` quaternions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDump {
    pub order: usize,
    pub t0: f64,
    pub dt: f64,
    pub translation: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rvec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn random_translation(rng: &mut ChaCha8Rng, order: usize, n: usize, dt: f64) -> TranslationSpline {
        let grid = KnotGrid::new(0.3, dt, n, order).unwrap();
        TranslationSpline::new(grid, (0..n).map(|_| rvec(rng, 2.0)).collect()).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng, order: usize, n: usize, dt: f64) -> RotationSpline {
        let grid = KnotGrid::new(0.3, dt, n, order).unwrap();
        let mut r = exp_so3(&rvec(rng, 2.0));
        let mut cps = Vec::with_capacity(n);
        for _ in 0..n {
            cps.push(r);
            r = r * exp_so3(&rvec(rng, 0.6));
        }
        RotationSpline::new(grid, cps).unwrap()
    }

    /// Uniform B-spline basis on integer knots by the Cox–de Boor recursion.
    fn cox_de_boor(i: usize, k: usize, x: f64) -> f64 {
        if k == 1 {
            return if (i as f64) <= x && x < (i + 1) as f64 { 1.0 } else { 0.0 };
        }
        let left = (x - i as f64) / (k - 1) as f64 * cox_de_boor(i, k - 1, x);
        let right = ((i + k) as f64 - x) / (k - 1) as f64 * cox_de_boor(i + 1, k - 1, x);
        left + right
    }

    #[test]
    fn mixing_matrix_small_orders() {
        assert_eq!(mixing_matrix(1).unwrap().as_matrix(), &DMatrix::from_element(1, 1, 1.0));
        assert_eq!(mixing_matrix(2).unwrap().as_matrix(), &DMatrix::identity(2, 2));
        let m4 = mixing_matrix(4).unwrap().as_matrix();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[6.0, 0.0, 0.0, 0.0, 5.0, 3.0, -3.0, 1.0, 1.0, 3.0, 3.0, -2.0, 0.0, 0.0, 0.0, 1.0],
        ) / 6.0;
        assert_relative_eq!(m4, &expected, epsilon = 1e-14);
        assert!(matches!(mixing_matrix(0), Err(SplineError::InvalidOrder(0))));
        assert!(matches!(mixing_matrix(11), Err(SplineError::InvalidOrder(11))));
    }

    #[test]
    fn mixing_matrix_matches_de_boor_cumulative_basis() {
        for k in 1..=MAX_ORDER {
            let m = mixing_matrix(k).unwrap().as_matrix();
            for s in 0..100 {
                let u = s as f64 / 100.0;
                let x = (k - 1) as f64 + u;
                for j in 0..k {
                    let oracle: f64 = (j..k).map(|i| cox_de_boor(i, k, x)).sum();
                    let lam: f64 = (0..k).map(|n| m[(j, n)] * u.powi(n as i32)).sum();
                    assert!((oracle - lam).abs() < 1e-11, "k={k} j={j} u={u}: {oracle} vs {lam}");
                }
            }
        }
    }

    #[test]
    fn locate_examples() {
        let g = KnotGrid::new(2.0, 0.1, 10, 4).unwrap();
        assert_eq!(g.locate(2.0).unwrap(), (0, 0.0));
        let (i, u) = g.locate(2.0 + 1.5 * 0.1).unwrap();
        assert_eq!(i, 1);
        assert_relative_eq!(u, 0.5, epsilon = 1e-12);
        let end = g.end();
        assert_relative_eq!(end, 2.0 + 7.0 * 0.1, epsilon = 1e-12);
        assert!(matches!(g.locate(end), Err(SplineError::OutOfDomain { .. })));
        assert!(matches!(g.locate(1.99), Err(SplineError::OutOfDomain { .. })));
    }

    #[test]
    fn covering_grid_contains_end() {
        let g = KnotGrid::covering(0.0, 60.0 - 1.0 / 30.0, 0.1, 4).unwrap();
        assert_eq!(g.n_segments(), 600);
        assert!(g.contains(60.0 - 1.0 / 30.0));
        let g = KnotGrid::covering(0.0, 1.0, 0.1, 4).unwrap();
        assert!(g.contains(1.0));
    }

    #[test]
    fn constant_translation_has_zero_derivatives() {
        let g = KnotGrid::new(0.0, 0.2, 8, 4).unwrap();
        let c = Vec3::new(1.0, -2.0, 0.5);
        let s = TranslationSpline::constant(g, c);
        for i in 0..50 {
            let e = s.eval(i as f64 * 0.02).unwrap();
            assert_relative_eq!(e.position, c, epsilon = 1e-14);
            assert_eq!(e.velocity, Vec3::zeros());
            assert_eq!(e.acceleration, Vec3::zeros());
        }
    }

    #[test]
    fn collinear_equal_steps_give_constant_velocity() {
        let dt = 0.1;
        let step = Vec3::new(0.3, -0.1, 0.2);
        let g = KnotGrid::new(0.0, dt, 12, 4).unwrap();
        let s = TranslationSpline::new(g, (0..12).map(|i| step * i as f64).collect()).unwrap();
        let h = 1e-5;
        for i in 1..80 {
            let t = 0.01 + i as f64 * 0.1;
            if !g.contains(t + h) || !g.contains(t - h) {
                continue;
            }
            let e = s.eval(t).unwrap();
            let fd = (s.eval(t + h).unwrap().position - s.eval(t - h).unwrap().position) / (2.0 * h);
            assert_relative_eq!(e.velocity, step / dt, epsilon = 1e-9);
            assert_relative_eq!(fd, step / dt, epsilon = 1e-8);
            assert!(e.acceleration.norm() < 1e-9);
        }
    }

    #[test]
    fn translation_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for order in 2..=6 {
            let s = random_translation(&mut rng, order, 14, 0.25);
            let g = s.grid;
            let h = 1e-4;
            for _ in 0..50 {
                let t = rng.random_range(g.start() + 3.0 * h..g.end() - 3.0 * h);
                // skip points whose stencil crosses a knot for low orders
                let (_, u) = g.locate(t).unwrap();
                if order <= 3 && (u < 0.01 || u > 0.99) {
                    continue;
                }
                let p = |x: f64| s.eval(x).unwrap().position;
                let v = |x: f64| s.eval(x).unwrap().velocity;
                let fd_v = (-p(t + 2.0 * h) + 8.0 * p(t + h) - 8.0 * p(t - h) + p(t - 2.0 * h)) / (12.0 * h);
                let fd_a = (-v(t + 2.0 * h) + 8.0 * v(t + h) - 8.0 * v(t - h) + v(t - 2.0 * h)) / (12.0 * h);
                let e = s.eval(t).unwrap();
                assert!((fd_v - e.velocity).norm() <= 1e-6 * e.velocity.norm().max(1.0), "k={order}");
                if order >= 3 {
                    assert!(
                        (fd_a - e.acceleration).norm() <= 1e-6 * e.acceleration.norm().max(1.0),
                        "k={order}: {fd_a} vs {}",
                        e.acceleration
                    );
                }
            }
        }
    }

    #[test]
    fn translation_continuity_and_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for order in 2..=6 {
            let s = random_translation(&mut rng, order, 12, 0.5);
            let g = s.grid;
            for seg in 1..g.n_segments() {
                let knot = g.t0 + seg as f64 * g.dt;
                let left = s.eval_basis(&Basis::new(order, seg - 1, 1.0, g.dt));
                let right = s.eval(knot).unwrap();
                assert!((left.position - right.position).norm() < 1e-9);
                if order >= 3 {
                    assert!((left.velocity - right.velocity).norm() < 1e-9);
                }
                if order >= 4 {
                    assert!((left.acceleration - right.acceleration).norm() < 1e-9);
                }
            }
            for _ in 0..100 {
                let t = rng.random_range(g.start()..g.end());
                let (seg, _) = g.locate(t).unwrap();
                let p = s.eval(t).unwrap().position;
                for c in 0..3 {
                    let active = &s.control_points[seg..seg + order];
                    let lo = active.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                    let hi = active.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(p[c] >= lo - 1e-12 && p[c] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_rotation_spline() {
        let g = KnotGrid::new(0.0, 0.1, 6, 4).unwrap();
        let s = RotationSpline::constant(g, Rotation::identity());
        let (r, w) = s.eval(0.17).unwrap();
        assert_eq!(*r.matrix(), Mat3::identity());
        assert_eq!(w, Vec3::zeros());
    }

    #[test]
    fn fixed_axis_equal_increments_give_constant_rate() {
        let dt = 0.1;
        let theta = 0.07;
        let axis = Vec3::new(1.0, 2.0, -1.0).normalize();
        let g = KnotGrid::new(0.0, dt, 15, 4).unwrap();
        let cps = (0..15).map(|i| exp_so3(&(axis * theta * i as f64))).collect();
        let s = RotationSpline::new(g, cps).unwrap();
        let eps = 1e-5;
        for i in 1..100 {
            let t = i as f64 * 0.011;
            if !g.contains(t + eps) {
                break;
            }
            let (r0, w) = s.eval(t).unwrap();
            let (r1, _) = s.eval(t + eps).unwrap();
            let fd = log_so3(&(r0.transpose() * r1)) / eps;
            assert_relative_eq!(w, axis * theta / dt, epsilon = 1e-10);
            assert!((fd - w).norm() < 1e-5);
        }
    }

    #[test]
    fn rotation_rates_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for order in 2..=6 {
            let s = random_rotation(&mut rng, order, 14, 0.2);
            let g = s.grid;
            let eps = 1e-5;
            for _ in 0..50 {
                let t = rng.random_range(g.start() + 2.0 * eps..g.end() - 2.0 * eps);
                let (_, u) = g.locate(t).unwrap();
                if order <= 3 && (u < 0.001 || u > 0.999) {
                    continue;
                }
                let e = s.eval_full(t, false).unwrap();
                assert!(e.rotation.orthonormality_error() < 1e-10);
                let (rm, _) = s.eval(t - eps).unwrap();
                let (rp, _) = s.eval(t + eps).unwrap();
                let fd = log_so3(&(rm.transpose() * rp)) / (2.0 * eps);
                assert!((fd - e.omega).norm() < 1e-5, "k={order}: {fd} vs {}", e.omega);
                if order >= 3 {
                    let wm = s.eval(t - eps).unwrap().1;
                    let wp = s.eval(t + eps).unwrap().1;
                    let fd_dot = (wp - wm) / (2.0 * eps);
                    assert!(
                        (fd_dot - e.omega_dot).norm() < 1e-5 * e.omega_dot.norm().max(1.0),
                        "k={order}: {fd_dot} vs {}",
                        e.omega_dot
                    );
                }
            }
        }
    }

    #[test]
    fn rotation_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = 1e-6;
        for order in 2..=6 {
            let s = random_rotation(&mut rng, order, 12, 0.3);
            let g = s.grid;
            for _ in 0..10 {
                let t = rng.random_range(g.start()..g.end());
                let e = s.eval_full(t, true).unwrap();
                for i in 0..order {
                    let m = e.segment + i;
                    for c in 0..3 {
                        let mut d = Vec3::zeros();
                        d[c] = h;
                        let mut sp = s.clone();
                        sp.control_points[m] = exp_so3(&d) * s.control_points[m];
                        let mut sm = s.clone();
                        sm.control_points[m] = exp_so3(&(-d)) * s.control_points[m];
                        let ep = sp.eval_full(t, false).unwrap();
                        let em = sm.eval_full(t, false).unwrap();
                        let fd_r = (log_so3(&(e.rotation.transpose() * ep.rotation))
                            - log_so3(&(e.rotation.transpose() * em.rotation)))
                            / (2.0 * h);
                        let fd_w = (ep.omega - em.omega) / (2.0 * h);
                        let an_r = e.jac_rotation[i].column(c);
                        let an_w = e.jac_omega[i].column(c);
                        assert!((fd_r - an_r).norm() < 1e-6 * (1.0 + fd_r.norm()), "k={order} cp={i}");
                        assert!((fd_w - an_w).norm() < 1e-5 * (1.0 + fd_w.norm()), "k={order} cp={i}: {fd_w} vs {an_w}");
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_continuity_at_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for order in 2..=6 {
            let s = random_rotation(&mut rng, order, 10, 0.4);
            let g = s.grid;
            for seg in 1..g.n_segments() {
                let knot = g.t0 + seg as f64 * g.dt;
                let left = s.eval_basis(&Basis::new(order, seg - 1, 1.0, g.dt), false);
                let right = s.eval_full(knot, false).unwrap();
                assert!((left.rotation.matrix() - right.rotation.matrix()).abs().max() < 1e-9);
                if order >= 3 {
                    assert!((left.omega - right.omega).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let pair = SplinePair {
            translation: random_translation(&mut rng, 4, 9, 0.1),
            rotation: random_rotation(&mut rng, 4, 9, 0.1),
        };
        let json = serde_json::to_string(&pair.to_dump()).unwrap();
        let back = SplinePair::from_dump(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.translation, pair.translation);
        for (a, b) in back.rotation.control_points.iter().zip(&pair.rotation.control_points) {
            assert!((a.matrix() - b.matrix()).abs().max() < 1e-14);
        }
    }
}
