//! Radar ego-velocity from the Doppler detections of a single scan.
//!
//! Each detection constrains the ego-velocity `h` through `r̂ᵀh = ṙ`. Stacking
//! all detections gives `H·h = y`, solved in the least-squares sense with
//! covariance `Σ_v = (eᵀe)/(N−3) · (HᵀH)⁻¹`.

use crate::geometry::{Mat3, Vec3};
use nalgebra::{Cholesky, Matrix3, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

/// Isotropic ego-velocity σ substituted when the covariance is undefined.
pub const DEFAULT_FALLBACK_SIGMA: f64 = 0.05;
/// Lower bound on the range-rate σ estimated from RANSAC inliers.
pub const DEFAULT_MIN_SIGMA: f64 = 0.01;
/// Cap on refit/reclassify rounds after consensus.
const MAX_REFINEMENTS: usize = 10;
/// Largest accepted condition number of `HᵀH`.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EgoVelocityError {
    #[error("need at least 3 detections, got {0}")]
    TooFewDetections(usize),
    #[error("detection directions are degenerate (condition number {condition:.3e})")]
    DegenerateGeometry { condition: f64 },
    #[error("no consensus: {inliers} inliers of {total} detections")]
    NoConsensus { inliers: usize, total: usize },
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarDetection {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub range_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<f64>,
}

impl RadarDetection {
    pub fn new(range: f64, azimuth: f64, elevation: f64, range_rate: f64) -> Self {
        RadarDetection { range, azimuth, elevation, range_rate, intensity: None }
    }

    pub fn validate(&self) -> Result<(), EgoVelocityError> {
        let bad = |what: &str| Err(EgoVelocityError::InvalidDetection(what.to_string()));
        if !(self.range > 0.0 && self.range.is_finite()) {
            return bad("range must be positive");
        }
        if !(self.azimuth > -PI && self.azimuth <= PI) {
            return bad("azimuth outside (-pi, pi]");
        }
        if !(self.elevation > -FRAC_PI_2 && self.elevation < FRAC_PI_2) {
            return bad("elevation outside (-pi/2, pi/2)");
        }
        if !self.range_rate.is_finite() {
            return bad("range rate must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarScan {
    pub timestamp: f64,
    pub detections: Vec<RadarDetection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoVelocityMeasurement {
    pub timestamp: f64,
    pub velocity: Vec3,
    pub covariance: Mat3,
    pub n_inliers: usize,
    pub n_outliers: usize,
}

/// Least-squares ego-velocity of a detection set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoVelocitySolution {
    pub velocity: Vec3,
    pub covariance: Mat3,
    pub residual_sq: f64,
    /// True when the isotropic fallback replaced the estimated covariance.
    pub fallback_covariance: bool,
}

pub fn direction_vector(d: &RadarDetection) -> Vec3 {
    let (se, ce) = d.elevation.sin_cos();
    let (sa, ca) = d.azimuth.sin_cos();
    Vec3::new(ce * ca, ce * sa, se)
}

pub fn solve_ego_velocity(detections: &[RadarDetection]) -> Result<EgoVelocitySolution, EgoVelocityError> {
    solve_ego_velocity_with_fallback(detections, DEFAULT_FALLBACK_SIGMA)
}

pub fn solve_ego_velocity_with_fallback(
    detections: &[RadarDetection],
    fallback_sigma: f64,
) -> Result<EgoVelocitySolution, EgoVelocityError> {
    solve_ego_velocity_floored(detections, fallback_sigma, 0.0)
}

/// As [`solve_ego_velocity_with_fallback`], with the per-detection range-rate
/// σ estimate clamped from below at `min_sigma`.
pub fn solve_ego_velocity_floored(
    detections: &[RadarDetection],
    fallback_sigma: f64,
    min_sigma: f64,
) -> Result<EgoVelocitySolution, EgoVelocityError> {
    let n = detections.len();
    if n < 3 {
        return Err(EgoVelocityError::TooFewDetections(n));
    }
    let mut hth = Mat3::zeros();
    let mut hty = Vec3::zeros();
    let dirs: Vec<Vec3> = detections.iter().map(direction_vector).collect();
    for (r, d) in dirs.iter().zip(detections) {
        hth += r * r.transpose();
        hty += r * d.range_rate;
    }
    let condition = condition_number(&hth);
    if condition > MAX_CONDITION {
        return Err(EgoVelocityError::DegenerateGeometry { condition });
    }
    let chol = Cholesky::new(hth).ok_or(EgoVelocityError::DegenerateGeometry { condition })?;
    let velocity = chol.solve(&hty);
    let residual_sq: f64 = dirs
        .iter()
        .zip(detections)
        .map(|(r, d)| (r.dot(&velocity) - d.range_rate).powi(2))
        .sum();

    let fallback = Mat3::identity() * fallback_sigma * fallback_sigma;
    let (covariance, fallback_covariance) = if n == 3 {
        log::warn!("ego-velocity covariance undefined for 3 detections; using isotropic fallback");
        (fallback, true)
    } else {
        let cov = chol.inverse() * (residual_sq / (n - 3) as f64).max(min_sigma * min_sigma);
        if is_spd(&cov) {
            (cov, false)
        } else {
            log::warn!("ego-velocity covariance not positive definite; using isotropic fallback");
            (fallback, true)
        }
    };
    Ok(EgoVelocitySolution { velocity, covariance, residual_sq, fallback_covariance })
}

fn condition_number(m: &Mat3) -> f64 {
    let eig = SymmetricEigen::new(*m).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn is_spd(m: &Mat3) -> bool {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues;
    eig.min() > eig.max() * 1e-12 && eig.min() > 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub min_inlier_ratio: f64,
    pub max_iterations: usize,
    /// Hypotheses drawn even when the adaptive bound is lower.
    pub min_iterations: usize,
    pub confidence: f64,
    pub fallback_sigma: f64,
    pub min_sigma: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            inlier_threshold: 0.1,
            min_inliers: 15,
            min_inlier_ratio: 0.5,
            max_iterations: 200,
            min_iterations: 10,
            confidence: 0.99,
            fallback_sigma: DEFAULT_FALLBACK_SIGMA,
            min_sigma: DEFAULT_MIN_SIGMA,
            seed: 0,
        }
    }
}

fn adaptive_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w3 = inlier_ratio.powi(3);
    if w3 >= 1.0 - 1e-12 {
        return 1;
    }
    if w3 <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w3).ln();
    (n.ceil() as usize).clamp(1, cap)
}

fn inlier_mask(dirs: &[Vec3], dets: &[RadarDetection], h: &Vec3, threshold: f64) -> Vec<bool> {
    dirs.iter()
        .zip(dets)
        .map(|(r, d)| (r.dot(h) - d.range_rate).abs() < threshold)
        .collect()
}

fn select(dets: &[RadarDetection], mask: &[bool]) -> Vec<RadarDetection> {
    dets.iter().zip(mask).filter(|(_, &m)| m).map(|(d, _)| *d).collect()
}

/// Refit on the consensus set and reclassify until it is stable.
fn local_optimization(
    dirs: &[Vec3],
    dets: &[RadarDetection],
    mut mask: Vec<bool>,
    cfg: &RansacConfig,
) -> Option<(Vec<bool>, EgoVelocitySolution)> {
    let mut sol = solve_ego_velocity_floored(&select(dets, &mask), cfg.fallback_sigma, cfg.min_sigma).ok()?;
    for _ in 0..MAX_REFINEMENTS {
        let refined = inlier_mask(dirs, dets, &sol.velocity, cfg.inlier_threshold);
        if refined == mask || refined.iter().filter(|&&m| m).count() < 3 {
            break;
        }
        match solve_ego_velocity_floored(&select(dets, &refined), cfg.fallback_sigma, cfg.min_sigma) {
            Ok(s) => {
                sol = s;
                mask = refined;
            }
            Err(_) => break,
        }
    }
    Some((mask, sol))
}

/// RANSAC over 3-detection samples; every hypothesis that matches the best
/// raw consensus so far is refined by [`local_optimization`] and scored by its
/// refined consensus.
pub fn ransac_ego_velocity(scan: &RadarScan, cfg: &RansacConfig) -> Result<EgoVelocityMeasurement, EgoVelocityError> {
    let dets = &scan.detections;
    let n = dets.len();
    if n < 3 {
        return Err(EgoVelocityError::TooFewDetections(n));
    }
    let dirs: Vec<Vec3> = dets.iter().map(direction_vector).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // (raw count of the hypothesis, refined consensus, refit)
    let mut best: Option<(usize, Vec<bool>, EgoVelocitySolution)> = None;
    let mut best_raw = 0;
    let mut needed = cfg.max_iterations.max(1);
    // a consensus of only the sample itself carries no redundancy
    let min_count = if n == 3 { 3 } else { 4 };
    let mut iter = 0;
    while iter < needed {
        iter += 1;
        let idx = sample(&mut rng, n, 3);
        let (i, j, k) = (idx.index(0), idx.index(1), idx.index(2));
        let h_mat = Matrix3::from_rows(&[dirs[i].transpose(), dirs[j].transpose(), dirs[k].transpose()]);
        let y = Vec3::new(dets[i].range_rate, dets[j].range_rate, dets[k].range_rate);
        let Some(h) = h_mat.lu().solve(&y) else { continue };
        if !h.iter().all(|v| v.is_finite()) || h_mat.determinant().abs() < 1e-6 {
            continue;
        }
        let mask = inlier_mask(&dirs, dets, &h, cfg.inlier_threshold);
        let count = mask.iter().filter(|&&m| m).count();
        if count < min_count || count < best_raw {
            continue;
        }
        best_raw = count;
        let Some((refined, sol)) = local_optimization(&dirs, dets, mask, cfg) else { continue };
        let refined_count = refined.iter().filter(|&&m| m).count();
        if best.as_ref().is_none_or(|(c, _, _)| refined_count > *c) {
            needed = adaptive_iterations(refined_count as f64 / n as f64, cfg.confidence, cfg.max_iterations)
                .max(cfg.min_iterations.min(cfg.max_iterations));
            best = Some((refined_count, refined, sol));
        }
    }

    let (_, mask, sol) = best.ok_or(EgoVelocityError::NoConsensus { inliers: best_raw, total: n })?;
    let inliers = mask.iter().filter(|&&m| m).count();
    if inliers < cfg.min_inliers || (inliers as f64) < cfg.min_inlier_ratio * n as f64 {
        return Err(EgoVelocityError::NoConsensus { inliers, total: n });
    }
    Ok(EgoVelocityMeasurement {
        timestamp: scan.timestamp,
        velocity: sol.velocity,
        covariance: sol.covariance,
        n_inliers: inliers,
        n_outliers: n - inliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_directions(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| (rng.random_range(-1.2..1.2), rng.random_range(-0.5..0.5)))
            .collect()
    }

    fn detections_for(angles: &[(f64, f64)], h: &Vec3) -> Vec<RadarDetection> {
        angles
            .iter()
            .map(|&(az, el)| {
                let mut d = RadarDetection::new(5.0, az, el, 0.0);
                d.range_rate = direction_vector(&d).dot(h);
                d
            })
            .collect()
    }

    fn from_direction(r: &Vec3, rate: f64) -> RadarDetection {
        RadarDetection::new(3.0, r.y.atan2(r.x), r.z.clamp(-1.0, 1.0).asin(), rate)
    }

    #[test]
    fn direction_examples() {
        assert_relative_eq!(direction_vector(&RadarDetection::new(1.0, 0.0, 0.0, 0.0)), Vec3::x(), epsilon = 1e-15);
        assert_relative_eq!(
            direction_vector(&RadarDetection::new(1.0, FRAC_PI_2, 0.0, 0.0)),
            Vec3::y(),
            epsilon = 1e-15
        );
        let r = direction_vector(&RadarDetection::new(1.0, 0.3, -0.2, 0.0));
        let oracle = Vec3::new(0.2f64.cos() * 0.3f64.cos(), 0.2f64.cos() * 0.3f64.sin(), -(0.2f64.sin()));
        assert_relative_eq!(r, oracle, epsilon = 1e-15);
        assert!((r.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_directions() {
        let dets = vec![
            RadarDetection::new(1.0, 0.0, 0.0, -1.0),
            RadarDetection::new(1.0, FRAC_PI_2, 0.0, 0.0),
            RadarDetection::new(1.0, 0.0, FRAC_PI_2 - 1e-9, 0.0),
        ];
        let mut dets = dets;
        dets[2].range_rate = direction_vector(&dets[2]).dot(&Vec3::new(-1.0, 0.0, 0.0));
        let sol = solve_ego_velocity(&dets).unwrap();
        assert_relative_eq!(sol.velocity, Vec3::new(-1.0, 0.0, 0.0), epsilon = 1e-9);
        assert!(sol.fallback_covariance);
        assert_relative_eq!(sol.covariance, Mat3::identity() * 0.0025, epsilon = 1e-15);
    }

    #[test]
    fn noise_free_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Vec3::new(0.7, -0.3, 0.1);
        let dets = detections_for(&random_directions(&mut rng, 50), &h);
        let sol = solve_ego_velocity(&dets).unwrap();
        assert!((sol.velocity - h).norm() < 1e-12);
        assert!(sol.residual_sq < 1e-24);
    }

    #[test]
    fn errors() {
        let d = RadarDetection::new(1.0, 0.0, 0.0, 0.0);
        assert_eq!(solve_ego_velocity(&[d, d]), Err(EgoVelocityError::TooFewDetections(2)));
        let coplanar: Vec<_> = (0..10).map(|i| RadarDetection::new(1.0, 0.1 * i as f64, 0.0, 0.5)).collect();
        assert!(matches!(solve_ego_velocity(&coplanar), Err(EgoVelocityError::DegenerateGeometry { .. })));
        assert!(RadarDetection::new(1.0, -PI, 0.0, 0.0).validate().is_err());
        assert!(RadarDetection::new(1.0, PI, 0.0, 0.0).validate().is_ok());
        assert!(RadarDetection::new(0.0, 0.0, 0.0, 0.0).validate().is_err());
    }

    #[test]
    fn nees_is_chi_square_consistent() {
        use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor};
        let chi = ChiSquared::new(3.0).unwrap();
        let (lo, hi) = (chi.inverse_cdf(0.05), chi.inverse_cdf(0.95));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let h = Vec3::new(0.7, -0.3, 0.1);
        let trials = 500;
        let mut sum = 0.0;
        let mut inside = 0;
        for _ in 0..trials {
            let mut dets = detections_for(&random_directions(&mut rng, 50), &h);
            for d in &mut dets {
                d.range_rate += noise.sample(&mut rng);
            }
            let sol = solve_ego_velocity(&dets).unwrap();
            let e = sol.velocity - h;
            let nees = (e.transpose() * sol.covariance.try_inverse().unwrap() * e)[0];
            sum += nees;
            if nees >= lo && nees <= hi {
                inside += 1;
            }
        }
        let mean = sum / trials as f64;
        assert!(mean >= lo && mean <= hi, "mean NEES {mean}");
        assert!((2.5..3.8).contains(&mean), "mean NEES {mean}");
        // covariance uses the estimated noise variance, so NEES ~ 3·F(3, N−3)
        let f = FisherSnedecor::new(3.0, 47.0).unwrap();
        let expected = f.cdf(hi / 3.0) - f.cdf(lo / 3.0);
        let sd = (expected * (1.0 - expected) / trials as f64).sqrt();
        let frac = inside as f64 / trials as f64;
        assert!((frac - expected).abs() <= 3.0 * sd, "fraction {frac}, expected {expected}");
    }

    #[test]
    fn ransac_without_outliers_uses_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Vec3::new(1.0, 0.2, -0.4);
        let dets = detections_for(&random_directions(&mut rng, 30), &h);
        let scan = RadarScan { timestamp: 1.5, detections: dets.clone() };
        let m = ransac_ego_velocity(&scan, &RansacConfig::default()).unwrap();
        assert_eq!((m.n_inliers, m.n_outliers), (30, 0));
        assert_eq!(m.timestamp, 1.5);
        assert!((m.velocity - solve_ego_velocity(&dets).unwrap().velocity).norm() < 1e-12);
    }

    #[test]
    fn ransac_rejects_planted_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Vec3::new(-0.5, 1.1, 0.05);
        let clean = detections_for(&random_directions(&mut rng, 20), &h);
        let mut dets = clean.clone();
        for mut d in detections_for(&random_directions(&mut rng, 5), &h) {
            d.range_rate += 2.0;
            dets.push(d);
        }
        let scan = RadarScan { timestamp: 0.0, detections: dets };
        let m = ransac_ego_velocity(&scan, &RansacConfig::default()).unwrap();
        assert_eq!((m.n_inliers, m.n_outliers), (20, 5));
        let reference = solve_ego_velocity(&clean).unwrap().velocity;
        assert!((m.velocity - reference).norm() < 1e-9);
    }

    #[test]
    fn ransac_min_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dets = detections_for(&random_directions(&mut rng, 10), &Vec3::new(1.0, 0.0, 0.0));
        let scan = RadarScan { timestamp: 0.0, detections: dets };
        assert_eq!(
            ransac_ego_velocity(&scan, &RansacConfig::default()),
            Err(EgoVelocityError::NoConsensus { inliers: 10, total: 10 })
        );
        let two = RadarScan { timestamp: 0.0, detections: scan.detections[..2].to_vec() };
        assert_eq!(
            ransac_ego_velocity(&two, &RansacConfig::default()),
            Err(EgoVelocityError::TooFewDetections(2))
        );
    }

    #[test]
    fn ransac_inlier_ratio_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Vec3::new(0.3, 0.3, 0.3);
        let mut dets = detections_for(&random_directions(&mut rng, 16), &h);
        for (i, mut d) in detections_for(&random_directions(&mut rng, 20), &h).into_iter().enumerate() {
            d.range_rate += 1.0 + 0.37 * i as f64;
            dets.push(d);
        }
        let scan = RadarScan { timestamp: 0.0, detections: dets };
        assert!(matches!(
            ransac_ego_velocity(&scan, &RansacConfig::default()),
            Err(EgoVelocityError::NoConsensus { inliers: 16, total: 36 })
        ));
    }

    #[test]
    fn adaptive_iteration_schedule() {
        assert_eq!(adaptive_iterations(1.0, 0.99, 200), 1);
        assert_eq!(adaptive_iterations(0.5, 0.99, 200), 35);
        assert_eq!(adaptive_iterations(0.1, 0.99, 200), 200);
    }

    fn arb_vec(scale: f64) -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-scale..scale).prop_map(|a| Vec3::new(a[0], a[1], a[2]))
    }

    proptest! {
        #[test]
        fn solve_is_rotation_equivariant(seed in any::<u64>(), h in arb_vec(3.0), rv in arb_vec(3.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.05).unwrap();
            let dets: Vec<_> = detections_for(&random_directions(&mut rng, 25), &h)
                .into_iter()
                .map(|mut d| { d.range_rate += noise.sample(&mut rng); d })
                .collect();
            let rot = exp_so3(&rv);
            let rotated: Vec<_> = dets.iter().map(|d| from_direction(&(rot * direction_vector(d)), d.range_rate)).collect();
            let a = solve_ego_velocity(&dets).unwrap();
            let b = solve_ego_velocity(&rotated).unwrap();
            prop_assert!((rot * a.velocity - b.velocity).norm() < 1e-9);
        }

        #[test]
        fn consistent_detection_leaves_solution(seed in any::<u64>(), h in arb_vec(3.0), az in -3.0f64..3.0, el in -1.4f64..1.4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dets = detections_for(&random_directions(&mut rng, 12), &h);
            let a = solve_ego_velocity(&dets).unwrap();
            dets.extend(detections_for(&[(az, el)], &h));
            let b = solve_ego_velocity(&dets).unwrap();
            prop_assert!((a.velocity - b.velocity).norm() < 1e-10);
            prop_assert!((b.velocity - h).norm() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        // Inlier noise is kept inside 2σ so that every genuine inlier passes the 3σ gate.
        #[test]
        fn ransac_matches_inlier_only_fit(
            seed in any::<u64>(),
            h in arb_vec(2.0),
            n_in in 30usize..60,
            outlier_pct in 0usize..30,
        ) {
            let sigma = 0.02;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, sigma).unwrap();
            let mut clean = detections_for(&random_directions(&mut rng, n_in), &h);
            for d in &mut clean {
                d.range_rate += loop {
                    let n: f64 = noise.sample(&mut rng);
                    if n.abs() < 2.0 * sigma { break n; }
                };
            }
            let n_out = n_in * outlier_pct / 100;
            let mut dets = clean.clone();
            for mut d in detections_for(&random_directions(&mut rng, n_out), &h) {
                let mag: f64 = rng.random_range(0.5..3.0);
                d.range_rate += if rng.random_bool(0.5) { mag } else { -mag };
                dets.push(d);
            }
            let cfg = RansacConfig { inlier_threshold: 3.0 * sigma, seed, ..RansacConfig::default() };
            let m = ransac_ego_velocity(&RadarScan { timestamp: 0.0, detections: dets }, &cfg).unwrap();
            let reference = solve_ego_velocity(&clean).unwrap().velocity;
            prop_assert_eq!(m.n_inliers, n_in);
            prop_assert!((m.velocity - reference).norm() < 1e-6);
        }
    }
}
