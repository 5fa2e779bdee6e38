//! Acceptance suite. Each test prints one `PASS` or `FAIL` line to the real
//! stdout (bypassing the test harness capture) and then asserts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use spatiocal::egovel::{direction_vector, solve_ego_velocity, EgoVelocityMeasurement, RadarDetection};
use spatiocal::geometry::{exp_so3, log_so3, Mat3, RigidTransform, Rotation, Vec3};
use spatiocal::identifiability::{
    build_identifiability_matrix, trajectory_excitation_scan, MotionSample, PRECHECK_RATE_HZ,
};
use spatiocal::io::{self, GroundTruth};
use spatiocal::pipeline::{load_dataset, run_pipeline, PipelineConfig};
use spatiocal::residuals::{
    linearize_camera_rotation, linearize_camera_translation, linearize_prior, linearize_radar, CalibrationState,
    CameraPoseMeasurement, ExtrinsicPrior, Linearization, N_CALIB,
};
use spatiocal::sim::{
    calibration_errors, median, run_noise_sweep, simulate, SimConfig, SweepConfig, SweepResult, SweepRow,
};
use spatiocal::solver::{calibrate, ProblemConfig, SolverError};
use spatiocal::spline::{KnotGrid, RotationSpline, SplinePair, TranslationSpline};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

const MAX_ROT_DEG: f64 = 2.0;
const MAX_SCALE_PCT: f64 = 1.0;
const MAX_TRANS_CM: f64 = 15.0;
const MAX_TAU_MS: f64 = 30.0;
const MIN_FRACTION: f64 = 0.9;

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("\n{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{name}: {detail}");
}

fn sweep() -> &'static SweepResult {
    static SWEEP: OnceLock<SweepResult> = OnceLock::new();
    SWEEP.get_or_init(|| run_noise_sweep(&SweepConfig::default()).expect("sweep"))
}

struct Cell<'a> {
    rows: Vec<&'a SweepRow>,
}

impl<'a> Cell<'a> {
    fn of(result: &'a SweepResult, sigma_r: f64, sigma_c: f64) -> Self {
        Cell { rows: result.rows.iter().filter(|r| r.sigma_r == sigma_r && r.sigma_c == sigma_c).collect() }
    }

    fn median_of(&self, f: impl Fn(&SweepRow) -> f64) -> f64 {
        median(&self.rows.iter().map(|r| f(r).abs()).collect::<Vec<_>>())
    }

    fn rot(&self) -> f64 {
        self.median_of(|r| r.rot_err_deg)
    }
    fn trans(&self) -> f64 {
        self.median_of(|r| r.trans_err_norm_cm)
    }
    fn scale(&self) -> f64 {
        self.median_of(|r| r.alpha_err_pct)
    }
    fn tau(&self) -> f64 {
        self.median_of(|r| r.tau_err_ms)
    }

    /// NaN rows count as misses.
    fn fraction(&self, f: impl Fn(&SweepRow) -> bool) -> f64 {
        self.rows.iter().filter(|r| f(r)).count() as f64 / self.rows.len() as f64
    }
}

#[test]
fn zero_noise_recovery() {
    let cfg = SimConfig { duration: 60.0, sigma_radar: 0.0, sigma_pixel: 0.0, time_offset: -0.02, ..Default::default() };
    let data = simulate(&cfg).unwrap();
    let start = Instant::now();
    let result = calibrate(&data.measurements(), &cfg.problem_config());
    let elapsed = start.elapsed().as_secs_f64();
    let Ok(r) = result else {
        return verdict("zero-noise recovery", false, &format!("{:?}", result.err()));
    };
    let e = calibration_errors(&data.truth, &r.extrinsic_rotation, &r.extrinsic_translation, r.scale, r.time_offset);
    let rot = e.rotation_deg.to_radians();
    let trans = e.translation_cm.norm() / 100.0;
    let scale = (r.scale - data.truth.scale).abs();
    let tau = e.time_offset_ms.abs() / 1e3;
    let pass = r.converged && rot < 1e-4 && trans < 1e-4 && scale < 1e-6 && tau < 1e-5 && elapsed < 30.0;
    verdict(
        "zero-noise recovery",
        pass,
        &format!("rot {rot:.2e} rad, trans {trans:.2e} m, alpha {scale:.2e}, tau {tau:.2e} s, {elapsed:.2} s"),
    );
}

#[test]
fn low_noise_cell() {
    let cell = Cell::of(sweep(), 0.05, 0.1);
    let (rot, scale) = (cell.rot(), cell.scale());
    verdict(
        "low-noise cell (0.05 m/s, 0.1 px)",
        cell.rows.len() == 50 && rot < MAX_ROT_DEG && scale < MAX_SCALE_PCT,
        &format!("{} trials, median rot {rot:.3} deg, median alpha {scale:.3} %", cell.rows.len()),
    );
}

#[test]
fn high_noise_cell() {
    let result = sweep();
    let cell = Cell::of(result, 0.2, 0.4);
    let (rot, scale) = (cell.rot(), cell.scale());
    let trans_ok = cell.fraction(|r| r.trans_err_norm_cm <= MAX_TRANS_CM);
    let tau_ok = cell.fraction(|r| r.tau_err_ms.abs() <= MAX_TAU_MS);
    let pass = cell.rows.len() == 50
        && rot < MAX_ROT_DEG
        && scale < MAX_SCALE_PCT
        && trans_ok >= MIN_FRACTION
        && tau_ok >= MIN_FRACTION
        && result.elapsed_s < 1800.0;
    verdict(
        "high-noise cell (0.2 m/s, 0.4 px)",
        pass,
        &format!(
            "median rot {rot:.3} deg, median alpha {scale:.3} %, trans <= 15 cm {:.0} %, |tau| <= 30 ms {:.0} %, sweep {:.0} s",
            trans_ok * 100.0,
            tau_ok * 100.0,
            result.elapsed_s
        ),
    );
}

#[test]
fn noise_sensitivity_ordering() {
    let result = sweep();
    let low = Cell::of(result, 0.05, 0.1);
    let high = Cell::of(result, 0.2, 0.4);
    let mut detail = Vec::new();
    let mut pass = true;
    for (name, a, b) in [
        ("rot", low.rot(), high.rot()),
        ("trans", low.trans(), high.trans()),
        ("alpha", low.scale(), high.scale()),
        ("tau", low.tau(), high.tau()),
    ] {
        pass &= a <= b;
        detail.push(format!("{name} {a:.3}->{b:.3}"));
    }
    for sc in [0.1, 0.4] {
        let (a, b) = (Cell::of(result, 0.05, sc), Cell::of(result, 0.2, sc));
        pass &= a.trans() < b.trans() && a.tau() < b.tau();
        detail.push(format!(
            "σc {sc}: trans {:.3}->{:.3} cm, tau {:.3}->{:.3} ms",
            a.trans(),
            b.trans(),
            a.tau(),
            b.tau()
        ));
    }
    verdict("noise-sensitivity ordering", pass, &detail.join(", "));
}

#[test]
fn ego_velocity_nees() {
    let chi = ChiSquared::new(3.0).unwrap();
    let (lo, hi) = (chi.inverse_cdf(0.05), chi.inverse_cdf(0.95));
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let trials = 500;
    let mut sum = 0.0;
    for _ in 0..trials {
        let h = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5));
        let dets: Vec<RadarDetection> = (0..40)
            .map(|_| {
                let mut d = RadarDetection::new(
                    rng.random_range(1.0..30.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.35..0.35),
                    0.0,
                );
                d.range_rate = direction_vector(&d).dot(&h) + noise.sample(&mut rng);
                d
            })
            .collect();
        let sol = solve_ego_velocity(&dets).unwrap();
        let e = sol.velocity - h;
        sum += e.dot(&(sol.covariance.try_inverse().unwrap() * e));
    }
    let mean = sum / trials as f64;
    verdict(
        "ego-velocity NEES",
        (lo..=hi).contains(&mean),
        &format!("mean {mean:.3} over {trials} trials, band [{lo:.3}, {hi:.3}]"),
    );
}

fn scan_rank(cfg: &SimConfig) -> (usize, f64) {
    let data = simulate(cfg).unwrap();
    let r = trajectory_excitation_scan(&data.truth, PRECHECK_RATE_HZ, (0.0, cfg.duration)).unwrap();
    (r.rank, r.min_singular_value)
}

fn degenerate(cfg: SimConfig) -> SimConfig {
    SimConfig { allow_degenerate: true, sigma_radar: 0.0, sigma_pixel: 0.0, ..cfg }
}

fn random_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn sample_rank(rng: &mut ChaCha8Rng, make: &mut dyn FnMut(&mut ChaCha8Rng) -> (Vec3, Vec3, Vec3)) -> usize {
    let r = exp_so3(&random_vec(rng, 3.0));
    let c = random_vec(rng, 0.3);
    let a = rng.random_range(0.5..2.0);
    let samples: Vec<MotionSample> = (0..30)
        .map(|i| {
            let (velocity, velocity_dot, omega) = make(rng);
            MotionSample {
                t: i as f64 * 0.1,
                velocity,
                velocity_dot,
                omega,
                extrinsic_rotation: r,
                extrinsic_translation: c,
                scale: a,
            }
        })
        .collect();
    build_identifiability_matrix(&samples).unwrap().rank
}

#[test]
fn identifiability_suite() {
    let base = SimConfig { duration: 20.0, ..Default::default() };
    let mut detail = Vec::new();
    let mut pass = true;

    let (rank, smin) = scan_rank(&base);
    pass &= rank == 8;
    detail.push(format!("excited rank {rank} (min sv {smin:.2e})"));

    let mut stationary = degenerate(base.clone());
    stationary.trajectory.translation_amplitude = [0.0; 3];
    stationary.trajectory.rotation_amplitude = [0.0; 3];
    let mut constant_velocity = stationary.clone();
    constant_velocity.trajectory.velocity = [0.05, 0.02, 0.0];
    constant_velocity.trajectory.center = [-0.5, -0.2, -2.0];
    let mut single_axis = degenerate(base.clone());
    single_axis.trajectory.rotation_amplitude = [0.0, 0.0, 0.4];
    for (name, cfg) in [("stationary", stationary), ("constant velocity", constant_velocity), ("single rotation axis", single_axis)]
    {
        let (rank, _) = scan_rank(&cfg);
        pass &= rank < 8;
        detail.push(format!("{name} rank {rank}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut worst_parallel, mut worst_const) = (0, 8);
    for _ in 0..64 {
        let d = random_vec(&mut rng, 1.0).normalize();
        worst_parallel = worst_parallel.max(sample_rank(&mut rng, &mut |g| {
            (d * g.random_range(-2.0..2.0), d * g.random_range(-2.0..2.0), random_vec(g, 1.0))
        }));
        let vd = random_vec(&mut rng, 1.0) + Vec3::new(0.5, 0.0, 0.0);
        worst_const = worst_const.min(sample_rank(&mut rng, &mut |g| (random_vec(g, 2.0), vd, random_vec(g, 1.0))));
    }
    pass &= worst_parallel < 8 && worst_const == 8;
    detail.push(format!("single translation direction max rank {worst_parallel}"));
    detail.push(format!("constant acceleration min rank {worst_const}"));
    verdict("identifiability suite", pass, &detail.join(", "));
}

fn random_state(rng: &mut ChaCha8Rng) -> CalibrationState {
    let n = 10;
    let grid = KnotGrid::new(0.0, 0.25, n, 4).unwrap();
    let mut r = exp_so3(&random_vec(rng, 3.0));
    let rotations = (0..n)
        .map(|_| {
            r = r * exp_so3(&random_vec(rng, 0.5));
            r
        })
        .collect();
    CalibrationState {
        trajectory: SplinePair {
            translation: TranslationSpline::new(grid, (0..n).map(|_| random_vec(rng, 1.0)).collect()).unwrap(),
            rotation: RotationSpline::new(grid, rotations).unwrap(),
        },
        extrinsic_rotation: exp_so3(&random_vec(rng, 3.0)),
        extrinsic_translation: random_vec(rng, 0.3),
        scale: rng.random_range(0.5..2.0),
        time_offset: rng.random_range(-0.05..0.05),
    }
}

/// Every scalar coordinate of the state the residual can depend on.
#[derive(Clone, Copy)]
enum Coord {
    Translation(usize, usize),
    Rotation(usize, usize),
    Calib(usize),
}

fn nudge(state: &CalibrationState, c: Coord, h: f64) -> CalibrationState {
    let mut s = state.clone();
    let axis = |i: usize| Vec3::ith(i, h);
    match c {
        Coord::Translation(m, i) => s.trajectory.translation.control_points[m] += axis(i),
        Coord::Rotation(m, i) => {
            let cp = &mut s.trajectory.rotation.control_points[m];
            *cp = exp_so3(&axis(i)) * *cp;
        }
        Coord::Calib(i @ 0..=2) => s.extrinsic_rotation = exp_so3(&axis(i)) * s.extrinsic_rotation,
        Coord::Calib(i @ 3..=5) => s.extrinsic_translation[i - 3] += h,
        Coord::Calib(6) => s.scale += h,
        Coord::Calib(_) => s.time_offset += h,
    }
    s
}

fn worst_jacobian_error<const D: usize>(
    state: &CalibrationState,
    f: &dyn Fn(&CalibrationState, bool) -> Linearization<D>,
) -> f64 {
    let h = 1e-6;
    let lin = f(state, true);
    let mut coords = Vec::new();
    for (j, m) in (lin.first_control..).take(lin.d_translation.len()).enumerate() {
        for i in 0..3 {
            coords.push((Coord::Translation(m, i), lin.d_translation[j].column(i).into_owned()));
            coords.push((Coord::Rotation(m, i), lin.d_rotation[j].column(i).into_owned()));
        }
    }
    for i in 0..N_CALIB {
        coords.push((Coord::Calib(i), lin.d_calib.column(i).into_owned()));
    }
    coords
        .into_iter()
        .map(|(c, analytic)| {
            let fd = (f(&nudge(state, c, h), false).residual - f(&nudge(state, c, -h), false).residual) / (2.0 * h);
            (fd - analytic).norm() / analytic.norm().max(1.0)
        })
        .fold(0.0, f64::max)
}

fn spline_derivative_error(state: &CalibrationState, t: f64) -> f64 {
    let tr = &state.trajectory.translation;
    let rot = &state.trajectory.rotation;
    let p = |t: f64| tr.eval(t).unwrap().position;
    let e = 1e-3;
    let vel_fd = (p(t - 2.0 * e) - p(t + 2.0 * e) + (p(t + e) - p(t - e)) * 8.0) / (12.0 * e);
    let acc_fd = (-p(t - 2.0 * e) - p(t + 2.0 * e) + (p(t + e) + p(t - e)) * 16.0 - p(t) * 30.0) / (12.0 * e * e);
    let r = |t: f64| rot.eval(t).unwrap().0;
    let eps = 1e-5;
    let omega_fd = log_so3(&(r(t - eps).transpose() * r(t + eps))) / (2.0 * eps);
    let ev = tr.eval(t).unwrap();
    let (_, omega) = rot.eval(t).unwrap();
    let rel = |a: Vec3, b: Vec3| (a - b).norm() / b.norm().max(1.0);
    rel(vel_fd, ev.velocity).max(rel(acc_fd, ev.acceleration)).max(rel(omega_fd, omega))
}

#[test]
fn jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = [0.0f64; 5];
    for _ in 0..100 {
        let state = random_state(&mut rng);
        let t = rng.random_range(0.2..1.3);
        let radar = EgoVelocityMeasurement {
            timestamp: t,
            velocity: random_vec(&mut rng, 1.0),
            covariance: Mat3::identity(),
            n_inliers: 10,
            n_outliers: 0,
        };
        let cam = CameraPoseMeasurement {
            timestamp: t,
            rotation: exp_so3(&random_vec(&mut rng, 3.0)),
            translation: random_vec(&mut rng, 1.0),
            rotation_covariance: Mat3::identity(),
            translation_covariance: Mat3::identity(),
        };
        let prior = ExtrinsicPrior::new(RigidTransform::new(
            exp_so3(&random_vec(&mut rng, 0.5)) * state.extrinsic_rotation,
            state.extrinsic_translation + random_vec(&mut rng, 0.2),
        ));
        worst[0] = worst[0].max(worst_jacobian_error(&state, &|s, j| linearize_radar(s, &radar, j).unwrap()));
        worst[1] = worst[1].max(worst_jacobian_error(&state, &|s, j| linearize_camera_rotation(s, &cam, j).unwrap()));
        worst[2] =
            worst[2].max(worst_jacobian_error(&state, &|s, j| linearize_camera_translation(s, &cam, j).unwrap()));
        worst[3] = worst[3].max(worst_jacobian_error(&state, &|s, j| linearize_prior(s, &prior, j)));
        // stencils stay inside one segment, where the spline is smooth
        let ts = 0.25 * rng.random_range(0..6) as f64 + rng.random_range(0.01..0.24);
        worst[4] = worst[4].max(spline_derivative_error(&state, ts));
    }
    verdict(
        "jacobians vs finite differences",
        worst.iter().all(|&w| w < 1e-5),
        &format!(
            "radar {:.1e}, camera rotation {:.1e}, camera translation {:.1e}, prior {:.1e}, spline derivatives {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    );
}

fn offset_prior(truth: &CalibrationState) -> ExtrinsicPrior {
    ExtrinsicPrior {
        transform: RigidTransform::new(
            exp_so3(&Vec3::new(0.03, -0.05, 0.04)) * truth.extrinsic_rotation,
            truth.extrinsic_translation + Vec3::new(0.04, -0.03, 0.05),
        ),
        sigma_translation: 0.1,
        sigma_rotation: 30f64.to_radians(),
    }
}

fn planar(sigma_radar: f64, sigma_pixel: f64) -> SimConfig {
    let mut cfg = SimConfig { duration: 30.0, allow_degenerate: true, sigma_radar, sigma_pixel, ..Default::default() };
    cfg.trajectory.translation_amplitude = [0.5, 0.5, 0.0];
    cfg.trajectory.rotation_amplitude = [0.0, 0.0, 0.4];
    cfg
}

fn with_prior(cfg: &SimConfig) -> Result<spatiocal::solver::CalibrationReport, SolverError> {
    let data = simulate(cfg).unwrap();
    let mut meas = data.measurements();
    meas.prior = Some(offset_prior(&data.truth));
    calibrate(&meas, &ProblemConfig { use_prior: true, ..cfg.problem_config() })
}

fn describe(r: &Result<spatiocal::solver::CalibrationReport, SolverError>) -> String {
    match r {
        Ok(r) => format!("converged={} in {} iterations", r.converged, r.iterations),
        Err(e) => e.to_string(),
    }
}

#[test]
fn prior_behavior() {
    let exact = planar(0.0, 0.0);
    let data = simulate(&exact).unwrap();
    let without = match calibrate(&data.measurements(), &exact.problem_config()) {
        Err(SolverError::SingularHessian(_)) => (true, "SingularHessian".to_string()),
        Ok(r) if r.singular.is_some() => (true, "singular information".to_string()),
        other => {
            let state = match &other {
                Ok(r) => r.state.clone(),
                Err(e) => e.best_report().map(|r| r.state.clone()).unwrap_or_else(|| data.truth.clone()),
            };
            let scan = trajectory_excitation_scan(&state, PRECHECK_RATE_HZ, (0.0, exact.duration)).unwrap();
            (scan.min_singular_value < 1e-3, format!("min singular value {:.2e}", scan.min_singular_value))
        }
    };
    let converges = |r: &Result<_, _>| matches!(r, Ok(spatiocal::solver::CalibrationReport { converged: true, singular: None, .. }));
    let exact_prior = with_prior(&exact);
    let noisy_prior = with_prior(&planar(0.05, 0.1));
    let fraction = with_prior(&SimConfig { duration: 30.0, ..Default::default() })
        .map(|r| r.prior_cost_fraction)
        .unwrap_or(f64::NAN);
    verdict(
        "prior behavior",
        without.0 && converges(&exact_prior) && converges(&noisy_prior) && fraction < 0.01,
        &format!(
            "planar without prior: {}, with prior: {} (noisy: {}), prior fraction on excited data {:.2e}",
            without.1,
            describe(&exact_prior),
            describe(&noisy_prior),
            fraction
        ),
    );
}

const HANDHELD: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/handheld");

#[test]
fn handheld_fixture() {
    let dir = Path::new(HANDHELD);
    let truth: GroundTruth = io::read_json(&dir.join(io::GROUND_TRUTH_FILE)).unwrap();
    let dataset = load_dataset(&dir.join(io::METADATA_FILE)).unwrap();
    let out = run_pipeline(&dataset, None, &PipelineConfig::default(), &ProblemConfig::default());
    let Ok(out) = out else {
        return verdict("handheld fixture", false, &format!("{:?}", out.err()));
    };
    let r = &out.calibration;
    let t = &truth;
    let [w, x, y, z] = t.extrinsic_rotation_wxyz;
    let truth_rotation = Rotation::from_quaternion_wxyz(w, x, y, z);
    let rot = (r.extrinsic_rotation * truth_rotation.transpose()).angle().to_degrees();
    let trans = (r.extrinsic_translation - Vec3::from(t.extrinsic_translation)).norm() * 100.0;
    let scale = (r.scale - t.scale).abs() / t.scale * 100.0;
    let tau = (r.time_offset - t.time_offset).abs() * 1e3;
    verdict(
        "handheld fixture",
        r.converged && rot < MAX_ROT_DEG && scale < MAX_SCALE_PCT && trans <= MAX_TRANS_CM && tau <= MAX_TAU_MS,
        &format!(
            "rot {rot:.3} deg, trans {trans:.2} cm, alpha {scale:.3} %, tau {tau:.2} ms (estimate {:.1} ms)",
            r.time_offset * 1e3
        ),
    );
}

/// The fixture is exactly what the simulator writes for its recorded config.
#[test]
fn handheld_fixture_regenerates() {
    let dir = Path::new(HANDHELD);
    let truth: GroundTruth = io::read_json(&dir.join(io::GROUND_TRUTH_FILE)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    io::write_sim_dataset(tmp.path(), &simulate(&truth.config).unwrap()).unwrap();
    let files = [io::RADAR_FILE, io::CAMERA_FILE, io::CAMERA_COVARIANCE_FILE, io::METADATA_FILE, io::GROUND_TRUTH_FILE];
    let differing: Vec<&str> = files
        .into_iter()
        .filter(|f| std::fs::read(dir.join(f)).unwrap() != std::fs::read(tmp.path().join(f)).unwrap())
        .collect();
    let detail = if differing.is_empty() {
        format!("{} files byte-identical", files.len())
    } else {
        format!("differs from a fresh simulation: {}", differing.join(", "))
    };
    verdict("handheld fixture regenerates", differing.is_empty(), &detail);
}
