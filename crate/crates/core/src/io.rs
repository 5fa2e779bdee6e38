//! Dataset files: radar CSV (raw scans or ego-velocities), camera pose CSV,
//! the camera covariance sidecar and the metadata JSON tying them together.
//!
//! All files are SI with angles in radians. Camera rows hold `R_cw` as a unit
//! quaternion `(qw, qx, qy, qz)` and `r_c^{wc}` in the camera's own scale.

use crate::egovel::{EgoVelocityMeasurement, RadarDetection, RadarScan};
use crate::geometry::{Mat3, RigidTransform, Rotation, Vec3};
use crate::residuals::{CalibrationState, CameraPoseMeasurement, ExtrinsicPrior};
use crate::sim::{SimConfig, SimDataset};
use crate::spline::{SplineError, SplinePair, TrajectoryDump};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const RADAR_SCAN_COLUMNS: [&str; 5] = ["t", "range", "azimuth", "elevation", "doppler"];
pub const EGO_VELOCITY_COLUMNS: [&str; 4] = ["t", "vx", "vy", "vz"];
pub const EGO_COVARIANCE_COLUMNS: [&str; 6] = ["cxx", "cxy", "cxz", "cyy", "cyz", "czz"];
pub const CAMERA_COLUMNS: [&str; 8] = ["t", "qw", "qx", "qy", "qz", "tx", "ty", "tz"];

/// Location of a malformed value; `line` and `column` are 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub path: PathBuf,
    pub line: u64,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: line {}, column {}: {}", self.path.display(), self.line, self.column, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("unit mismatch: {0}")]
    UnitMismatch(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_path_buf(), source }
}

struct Table {
    path: PathBuf,
    columns: HashMap<String, usize>,
    n_columns: usize,
    reader: csv::Reader<File>,
}

struct Row {
    record: csv::StringRecord,
    line: u64,
}

impl Table {
    fn open(path: &Path, required: &[&str]) -> Result<Self, IoError> {
        let file = File::open(path).map_err(file_err(path))?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .flexible(true)
            .from_reader(file);
        let headers = reader.headers().map_err(csv_err(path))?.clone();
        let columns: HashMap<String, usize> = headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        for name in required {
            if !columns.contains_key(*name) {
                return Err(ParseError {
                    path: path.to_path_buf(),
                    line: 1,
                    column: headers.len() + 1,
                    message: format!("missing required column `{name}`"),
                }
                .into());
            }
        }
        Ok(Table { path: path.to_path_buf(), columns, n_columns: headers.len(), reader })
    }

    fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    fn rows(&mut self) -> Result<Vec<Row>, IoError> {
        let mut out = Vec::new();
        for rec in self.reader.records() {
            let record = rec.map_err(csv_err(&self.path))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != self.n_columns {
                return Err(ParseError {
                    path: self.path.clone(),
                    line,
                    column: record.len().min(self.n_columns) + 1,
                    message: format!("expected {} fields, found {}", self.n_columns, record.len()),
                }
                .into());
            }
            out.push(Row { record, line });
        }
        Ok(out)
    }

    fn float(&self, row: &Row, name: &str) -> Result<f64, ParseError> {
        let col = self.columns[name];
        let field = &row.record[col];
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(ParseError {
                path: self.path.clone(),
                line: row.line,
                column: col + 1,
                message: format!("`{field}` is not a finite number for column `{name}`"),
            }),
        }
    }

    fn error(&self, row: &Row, column: &str, message: String) -> ParseError {
        ParseError { path: self.path.clone(), line: row.line, column: self.columns[column] + 1, message }
    }
}

/// Raw detections grouped into scans by identical timestamps.
pub fn read_radar_scans(path: &Path) -> Result<Vec<RadarScan>, IoError> {
    let mut table = Table::open(path, &RADAR_SCAN_COLUMNS)?;
    let has_intensity = table.has("intensity");
    let mut scans: Vec<RadarScan> = Vec::new();
    for row in table.rows()? {
        let t = table.float(&row, "t")?;
        let mut d = RadarDetection::new(
            table.float(&row, "range")?,
            table.float(&row, "azimuth")?,
            table.float(&row, "elevation")?,
            table.float(&row, "doppler")?,
        );
        if has_intensity {
            d.intensity = Some(table.float(&row, "intensity")?);
        }
        d.validate().map_err(|e| table.error(&row, "range", e.to_string()))?;
        match scans.last_mut() {
            Some(s) if s.timestamp == t => s.detections.push(d),
            Some(s) if s.timestamp > t => {
                return Err(table.error(&row, "t", format!("timestamps not sorted ({t} after {})", s.timestamp)).into())
            }
            _ => scans.push(RadarScan { timestamp: t, detections: vec![d] }),
        }
    }
    Ok(scans)
}

pub fn write_radar_scans(path: &Path, scans: &[RadarScan]) -> Result<(), IoError> {
    let with_intensity = scans.iter().flat_map(|s| &s.detections).any(|d| d.intensity.is_some());
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<&str> = RADAR_SCAN_COLUMNS.to_vec();
    if with_intensity {
        header.push("intensity");
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for s in scans {
        for d in &s.detections {
            let mut rec = vec![s.timestamp, d.range, d.azimuth, d.elevation, d.range_rate];
            if with_intensity {
                rec.push(d.intensity.unwrap_or(0.0));
            }
            w.write_record(rec.iter().map(|v| v.to_string())).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(file_err(path))
}

/// Ego-velocities; rows without covariance columns get `default_covariance`.
pub fn read_ego_velocities(path: &Path, default_covariance: Mat3) -> Result<Vec<EgoVelocityMeasurement>, IoError> {
    let mut table = Table::open(path, &EGO_VELOCITY_COLUMNS)?;
    let with_cov = EGO_COVARIANCE_COLUMNS.iter().all(|c| table.has(c));
    let mut out: Vec<EgoVelocityMeasurement> = Vec::new();
    for row in table.rows()? {
        let t = table.float(&row, "t")?;
        if let Some(prev) = out.last() {
            if prev.timestamp >= t {
                return Err(table.error(&row, "t", format!("timestamps not strictly increasing ({t})")).into());
            }
        }
        let v = Vec3::new(table.float(&row, "vx")?, table.float(&row, "vy")?, table.float(&row, "vz")?);
        let covariance = if with_cov {
            let c: Vec<f64> =
                EGO_COVARIANCE_COLUMNS.iter().map(|n| table.float(&row, n)).collect::<Result<_, _>>()?;
            Mat3::new(c[0], c[1], c[2], c[1], c[3], c[4], c[2], c[4], c[5])
        } else {
            default_covariance
        };
        if covariance.cholesky().is_none() {
            return Err(table.error(&row, "t", "covariance is not positive definite".into()).into());
        }
        out.push(EgoVelocityMeasurement { timestamp: t, velocity: v, covariance, n_inliers: 0, n_outliers: 0 });
    }
    Ok(out)
}

pub fn write_ego_velocities(path: &Path, radar: &[EgoVelocityMeasurement]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let header: Vec<&str> = EGO_VELOCITY_COLUMNS.iter().chain(&EGO_COVARIANCE_COLUMNS).copied().collect();
    w.write_record(&header).map_err(csv_err(path))?;
    for m in radar {
        let c = &m.covariance;
        let rec = [
            m.timestamp,
            m.velocity.x,
            m.velocity.y,
            m.velocity.z,
            c[(0, 0)],
            c[(0, 1)],
            c[(0, 2)],
            c[(1, 1)],
            c[(1, 2)],
            c[(2, 2)],
        ];
        w.write_record(rec.iter().map(|v| v.to_string())).map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

/// Per-row camera covariances keyed by timestamp, with a file-wide default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CameraCovarianceSidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<PoseCovariance>,
    #[serde(default)]
    pub rows: Vec<TimedPoseCovariance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseCovariance {
    pub rotation: [[f64; 3]; 3],
    pub translation: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedPoseCovariance {
    pub t: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [[f64; 3]; 3],
}

fn to_mat(m: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|i, j| m[i][j])
}

fn from_mat(m: &Mat3) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

impl PoseCovariance {
    pub fn isotropic(sigma_rotation: f64, sigma_translation: f64) -> Self {
        PoseCovariance {
            rotation: from_mat(&(Mat3::identity() * sigma_rotation.powi(2))),
            translation: from_mat(&(Mat3::identity() * sigma_translation.powi(2))),
        }
    }
}

pub fn read_camera_poses(
    path: &Path,
    sidecar: Option<&CameraCovarianceSidecar>,
    default: PoseCovariance,
) -> Result<Vec<CameraPoseMeasurement>, IoError> {
    let mut table = Table::open(path, &CAMERA_COLUMNS)?;
    let fallback = sidecar.and_then(|s| s.default).unwrap_or(default);
    let per_row: HashMap<u64, &TimedPoseCovariance> =
        sidecar.map(|s| s.rows.iter().map(|r| (r.t.to_bits(), r)).collect()).unwrap_or_default();
    let mut out: Vec<CameraPoseMeasurement> = Vec::new();
    for row in table.rows()? {
        let t = table.float(&row, "t")?;
        if let Some(prev) = out.last() {
            if prev.timestamp >= t {
                return Err(table.error(&row, "t", format!("timestamps not strictly increasing ({t})")).into());
            }
        }
        let q: Vec<f64> = ["qw", "qx", "qy", "qz"].iter().map(|n| table.float(&row, n)).collect::<Result<_, _>>()?;
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(table.error(&row, "qw", format!("quaternion norm {norm:.6} is not 1")).into());
        }
        let (rot, trans) = match per_row.get(&t.to_bits()) {
            Some(c) => (to_mat(&c.rotation), to_mat(&c.translation)),
            None => (to_mat(&fallback.rotation), to_mat(&fallback.translation)),
        };
        out.push(CameraPoseMeasurement {
            timestamp: t,
            rotation: Rotation::from_quaternion_wxyz(q[0], q[1], q[2], q[3]),
            translation: Vec3::new(table.float(&row, "tx")?, table.float(&row, "ty")?, table.float(&row, "tz")?),
            rotation_covariance: rot,
            translation_covariance: trans,
        });
    }
    Ok(out)
}

pub fn write_camera_poses(path: &Path, camera: &[CameraPoseMeasurement]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(CAMERA_COLUMNS).map_err(csv_err(path))?;
    for m in camera {
        let q = m.rotation.to_quaternion_wxyz();
        let rec = [m.timestamp, q[0], q[1], q[2], q[3], m.translation.x, m.translation.y, m.translation.z];
        w.write_record(rec.iter().map(|v| v.to_string())).map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn camera_sidecar(camera: &[CameraPoseMeasurement]) -> CameraCovarianceSidecar {
    CameraCovarianceSidecar {
        default: None,
        rows: camera
            .iter()
            .map(|m| TimedPoseCovariance {
                t: m.timestamp,
                rotation: from_mat(&m.rotation_covariance),
                translation: from_mat(&m.translation_covariance),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub time: String,
    pub length: String,
    pub angle: String,
    pub velocity: String,
}

impl Default for Units {
    fn default() -> Self {
        Units { time: "s".into(), length: "m".into(), angle: "rad".into(), velocity: "m/s".into() }
    }
}

impl Units {
    pub fn check(&self) -> Result<(), IoError> {
        let expected = Units::default();
        for (name, got, want) in [
            ("time", &self.time, &expected.time),
            ("length", &self.length, &expected.length),
            ("angle", &self.angle, &expected.angle),
            ("velocity", &self.velocity, &expected.velocity),
        ] {
            if got != want {
                return Err(IoError::UnitMismatch(format!("{name} unit is `{got}`, expected `{want}`")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadarFormat {
    Scans,
    EgoVelocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conventions {
    pub camera_rotation: String,
    pub camera_translation: String,
    pub quaternion: String,
    pub doppler: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            camera_rotation: "R_cw".into(),
            camera_translation: "r_c^{wc}".into(),
            quaternion: "wxyz".into(),
            doppler: "range_rate = dot(direction, radar_velocity)".into(),
        }
    }
}

/// Isotropic standard deviations used when files carry no covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovarianceDefaults {
    pub radar_sigma: f64,
    pub camera_rotation_sigma: f64,
    pub camera_translation_sigma: f64,
}

impl Default for CovarianceDefaults {
    fn default() -> Self {
        CovarianceDefaults { radar_sigma: 0.1, camera_rotation_sigma: 0.01, camera_translation_sigma: 0.01 }
    }
}

/// `dataset.json`; file paths are relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub units: Option<Units>,
    #[serde(default)]
    pub conventions: Conventions,
    #[serde(default)]
    pub source: String,
    pub radar: PathBuf,
    pub radar_format: RadarFormat,
    pub camera: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_covariance: Option<PathBuf>,
    #[serde(default)]
    pub covariance_defaults: CovarianceDefaults,
}

/// Extrinsic prior file; exactly one of the rotation fields is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorFile {
    /// `r_c^{rc}` (m).
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_wxyz: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_rpy: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_translation: Option<f64>,
    /// Radians.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_rotation: Option<f64>,
}

impl PriorFile {
    pub fn to_prior(&self, path: &Path) -> Result<ExtrinsicPrior, IoError> {
        let invalid = |m: &str| {
            IoError::Parse(ParseError { path: path.to_path_buf(), line: 0, column: 0, message: m.to_string() })
        };
        let rotation = match (self.rotation_wxyz, self.rotation_rpy) {
            (Some(q), None) => Rotation::from_quaternion_wxyz(q[0], q[1], q[2], q[3]),
            (None, Some([r, p, y])) => Rotation::from_roll_pitch_yaw(r, p, y),
            _ => return Err(invalid("exactly one of rotation_wxyz and rotation_rpy is required")),
        };
        let mut prior = ExtrinsicPrior::new(RigidTransform::new(rotation, Vec3::from(self.translation)));
        if let Some(s) = self.sigma_translation {
            prior.sigma_translation = s;
        }
        if let Some(s) = self.sigma_rotation {
            prior.sigma_rotation = s;
        }
        if !(prior.sigma_translation > 0.0 && prior.sigma_rotation > 0.0) {
            return Err(invalid("prior standard deviations must be positive"));
        }
        Ok(prior)
    }
}

pub fn read_prior(path: &Path) -> Result<ExtrinsicPrior, IoError> {
    read_json::<PriorFile>(path)?.to_prior(path)
}

/// Calibration values as written to `ground_truth.json` and compared by tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub extrinsic_rotation_wxyz: [f64; 4],
    pub extrinsic_rotation_rpy: [f64; 3],
    pub extrinsic_translation: [f64; 3],
    pub scale: f64,
    pub time_offset: f64,
    pub config: SimConfig,
}

impl GroundTruth {
    pub fn from_dataset(d: &SimDataset) -> Self {
        let t = &d.truth;
        GroundTruth {
            extrinsic_rotation_wxyz: t.extrinsic_rotation.to_quaternion_wxyz(),
            extrinsic_rotation_rpy: t.extrinsic_rotation.to_roll_pitch_yaw(),
            extrinsic_translation: t.extrinsic_translation.into(),
            scale: t.scale,
            time_offset: t.time_offset,
            config: d.config.clone(),
        }
    }

    pub fn rotation(&self) -> Rotation {
        let q = self.extrinsic_rotation_wxyz;
        Rotation::from_quaternion_wxyz(q[0], q[1], q[2], q[3])
    }
}

/// Fitted radar trajectory with the calibration it belongs to, as written by
/// `calibrate --dump-trajectory`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedTrajectory {
    pub trajectory: TrajectoryDump,
    /// Camera time span `[first, last]` supported by measurements.
    pub span: [f64; 2],
    pub extrinsic_rotation_wxyz: [f64; 4],
    pub extrinsic_translation: [f64; 3],
    pub scale: f64,
    pub time_offset: f64,
}

impl FittedTrajectory {
    pub fn from_state(state: &CalibrationState, span: [f64; 2]) -> Self {
        FittedTrajectory {
            trajectory: state.trajectory.to_dump(),
            span,
            extrinsic_rotation_wxyz: state.extrinsic_rotation.to_quaternion_wxyz(),
            extrinsic_translation: state.extrinsic_translation.into(),
            scale: state.scale,
            time_offset: state.time_offset,
        }
    }

    pub fn to_state(&self) -> Result<CalibrationState, SplineError> {
        let q = self.extrinsic_rotation_wxyz;
        Ok(CalibrationState {
            trajectory: SplinePair::from_dump(&self.trajectory)?,
            extrinsic_rotation: Rotation::from_quaternion_wxyz(q[0], q[1], q[2], q[3]),
            extrinsic_translation: self.extrinsic_translation.into(),
            scale: self.scale,
            time_offset: self.time_offset,
        })
    }
}

pub const TRAJECTORY_FILE: &str = "trajectory.json";
pub const RADAR_FILE: &str = "radar.csv";
pub const CAMERA_FILE: &str = "camera.csv";
pub const CAMERA_COVARIANCE_FILE: &str = "camera_covariance.json";
pub const METADATA_FILE: &str = "dataset.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Writes a simulated dataset into `dir`; returns the written paths with
/// `dataset.json` first.
pub fn write_sim_dataset(dir: &Path, d: &SimDataset) -> Result<Vec<PathBuf>, IoError> {
    std::fs::create_dir_all(dir).map_err(file_err(dir))?;
    let radar = dir.join(RADAR_FILE);
    let radar_format = match &d.scans {
        Some(scans) => {
            write_radar_scans(&radar, scans)?;
            RadarFormat::Scans
        }
        None => {
            write_ego_velocities(&radar, &d.radar)?;
            RadarFormat::EgoVelocity
        }
    };
    let camera = dir.join(CAMERA_FILE);
    write_camera_poses(&camera, &d.camera)?;
    let sidecar = dir.join(CAMERA_COVARIANCE_FILE);
    write_json(&sidecar, &camera_sidecar(&d.camera))?;
    let truth = dir.join(GROUND_TRUTH_FILE);
    write_json(&truth, &GroundTruth::from_dataset(d))?;
    let meta = dir.join(METADATA_FILE);
    let sigma = d.config.sigma_radar.max(crate::sim::RADAR_SIGMA_FLOOR);
    write_json(
        &meta,
        &Metadata {
            units: Some(Units::default()),
            conventions: Conventions::default(),
            source: format!("spatiocal simulate (seed {})", d.config.seed),
            radar: RADAR_FILE.into(),
            radar_format,
            camera: CAMERA_FILE.into(),
            camera_covariance: Some(CAMERA_COVARIANCE_FILE.into()),
            covariance_defaults: CovarianceDefaults { radar_sigma: sigma, ..Default::default() },
        },
    )?;
    Ok(vec![meta, radar, camera, sidecar, truth])
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut file = File::create(path).map_err(file_err(path))?;
    serde_json::to_writer_pretty(&mut file, value).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    writeln!(file).map_err(file_err(path))
}
