//! On-disk dataset layout.
//!
//! A dataset directory contains:
//!
//! * `calib.json` — camera intrinsics (including the canonical focal
//!   length), camera-to-body extrinsics, and the frame-convention tag;
//! * `imu.csv` — `time,fx,fy,fz,wx,wy,wz` (specific force m/s^2, angular
//!   rate rad/s);
//! * `odo.csv` — `time,speed` (m/s);
//! * `gt.csv` — `time,x,y,z,roll,pitch,yaw`, angles in degrees;
//! * `frames/<epoch>.depth|.conf|.mask` — row-major rasters (depth `f64`
//!   little-endian, confidence `f32` little-endian, mask bytes) at the
//!   calibrated resolution, plus `frames/index.csv` (`epoch,time`).
//!
//! Floats in CSVs are written with Rust's shortest round-trip formatting,
//! so reading a file back reproduces the exact values.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;
use vmrnav_core::cloudgen::{CameraIntrinsics, DepthFrame, Extrinsics};
use vmrnav_core::fusion::{ImuSample, OdoSample};
use nalgebra::{Matrix3, Rotation3, Vector3};

pub const CALIB_FILE: &str = "calib.json";
pub const IMU_FILE: &str = "imu.csv";
pub const ODO_FILE: &str = "odo.csv";
pub const GT_FILE: &str = "gt.csv";
pub const FRAMES_DIR: &str = "frames";
pub const FRAME_INDEX_FILE: &str = "index.csv";

/// Dataset I/O errors.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: missing column '{column}'")]
    MissingColumn { path: String, column: String },
    #[error("{path} row {row}: {message}")]
    BadRow {
        path: String,
        row: usize,
        message: String,
    },
    #[error("raster {path}: expected {expected} values, found {found}")]
    RasterSize {
        path: String,
        expected: usize,
        found: usize,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> DatasetError {
    DatasetError::Csv {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Camera-to-body extrinsics as stored on disk (`p_body = R * p_cam + t`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibExtrinsics {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

/// Camera calibration file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calib {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Canonical focal length the depth predictor is calibrated to; stored
    /// depths are canonical and metric recovery scales them by
    /// `fx / f_canonical`.
    pub f_canonical: f64,
    pub extrinsics: CalibExtrinsics,
    /// Axis-convention tag, e.g. "body: x forward, y left, z up".
    pub convention: String,
}

impl Calib {
    /// The harness's standard camera: forward-looking, mounted 1.5 m above
    /// the body origin, with a canonical focal length that differs from fx
    /// so the canonical-depth rescale is exercised end to end.
    pub fn standard() -> Self {
        Self {
            width: 128,
            height: 96,
            fx: 96.0,
            fy: 96.0,
            cx: 64.0,
            cy: 48.0,
            f_canonical: 80.0,
            extrinsics: CalibExtrinsics {
                rotation: [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
                translation: [0.0, 0.0, 1.5],
            },
            convention: "body: x forward, y left, z up; camera: x right, y down, z optical axis"
                .into(),
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics<f64> {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            f_canonical: self.f_canonical,
        }
    }

    pub fn core_extrinsics(&self) -> Extrinsics<f64> {
        let r = &self.rotation_matrix();
        Extrinsics {
            rotation: Rotation3::from_matrix_unchecked(*r),
            translation: Vector3::from(self.extrinsics.translation),
        }
    }

    fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = self.extrinsics.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let path = dir.join(CALIB_FILE);
        let text = serde_json::to_string_pretty(self).expect("calib serializes");
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(CALIB_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

// ---------------------------------------------------------------------------
// CSV streams
// ---------------------------------------------------------------------------

/// One ground-truth or estimated pose row; angles in degrees as on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Column indices of `names` within a CSV header.
fn header_positions(
    path: &Path,
    headers: &csv::StringRecord,
    names: &[&str],
) -> Result<Vec<usize>, DatasetError> {
    names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| DatasetError::MissingColumn {
                    path: path.display().to_string(),
                    column: (*name).to_string(),
                })
        })
        .collect()
}

fn parse_row(path: &Path, row: usize, record: &csv::StringRecord, cols: &[usize]) -> Result<Vec<f64>, DatasetError> {
    cols.iter()
        .map(|&c| {
            record
                .get(c)
                .ok_or_else(|| DatasetError::BadRow {
                    path: path.display().to_string(),
                    row,
                    message: format!("missing field {c}"),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| DatasetError::BadRow {
                    path: path.display().to_string(),
                    row,
                    message: e.to_string(),
                })
        })
        .collect()
}

/// Reads named f64 columns from a CSV file, ignoring any extra columns.
fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>, DatasetError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols = header_positions(path, &headers, names)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        rows.push(parse_row(path, i + 2, &record, &cols)?);
    }
    Ok(rows)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample<f64>]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time", "fx", "fy", "fz", "wx", "wy", "wz"])
        .map_err(|e| csv_err(path, e))?;
    for s in samples {
        w.write_record([
            fmt(s.time),
            fmt(s.specific_force.x),
            fmt(s.specific_force.y),
            fmt(s.specific_force.z),
            fmt(s.angular_rate.x),
            fmt(s.angular_rate.y),
            fmt(s.angular_rate.z),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample<f64>>, DatasetError> {
    let rows = read_columns(path, &["time", "fx", "fy", "fz", "wx", "wy", "wz"])?;
    Ok(rows
        .into_iter()
        .map(|r| ImuSample {
            time: r[0],
            specific_force: Vector3::new(r[1], r[2], r[3]),
            angular_rate: Vector3::new(r[4], r[5], r[6]),
        })
        .collect())
}

pub fn write_odo_csv(path: &Path, samples: &[OdoSample<f64>]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time", "speed"])
        .map_err(|e| csv_err(path, e))?;
    for s in samples {
        w.write_record([fmt(s.time), fmt(s.speed)])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_odo_csv(path: &Path) -> Result<Vec<OdoSample<f64>>, DatasetError> {
    let rows = read_columns(path, &["time", "speed"])?;
    Ok(rows
        .into_iter()
        .map(|r| OdoSample {
            time: r[0],
            speed: r[1],
        })
        .collect())
}

pub fn write_pose_csv(path: &Path, records: &[PoseRecord]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time", "x", "y", "z", "roll", "pitch", "yaw"])
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            fmt(r.time),
            fmt(r.x),
            fmt(r.y),
            fmt(r.z),
            fmt(r.roll),
            fmt(r.pitch),
            fmt(r.yaw),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads pose rows from any CSV carrying the seven standard columns;
/// extra columns (such as the estimator's marginal deviations) are ignored.
pub fn read_pose_csv(path: &Path) -> Result<Vec<PoseRecord>, DatasetError> {
    let rows = read_columns(path, &["time", "x", "y", "z", "roll", "pitch", "yaw"])?;
    Ok(rows
        .into_iter()
        .map(|r| PoseRecord {
            time: r[0],
            x: r[1],
            y: r[2],
            z: r[3],
            roll: r[4],
            pitch: r[5],
            yaw: r[6],
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Frame rasters
// ---------------------------------------------------------------------------

/// One frame-index entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEntry {
    pub epoch: usize,
    pub time: f64,
}

fn frame_stem(epoch: usize) -> String {
    format!("{epoch:06}")
}

pub fn write_frame_index(dir: &Path, entries: &[FrameEntry]) -> Result<(), DatasetError> {
    let path = dir.join(FRAME_INDEX_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["epoch", "time"])
        .map_err(|e| csv_err(&path, e))?;
    for e in entries {
        w.write_record([e.epoch.to_string(), fmt(e.time)])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

pub fn read_frame_index(dir: &Path) -> Result<Vec<FrameEntry>, DatasetError> {
    let path = dir.join(FRAME_INDEX_FILE);
    let rows = read_columns(&path, &["epoch", "time"])?;
    Ok(rows
        .into_iter()
        .map(|r| FrameEntry {
            epoch: r[0] as usize,
            time: r[1],
        })
        .collect())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    Ok(bytes)
}

pub fn write_raster_f64(path: &Path, values: &[f64]) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_raster_f64(path: &Path, expected: usize) -> Result<Vec<f64>, DatasetError> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expected * 8 {
        return Err(DatasetError::RasterSize {
            path: path.display().to_string(),
            expected,
            found: bytes.len() / 8,
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_raster_f32(path: &Path, values: &[f32]) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_raster_f32(path: &Path, expected: usize) -> Result<Vec<f32>, DatasetError> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expected * 4 {
        return Err(DatasetError::RasterSize {
            path: path.display().to_string(),
            expected,
            found: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

pub fn write_raster_u8(path: &Path, values: &[u8]) -> Result<(), DatasetError> {
    write_bytes(path, values)
}

pub fn read_raster_u8(path: &Path, expected: usize) -> Result<Vec<u8>, DatasetError> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expected {
        return Err(DatasetError::RasterSize {
            path: path.display().to_string(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

/// Writes the three rasters of one frame epoch.
pub fn write_frame(
    frames_dir: &Path,
    epoch: usize,
    depth: &[f64],
    confidence: &[f32],
    mask: &[u8],
) -> Result<(), DatasetError> {
    let stem = frame_stem(epoch);
    write_raster_f64(&frames_dir.join(format!("{stem}.depth")), depth)?;
    write_raster_f32(&frames_dir.join(format!("{stem}.conf")), confidence)?;
    write_raster_u8(&frames_dir.join(format!("{stem}.mask")), mask)
}

/// Reads one frame epoch back as a core depth frame.
pub fn read_frame(
    frames_dir: &Path,
    entry: FrameEntry,
    calib: &Calib,
) -> Result<DepthFrame<f64>, DatasetError> {
    let stem = frame_stem(entry.epoch);
    let n = calib.width * calib.height;
    let depth = read_raster_f64(&frames_dir.join(format!("{stem}.depth")), n)?;
    let confidence = read_raster_f32(&frames_dir.join(format!("{stem}.conf")), n)?
        .into_iter()
        .map(f64::from)
        .collect();
    let mask = read_raster_u8(&frames_dir.join(format!("{stem}.mask")), n)?;
    Ok(DepthFrame {
        timestamp: entry.time,
        intrinsics: calib.intrinsics(),
        depth,
        confidence,
        mask,
    })
}

// ---------------------------------------------------------------------------
// Whole-dataset loader
// ---------------------------------------------------------------------------

/// An opened dataset: calibration, sensor streams, ground truth, and the
/// frame index (empty when the dataset has no frames directory).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub calib: Calib,
    pub imu: Vec<ImuSample<f64>>,
    pub odo: Vec<OdoSample<f64>>,
    pub gt: Vec<PoseRecord>,
    pub frames: Vec<FrameEntry>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let calib = Calib::load(dir)?;
        let imu = read_imu_csv(&dir.join(IMU_FILE))?;
        let odo = read_odo_csv(&dir.join(ODO_FILE))?;
        let gt = read_pose_csv(&dir.join(GT_FILE))?;
        let frames_dir = dir.join(FRAMES_DIR);
        let frames = if frames_dir.join(FRAME_INDEX_FILE).is_file() {
            read_frame_index(&frames_dir)?
        } else {
            Vec::new()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            calib,
            imu,
            odo,
            gt,
            frames,
        })
    }

    pub fn read_frame(&self, entry: FrameEntry) -> Result<DepthFrame<f64>, DatasetError> {
        read_frame(&self.dir.join(FRAMES_DIR), entry, &self.calib)
    }
}
