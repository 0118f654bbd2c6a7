//! Closed-loop dataset runner.
//!
//! [`run_session`] replays a dataset through the full stack: IMU
//! mechanization and covariance propagation for every sample, an odometer
//! speed update per epoch, and — when a depth frame is available — cloud
//! generation, map registration, and a pose update. Registration failures
//! are logged and the filter coasts on inertial and odometer data alone;
//! only structural filter errors (bad timestamps, non-positive-definite
//! innovations) abort the run.
//!
//! Outputs written to the run directory:
//!
//! * `trajectory.csv` — per-epoch pose estimate plus the 15 marginal
//!   standard deviations of the error state;
//! * `metrics.json` — accuracy against the dataset's ground truth;
//! * `events.log` — one line per epoch with the registration outcome and
//!   the fate of each measurement.
//!
//! A session is deterministic: re-running the same inputs produces byte
//! identical outputs.

use nalgebra::{Rotation3, UnitQuaternion, Vector2, Vector3};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;
use vmrnav_core::cloud::PointCloud;
use vmrnav_core::cloudgen::{self, CloudgenError};
use vmrnav_core::fusion::{
    EpochInputs, FusionError, FusionSession, NavState, UpdateDisposition,
};
use vmrnav_core::geom::Pose;
use vmrnav_core::ground::GroundError;
use vmrnav_core::mapstore::{
    import_xyz, indoor_map_split_config, read_point_file, split_indoor, IndoorMap, MapError,
    TileIndex, INDOOR_FULL_FILE,
};
use vmrnav_core::cloud::Frame;
use vmrnav_core::registration::{
    apply_correction, register_indoor_prepared, register_outdoor, to_local_frame,
    AggregationBuffer, IndoorTarget, RegError,
};

use crate::config::RunConfig;
use crate::dataset::{Dataset, DatasetError, FrameEntry, PoseRecord};
use crate::metrics::{compute_metrics, Metrics};

/// Environment kind of a run; selects the map layout, the cloud-generation
/// profile, and the registration flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Indoor,
    Outdoor,
}

/// Runner options beyond the configuration file.
#[derive(Debug, Clone, Default)]
pub struct SessionOptions {
    pub disable_vmr: bool,
    pub disable_odo: bool,
    /// Test hook: adds a position offset to the registration result of one
    /// epoch, emulating a map-registration outlier.
    pub inject_pose_outlier: Option<(usize, Vector3<f64>)>,
}

/// Session errors. Everything here is unrecoverable for the run;
/// per-epoch registration failures are reported in the epoch records and
/// the event log instead.
#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Ground(#[from] GroundError),
    #[error("failed to prepare the registration target: {0}")]
    Prepare(#[from] RegError),
    #[error(transparent)]
    Cloudgen(#[from] CloudgenError),
    #[error("filter initialisation failed: {0}")]
    Init(FusionError),
    #[error("epoch {epoch}: unrecoverable filter error: {source}")]
    Epoch { epoch: usize, source: FusionError },
    #[error("dataset is unusable: {0}")]
    BadDataset(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> SessionError {
    SessionError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Outcome of the registration attempt of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RegSummary {
    pub fitness: f64,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Stage deltas of the indoor two-stage flow (absent outdoors).
    pub delta_vertical: Option<Pose<f64>>,
    pub delta_horizontal: Option<Pose<f64>>,
}

/// One processed epoch.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub time: f64,
    pub state: NavState<f64>,
    /// Marginal standard deviations of the 15 error states, in the block
    /// order position, velocity, attitude, accel bias, gyro bias.
    pub sigmas: [f64; 15],
    pub speed: UpdateDisposition,
    pub pose: UpdateDisposition,
    /// `None` when no registration was attempted (no frame, or vision
    /// disabled); otherwise the summary or the reason nothing was applied
    /// (failure, or an outdoor aggregation still filling up).
    pub registration: Option<Result<RegSummary, String>>,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub epochs: Vec<EpochRecord>,
    pub metrics: Option<Metrics>,
    pub events: Vec<String>,
}

enum LoadedMap {
    Indoor(Box<IndoorTarget<f64>>),
    Outdoor(TileIndex),
}

/// Loads the reference map: an indoor map directory or single point file,
/// or an outdoor tile directory.
fn load_map(path: &Path, mode: Mode, config: &RunConfig) -> Result<LoadedMap, SessionError> {
    match mode {
        Mode::Indoor => {
            let map: IndoorMap<f64> = if path.is_dir() && path.join(INDOOR_FULL_FILE).is_file() {
                IndoorMap::load(path, &indoor_map_split_config())?
            } else {
                let cloud = if path.extension().is_some_and(|e| e == "xyz") {
                    import_xyz(path)?
                } else {
                    read_point_file(path, Frame::LocalLevel)?
                };
                split_indoor(&cloud, &indoor_map_split_config())?
            };
            let target = IndoorTarget::prepare(&map, &config.indoor_config())?;
            Ok(LoadedMap::Indoor(Box::new(target)))
        }
        Mode::Outdoor => Ok(LoadedMap::Outdoor(TileIndex::load(path)?)),
    }
}

fn disposition_str(d: &UpdateDisposition) -> String {
    match d {
        UpdateDisposition::Applied => "applied".into(),
        UpdateDisposition::NoMeasurement => "none".into(),
        UpdateDisposition::GateRejected {
            mahalanobis_sq,
            gate,
        } => format!("gate-rejected(m2={mahalanobis_sq:.2},gate={gate:.2})"),
        UpdateDisposition::AttitudeTooLarge { angle_deg } => {
            format!("attitude-too-large({angle_deg:.1}deg)")
        }
    }
}

fn initial_state(gt: &[PoseRecord]) -> Result<NavState<f64>, SessionError> {
    let first = gt
        .first()
        .ok_or_else(|| SessionError::BadDataset("gt.csv has no rows".into()))?;
    let attitude = UnitQuaternion::from_rotation_matrix(&Rotation3::from_euler_angles(
        first.roll.to_radians(),
        first.pitch.to_radians(),
        first.yaw.to_radians(),
    ));
    // The trajectory starts in motion; seed the velocity from the first
    // ground-truth step (covered by the configured initial uncertainty).
    let velocity = match gt.get(1) {
        Some(second) if second.time > first.time => {
            (Vector3::new(second.x, second.y, second.z)
                - Vector3::new(first.x, first.y, first.z))
                / (second.time - first.time)
        }
        _ => Vector3::zeros(),
    };
    Ok(NavState {
        attitude,
        velocity,
        position: Vector3::new(first.x, first.y, first.z),
        bias_accel: Vector3::zeros(),
        bias_gyro: Vector3::zeros(),
        time: first.time,
    })
}

struct EpochSpec {
    epoch: usize,
    time: f64,
    frame: Option<FrameEntry>,
}

/// Epoch boundaries: camera frames when present, otherwise the odometer
/// cadence (fusion-only baseline).
fn epoch_specs(ds: &Dataset) -> Vec<EpochSpec> {
    if !ds.frames.is_empty() {
        ds.frames
            .iter()
            .map(|f| EpochSpec {
                epoch: f.epoch,
                time: f.time,
                frame: Some(*f),
            })
            .collect()
    } else {
        ds.odo
            .iter()
            .enumerate()
            .map(|(i, o)| EpochSpec {
                epoch: i + 1,
                time: o.time,
                frame: None,
            })
            .collect()
    }
}

/// Runs a dataset through the closed loop and writes the run outputs.
pub fn run_session(
    dataset_dir: &Path,
    map_path: &Path,
    config: &RunConfig,
    options: &SessionOptions,
    out: &Path,
) -> Result<RunOutput, SessionError> {
    let ds = Dataset::load(dataset_dir)?;
    if ds.imu.is_empty() {
        return Err(SessionError::BadDataset("imu.csv has no rows".into()));
    }
    let mode = if map_path.is_dir() && map_path.join(INDOOR_FULL_FILE).is_file() {
        Mode::Indoor
    } else {
        Mode::Outdoor
    };
    run_session_with_mode(&ds, map_path, mode, config, options, out)
}

/// [`run_session`] with an explicit environment mode (the CLI always knows
/// the mode; the automatic detection above only serves library callers).
pub fn run_session_mode(
    dataset_dir: &Path,
    map_path: &Path,
    mode: Mode,
    config: &RunConfig,
    options: &SessionOptions,
    out: &Path,
) -> Result<RunOutput, SessionError> {
    let ds = Dataset::load(dataset_dir)?;
    if ds.imu.is_empty() {
        return Err(SessionError::BadDataset("imu.csv has no rows".into()));
    }
    run_session_with_mode(&ds, map_path, mode, config, options, out)
}

fn run_session_with_mode(
    ds: &Dataset,
    map_path: &Path,
    mode: Mode,
    config: &RunConfig,
    options: &SessionOptions,
    out: &Path,
) -> Result<RunOutput, SessionError> {
    let map = load_map(map_path, mode, config)?;
    let cg_config = config.cloudgen_config(matches!(mode, Mode::Indoor));
    cg_config.validate()?;
    let indoor_cfg = config.indoor_config();
    let outdoor_cfg = config.outdoor_config();
    let extrinsics = ds.calib.core_extrinsics();

    let initial = initial_state(&ds.gt)?;
    let mut session = FusionSession::new(initial, config.initial_covariance(), config.noise_config())
        .map_err(SessionError::Init)?;
    let mut buffer = AggregationBuffer::from_config(&outdoor_cfg);

    let specs = epoch_specs(ds);
    let mut epochs: Vec<EpochRecord> = Vec::with_capacity(specs.len());
    let mut events: Vec<String> = Vec::new();
    let mut imu_cursor = 0usize;
    let mut odo_cursor = 0usize;

    for spec in &specs {
        // All IMU samples since the previous epoch, up to the epoch time.
        let imu_start = imu_cursor;
        while imu_cursor < ds.imu.len() && ds.imu[imu_cursor].time <= spec.time + 1e-9 {
            imu_cursor += 1;
        }
        let batch = &ds.imu[imu_start..imu_cursor];

        // Latest odometer sample in the window (the filter takes one per
        // epoch; extras at higher odometer rates are dropped).
        let mut odo = None;
        while odo_cursor < ds.odo.len() && ds.odo[odo_cursor].time <= spec.time + 1e-9 {
            odo = Some(ds.odo[odo_cursor]);
            odo_cursor += 1;
        }
        if options.disable_odo {
            odo = None;
        }

        // Cloud generation happens outside the filter step: it does not
        // depend on the state, and raster I/O failures are fatal.
        let mut generated: Option<PointCloud<f64>> = None;
        if let (Some(entry), false) = (spec.frame, options.disable_vmr) {
            let frame = ds.read_frame(entry)?;
            let gen = cloudgen::generate(&frame, &extrinsics, &cg_config)?;
            for w in &gen.warnings {
                events.push(format!("epoch={} cloudgen warning: {w:?}", spec.epoch));
            }
            generated = Some(gen.cloud);
        }

        let mut reg_record: Option<Result<RegSummary, String>> = None;
        let outcome = {
            let reg_record = &mut reg_record;
            let buffer = &mut buffer;
            let vmr = |state: &NavState<f64>| -> Option<Pose<f64>> {
                let cloud = generated.as_ref()?;
                let prior = state.pose();
                let attempt: Result<(RegSummary, Pose<f64>), String> = match &map {
                    LoadedMap::Indoor(target) => to_local_frame(cloud, &prior)
                        .map_err(|e| e.to_string())
                        .and_then(|local| {
                            register_indoor_prepared(&local, target, &indoor_cfg)
                                .map_err(|e| e.to_string())
                        })
                        .map(|reg| {
                            (
                                RegSummary {
                                    fitness: reg.result.fitness,
                                    rmse: reg.result.rmse_inliers,
                                    iterations: reg.result.iterations,
                                    converged: reg.result.converged,
                                    delta_vertical: Some(reg.delta_vertical),
                                    delta_horizontal: Some(reg.delta_horizontal),
                                },
                                apply_correction(&prior, &reg.result.delta),
                            )
                        }),
                    LoadedMap::Outdoor(tiles) => {
                        match buffer.push(cloud, &prior, &state.position) {
                            Err(e) => Err(e.to_string()),
                            Ok(None) => Err(format!(
                                "aggregating ({:.1} m accumulated)",
                                buffer.distance_accumulated()
                            )),
                            Ok(Some(merged)) => register_outdoor(
                                &merged,
                                tiles,
                                &Vector2::new(state.position.x, state.position.y),
                                &outdoor_cfg,
                            )
                            .map_err(|e| e.to_string())
                            .map(|res| {
                                (
                                    RegSummary {
                                        fitness: res.fitness,
                                        rmse: res.rmse_inliers,
                                        iterations: res.iterations,
                                        converged: res.converged,
                                        delta_vertical: None,
                                        delta_horizontal: None,
                                    },
                                    apply_correction(&prior, &res.delta),
                                )
                            }),
                        }
                    }
                };
                match attempt {
                    Ok((summary, mut corrected)) => {
                        *reg_record = Some(Ok(summary));
                        if let Some((epoch, offset)) = options.inject_pose_outlier {
                            if epoch == spec.epoch {
                                corrected.translation += offset;
                            }
                        }
                        Some(corrected)
                    }
                    Err(message) => {
                        *reg_record = Some(Err(message));
                        None
                    }
                }
            };
            session
                .step(&EpochInputs { imu: batch, odo }, vmr)
                .map_err(|source| SessionError::Epoch {
                    epoch: spec.epoch,
                    source,
                })?
        };

        let cov = &session.error_state().covariance;
        let mut sigmas = [0.0f64; 15];
        for (i, s) in sigmas.iter_mut().enumerate() {
            *s = cov[(i, i)].max(0.0).sqrt();
        }

        let mut line = format!(
            "epoch={} t={:.3} speed={} pose={}",
            spec.epoch,
            spec.time,
            disposition_str(&outcome.speed),
            disposition_str(&outcome.pose)
        );
        match &reg_record {
            None => {
                if spec.frame.is_some() && options.disable_vmr {
                    line.push_str(" reg=disabled");
                } else if spec.frame.is_none() {
                    line.push_str(" reg=no-frame");
                }
            }
            Some(Ok(s)) => {
                let _ = write!(
                    line,
                    " reg=ok fitness={:.4} rmse={:.4} iters={}",
                    s.fitness, s.rmse, s.iterations
                );
            }
            Some(Err(reason)) => {
                let _ = write!(line, " reg=failed: {reason}");
            }
        }
        events.push(line);

        epochs.push(EpochRecord {
            epoch: spec.epoch,
            time: spec.time,
            state: outcome.state,
            sigmas,
            speed: outcome.speed,
            pose: outcome.pose,
            registration: reg_record,
        });
    }

    let est: Vec<PoseRecord> = epochs.iter().map(|e| pose_record(e)).collect();
    let metrics = if ds.gt.is_empty() || est.is_empty() {
        None
    } else {
        match compute_metrics(&est, &ds.gt) {
            Ok(m) => Some(m),
            Err(e) => {
                events.push(format!("metrics unavailable: {e}"));
                None
            }
        }
    };

    write_outputs(out, &epochs, metrics.as_ref(), &events)?;
    Ok(RunOutput {
        epochs,
        metrics,
        events,
    })
}

fn pose_record(e: &EpochRecord) -> PoseRecord {
    let (roll, pitch, yaw) = e.state.rotation().euler_angles();
    PoseRecord {
        time: e.time,
        x: e.state.position.x,
        y: e.state.position.y,
        z: e.state.position.z,
        roll: roll.to_degrees(),
        pitch: pitch.to_degrees(),
        yaw: yaw.to_degrees(),
    }
}

fn write_outputs(
    out: &Path,
    epochs: &[EpochRecord],
    metrics: Option<&Metrics>,
    events: &[String],
) -> Result<(), SessionError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let traj_path = out.join("trajectory.csv");
    let mut w = csv::Writer::from_path(&traj_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(&traj_path, source),
        other => io_err(
            &traj_path,
            std::io::Error::other(format!("csv error: {other:?}")),
        ),
    })?;
    let mut header: Vec<String> = ["time", "x", "y", "z", "roll", "pitch", "yaw"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for block in ["p", "v", "a", "bf", "bw"] {
        for axis in ["x", "y", "z"] {
            header.push(format!("std_{block}{axis}"));
        }
    }
    w.write_record(&header)
        .map_err(|e| io_err(&traj_path, std::io::Error::other(e)))?;
    for e in epochs {
        let r = pose_record(e);
        let mut row = vec![
            format!("{}", r.time),
            format!("{}", r.x),
            format!("{}", r.y),
            format!("{}", r.z),
            format!("{}", r.roll),
            format!("{}", r.pitch),
            format!("{}", r.yaw),
        ];
        for s in e.sigmas {
            row.push(format!("{s}"));
        }
        w.write_record(&row)
            .map_err(|err| io_err(&traj_path, std::io::Error::other(err)))?;
    }
    w.flush().map_err(|e| io_err(&traj_path, e))?;

    if let Some(m) = metrics {
        let path = out.join("metrics.json");
        let text = serde_json::to_string_pretty(m).expect("metrics serialize");
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }

    let path = out.join("events.log");
    let mut text = events.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Convenience for tests and the CLI: the run directory paths.
pub fn output_paths(out: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out.join("trajectory.csv"),
        out.join("metrics.json"),
        out.join("events.log"),
    )
}
