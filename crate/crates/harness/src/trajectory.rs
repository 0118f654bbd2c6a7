//! Smooth vehicle trajectories through a world.
//!
//! A trajectory is specified by 2-D waypoints with per-waypoint speeds and
//! turned into a discrete state sequence at the IMU rate: positions on a
//! Catmull-Rom spline through the waypoints, heading along the spline
//! tangent, and flat pitch/roll (the synthetic worlds have level floors).
//! Clamped end tangents make the first and last segments start and end
//! along their chords, so a two-waypoint trajectory is an exactly straight
//! constant-heading line.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// One 2-D waypoint with the commanded speed at that waypoint. Speeds are
/// interpolated linearly along each spline segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub speed: f64,
}

/// Sensor noise and error parameters for dataset synthesis. All-zero (the
/// default) produces noise-free datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct NoiseSpec {
    /// Accelerometer white noise density, m/s^2 per sqrt(Hz).
    pub accel_density: f64,
    /// Gyroscope white noise density, deg/s per sqrt(Hz).
    pub gyro_density_deg: f64,
    /// Accelerometer turn-on bias standard deviation, m/s^2 (constant per
    /// run, drawn once from the seed).
    pub accel_bias_sigma: f64,
    /// Gyroscope turn-on bias standard deviation, deg/s.
    pub gyro_bias_sigma_deg: f64,
    /// Odometer speed noise, m/s.
    pub odo_sigma: f64,
    /// Multiplicative depth noise as a fraction of range.
    pub depth_frac_sigma: f64,
}

impl NoiseSpec {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    /// Per-sample accelerometer noise standard deviation at `rate` Hz.
    pub fn accel_sample_sigma(&self, rate: f64) -> f64 {
        self.accel_density * rate.sqrt()
    }

    /// Per-sample gyroscope noise standard deviation at `rate` Hz, rad/s.
    pub fn gyro_sample_sigma(&self, rate: f64) -> f64 {
        self.gyro_density_deg.to_radians() * rate.sqrt()
    }
}

/// A trajectory request: path, height, rates, and sensor noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Waypoint>,
    /// Constant height of the body origin above the world z = 0 plane.
    #[serde(default)]
    pub z: f64,
    /// Closed trajectories loop back from the last waypoint to the first.
    #[serde(default)]
    pub closed: bool,
    /// Run length in seconds. Mandatory for closed trajectories; open ones
    /// default to running until the last waypoint.
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default = "default_imu_rate")]
    pub imu_rate: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    #[serde(default = "default_odo_rate")]
    pub odo_rate: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
}

fn default_imu_rate() -> f64 {
    100.0
}

fn default_frame_rate() -> f64 {
    10.0
}

fn default_odo_rate() -> f64 {
    16.0
}

/// Errors raised while validating or discretising a trajectory.
#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("a trajectory needs at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoint {0} has non-positive speed {1}")]
    BadSpeed(usize, f64),
    #[error("rates must be positive, got imu {imu}, frame {frame}, odo {odo}")]
    BadRates { imu: f64, frame: f64, odo: f64 },
    #[error("IMU rate {imu} is not an integer multiple of the frame rate {frame}")]
    RateMismatch { imu: f64, frame: f64 },
    #[error("closed trajectories require an explicit duration")]
    MissingDuration,
    #[error("duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("failed to read trajectory file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse trajectory file {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

impl TrajectorySpec {
    pub fn load(path: &Path) -> Result<Self, TrajectoryError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrajectoryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| TrajectoryError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.waypoints.len() < 2 {
            return Err(TrajectoryError::TooFewWaypoints(self.waypoints.len()));
        }
        for (i, w) in self.waypoints.iter().enumerate() {
            if !(w.speed > 0.0) {
                return Err(TrajectoryError::BadSpeed(i, w.speed));
            }
        }
        if !(self.imu_rate > 0.0 && self.frame_rate > 0.0 && self.odo_rate > 0.0) {
            return Err(TrajectoryError::BadRates {
                imu: self.imu_rate,
                frame: self.frame_rate,
                odo: self.odo_rate,
            });
        }
        let ratio = self.imu_rate / self.frame_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(TrajectoryError::RateMismatch {
                imu: self.imu_rate,
                frame: self.frame_rate,
            });
        }
        match self.duration {
            Some(d) if !(d > 0.0) => return Err(TrajectoryError::BadDuration(d)),
            None if self.closed => return Err(TrajectoryError::MissingDuration),
            _ => {}
        }
        Ok(())
    }
}

/// Ground-truth states at the IMU rate: `positions[k]` and `attitudes[k]`
/// at time `k * dt`, with camera frames every `frame_every` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTrajectory {
    pub dt: f64,
    pub frame_every: usize,
    pub positions: Vec<Vector3<f64>>,
    pub attitudes: Vec<UnitQuaternion<f64>>,
}

impl DiscreteTrajectory {
    /// Number of IMU steps (states minus the initial one).
    pub fn steps(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// The velocity that the discrete mechanization associates with state
    /// `k`: the displacement over the step ending at `k`. The initial
    /// velocity is defined as the first step's, so motion starts at speed.
    pub fn velocity(&self, k: usize) -> Vector3<f64> {
        let k = k.max(1);
        (self.positions[k] - self.positions[k - 1]) / self.dt
    }

    /// Indices of camera-frame states: every `frame_every`-th step,
    /// excluding the initial state.
    pub fn frame_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (self.frame_every..=self.steps()).step_by(self.frame_every)
    }
}

/// Catmull-Rom spline through the waypoints with clamped (open) or wrapped
/// (closed) end conditions.
struct Spline {
    points: Vec<Vector2<f64>>,
    speeds: Vec<f64>,
    closed: bool,
}

impl Spline {
    fn new(spec: &TrajectorySpec) -> Self {
        Self {
            points: spec
                .waypoints
                .iter()
                .map(|w| Vector2::new(w.x, w.y))
                .collect(),
            speeds: spec.waypoints.iter().map(|w| w.speed).collect(),
            closed: spec.closed,
        }
    }

    fn segments(&self) -> usize {
        if self.closed {
            self.points.len()
        } else {
            self.points.len() - 1
        }
    }

    fn point(&self, i: isize) -> Vector2<f64> {
        let n = self.points.len() as isize;
        if self.closed {
            return self.points[i.rem_euclid(n) as usize];
        }
        // Clamped virtual endpoints extend the end chords linearly.
        if i < 0 {
            self.points[0] * 2.0 - self.points[1]
        } else if i >= n {
            self.points[(n - 1) as usize] * 2.0 - self.points[(n - 2) as usize]
        } else {
            self.points[i as usize]
        }
    }

    /// Hermite control data of segment `i`: endpoints and tangents.
    fn hermite(&self, i: usize) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>, Vector2<f64>) {
        let i = i as isize;
        let p0 = self.point(i);
        let p1 = self.point(i + 1);
        let m0 = (p1 - self.point(i - 1)) * 0.5;
        let m1 = (self.point(i + 2) - p0) * 0.5;
        (p0, p1, m0, m1)
    }

    fn position(&self, i: usize, u: f64) -> Vector2<f64> {
        let (p0, p1, m0, m1) = self.hermite(i);
        let u2 = u * u;
        let u3 = u2 * u;
        p0 * (2.0 * u3 - 3.0 * u2 + 1.0)
            + m0 * (u3 - 2.0 * u2 + u)
            + p1 * (-2.0 * u3 + 3.0 * u2)
            + m1 * (u3 - u2)
    }

    fn derivative(&self, i: usize, u: f64) -> Vector2<f64> {
        let (p0, p1, m0, m1) = self.hermite(i);
        let u2 = u * u;
        p0 * (6.0 * u2 - 6.0 * u)
            + m0 * (3.0 * u2 - 4.0 * u + 1.0)
            + p1 * (-6.0 * u2 + 6.0 * u)
            + m1 * (3.0 * u2 - 2.0 * u)
    }

    fn speed(&self, i: usize, u: f64) -> f64 {
        let s0 = self.speeds[i];
        let s1 = self.speeds[(i + 1) % self.speeds.len()];
        s0 + (s1 - s0) * u
    }
}

/// Discretises the trajectory at the IMU rate.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<DiscreteTrajectory, TrajectoryError> {
    spec.validate()?;
    let spline = Spline::new(spec);
    let dt = 1.0 / spec.imu_rate;
    let frame_every = (spec.imu_rate / spec.frame_rate).round() as usize;
    let max_steps = spec.duration.map(|d| (d * spec.imu_rate).round() as usize);
    let n_seg = spline.segments();

    let mut positions = Vec::new();
    let mut attitudes = Vec::new();
    let mut seg = 0usize;
    let mut u = 0.0f64;
    let mut emit = |spline: &Spline, seg: usize, u: f64| {
        let p = spline.position(seg, u);
        let tangent = spline.derivative(seg, u);
        let yaw = tangent.y.atan2(tangent.x);
        positions.push(Vector3::new(p.x, p.y, spec.z));
        attitudes.push(UnitQuaternion::from_euler_angles(0.0, 0.0, yaw));
    };
    emit(&spline, 0, 0.0);

    let mut step = 0usize;
    loop {
        if let Some(max) = max_steps {
            if step >= max {
                break;
            }
        }
        // Advance by the commanded arc length with one tangent refinement.
        let mut ds = spline.speed(seg, u) * dt;
        loop {
            let d0 = spline.derivative(seg, u).norm();
            let mut du = ds / d0;
            let d1 = spline.derivative(seg, (u + du).min(1.0)).norm();
            du = ds / (0.5 * (d0 + d1));
            if u + du < 1.0 {
                u += du;
                break;
            }
            // Crossing a segment boundary: consume the remaining arc in the
            // next segment (or clamp at the end of an open path).
            ds -= (1.0 - u) * 0.5 * (d0 + d1);
            if !spec.closed && seg + 1 >= n_seg {
                u = 1.0;
                break;
            }
            seg = (seg + 1) % n_seg;
            u = 0.0;
            if ds <= 0.0 {
                break;
            }
        }
        emit(&spline, seg, u);
        step += 1;
        if !spec.closed && seg + 1 >= n_seg && u >= 1.0 - 1e-9 {
            break;
        }
    }

    Ok(DiscreteTrajectory {
        dt,
        frame_every,
        positions,
        attitudes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight_spec() -> TrajectorySpec {
        TrajectorySpec {
            waypoints: vec![
                Waypoint {
                    x: 0.0,
                    y: 0.0,
                    speed: 2.0,
                },
                Waypoint {
                    x: 50.0,
                    y: 0.0,
                    speed: 2.0,
                },
            ],
            z: 0.0,
            closed: false,
            duration: None,
            imu_rate: 100.0,
            frame_rate: 10.0,
            odo_rate: 16.0,
            noise: NoiseSpec::default(),
        }
    }

    #[test]
    fn straight_line_is_exactly_linear() {
        let traj = generate_trajectory(&straight_spec()).unwrap();
        assert_eq!(traj.steps(), 2500);
        assert_eq!(traj.frame_steps().count(), 250);
        for (k, p) in traj.positions.iter().enumerate() {
            assert_relative_eq!(p.x, 0.02 * k as f64, epsilon = 1e-9);
            assert!(p.y.abs() < 1e-12 && p.z.abs() < 1e-12);
        }
        for q in &traj.attitudes {
            assert_relative_eq!(q.euler_angles().2, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn heading_follows_the_path_tangent() {
        let spec = TrajectorySpec {
            waypoints: vec![
                Waypoint {
                    x: 0.0,
                    y: 0.0,
                    speed: 2.0,
                },
                Waypoint {
                    x: 10.0,
                    y: 0.0,
                    speed: 2.0,
                },
                Waypoint {
                    x: 10.0,
                    y: 10.0,
                    speed: 2.0,
                },
            ],
            ..straight_spec()
        };
        let traj = generate_trajectory(&spec).unwrap();
        // Compare the stored yaw with the finite-difference course over the
        // upcoming step; they agree to first order on a smooth path.
        for k in 1..traj.steps() - 1 {
            let d = traj.positions[k + 1] - traj.positions[k];
            let course = d.y.atan2(d.x);
            let yaw = traj.attitudes[k].euler_angles().2;
            let diff = (yaw - course).abs();
            assert!(diff.min(2.0 * std::f64::consts::PI - diff) < 0.02, "step {k}");
        }
        // The final heading has turned to +y.
        let last = traj.attitudes.last().unwrap().euler_angles().2;
        assert_relative_eq!(last, std::f64::consts::FRAC_PI_2, epsilon = 1e-6);
    }

    #[test]
    fn closed_loop_runs_for_the_requested_duration() {
        let spec = TrajectorySpec {
            waypoints: vec![
                Waypoint {
                    x: -8.0,
                    y: -4.0,
                    speed: 2.0,
                },
                Waypoint {
                    x: 8.0,
                    y: -4.0,
                    speed: 2.0,
                },
                Waypoint {
                    x: 8.0,
                    y: 4.0,
                    speed: 2.0,
                },
                Waypoint {
                    x: -8.0,
                    y: 4.0,
                    speed: 2.0,
                },
            ],
            closed: true,
            duration: Some(60.0),
            ..straight_spec()
        };
        let traj = generate_trajectory(&spec).unwrap();
        assert_eq!(traj.steps(), 6000);
        assert_relative_eq!(traj.duration(), 60.0, epsilon = 1e-9);
        // Stays within the waypoint hull (the spline overshoots corners
        // slightly, but never by much at these aspect ratios).
        for p in &traj.positions {
            assert!(p.x.abs() < 10.0 && p.y.abs() < 6.0, "escaped at {p:?}");
        }
    }

    #[test]
    fn per_step_displacement_matches_commanded_speed() {
        let traj = generate_trajectory(&straight_spec()).unwrap();
        for k in 1..=traj.steps() {
            assert_relative_eq!(traj.velocity(k).norm(), 2.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn speed_ramp_is_monotone() {
        let spec = TrajectorySpec {
            waypoints: vec![
                Waypoint {
                    x: 0.0,
                    y: 0.0,
                    speed: 1.0,
                },
                Waypoint {
                    x: 40.0,
                    y: 0.0,
                    speed: 3.0,
                },
            ],
            ..straight_spec()
        };
        let traj = generate_trajectory(&spec).unwrap();
        let first = traj.velocity(1).norm();
        let mid = traj.velocity(traj.steps() / 2).norm();
        let last = traj.velocity(traj.steps()).norm();
        assert!(first < mid && mid < last);
        assert_relative_eq!(first, 1.0, epsilon = 0.02);
        assert_relative_eq!(last, 3.0, epsilon = 0.05);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = straight_spec();
        spec.waypoints.truncate(1);
        assert!(matches!(
            generate_trajectory(&spec),
            Err(TrajectoryError::TooFewWaypoints(1))
        ));

        let mut spec = straight_spec();
        spec.waypoints[1].speed = 0.0;
        assert!(matches!(
            generate_trajectory(&spec),
            Err(TrajectoryError::BadSpeed(1, _))
        ));

        let mut spec = straight_spec();
        spec.frame_rate = 7.0;
        assert!(matches!(
            generate_trajectory(&spec),
            Err(TrajectoryError::RateMismatch { .. })
        ));

        let mut spec = straight_spec();
        spec.closed = true;
        assert!(matches!(
            generate_trajectory(&spec),
            Err(TrajectoryError::MissingDuration)
        ));
    }

    #[test]
    fn spec_roundtrips_through_json_with_defaults() {
        let text = r#"{"waypoints":[{"x":0,"y":0,"speed":2},{"x":50,"y":0,"speed":2}]}"#;
        let spec: TrajectorySpec = serde_json::from_str(text).unwrap();
        assert_eq!(spec.imu_rate, 100.0);
        assert_eq!(spec.frame_rate, 10.0);
        assert_eq!(spec.odo_rate, 16.0);
        assert!(spec.noise.is_zero());
        assert!(!spec.closed);
    }
}
