//! Error-state Kalman filter fusing inertial mechanization with
//! odometer-speed and map-registration pose updates.
//!
//! The nominal state ([`NavState`]) is integrated by strapdown
//! mechanization ([`mechanize`]); a 15-dimensional error state
//! ([`ErrorState`]) carries the covariance of (δp, δv, δθ, δb_f, δb_ω),
//! propagated by the linearized transition ([`propagate`]). Measurements
//! are applied in Joseph form with chi-square innovation gating, and every
//! accepted update is immediately injected into the nominal state and the
//! error mean reset to zero ([`reset_errors`]), keeping the filter
//! closed-loop. The attitude error δθ is a left-multiplicative small-angle
//! vector in the navigation frame: `R_true = Exp(δθ) · R_nominal`.
//!
//! [`FusionSession`] owns the per-epoch orchestration: integrate all IMU
//! samples, apply the speed update, hand the posterior to the
//! vision-map-registration callback, tune the pose noise from the
//! innovation ([`dynamic_tune`]), and apply the pose update.

use nalgebra::{Matrix3, Matrix6, Rotation3, SMatrix, SVector, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

use crate::geom::{quat_increment, skew, Pose};
use crate::scalar::Real;

pub type Matrix15<R> = SMatrix<R, 15, 15>;
pub type Vector15<R> = SVector<R, 15>;

/// Chi-square 0.999 quantile with 3 degrees of freedom (speed gate).
pub const CHI2_GATE_3DOF: f64 = 16.26623619623813;
/// Chi-square 0.999 quantile with 6 degrees of freedom (pose gate).
pub const CHI2_GATE_6DOF: f64 = 22.457744484825323;
/// Pose measurements whose attitude innovation exceeds this angle are
/// treated as invalid registrations rather than large corrections.
pub const MAX_ATTITUDE_INNOVATION_DEG: f64 = 30.0;
/// Longest accepted IMU integration interval, seconds.
pub const MAX_IMU_DT: f64 = 0.1;

/// Start offsets of the five error-state blocks.
const POS: usize = 0;
const VEL: usize = 3;
const ATT: usize = 6;
const BF: usize = 9;
const BW: usize = 12;

/// Gravity in the local east-north-up frame, m/s².
pub fn gravity<R: Real>() -> Vector3<R> {
    Vector3::new(R::zero(), R::zero(), R::c(-9.80665))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("imu interval {dt} s is outside (0, {MAX_IMU_DT}]")]
    DtOutOfRange { dt: f64 },
    #[error("invalid noise configuration: {0}")]
    InvalidConfig(String),
    #[error("innovation gate exceeded: squared Mahalanobis distance {mahalanobis_sq:.3} > {gate:.3}")]
    InnovationGateExceeded { mahalanobis_sq: f64, gate: f64 },
    #[error("attitude innovation of {angle_deg:.1}° exceeds {MAX_ATTITUDE_INNOVATION_DEG}°")]
    AttitudeInnovationTooLarge { angle_deg: f64 },
    #[error("innovation covariance is not positive definite")]
    InnovationNotSpd,
}

// ---------------------------------------------------------------------------
// State types
// ---------------------------------------------------------------------------

/// Nominal navigation state. Attitude maps body to the local east-north-up
/// navigation frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState<R: Real> {
    pub attitude: UnitQuaternion<R>,
    /// m/s, navigation frame.
    pub velocity: Vector3<R>,
    /// m, local navigation frame.
    pub position: Vector3<R>,
    /// Accelerometer bias, m/s².
    pub bias_accel: Vector3<R>,
    /// Gyroscope bias, rad/s.
    pub bias_gyro: Vector3<R>,
    /// Seconds.
    pub time: R,
}

impl<R: Real> NavState<R> {
    /// A stationary, bias-free state at `position` with the given attitude.
    pub fn at_rest(position: Vector3<R>, attitude: UnitQuaternion<R>, time: R) -> Self {
        Self {
            attitude,
            velocity: Vector3::zeros(),
            position,
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            time,
        }
    }

    pub fn rotation(&self) -> Rotation3<R> {
        self.attitude.to_rotation_matrix()
    }

    /// The body→navigation pose held by this state.
    pub fn pose(&self) -> Pose<R> {
        Pose::new(self.rotation(), self.position)
    }

    pub fn is_finite(&self) -> bool {
        let q = self.attitude.as_ref().coords;
        q.iter()
            .chain(self.velocity.iter())
            .chain(self.position.iter())
            .chain(self.bias_accel.iter())
            .chain(self.bias_gyro.iter())
            .all(|x| x.is_finite())
            && self.time.is_finite()
    }
}

/// Error state: mean of the five 3-vector error blocks plus their joint
/// covariance. Under the closed-loop convention the mean is zero except
/// transiently between an update and its reset.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState<R: Real> {
    pub delta_position: Vector3<R>,
    pub delta_velocity: Vector3<R>,
    /// Left-multiplicative navigation-frame attitude error, rad.
    pub delta_attitude: Vector3<R>,
    pub delta_bias_accel: Vector3<R>,
    pub delta_bias_gyro: Vector3<R>,
    pub covariance: Matrix15<R>,
}

impl<R: Real> ErrorState<R> {
    /// Zero-mean error state with the given covariance.
    pub fn new(covariance: Matrix15<R>) -> Self {
        Self {
            delta_position: Vector3::zeros(),
            delta_velocity: Vector3::zeros(),
            delta_attitude: Vector3::zeros(),
            delta_bias_accel: Vector3::zeros(),
            delta_bias_gyro: Vector3::zeros(),
            covariance,
        }
    }

    fn from_mean(mean: Vector15<R>, covariance: Matrix15<R>) -> Self {
        Self {
            delta_position: mean.fixed_rows::<3>(POS).into_owned(),
            delta_velocity: mean.fixed_rows::<3>(VEL).into_owned(),
            delta_attitude: mean.fixed_rows::<3>(ATT).into_owned(),
            delta_bias_accel: mean.fixed_rows::<3>(BF).into_owned(),
            delta_bias_gyro: mean.fixed_rows::<3>(BW).into_owned(),
            covariance,
        }
    }

    pub fn mean(&self) -> Vector15<R> {
        let mut m = Vector15::zeros();
        m.fixed_rows_mut::<3>(POS).copy_from(&self.delta_position);
        m.fixed_rows_mut::<3>(VEL).copy_from(&self.delta_velocity);
        m.fixed_rows_mut::<3>(ATT).copy_from(&self.delta_attitude);
        m.fixed_rows_mut::<3>(BF).copy_from(&self.delta_bias_accel);
        m.fixed_rows_mut::<3>(BW).copy_from(&self.delta_bias_gyro);
        m
    }

    /// `‖P − Pᵀ‖∞ / ‖P‖∞` (0 for an all-zero matrix).
    pub fn symmetry_error(&self) -> f64 {
        let p = &self.covariance;
        let asym = (p - p.transpose()).amax().as_f64();
        let scale = p.amax().as_f64();
        if scale == 0.0 {
            0.0
        } else {
            asym / scale
        }
    }

    /// Smallest eigenvalue of the symmetrized covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (self.covariance + self.covariance.transpose()) * R::c(0.5);
        sym.symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, &e| m.min(e.as_f64()))
    }

    /// Symmetry within 1e-9 relative and minimum eigenvalue above
    /// `−1e-9 · trace`.
    pub fn covariance_healthy(&self) -> bool {
        self.symmetry_error() < 1e-9
            && self.min_eigenvalue() > -1e-9 * self.covariance.trace().as_f64()
    }
}

/// IMU measurement: specific force and angular rate in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample<R: Real> {
    pub time: R,
    /// m/s².
    pub specific_force: Vector3<R>,
    /// rad/s.
    pub angular_rate: Vector3<R>,
}

/// Odometer measurement: longitudinal speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdoSample<R: Real> {
    pub time: R,
    /// m/s.
    pub speed: R,
}

/// Process and measurement noise configuration.
///
/// The σ values are continuous-time noise densities; their discrete
/// process-noise blocks are assembled by [`process_noise`]. The N matrices
/// are the static measurement covariances and must be diagonal so the
/// one-sided dynamic scaling of [`dynamic_tune`] preserves symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig<R: Real> {
    /// Accelerometer noise, m/s² per step.
    pub sigma_f: R,
    /// Gyroscope noise, rad/s per step.
    pub sigma_w: R,
    /// Accelerometer bias random walk, m/s²·√s.
    pub sigma_bf: R,
    /// Gyroscope bias random walk, rad/s·√s.
    pub sigma_bw: R,
    /// Speed-measurement covariance, (m/s)²; off-diagonal terms encode
    /// nothing here and must be zero.
    pub n_static_speed: Matrix3<R>,
    /// Pose-measurement covariance: positions m², attitudes rad².
    pub n_static_pose: Matrix6<R>,
    /// Dynamic-tuning gain (dimensionless, ≥ 0).
    pub alpha: R,
}

impl<R: Real> Default for NoiseConfig<R> {
    fn default() -> Self {
        Self {
            sigma_f: R::c(0.02),
            sigma_w: R::c(5.0e-4),
            sigma_bf: R::c(1.0e-4),
            sigma_bw: R::c(1.0e-6),
            n_static_speed: Matrix3::from_diagonal(&Vector3::from_element(R::c(0.01))),
            n_static_pose: Matrix6::from_diagonal(&Vector6::new(
                R::c(2.5e-3),
                R::c(2.5e-3),
                R::c(2.5e-3),
                R::c(1.0e-4),
                R::c(1.0e-4),
                R::c(1.0e-4),
            )),
            alpha: R::c(0.5),
        }
    }
}

impl<R: Real> NoiseConfig<R> {
    pub fn validate(&self) -> Result<(), FusionError> {
        for (name, s) in [
            ("sigma_f", self.sigma_f),
            ("sigma_w", self.sigma_w),
            ("sigma_bf", self.sigma_bf),
            ("sigma_bw", self.sigma_bw),
        ] {
            if !(s > R::zero() && s.is_finite()) {
                return Err(FusionError::InvalidConfig(format!(
                    "{name} must be finite and > 0, got {}",
                    s.as_f64()
                )));
            }
        }
        if !(self.alpha >= R::zero() && self.alpha.is_finite()) {
            return Err(FusionError::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha.as_f64()
            )));
        }
        check_diagonal_spd("n_static_speed", &self.n_static_speed)?;
        check_diagonal_spd("n_static_pose", &self.n_static_pose)?;
        Ok(())
    }
}

fn check_diagonal_spd<R: Real, const M: usize>(
    name: &str,
    n: &SMatrix<R, M, M>,
) -> Result<(), FusionError> {
    for i in 0..M {
        for j in 0..M {
            let v = n[(i, j)];
            if i == j {
                if !(v > R::zero() && v.is_finite()) {
                    return Err(FusionError::InvalidConfig(format!(
                        "{name} diagonal entry {i} must be finite and > 0, got {}",
                        v.as_f64()
                    )));
                }
            } else if v != R::zero() {
                return Err(FusionError::InvalidConfig(format!(
                    "{name} must be diagonal; entry ({i}, {j}) is {}",
                    v.as_f64()
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mechanization and propagation
// ---------------------------------------------------------------------------

/// One strapdown integration step over `dt` seconds.
///
/// Attitude advances by the exact exponential of the bias-corrected rate;
/// the velocity update rotates the specific force with the pre-update
/// attitude, and the position update uses the post-update velocity.
pub fn mechanize<R: Real>(
    state: &NavState<R>,
    imu: &ImuSample<R>,
    dt: R,
) -> Result<NavState<R>, FusionError> {
    let dtf = dt.as_f64();
    if !(dtf > 0.0 && dtf <= MAX_IMU_DT) {
        return Err(FusionError::DtOutOfRange { dt: dtf });
    }
    let rate = imu.angular_rate - state.bias_gyro;
    let force = imu.specific_force - state.bias_accel;
    let r_prev = state.rotation();
    let attitude = UnitQuaternion::new_normalize(
        (state.attitude * quat_increment(&rate, dt)).into_inner(),
    );
    let velocity = state.velocity + (r_prev * force + gravity()) * dt;
    let position = state.position + velocity * dt;
    Ok(NavState {
        attitude,
        velocity,
        position,
        bias_accel: state.bias_accel,
        bias_gyro: state.bias_gyro,
        time: state.time + dt,
    })
}

fn set_block<R: Real>(m: &mut Matrix15<R>, row: usize, col: usize, block: &Matrix3<R>) {
    m.fixed_view_mut::<3, 3>(row, col).copy_from(block);
}

/// The 15×15 linearized error transition over `dt`, evaluated at the
/// pre-update state.
pub fn transition_matrix<R: Real>(
    state: &NavState<R>,
    imu: &ImuSample<R>,
    dt: R,
) -> Matrix15<R> {
    let r = state.rotation().into_inner();
    let force = imu.specific_force - state.bias_accel;
    let rate = imu.angular_rate - state.bias_gyro;
    let eye = Matrix3::identity();

    let mut f = Matrix15::identity();
    set_block(&mut f, POS, VEL, &(eye * dt));
    set_block(&mut f, VEL, ATT, &(-(r * skew(&force)) * dt));
    set_block(&mut f, VEL, BF, &(-r * dt));
    set_block(
        &mut f,
        ATT,
        ATT,
        &Rotation3::new(-(rate * dt)).matrix().transpose(),
    );
    set_block(&mut f, ATT, BW, &(-eye * dt));
    f
}

/// Discrete process noise over `dt`: velocity and attitude blocks scale
/// with dt², the bias random walks with dt, and position receives none.
pub fn process_noise<R: Real>(noise: &NoiseConfig<R>, dt: R) -> Matrix15<R> {
    let dt2 = dt * dt;
    let mut q = Matrix15::zeros();
    set_block(&mut q, VEL, VEL, &(Matrix3::identity() * (noise.sigma_f * noise.sigma_f * dt2)));
    set_block(&mut q, ATT, ATT, &(Matrix3::identity() * (noise.sigma_w * noise.sigma_w * dt2)));
    set_block(&mut q, BF, BF, &(Matrix3::identity() * (noise.sigma_bf * noise.sigma_bf * dt)));
    set_block(&mut q, BW, BW, &(Matrix3::identity() * (noise.sigma_bw * noise.sigma_bw * dt)));
    q
}

/// Covariance propagation `P ← F P Fᵀ + Q`, symmetrized. The error mean is
/// untouched (zero under the closed-loop convention). `dt` must be > 0.
pub fn propagate<R: Real>(
    err: &ErrorState<R>,
    state: &NavState<R>,
    imu: &ImuSample<R>,
    noise: &NoiseConfig<R>,
    dt: R,
) -> ErrorState<R> {
    debug_assert!(dt > R::zero(), "propagate needs dt > 0");
    let f = transition_matrix(state, imu, dt);
    let p = f * err.covariance * f.transpose() + process_noise(noise, dt);
    ErrorState {
        covariance: (p + p.transpose()) * R::c(0.5),
        ..err.clone()
    }
}

// ---------------------------------------------------------------------------
// Measurements
// ---------------------------------------------------------------------------

/// Odometer speed projected onto the navigation frame from heading ψ
/// (clockwise from north) and pitch θ:
/// `(sin ψ cos θ, cos ψ cos θ, sin θ) · v`.
pub fn project_odo_velocity<R: Real>(odo: &OdoSample<R>, heading: R, pitch: R) -> Vector3<R> {
    let v = odo.speed;
    Vector3::new(
        heading.sin() * pitch.cos() * v,
        heading.cos() * pitch.cos() * v,
        pitch.sin() * v,
    )
}

/// Heading (clockwise from north) and pitch of the body forward axis
/// `R·e_x`. Identity attitude points east: ψ = π/2, θ = 0.
pub fn heading_pitch<R: Real>(attitude: &UnitQuaternion<R>) -> (R, R) {
    let fwd = attitude * Vector3::x();
    let heading = fwd.x.atan2(fwd.y);
    let pitch = fwd.z.clamp(-R::one(), R::one()).asin();
    (heading, pitch)
}

/// Stacked pose innovation: position difference and the log-map of
/// `R̂ · R_stateᵀ` (left attitude error). Errors out when the attitude
/// innovation exceeds [`MAX_ATTITUDE_INNOVATION_DEG`].
pub fn pose_innovation<R: Real>(
    state: &NavState<R>,
    corrected: &Pose<R>,
) -> Result<Vector6<R>, FusionError> {
    let dp = corrected.translation - state.position;
    let dth = (corrected.rotation * state.rotation().inverse()).scaled_axis();
    let angle_deg = dth.norm().as_f64().to_degrees();
    if angle_deg > MAX_ATTITUDE_INNOVATION_DEG {
        return Err(FusionError::AttitudeInnovationTooLarge { angle_deg });
    }
    Ok(Vector6::new(dp.x, dp.y, dp.z, dth.x, dth.y, dth.z))
}

/// Joseph-form update with chi-square gating. Returns the error-mean
/// increment `K z` and the posterior covariance
/// `(I − K H) P (I − K H)ᵀ + K N Kᵀ`, symmetrized.
fn kalman_update<R: Real, const M: usize>(
    p: &Matrix15<R>,
    h: &SMatrix<R, M, 15>,
    n: &SMatrix<R, M, M>,
    z: &SVector<R, M>,
    gate: f64,
) -> Result<(Vector15<R>, Matrix15<R>), FusionError> {
    let s = h * p * h.transpose() + n;
    let chol = s.cholesky().ok_or(FusionError::InnovationNotSpd)?;
    let mahalanobis_sq = (z.transpose() * chol.solve(z))[(0, 0)].as_f64();
    if mahalanobis_sq > gate {
        return Err(FusionError::InnovationGateExceeded {
            mahalanobis_sq,
            gate,
        });
    }
    let k = p * h.transpose() * chol.inverse();
    let dx = k * z;
    let ikh = Matrix15::identity() - k * h;
    let p_new = ikh * p * ikh.transpose() + k * n * k.transpose();
    Ok((dx, (p_new + p_new.transpose()) * R::c(0.5)))
}

fn speed_h<R: Real>() -> SMatrix<R, 3, 15> {
    let mut h: SMatrix<R, 3, 15> = SMatrix::zeros();
    h.fixed_view_mut::<3, 3>(0, VEL).copy_from(&Matrix3::identity());
    h
}

fn pose_h<R: Real>() -> SMatrix<R, 6, 15> {
    let mut h: SMatrix<R, 6, 15> = SMatrix::zeros();
    h.fixed_view_mut::<3, 3>(0, POS).copy_from(&Matrix3::identity());
    h.fixed_view_mut::<3, 3>(3, ATT).copy_from(&Matrix3::identity());
    h
}

/// Odometer-speed update. The innovation is the projected odometer
/// velocity minus the state velocity — the full 3-vector, so the lateral
/// and vertical components act as nonholonomic pseudo-measurements. The
/// accepted update is injected and reset before returning.
pub fn update_speed<R: Real>(
    err: &ErrorState<R>,
    state: &NavState<R>,
    odo: &OdoSample<R>,
    noise: &NoiseConfig<R>,
) -> Result<(ErrorState<R>, NavState<R>), FusionError> {
    let (heading, pitch) = heading_pitch(&state.attitude);
    let z = project_odo_velocity(odo, heading, pitch) - state.velocity;
    let (dx, p) = kalman_update(
        &err.covariance,
        &speed_h(),
        &noise.n_static_speed,
        &z,
        CHI2_GATE_3DOF,
    )?;
    Ok(reset_errors(&ErrorState::from_mean(dx, p), state))
}

/// Pose update from a gated registration result. `tuned_n` is the
/// measurement covariance actually applied (see [`dynamic_tune`]); the
/// static `noise` parameter is kept for signature parity and validation
/// context but not read here. Injected and reset before returning.
pub fn update_pose<R: Real>(
    err: &ErrorState<R>,
    state: &NavState<R>,
    corrected: &Pose<R>,
    _noise: &NoiseConfig<R>,
    tuned_n: &Matrix6<R>,
) -> Result<(ErrorState<R>, NavState<R>), FusionError> {
    let z = pose_innovation(state, corrected)?;
    let (dx, p) = kalman_update(&err.covariance, &pose_h(), tuned_n, &z, CHI2_GATE_6DOF)?;
    Ok(reset_errors(&ErrorState::from_mean(dx, p), state))
}

/// Innovation-driven measurement-noise inflation:
/// `N_static · diag(exp(α |Δᵢ|))`. Symmetric for diagonal `N_static`.
pub fn dynamic_tune<R: Real>(
    n_static: &Matrix6<R>,
    innovation: &Vector6<R>,
    alpha: R,
) -> Matrix6<R> {
    let lambda = Vector6::from_fn(|i, _| (alpha * innovation[i].abs()).exp());
    n_static * Matrix6::from_diagonal(&lambda)
}

/// Closed-loop reset: injects the error mean into the nominal state
/// (attitude by left quaternion multiplication) and zeroes the mean. The
/// covariance is kept as-is (first-order reset).
pub fn reset_errors<R: Real>(
    err: &ErrorState<R>,
    state: &NavState<R>,
) -> (ErrorState<R>, NavState<R>) {
    let corrected = NavState {
        attitude: UnitQuaternion::new_normalize(
            (UnitQuaternion::from_scaled_axis(err.delta_attitude) * state.attitude).into_inner(),
        ),
        velocity: state.velocity + err.delta_velocity,
        position: state.position + err.delta_position,
        bias_accel: state.bias_accel + err.delta_bias_accel,
        bias_gyro: state.bias_gyro + err.delta_bias_gyro,
        time: state.time,
    };
    (ErrorState::new(err.covariance), corrected)
}

// ---------------------------------------------------------------------------
// Session orchestration
// ---------------------------------------------------------------------------

/// Inputs of one fusion epoch: all IMU samples since the previous epoch
/// (timestamps strictly increasing, past the current state time) and at
/// most one odometer sample.
#[derive(Debug, Clone, Copy)]
pub struct EpochInputs<'a, R: Real> {
    pub imu: &'a [ImuSample<R>],
    pub odo: Option<OdoSample<R>>,
}

/// How a measurement fared within a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateDisposition {
    Applied,
    NoMeasurement,
    GateRejected { mahalanobis_sq: f64, gate: f64 },
    AttitudeTooLarge { angle_deg: f64 },
}

impl UpdateDisposition {
    pub fn is_applied(&self) -> bool {
        matches!(self, UpdateDisposition::Applied)
    }
}

/// Posterior state of a step plus the fate of each measurement.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome<R: Real> {
    pub state: NavState<R>,
    pub speed: UpdateDisposition,
    pub pose: UpdateDisposition,
    /// Pose innovation used for dynamic tuning, when a registration was
    /// offered and its attitude innovation was admissible.
    pub pose_innovation: Option<Vector6<R>>,
}

/// Sequential owner of the filter state. Epochs must be fed in timestamp
/// order; each [`step`](Self::step) is deterministic in its inputs and the
/// processing order within an epoch is fixed: IMU integration, speed
/// update, registration with the speed posterior as prior, pose update.
#[derive(Debug, Clone)]
pub struct FusionSession<R: Real> {
    state: NavState<R>,
    err: ErrorState<R>,
    noise: NoiseConfig<R>,
}

impl<R: Real> FusionSession<R> {
    pub fn new(
        initial: NavState<R>,
        initial_covariance: Matrix15<R>,
        noise: NoiseConfig<R>,
    ) -> Result<Self, FusionError> {
        noise.validate()?;
        Ok(Self {
            state: initial,
            err: ErrorState::new(initial_covariance),
            noise,
        })
    }

    pub fn state(&self) -> &NavState<R> {
        &self.state
    }

    pub fn error_state(&self) -> &ErrorState<R> {
        &self.err
    }

    pub fn noise(&self) -> &NoiseConfig<R> {
        &self.noise
    }

    /// Processes one epoch. `vmr` receives the speed-update posterior and
    /// returns the map-registered (corrected) pose, or `None` when no
    /// frame is available or registration was rejected upstream.
    ///
    /// Gate rejections are reported in the outcome, not as errors; only
    /// structural failures (bad dt, non-SPD innovation) abort the step.
    pub fn step<V>(
        &mut self,
        inputs: &EpochInputs<'_, R>,
        vmr: V,
    ) -> Result<StepOutcome<R>, FusionError>
    where
        V: FnOnce(&NavState<R>) -> Option<Pose<R>>,
    {
        for sample in inputs.imu {
            let dt = sample.time - self.state.time;
            let next = mechanize(&self.state, sample, dt)?;
            self.err = propagate(&self.err, &self.state, sample, &self.noise, dt);
            self.state = next;
        }

        let speed = match &inputs.odo {
            None => UpdateDisposition::NoMeasurement,
            Some(odo) => match update_speed(&self.err, &self.state, odo, &self.noise) {
                Ok((e, s)) => {
                    self.err = e;
                    self.state = s;
                    UpdateDisposition::Applied
                }
                Err(FusionError::InnovationGateExceeded {
                    mahalanobis_sq,
                    gate,
                }) => UpdateDisposition::GateRejected {
                    mahalanobis_sq,
                    gate,
                },
                Err(e) => return Err(e),
            },
        };

        let mut innovation = None;
        let pose = match vmr(&self.state) {
            None => UpdateDisposition::NoMeasurement,
            Some(corrected) => match pose_innovation(&self.state, &corrected) {
                Err(FusionError::AttitudeInnovationTooLarge { angle_deg }) => {
                    UpdateDisposition::AttitudeTooLarge { angle_deg }
                }
                Err(e) => return Err(e),
                Ok(z) => {
                    innovation = Some(z);
                    let tuned = dynamic_tune(&self.noise.n_static_pose, &z, self.noise.alpha);
                    match update_pose(&self.err, &self.state, &corrected, &self.noise, &tuned) {
                        Ok((e, s)) => {
                            self.err = e;
                            self.state = s;
                            UpdateDisposition::Applied
                        }
                        Err(FusionError::InnovationGateExceeded {
                            mahalanobis_sq,
                            gate,
                        }) => UpdateDisposition::GateRejected {
                            mahalanobis_sq,
                            gate,
                        },
                        Err(e) => return Err(e),
                    }
                }
            },
        };

        Ok(StepOutcome {
            state: self.state,
            speed,
            pose,
            pose_innovation: innovation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    const G: f64 = 9.80665;

    fn level_static_imu(time: f64) -> ImuSample<f64> {
        ImuSample {
            time,
            specific_force: Vector3::new(0.0, 0.0, G),
            angular_rate: Vector3::zeros(),
        }
    }

    fn rest_state() -> NavState<f64> {
        NavState::at_rest(Vector3::zeros(), UnitQuaternion::identity(), 0.0)
    }

    fn random_unit_quaternion(rng: &mut StdRng) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(Vector3::new(
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ))
    }

    fn random_spd_15(rng: &mut StdRng, scale: f64) -> Matrix15<f64> {
        let a = Matrix15::from_fn(|_, _| rng.random_range(-1.0..1.0) * scale);
        a * a.transpose() + Matrix15::identity() * (0.01 * scale * scale)
    }

    // ---- gate constants ----

    #[test]
    fn six_dof_gate_matches_the_closed_form_cdf() {
        // For 6 degrees of freedom the chi-square CDF is
        // 1 − e^{−x/2}(1 + x/2 + x²/8); the gate must sit at 0.999.
        let x = CHI2_GATE_6DOF;
        let cdf = 1.0 - (-x / 2.0).exp() * (1.0 + x / 2.0 + x * x / 8.0);
        assert_relative_eq!(cdf, 0.999, epsilon = 1e-12);
    }

    #[test]
    fn three_dof_gate_matches_the_closed_form_cdf() {
        // CDF(x; 3) = erf(√(x/2)) − √(2/π)·√x·e^{−x/2}, with erf evaluated
        // by Simpson integration of its defining integral.
        let x = CHI2_GATE_3DOF;
        let t = (x / 2.0).sqrt();
        let n = 200_000;
        let hstep = t / n as f64;
        let f = |s: f64| (-s * s).exp();
        let mut integral = f(0.0) + f(t);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += w * f(i as f64 * hstep);
        }
        integral *= hstep / 3.0;
        let erf = 2.0 / std::f64::consts::PI.sqrt() * integral;
        let cdf = erf - (2.0 / std::f64::consts::PI).sqrt() * x.sqrt() * (-x / 2.0).exp();
        assert_relative_eq!(cdf, 0.999, epsilon = 1e-10);
    }

    // ---- mechanize ----

    #[test]
    fn gravity_cancellation_leaves_the_state_still() {
        let s0 = rest_state();
        let s1 = mechanize(&s0, &level_static_imu(0.01), 0.01).unwrap();
        assert_eq!(s1.position, Vector3::zeros());
        assert_eq!(s1.velocity, Vector3::zeros());
        assert_relative_eq!(s1.attitude.angle(), 0.0, epsilon = 1e-15);
        assert_eq!(s1.time, 0.01);
    }

    #[test]
    fn discrete_double_integration_of_a_unit_forward_force() {
        let mut s = rest_state();
        for k in 0..100 {
            let imu = ImuSample {
                time: (k + 1) as f64 * 0.01,
                specific_force: Vector3::new(1.0, 0.0, G),
                angular_rate: Vector3::zeros(),
            };
            s = mechanize(&s, &imu, 0.01).unwrap();
        }
        // v advances before p each step: p = Σ k·dt²·a = 0.505 m.
        assert_relative_eq!(s.velocity.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.position.x, 0.505, epsilon = 1e-12);
        assert_relative_eq!(s.velocity.yz().norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pure_yaw_rate_advances_heading_only() {
        let mut s = rest_state();
        for k in 0..1000 {
            let imu = ImuSample {
                time: (k + 1) as f64 * 0.01,
                specific_force: Vector3::new(0.0, 0.0, G),
                angular_rate: Vector3::new(0.0, 0.0, 0.1),
            };
            s = mechanize(&s, &imu, 0.01).unwrap();
        }
        assert_relative_eq!(s.attitude.angle(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(s.attitude.axis().unwrap().into_inner().z, 1.0, epsilon = 1e-9);
        assert!(s.position.norm() < 1e-9);
        assert!(s.velocity.norm() < 1e-9);
    }

    #[test]
    fn out_of_range_dt_is_rejected() {
        let s = rest_state();
        let imu = level_static_imu(1.0);
        for dt in [0.0, -0.01, 0.1000001, f64::NAN] {
            assert!(matches!(
                mechanize(&s, &imu, dt),
                Err(FusionError::DtOutOfRange { .. })
            ));
        }
        assert!(mechanize(&s, &imu, 0.1).is_ok());
    }

    #[test]
    fn biases_are_subtracted_before_integration() {
        let mut s = rest_state();
        s.bias_accel = Vector3::new(0.1, 0.0, 0.0);
        s.bias_gyro = Vector3::new(0.0, 0.0, 0.02);
        let imu = ImuSample {
            time: 0.01,
            specific_force: Vector3::new(0.1, 0.0, G),
            angular_rate: Vector3::new(0.0, 0.0, 0.02),
        };
        let s1 = mechanize(&s, &imu, 0.01).unwrap();
        assert_relative_eq!(s1.velocity.norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(s1.attitude.angle(), 0.0, epsilon = 1e-15);
    }

    // ---- propagate ----

    #[test]
    fn vanishing_dt_leaves_the_covariance_essentially_unchanged() {
        let p0 = Matrix15::identity();
        let err = ErrorState::new(p0);
        // Zero process noise isolates the F P Fᵀ part.
        let noise = NoiseConfig {
            sigma_f: 1e-300,
            sigma_w: 1e-300,
            sigma_bf: 1e-300,
            sigma_bw: 1e-300,
            ..NoiseConfig::default()
        };
        let out = propagate(&err, &rest_state(), &level_static_imu(0.0), &noise, 1e-12);
        let rel = (out.covariance - p0).amax() / p0.amax();
        // F − I carries O(dt) entries, so the relative drift is O(dt·‖f‖),
        // around 1e-11 here; it cannot reach the 1e-15 floor in f64.
        assert!(rel < 1e-10, "relative change {rel}");
    }

    #[test]
    fn one_step_covariance_equals_the_hand_assembled_f_f_transpose() {
        let err = ErrorState::new(Matrix15::identity());
        let noise = NoiseConfig {
            sigma_f: 1e-300,
            sigma_w: 1e-300,
            sigma_bf: 1e-300,
            sigma_bw: 1e-300,
            ..NoiseConfig::default()
        };
        let dt = 0.01;
        let state = rest_state();
        let out = propagate(&err, &state, &level_static_imu(dt), &noise, dt);

        // Independent dense assembly: for the level static case R = I,
        // f − b_f = (0,0,G), ω − b_ω = 0.
        let mut f = Matrix15::<f64>::identity();
        for i in 0..3 {
            f[(POS + i, VEL + i)] = dt; // position–velocity coupling
            f[(VEL + i, BF + i)] = -dt; // velocity–accel-bias, R = I
            f[(ATT + i, BW + i)] = -dt; // attitude–gyro-bias
        }
        // −I·skew((0,0,G))·dt on the velocity–attitude block.
        f[(VEL, ATT + 1)] = G * dt;
        f[(VEL + 1, ATT)] = -G * dt;
        let oracle = f * f.transpose();
        assert_relative_eq!(out.covariance, oracle, epsilon = 1e-14);
    }

    #[test]
    fn symmetry_and_psd_survive_ten_thousand_random_steps() {
        let mut rng = StdRng::seed_from_u64(120);
        let mut err = ErrorState::new(Matrix15::identity() * 0.01);
        let mut state = rest_state();
        let noise = NoiseConfig::default();
        let normal = StandardNormal;
        for k in 0..10_000 {
            let imu = ImuSample {
                time: (k + 1) as f64 * 0.01,
                specific_force: Vector3::new(
                    <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                    <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                    G + <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                ),
                angular_rate: Vector3::new(
                    0.2 * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                    0.2 * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                    0.2 * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                ),
            };
            err = propagate(&err, &state, &imu, &noise, 0.01);
            state = mechanize(&state, &imu, 0.01).unwrap();
            if k % 500 == 0 {
                assert!(err.covariance_healthy(), "unhealthy covariance at step {k}");
            }
        }
        assert!(err.covariance_healthy());
    }

    // ---- odometer projection ----

    #[test]
    fn north_and_east_projections_are_exact() {
        let odo = OdoSample { time: 0.0, speed: 10.0 };
        assert_relative_eq!(
            project_odo_velocity(&odo, 0.0, 0.0),
            Vector3::new(0.0, 10.0, 0.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            project_odo_velocity(&odo, std::f64::consts::FRAC_PI_2, 0.0),
            Vector3::new(10.0, 0.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn projection_preserves_the_speed_norm() {
        let mut rng = StdRng::seed_from_u64(121);
        for _ in 0..200 {
            let odo: OdoSample<f64> = OdoSample {
                time: 0.0,
                speed: rng.random_range(-30.0..30.0),
            };
            let psi = rng.random_range(-6.0..6.0);
            let theta = rng.random_range(-1.5..1.5);
            let v = project_odo_velocity(&odo, psi, theta);
            assert_relative_eq!(v.norm(), odo.speed.abs(), epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_through_heading_pitch_matches_the_forward_axis() {
        // For any attitude, projecting the speed through (ψ, θ) of the
        // forward axis reproduces velocity = R·(v, 0, 0) exactly; this is
        // what makes a consistent state a zero-innovation fixed point.
        let mut rng = StdRng::seed_from_u64(122);
        for _ in 0..200 {
            let q = random_unit_quaternion(&mut rng);
            let speed = rng.random_range(0.0..20.0);
            let odo = OdoSample { time: 0.0, speed };
            let (psi, theta) = heading_pitch(&q);
            let projected = project_odo_velocity(&odo, psi, theta);
            let body_forward = q * Vector3::new(speed, 0.0, 0.0);
            assert_relative_eq!(projected, body_forward, epsilon = 1e-9);
        }
    }

    // ---- update_speed ----

    #[test]
    fn consistent_odometer_is_a_fixed_point_and_contracts_p() {
        let mut rng = StdRng::seed_from_u64(123);
        let q = random_unit_quaternion(&mut rng);
        let speed = 7.0;
        let state = NavState {
            attitude: q,
            velocity: q * Vector3::new(speed, 0.0, 0.0),
            position: Vector3::new(3.0, -2.0, 0.5),
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            time: 1.0,
        };
        let err = ErrorState::new(Matrix15::identity() * 0.25);
        let noise = NoiseConfig::default();
        let odo = OdoSample { time: 1.0, speed };
        let (e1, s1) = update_speed(&err, &state, &odo, &noise).unwrap();
        assert_relative_eq!(s1.position, state.position, epsilon = 1e-9);
        assert_relative_eq!(s1.velocity, state.velocity, epsilon = 1e-9);
        assert_relative_eq!(s1.attitude.angle_to(&state.attitude), 0.0, epsilon = 1e-9);
        assert!(e1.covariance.trace() <= err.covariance.trace() + 1e-12);
        assert!(e1.mean() == Vector15::zeros());
    }

    #[test]
    fn identity_covariances_give_the_half_gain() {
        // P = I, N = I ⇒ S = 2I and the velocity-row gain is exactly 0.5.
        let state = NavState {
            attitude: UnitQuaternion::identity(),
            // Forward axis of the identity attitude points east (+x);
            // shifting the state velocity 1 m/s short of the odometer
            // projection makes the innovation exactly (1, 0, 0).
            velocity: Vector3::new(4.0, 0.0, 0.0),
            position: Vector3::new(1.0, 2.0, 3.0),
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            time: 0.0,
        };
        let err = ErrorState::new(Matrix15::identity());
        let noise = NoiseConfig {
            n_static_speed: Matrix3::identity(),
            ..NoiseConfig::default()
        };
        let odo = OdoSample { time: 0.0, speed: 5.0 };
        let (e1, s1) = update_speed(&err, &state, &odo, &noise).unwrap();
        assert_relative_eq!(s1.velocity, Vector3::new(4.5, 0.0, 0.0), epsilon = 1e-12);
        // Diagonal prior: nothing but the velocity block may move.
        assert_relative_eq!(s1.position, state.position, epsilon = 1e-15);
        assert_relative_eq!(e1.covariance[(VEL, VEL)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(e1.covariance[(POS, POS)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uninformative_measurement_changes_nothing() {
        let mut rng = StdRng::seed_from_u64(124);
        let q = random_unit_quaternion(&mut rng);
        let state = NavState {
            attitude: q,
            velocity: Vector3::new(1.0, 2.0, 0.0),
            position: Vector3::zeros(),
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            time: 0.0,
        };
        let err = ErrorState::new(Matrix15::identity());
        let noise = NoiseConfig {
            n_static_speed: Matrix3::identity() * 1e12,
            ..NoiseConfig::default()
        };
        let odo = OdoSample { time: 0.0, speed: 3.0 };
        let (_, s1) = update_speed(&err, &state, &odo, &noise).unwrap();
        assert_relative_eq!(s1.velocity, state.velocity, epsilon = 1e-9);
        assert_relative_eq!(s1.position, state.position, epsilon = 1e-9);
    }

    #[test]
    fn wild_innovation_trips_the_speed_gate() {
        let state = rest_state(); // forward = east, so projection is (v, 0, 0)
        let err = ErrorState::new(Matrix15::identity() * 0.01);
        let noise = NoiseConfig::default(); // N = 0.01·I ⇒ S = 0.02·I
        let odo = OdoSample { time: 0.0, speed: 10.0 };
        match update_speed(&err, &state, &odo, &noise).unwrap_err() {
            FusionError::InnovationGateExceeded { mahalanobis_sq, gate } => {
                assert!(mahalanobis_sq > gate);
                assert_relative_eq!(gate, CHI2_GATE_3DOF);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    // ---- update_pose ----

    #[test]
    fn matching_pose_is_a_fixed_point() {
        let mut rng = StdRng::seed_from_u64(125);
        let q = random_unit_quaternion(&mut rng);
        let state = NavState {
            attitude: q,
            velocity: Vector3::new(1.0, 0.0, 0.0),
            position: Vector3::new(5.0, -1.0, 0.2),
            bias_accel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            time: 2.0,
        };
        let err = ErrorState::new(Matrix15::identity() * 0.1);
        let noise = NoiseConfig::default();
        let (_, s1) =
            update_pose(&err, &state, &state.pose(), &noise, &noise.n_static_pose).unwrap();
        assert_relative_eq!(s1.position, state.position, epsilon = 1e-9);
        assert_relative_eq!(s1.attitude.angle_to(&state.attitude), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn unit_position_offset_with_identity_covariances_moves_half_way() {
        let state = rest_state();
        let err = ErrorState::new(Matrix15::identity());
        let noise = NoiseConfig::default();
        let corrected = Pose::new(
            Rotation3::identity(),
            state.position + Vector3::new(1.0, 0.0, 0.0),
        );
        let (_, s1) =
            update_pose(&err, &state, &corrected, &noise, &Matrix6::identity()).unwrap();
        assert_relative_eq!(s1.position, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(s1.attitude.angle(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn yaw_only_innovation_moves_attitude_but_not_position() {
        let state = rest_state();
        let err = ErrorState::new(Matrix15::identity());
        let noise = NoiseConfig::default();
        let yaw = 2.0f64.to_radians();
        let corrected = Pose::new(Rotation3::from_euler_angles(0.0, 0.0, yaw), state.position);
        let (_, s1) =
            update_pose(&err, &state, &corrected, &noise, &Matrix6::identity()).unwrap();
        // Diagonal P and N: position rows see a zero innovation block.
        assert_relative_eq!(s1.position, state.position, epsilon = 1e-15);
        let expected = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, yaw / 2.0));
        assert_relative_eq!(s1.attitude.angle_to(&expected), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn oversized_attitude_innovation_is_invalid() {
        let state = rest_state();
        let err = ErrorState::new(Matrix15::identity());
        let noise = NoiseConfig::default();
        let corrected = Pose::new(
            Rotation3::from_euler_angles(0.0, 0.0, 40.0f64.to_radians()),
            state.position,
        );
        match update_pose(&err, &state, &corrected, &noise, &noise.n_static_pose).unwrap_err() {
            FusionError::AttitudeInnovationTooLarge { angle_deg } => {
                assert_relative_eq!(angle_deg, 40.0, epsilon = 1e-9);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn pose_gate_uses_six_degrees_of_freedom() {
        let state = rest_state();
        let err = ErrorState::new(Matrix15::identity() * 1e-4);
        let noise = NoiseConfig::default();
        let corrected = Pose::new(Rotation3::identity(), Vector3::new(5.0, 0.0, 0.0));
        match update_pose(&err, &state, &corrected, &noise, &noise.n_static_pose).unwrap_err() {
            FusionError::InnovationGateExceeded { gate, .. } => {
                assert_relative_eq!(gate, CHI2_GATE_6DOF);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    // ---- Joseph form ----

    #[test]
    fn joseph_update_matches_a_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(126);
        for _ in 0..50 {
            let p = random_spd_15(&mut rng, 0.5);
            let n = Matrix6::from_diagonal(&Vector6::from_fn(|_, _| rng.random_range(0.1..2.0)));
            let z = Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05));
            let h = pose_h::<f64>();
            let (dx, p_new) = kalman_update(&p, &h, &n, &z, f64::INFINITY).unwrap();

            // Oracle takes the plain-inverse route.
            let s = h * p * h.transpose() + n;
            let k = p * h.transpose() * s.try_inverse().unwrap();
            let ikh = Matrix15::<f64>::identity() - k * h;
            let oracle_p = ikh * p * ikh.transpose() + k * n * k.transpose();
            let oracle_dx = k * z;
            assert_relative_eq!(dx, oracle_dx, epsilon = 1e-10, max_relative = 1e-10);
            assert_relative_eq!(p_new, oracle_p, epsilon = 1e-10, max_relative = 1e-9);
            // The measured sub-blocks must not gain trace.
            let pos_trace = |m: &Matrix15<f64>| {
                m.fixed_view::<3, 3>(POS, POS).trace() + m.fixed_view::<3, 3>(ATT, ATT).trace()
            };
            assert!(pos_trace(&p_new) <= pos_trace(&p) + 1e-12);
        }
    }

    // ---- dynamic_tune ----

    #[test]
    fn zero_innovation_keeps_the_static_noise() {
        let n = NoiseConfig::<f64>::default().n_static_pose;
        let tuned = dynamic_tune(&n, &Vector6::zeros(), 0.5);
        assert_eq!(tuned, n);
    }

    #[test]
    fn log_two_innovation_doubles_exactly_one_entry() {
        let n = Matrix6::from_diagonal(&Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0));
        let innovation = Vector6::new(2.0f64.ln(), 0.0, 0.0, 0.0, 0.0, 0.0);
        let tuned = dynamic_tune(&n, &innovation, 1.0);
        assert_relative_eq!(tuned[(0, 0)], 2.0, epsilon = 1e-12);
        for i in 1..6 {
            assert_relative_eq!(tuned[(i, i)], n[(i, i)], epsilon = 1e-15);
        }
    }

    #[test]
    fn inflation_is_monotone_in_the_innovation_magnitude() {
        let mut rng = StdRng::seed_from_u64(127);
        let n = NoiseConfig::<f64>::default().n_static_pose;
        for _ in 0..200 {
            let idx = rng.random_range(0..6);
            let small = rng.random_range(0.0..2.0);
            let large = small + rng.random_range(0.0..3.0);
            let mut z_small = Vector6::zeros();
            let mut z_large = Vector6::zeros();
            z_small[idx] = small * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            z_large[idx] = large * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let a = dynamic_tune(&n, &z_small, 0.7)[(idx, idx)];
            let b = dynamic_tune(&n, &z_large, 0.7)[(idx, idx)];
            assert!(b >= a);
        }
    }

    // ---- reset_errors ----

    #[test]
    fn zero_mean_reset_is_the_identity_on_the_state() {
        let state = rest_state();
        let err = ErrorState::new(Matrix15::identity());
        let (e1, s1) = reset_errors(&err, &state);
        assert_eq!(s1.position, state.position);
        assert_eq!(s1.velocity, state.velocity);
        assert_relative_eq!(s1.attitude.angle_to(&state.attitude), 0.0, epsilon = 1e-15);
        assert_eq!(e1.covariance, err.covariance);
    }

    #[test]
    fn position_error_injects_exactly() {
        let state = rest_state();
        let mut err = ErrorState::new(Matrix15::identity());
        err.delta_position = Vector3::new(1.0, 0.0, 0.0);
        let (e1, s1) = reset_errors(&err, &state);
        assert_eq!(s1.position, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(s1.velocity, state.velocity);
        assert_eq!(e1.mean(), Vector15::zeros());
    }

    #[test]
    fn injected_attitude_error_nulls_the_recomputed_innovation() {
        let mut rng = StdRng::seed_from_u64(128);
        let q = random_unit_quaternion(&mut rng);
        let state = NavState::at_rest(Vector3::new(1.0, 2.0, 0.0), q, 0.0);
        let dth = Vector3::new(0.01, -0.02, 0.015);
        let dp = Vector3::new(0.3, -0.1, 0.05);
        let corrected = Pose::new(
            Rotation3::new(dth) * state.rotation(),
            state.position + dp,
        );
        let mut err = ErrorState::new(Matrix15::identity());
        err.delta_position = dp;
        err.delta_attitude = dth;
        let (_, injected) = reset_errors(&err, &state);
        let z = pose_innovation(&injected, &corrected).unwrap();
        assert!(z.norm() < 1e-6, "residual innovation {}", z.norm());
    }

    // ---- session orchestration ----

    fn drive_imu(epoch: usize, per_epoch: usize) -> Vec<ImuSample<f64>> {
        (0..per_epoch)
            .map(|i| {
                let k = epoch * per_epoch + i;
                ImuSample {
                    time: (k + 1) as f64 * 0.01,
                    specific_force: Vector3::new(0.3, 0.05, G),
                    angular_rate: Vector3::new(0.0, 0.0, 0.05),
                }
            })
            .collect()
    }

    #[test]
    fn imu_only_stream_equals_pure_mechanization() {
        let noise = NoiseConfig::default();
        let mut session =
            FusionSession::new(rest_state(), Matrix15::identity() * 0.01, noise.clone()).unwrap();
        let mut reference = rest_state();
        for epoch in 0..10 {
            let imu = drive_imu(epoch, 10);
            for s in &imu {
                let dt = s.time - reference.time;
                reference = mechanize(&reference, s, dt).unwrap();
            }
            let out = session
                .step(&EpochInputs { imu: &imu, odo: None }, |_| None)
                .unwrap();
            assert_eq!(out.speed, UpdateDisposition::NoMeasurement);
            assert_eq!(out.pose, UpdateDisposition::NoMeasurement);
        }
        assert_eq!(session.state().position, reference.position);
        assert_eq!(session.state().velocity, reference.velocity);
        assert_eq!(session.state().attitude, reference.attitude);
    }

    #[test]
    fn scripted_session_equals_a_hand_stepped_filter() {
        let noise = NoiseConfig::default();
        let p0 = Matrix15::identity() * 0.01;
        let mut session = FusionSession::new(rest_state(), p0, noise.clone()).unwrap();

        // Hand-stepped oracle applying the fixed order explicitly.
        let mut state = rest_state();
        let mut err = ErrorState::new(p0);

        for epoch in 0..3 {
            let imu = drive_imu(epoch, 5);
            let odo = Some(OdoSample {
                time: imu.last().unwrap().time,
                speed: state.velocity.norm(),
            });
            // Epoch 1 also offers a pose close to the current estimate.
            let offer_pose = epoch == 1;

            for s in &imu {
                let dt = s.time - state.time;
                err = propagate(&err, &state, s, &noise, dt);
                state = mechanize(&state, s, dt).unwrap();
            }
            if let Some(o) = &odo {
                let (e, s) = update_speed(&err, &state, o, &noise).unwrap();
                err = e;
                state = s;
            }
            let pose_meas = offer_pose.then(|| {
                Pose::new(
                    Rotation3::from_euler_angles(0.0, 0.0, 0.01) * state.rotation(),
                    state.position + Vector3::new(0.05, -0.02, 0.01),
                )
            });
            if let Some(m) = &pose_meas {
                let z = pose_innovation(&state, m).unwrap();
                let tuned = dynamic_tune(&noise.n_static_pose, &z, noise.alpha);
                let (e, s) = update_pose(&err, &state, m, &noise, &tuned).unwrap();
                err = e;
                state = s;
            }

            let out = session
                .step(&EpochInputs { imu: &imu, odo }, |prior| {
                    offer_pose.then(|| {
                        Pose::new(
                            Rotation3::from_euler_angles(0.0, 0.0, 0.01) * prior.rotation(),
                            prior.position + Vector3::new(0.05, -0.02, 0.01),
                        )
                    })
                })
                .unwrap();
            assert_eq!(out.state.position, state.position);
            assert_eq!(out.state.velocity, state.velocity);
            assert_eq!(out.state.attitude, state.attitude);
            assert_eq!(out.speed, UpdateDisposition::Applied);
            assert_eq!(
                out.pose,
                if offer_pose {
                    UpdateDisposition::Applied
                } else {
                    UpdateDisposition::NoMeasurement
                }
            );
        }
        assert_eq!(session.error_state().covariance, err.covariance);
    }

    #[test]
    fn within_epoch_arrival_order_cannot_influence_the_step() {
        // Measurements arriving in any order within an epoch end up in the
        // same EpochInputs slots, so two sessions fed from differently
        // shuffled arrival logs must agree bit for bit.
        #[derive(Clone)]
        enum Arrival {
            Odo(OdoSample<f64>),
            Frame(Pose<f64>),
        }
        let noise = NoiseConfig::default();
        let p0 = Matrix15::identity() * 0.01;
        let imu = drive_imu(0, 10);
        let odo = OdoSample { time: 0.1, speed: 0.03 };
        let frame = Pose::new(Rotation3::identity(), Vector3::new(0.01, 0.0, 0.0));
        let orders = [
            vec![Arrival::Odo(odo), Arrival::Frame(frame)],
            vec![Arrival::Frame(frame), Arrival::Odo(odo)],
        ];
        let mut finals = Vec::new();
        for order in &orders {
            let mut slot_odo = None;
            let mut slot_frame = None;
            for a in order {
                match a {
                    Arrival::Odo(o) => slot_odo = Some(*o),
                    Arrival::Frame(f) => slot_frame = Some(*f),
                }
            }
            let mut session = FusionSession::new(rest_state(), p0, noise.clone()).unwrap();
            let out = session
                .step(&EpochInputs { imu: &imu, odo: slot_odo }, |_| slot_frame)
                .unwrap();
            finals.push(out.state);
        }
        assert_eq!(finals[0].position, finals[1].position);
        assert_eq!(finals[0].velocity, finals[1].velocity);
        assert_eq!(finals[0].attitude, finals[1].attitude);
    }

    #[test]
    fn gate_rejections_are_dispositions_not_failures() {
        let noise = NoiseConfig::default();
        let mut session =
            FusionSession::new(rest_state(), Matrix15::identity() * 1e-4, noise).unwrap();
        let imu = drive_imu(0, 2);
        let out = session
            .step(
                &EpochInputs {
                    imu: &imu,
                    odo: Some(OdoSample { time: 0.02, speed: 25.0 }),
                },
                |prior| {
                    // Moderate offset: large enough to fail the gate, small
                    // enough that exp-inflation of N cannot mask it (the
                    // inflated Mahalanobis distance peaks near |z| = 2/α).
                    Some(Pose::new(
                        prior.rotation(),
                        prior.position + Vector3::new(5.0, 0.0, 0.0),
                    ))
                },
            )
            .unwrap();
        assert!(matches!(out.speed, UpdateDisposition::GateRejected { .. }));
        assert!(matches!(out.pose, UpdateDisposition::GateRejected { .. }));
        // Attitude way off: reported as invalid registration instead.
        let out2 = session
            .step(
                &EpochInputs { imu: &[], odo: None },
                |prior| {
                    Some(Pose::new(
                        Rotation3::from_euler_angles(0.0, 0.0, 1.0) * prior.rotation(),
                        prior.position,
                    ))
                },
            )
            .unwrap();
        assert!(matches!(out2.pose, UpdateDisposition::AttitudeTooLarge { .. }));
    }

    #[test]
    fn stationary_sixty_seconds_stays_inside_the_three_sigma_envelope() {
        let mut rng = StdRng::seed_from_u64(129);
        let noise = NoiseConfig::default();
        let normal = StandardNormal;
        let mut session =
            FusionSession::new(rest_state(), Matrix15::identity() * 1e-4, noise.clone()).unwrap();
        let mut t = 0.0;
        for _ in 0..600 {
            // One epoch: 10 IMU samples at 100 Hz, one odometer tick.
            let imu: Vec<ImuSample<f64>> = (0..10)
                .map(|_| {
                    t += 0.01;
                    ImuSample {
                        time: t,
                        specific_force: Vector3::new(
                            noise.sigma_f * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                            noise.sigma_f * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                            G + noise.sigma_f * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                        ),
                        angular_rate: Vector3::new(
                            noise.sigma_w * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                            noise.sigma_w * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                            noise.sigma_w * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng),
                        ),
                    }
                })
                .collect();
            let speed_noise = 0.1 * <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng);
            session
                .step(
                    &EpochInputs {
                        imu: &imu,
                        odo: Some(OdoSample { time: t, speed: speed_noise }),
                    },
                    |_| None,
                )
                .unwrap();
        }
        let p = session.error_state().covariance;
        let horizontal = session.state().position.xy().norm();
        let envelope = 3.0 * (p[(0, 0)] + p[(1, 1)]).sqrt();
        assert!(
            horizontal <= envelope,
            "drift {horizontal:.3} m exceeds 3σ envelope {envelope:.3} m"
        );
        assert!(session.error_state().covariance_healthy());
    }

    // ---- config validation ----

    #[test]
    fn invalid_noise_configurations_are_rejected() {
        let mut bad = NoiseConfig::<f64>::default();
        bad.sigma_f = 0.0;
        assert!(matches!(bad.validate(), Err(FusionError::InvalidConfig(_))));

        let mut off_diag = NoiseConfig::<f64>::default();
        off_diag.n_static_pose[(0, 1)] = 0.1;
        assert!(matches!(off_diag.validate(), Err(FusionError::InvalidConfig(_))));

        let mut neg_alpha = NoiseConfig::<f64>::default();
        neg_alpha.alpha = -0.1;
        assert!(matches!(neg_alpha.validate(), Err(FusionError::InvalidConfig(_))));

        assert!(NoiseConfig::<f64>::default().validate().is_ok());
    }

    #[test]
    fn single_precision_filter_runs() {
        let noise = NoiseConfig::<f32>::default();
        let state = NavState::at_rest(Vector3::zeros(), UnitQuaternion::identity(), 0.0f32);
        let mut session =
            FusionSession::new(state, Matrix15::<f32>::identity() * 0.01, noise).unwrap();
        let imu = [ImuSample {
            time: 0.01f32,
            specific_force: Vector3::new(0.0, 0.0, 9.80665),
            angular_rate: Vector3::zeros(),
        }];
        let out = session
            .step(
                &EpochInputs {
                    imu: &imu,
                    odo: Some(OdoSample { time: 0.01, speed: 0.0 }),
                },
                |_| None,
            )
            .unwrap();
        assert!(out.state.is_finite());
        assert!(out.speed.is_applied());
    }
}
