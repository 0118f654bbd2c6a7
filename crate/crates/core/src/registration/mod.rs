//! Cloud-to-map registration and its orchestration.
//!
//! The GICP core lives in [`gicp`]; this module adds the flows built on top
//! of it:
//!
//! * **Indoor two-stage** ([`register_indoor`]): ground-to-ground GICP
//!   constrained to the vertical components (Δz, pitch, roll), followed by a
//!   2-D registration of z-flattened surround clouds constrained to the
//!   horizontal components (Δx, Δy, yaw). The combined correction is
//!   `ΔT_h ∘ ΔT_v`.
//! * **Outdoor aggregated** ([`register_outdoor`]): query clouds are
//!   accumulated by travelled distance in an [`AggregationBuffer`]; each
//!   merged cloud is aligned full-6-DOF against the tiled map's region of
//!   interest around the current position estimate.
//!
//! Corrections compose on the left: `corrected = ΔT ∘ prior`
//! ([`apply_correction`]), with all registration performed in the
//! local-level frame ([`to_local_frame`]).

pub mod gicp;

#[cfg(test)]
mod scenes;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::cloud::{Frame, PointCloud};
use crate::cloudgen::voxel_downsample;
use crate::geom::Pose;
use crate::mapstore::{IndoorMap, MapError, TileIndex};
use crate::scalar::Real;

pub use crate::ground::{split_ground, GroundError, GroundSplit, GroundSplitConfig, PlaneFit};
pub use gicp::{
    estimate_covariances, gicp as run_gicp, gicp_prepared, planar_covariances, GicpConfig,
    GicpTarget, IterationTrace, MAX_CONDITION, MIN_CORRESPONDENCES,
};

/// Stages of the registration flows, for error attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Ground/surround split of the query cloud.
    GroundSplit,
    /// Indoor stage 1: ground registration (vertical components).
    Vertical,
    /// Indoor stage 2: flattened surround registration (horizontal components).
    Horizontal,
    /// Outdoor full-6-DOF registration.
    Full,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::GroundSplit => "ground-split",
            Stage::Vertical => "vertical",
            Stage::Horizontal => "horizontal",
            Stage::Full => "full",
        })
    }
}

/// Why a solve collapsed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DegenerateKind {
    TooFewCorrespondences { found: usize },
    IllConditioned { condition: f64 },
}

impl std::fmt::Display for DegenerateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DegenerateKind::TooFewCorrespondences { found } => write!(
                f,
                "{found} correspondences, fewer than the required {MIN_CORRESPONDENCES}"
            ),
            DegenerateKind::IllConditioned { condition } => {
                write!(f, "normal matrix condition {condition:.3e} exceeds {MAX_CONDITION:.0e}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegError {
    #[error("invalid registration configuration: {0}")]
    InvalidConfig(String),
    #[error("cloud holds {size} points; covariance estimation needs more than {k}")]
    TooFewPoints { size: usize, k: usize },
    #[error("source cloud carries no covariances")]
    MissingCovariances,
    #[error("cloud is in the {found} frame, expected {expected}")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("registration is degenerate: {0}")]
    Degenerate(DegenerateKind),
    #[error("gate rejected the registration (fitness {fitness:.3}, inlier rmse {rmse_inliers:.3} m)")]
    GateRejected { fitness: f64, rmse_inliers: f64 },
    #[error("correction decomposition hit gimbal lock")]
    DecompositionSingular,
    #[error("{stage} stage failed: {source}")]
    StageFailed {
        stage: Stage,
        #[source]
        source: Box<RegError>,
    },
    #[error("ground extraction failed: {0}")]
    Ground(#[from] GroundError),
}

/// Errors of the outdoor flow, which touches the map store.
#[derive(Debug, Error)]
pub enum OutdoorError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Registration(#[from] RegError),
}

/// Outcome of one registration solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationResult<R: Real> {
    /// Correction `ΔT`: the aligned pose of the source is `ΔT ∘ init`.
    pub delta: Pose<R>,
    /// Fraction of source points with a correspondence within
    /// `max_correspondence_dist` at the final pose.
    pub fitness: R,
    /// RMS distance of those inlier correspondences (0 when there are none).
    pub rmse_inliers: R,
    pub iterations: usize,
    pub converged: bool,
}

fn stage_failed(stage: Stage) -> impl FnOnce(RegError) -> RegError {
    move |source| RegError::StageFailed {
        stage,
        source: Box::new(source),
    }
}

/// Transforms a body-frame cloud into the local-level frame using the a
/// priori pose: `p ↦ R⁻ p + t⁻`.
pub fn to_local_frame<R: Real>(
    cloud: &PointCloud<R>,
    prior: &Pose<R>,
) -> Result<PointCloud<R>, RegError> {
    if cloud.frame != Frame::Body {
        return Err(RegError::FrameMismatch {
            expected: Frame::Body,
            found: cloud.frame,
        });
    }
    Ok(cloud.transformed(prior).with_frame(Frame::LocalLevel))
}

/// Applies a registration correction to the prior pose: `T̂ = ΔT ∘ T⁻`.
pub fn apply_correction<R: Real>(prior: &Pose<R>, delta: &Pose<R>) -> Pose<R> {
    delta.compose(prior)
}

/// Top-down projection: every z set to zero, then voxel-downsampled so
/// vertical structures collapse to single planar points.
pub fn flatten_2d<R: Real>(cloud: &PointCloud<R>, voxel: R) -> PointCloud<R> {
    let flat = PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| Vector3::new(p.x, p.y, R::zero()))
            .collect(),
        cloud.frame,
    );
    voxel_downsample(&flat, voxel)
}

// ---------------------------------------------------------------------------
// Indoor two-stage flow
// ---------------------------------------------------------------------------

/// Configuration of the indoor two-stage flow.
#[derive(Debug, Clone, PartialEq)]
pub struct IndoorConfig<R: Real> {
    pub gicp: GicpConfig<R>,
    /// Ground split applied to the query cloud (no ceiling cut by default;
    /// generated clouds are already height-cropped).
    pub ground: GroundSplitConfig<R>,
    /// Voxel size of the z-flattening projection (default 0.2 m).
    pub flatten_voxel: R,
    /// Minimum per-stage fitness; below it the stage is rejected (default 0.4).
    pub min_fitness: R,
}

impl<R: Real> Default for IndoorConfig<R> {
    fn default() -> Self {
        Self {
            gicp: GicpConfig::default(),
            ground: GroundSplitConfig::default(),
            flatten_voxel: R::c(0.2),
            min_fitness: R::c(0.4),
        }
    }
}

/// Prepared indoor registration targets: the map's ground cloud with
/// estimated covariances and its flattened surround, each with a k-d tree.
/// Prepare once per map, reuse for every epoch.
#[derive(Debug, Clone)]
pub struct IndoorTarget<R: Real> {
    ground: GicpTarget<R>,
    surround_flat: GicpTarget<R>,
}

impl<R: Real> IndoorTarget<R> {
    pub fn prepare(map: &IndoorMap<R>, cfg: &IndoorConfig<R>) -> Result<Self, RegError> {
        let ground =
            GicpTarget::prepare(&map.ground, &cfg.gicp).map_err(stage_failed(Stage::Vertical))?;
        let flat = flatten_2d(&map.surround, cfg.flatten_voxel);
        let surround_flat = GicpTarget::prepare_planar(&flat, &cfg.gicp)
            .map_err(stage_failed(Stage::Horizontal))?;
        Ok(Self {
            ground,
            surround_flat,
        })
    }
}

/// Result of the indoor two-stage flow. The stage corrections are exact
/// partial transforms: `delta_vertical` carries only (Δz, pitch, roll) and
/// `delta_horizontal` only (Δx, Δy, yaw); the other components are
/// bit-exact zeros by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndoorRegistration<R: Real> {
    /// Combined correction `ΔT = ΔT_h ∘ ΔT_v`; fitness is the minimum of
    /// the stage fitnesses, `rmse_inliers` their maximum.
    pub result: RegistrationResult<R>,
    pub delta_vertical: Pose<R>,
    pub delta_horizontal: Pose<R>,
    pub vertical: RegistrationResult<R>,
    pub horizontal: RegistrationResult<R>,
}

fn gate<R: Real>(result: &RegistrationResult<R>, min_fitness: R) -> Result<(), RegError> {
    if result.fitness < min_fitness {
        return Err(RegError::GateRejected {
            fitness: result.fitness.as_f64(),
            rmse_inliers: result.rmse_inliers.as_f64(),
        });
    }
    Ok(())
}

/// Two-stage indoor registration against a prepared target.
///
/// The query cloud must already be in the local-level frame (transformed by
/// the a priori pose); the returned correction is therefore relative to
/// identity and applies via [`apply_correction`].
pub fn register_indoor_prepared<R: Real>(
    cloud: &PointCloud<R>,
    target: &IndoorTarget<R>,
    cfg: &IndoorConfig<R>,
) -> Result<IndoorRegistration<R>, RegError> {
    if cloud.frame != Frame::LocalLevel {
        return Err(RegError::FrameMismatch {
            expected: Frame::LocalLevel,
            found: cloud.frame,
        });
    }
    let split = split_ground(cloud, &cfg.ground)
        .map_err(RegError::from)
        .map_err(stage_failed(Stage::GroundSplit))?;

    // Stage 1: ground registration, constrained to the vertical components.
    let vertical_stage = (|| {
        let src = estimate_covariances(
            &split.ground,
            cfg.gicp.k_neighbors,
            cfg.gicp.plane_regularization,
        )?;
        let res = gicp_prepared(&src, &target.ground, &Pose::identity(), &cfg.gicp, None)?;
        gate(&res, cfg.min_fitness)?;
        Ok(res)
    })()
    .map_err(stage_failed(Stage::Vertical))?;
    let (euler_v, t_v) = vertical_stage
        .delta
        .decompose()
        .map_err(|_| RegError::DecompositionSingular)
        .map_err(stage_failed(Stage::Vertical))?;
    let delta_vertical = Pose::vertical(t_v.z, euler_v.pitch, euler_v.roll);

    // Stage 2: flattened surround registration, horizontal components.
    let surround_v = split.surround.transformed(&delta_vertical);
    let horizontal_stage = (|| {
        let flat = flatten_2d(&surround_v, cfg.flatten_voxel);
        let src = planar_covariances(&flat, cfg.gicp.plane_regularization);
        let res = gicp_prepared(&src, &target.surround_flat, &Pose::identity(), &cfg.gicp, None)?;
        gate(&res, cfg.min_fitness)?;
        Ok(res)
    })()
    .map_err(stage_failed(Stage::Horizontal))?;
    let (euler_h, t_h) = horizontal_stage
        .delta
        .decompose()
        .map_err(|_| RegError::DecompositionSingular)
        .map_err(stage_failed(Stage::Horizontal))?;
    let delta_horizontal = Pose::horizontal(t_h.x, t_h.y, euler_h.yaw);

    let result = RegistrationResult {
        delta: delta_horizontal.compose(&delta_vertical),
        fitness: vertical_stage.fitness.min(horizontal_stage.fitness),
        rmse_inliers: vertical_stage.rmse_inliers.max(horizontal_stage.rmse_inliers),
        iterations: vertical_stage.iterations + horizontal_stage.iterations,
        converged: vertical_stage.converged && horizontal_stage.converged,
    };
    Ok(IndoorRegistration {
        result,
        delta_vertical,
        delta_horizontal,
        vertical: vertical_stage,
        horizontal: horizontal_stage,
    })
}

/// One-shot indoor registration: prepares the map targets and runs
/// [`register_indoor_prepared`]. Prefer preparing once when registering
/// many epochs against the same map.
pub fn register_indoor<R: Real>(
    cloud: &PointCloud<R>,
    map: &IndoorMap<R>,
    cfg: &IndoorConfig<R>,
) -> Result<IndoorRegistration<R>, RegError> {
    let target = IndoorTarget::prepare(map, cfg)?;
    register_indoor_prepared(cloud, &target, cfg)
}

// ---------------------------------------------------------------------------
// Outdoor aggregated flow
// ---------------------------------------------------------------------------

/// Configuration of the outdoor aggregated flow.
#[derive(Debug, Clone, PartialEq)]
pub struct OutdoorConfig<R: Real> {
    pub gicp: GicpConfig<R>,
    /// Side length of the square map region of interest (default 100 m).
    pub roi_extent: R,
    /// Minimum displacement between buffered clouds (default 1 m).
    pub d_min: R,
    /// Travelled distance that triggers a merge (default 10 m).
    pub d_max_total: R,
    /// Voxel size applied to the merged cloud (default 0.2 m).
    pub merge_voxel: R,
    /// Fitness gate (default 0.4).
    pub min_fitness: R,
    /// Inlier-RMSE gate (default 1.0 m).
    pub max_rmse: R,
}

impl<R: Real> Default for OutdoorConfig<R> {
    fn default() -> Self {
        Self {
            gicp: GicpConfig::default(),
            roi_extent: R::c(100.0),
            d_min: R::one(),
            d_max_total: R::c(10.0),
            merge_voxel: R::c(0.2),
            min_fitness: R::c(0.4),
            max_rmse: R::one(),
        }
    }
}

/// Displacement-driven accumulator of consecutive query clouds.
///
/// Body-frame clouds are transformed into the local-level frame by their
/// pose and buffered whenever the vehicle has moved at least `d_min` since
/// the previous accepted cloud. Once the accumulated distance reaches
/// `d_max_total`, the union is voxel-downsampled, returned, and the buffer
/// restarts from the current position.
#[derive(Debug, Clone)]
pub struct AggregationBuffer<R: Real> {
    clouds: Vec<PointCloud<R>>,
    anchor: Option<Vector3<R>>,
    distance_accumulated: R,
    d_min: R,
    d_max_total: R,
    voxel: R,
}

impl<R: Real> AggregationBuffer<R> {
    pub fn new(d_min: R, d_max_total: R, voxel: R) -> Self {
        assert!(d_min > R::zero() && d_min < d_max_total, "need 0 < d_min < d_max_total");
        assert!(voxel > R::zero(), "voxel size must be > 0");
        Self {
            clouds: Vec::new(),
            anchor: None,
            distance_accumulated: R::zero(),
            d_min,
            d_max_total,
            voxel,
        }
    }

    pub fn from_config(cfg: &OutdoorConfig<R>) -> Self {
        Self::new(cfg.d_min, cfg.d_max_total, cfg.merge_voxel)
    }

    pub fn cloud_count(&self) -> usize {
        self.clouds.len()
    }

    pub fn distance_accumulated(&self) -> R {
        self.distance_accumulated
    }

    /// Offers a body-frame cloud captured at `pose` (vehicle position
    /// `position`). Returns the merged local-level cloud when the distance
    /// threshold is crossed. The very first offer only anchors the buffer.
    pub fn push(
        &mut self,
        cloud: &PointCloud<R>,
        pose: &Pose<R>,
        position: &Vector3<R>,
    ) -> Result<Option<PointCloud<R>>, RegError> {
        if cloud.frame != Frame::Body {
            return Err(RegError::FrameMismatch {
                expected: Frame::Body,
                found: cloud.frame,
            });
        }
        let Some(anchor) = self.anchor else {
            self.anchor = Some(*position);
            return Ok(None);
        };
        let step = (position - anchor).norm();
        if step < self.d_min {
            return Ok(None);
        }
        self.clouds
            .push(cloud.transformed(pose).with_frame(Frame::LocalLevel));
        self.anchor = Some(*position);
        self.distance_accumulated += step;
        if self.distance_accumulated < self.d_max_total {
            return Ok(None);
        }
        let mut union = Vec::new();
        for c in self.clouds.drain(..) {
            union.extend(c.points);
        }
        self.distance_accumulated = R::zero();
        let merged = voxel_downsample(&PointCloud::new(union, Frame::LocalLevel), self.voxel);
        Ok(Some(merged))
    }
}

/// Full-6-DOF registration of a merged cloud against a prepared map target,
/// with the fitness and inlier-RMSE gates applied.
pub fn register_outdoor_prepared<R: Real>(
    merged: &PointCloud<R>,
    target: &GicpTarget<R>,
    cfg: &OutdoorConfig<R>,
) -> Result<RegistrationResult<R>, RegError> {
    let src = if merged.covariances.is_some() {
        merged.clone()
    } else {
        estimate_covariances(merged, cfg.gicp.k_neighbors, cfg.gicp.plane_regularization)?
    };
    let res = gicp_prepared(&src, target, &Pose::identity(), &cfg.gicp, None)?;
    if res.fitness < cfg.min_fitness || res.rmse_inliers > cfg.max_rmse {
        return Err(RegError::GateRejected {
            fitness: res.fitness.as_f64(),
            rmse_inliers: res.rmse_inliers.as_f64(),
        });
    }
    Ok(res)
}

/// Outdoor registration: loads the map region of interest around the prior
/// position, then aligns the merged cloud against it.
pub fn register_outdoor<R: Real>(
    merged: &PointCloud<R>,
    index: &TileIndex,
    prior_position: &Vector2<R>,
    cfg: &OutdoorConfig<R>,
) -> Result<RegistrationResult<R>, OutdoorError> {
    let roi = index.query_roi(prior_position.x, prior_position.y, cfg.roi_extent)?;
    let target = GicpTarget::prepare(&roi, &cfg.gicp).map_err(RegError::from)?;
    Ok(register_outdoor_prepared(merged, &target, cfg)?)
}
