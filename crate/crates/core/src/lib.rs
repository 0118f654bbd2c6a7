//! Numeric core for vision-aided, map-referenced navigation.
//!
//! The crate is organised around the data path of the system:
//!
//! * [`geom`] — quaternions, rotations, poses, and the Euler conventions used
//!   everywhere else.
//! * [`cloudgen`] — turns monocular depth/confidence/mask rasters into
//!   filtered body-frame point clouds.
//! * [`mapstore`] — persistent 3-D map access: tiled outdoor stores with a
//!   JSON index, and indoor maps split into ground/surround.
//! * [`registration`] — Generalized-ICP alignment of generated clouds against
//!   the map, including the two-stage indoor variant and outdoor cloud
//!   aggregation.
//! * [`fusion`] — 15-state error-state Kalman filter fusing inertial
//!   mechanization with odometer speed and registration pose updates.
//!
//! All numeric code is generic over the scalar type through [`Real`]
//! (`f32` or `f64`); the aliases below fix the common `f64` instantiation.

pub mod cloud;
pub mod cloudgen;
pub mod fusion;
pub mod geom;
pub mod ground;
pub mod kdtree;
pub mod mapstore;
pub mod registration;
pub mod scalar;

pub use scalar::Real;

/// `f64` instantiations used by the binaries and most tests.
pub type Pose64 = geom::Pose<f64>;
pub type EulerZYX64 = geom::EulerZYX<f64>;
pub type PointCloud64 = cloud::PointCloud<f64>;
pub type DepthFrame64 = cloudgen::DepthFrame<f64>;
pub type CameraIntrinsics64 = cloudgen::CameraIntrinsics<f64>;
pub type NavState64 = fusion::NavState<f64>;
pub type ErrorState64 = fusion::ErrorState<f64>;

/// Single-precision cloud alias for callers that keep large maps in `f32`.
pub type PointCloud32 = cloud::PointCloud<f32>;
