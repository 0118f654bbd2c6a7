//! Simulation and evaluation harness for the `vmrnav-core` navigation stack.
//!
//! The harness closes the loop around the core library:
//!
//! * [`world`] — analytic 3-D worlds (planes, boxes, cylinders) with surface
//!   labels, sampled into reference map clouds and ray-cast into depth frames.
//! * [`trajectory`] — smooth vehicle trajectories through a world, discretised
//!   at the IMU rate.
//! * [`simulate`] — dataset generation: inertial and odometer streams that are
//!   exactly consistent with the discrete mechanization, plus rendered depth
//!   frames, with optional sensor noise on top.
//! * [`dataset`] — the on-disk dataset layout (calibration, sensor CSVs,
//!   ground truth, depth/confidence/mask rasters).
//! * [`session`] — the closed-loop runner: cloud generation, map registration,
//!   and filter fusion per epoch, with per-epoch event logging.
//! * [`metrics`] — trajectory accuracy metrics against ground truth.
//!
//! Everything here is `f64`; the harness exercises the core crate through its
//! double-precision aliases.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod session;
pub mod simulate;
pub mod trajectory;
pub mod world;
