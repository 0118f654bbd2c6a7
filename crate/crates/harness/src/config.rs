//! Runner configuration.
//!
//! One flat JSON file tunes the whole closed loop: filter noise, initial
//! covariance, cloud generation, and registration gates. Every field has a
//! default, so an empty object `{}` is a valid configuration and a partial
//! file overrides only what it names. The defaults correspond to the
//! standard sensor suite the simulator models (automotive-grade MEMS IMU,
//! wheel odometry, and monocular depth at a few percent range error).

use nalgebra::{Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;
use vmrnav_core::cloudgen::CloudgenConfig;
use vmrnav_core::fusion::{Matrix15, NoiseConfig};
use vmrnav_core::registration::{GicpConfig, IndoorConfig, OutdoorConfig};

/// Configuration file errors.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Closed-loop runner configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Per-sample accelerometer noise, m/s^2.
    pub sigma_f: f64,
    /// Per-sample gyroscope noise, rad/s.
    pub sigma_w: f64,
    /// Accelerometer bias random walk per sample, m/s^2.
    pub sigma_bf: f64,
    /// Gyroscope bias random walk per sample, rad/s.
    pub sigma_bw: f64,

    /// Odometer speed measurement noise, m/s (all three axes of the
    /// nonholonomic velocity update).
    pub odo_sigma: f64,
    /// Registration position measurement noise, m.
    pub pose_pos_sigma: f64,
    /// Registration attitude measurement noise, degrees.
    pub pose_att_sigma_deg: f64,
    /// Dynamic measurement-noise tuning rate.
    pub alpha: f64,

    /// Initial position uncertainty, m.
    pub init_pos_sigma: f64,
    /// Initial velocity uncertainty, m/s.
    pub init_vel_sigma: f64,
    /// Initial attitude uncertainty, degrees.
    pub init_att_sigma_deg: f64,
    /// Initial accelerometer bias uncertainty, m/s^2.
    pub init_bias_accel_sigma: f64,
    /// Initial gyroscope bias uncertainty, rad/s.
    pub init_bias_gyro_sigma: f64,

    /// Depth pixels below this confidence are discarded.
    pub confidence_threshold: f64,
    /// Voxel size of cloud downsampling, m.
    pub voxel_size: f64,
    /// Global metric scale correction of generated clouds.
    pub scale: f64,

    /// GICP correspondence cutoff, m.
    pub max_correspondence_dist: f64,
    /// Registration fitness gate.
    pub min_fitness: f64,
    /// Outdoor inlier-RMSE gate, m.
    pub max_rmse: f64,
    /// Outdoor map region-of-interest side length, m.
    pub roi_extent: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sigma_f: 0.01,
            sigma_w: 0.002,
            sigma_bf: 1e-5,
            sigma_bw: 1e-6,
            odo_sigma: 0.1,
            pose_pos_sigma: 0.05,
            pose_att_sigma_deg: 0.5,
            alpha: 0.5,
            init_pos_sigma: 0.05,
            init_vel_sigma: 0.1,
            init_att_sigma_deg: 0.5,
            init_bias_accel_sigma: 0.02,
            init_bias_gyro_sigma: 0.006,
            confidence_threshold: 0.75,
            voxel_size: 0.2,
            scale: 1.0,
            max_correspondence_dist: 1.0,
            min_fitness: 0.4,
            max_rmse: 1.0,
            roi_extent: 100.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Filter noise configuration.
    pub fn noise_config(&self) -> NoiseConfig<f64> {
        let pos = self.pose_pos_sigma * self.pose_pos_sigma;
        let att = self.pose_att_sigma_deg.to_radians().powi(2);
        NoiseConfig {
            sigma_f: self.sigma_f,
            sigma_w: self.sigma_w,
            sigma_bf: self.sigma_bf,
            sigma_bw: self.sigma_bw,
            n_static_speed: Matrix3::from_diagonal_element(self.odo_sigma * self.odo_sigma),
            n_static_pose: Matrix6::from_diagonal(&Vector6::new(pos, pos, pos, att, att, att)),
            alpha: self.alpha,
        }
    }

    /// Initial error covariance (block-diagonal from the configured
    /// standard deviations).
    pub fn initial_covariance(&self) -> Matrix15<f64> {
        let mut p = Matrix15::zeros();
        let blocks = [
            self.init_pos_sigma,
            self.init_vel_sigma,
            self.init_att_sigma_deg.to_radians(),
            self.init_bias_accel_sigma,
            self.init_bias_gyro_sigma,
        ];
        for (b, sigma) in blocks.iter().enumerate() {
            for i in 0..3 {
                p[(3 * b + i, 3 * b + i)] = sigma * sigma;
            }
        }
        p
    }

    /// Cloud-generation configuration for the given environment kind.
    pub fn cloudgen_config(&self, indoor: bool) -> CloudgenConfig<f64> {
        let base = if indoor {
            CloudgenConfig::indoor()
        } else {
            CloudgenConfig::outdoor()
        };
        CloudgenConfig {
            confidence_threshold: self.confidence_threshold,
            voxel_size: self.voxel_size,
            scale: self.scale,
            ..base
        }
    }

    fn gicp_config(&self) -> GicpConfig<f64> {
        GicpConfig {
            max_correspondence_dist: self.max_correspondence_dist,
            ..GicpConfig::default()
        }
    }

    pub fn indoor_config(&self) -> IndoorConfig<f64> {
        IndoorConfig {
            gicp: self.gicp_config(),
            min_fitness: self.min_fitness,
            ..IndoorConfig::default()
        }
    }

    pub fn outdoor_config(&self) -> OutdoorConfig<f64> {
        OutdoorConfig {
            gicp: self.gicp_config(),
            min_fitness: self.min_fitness,
            max_rmse: self.max_rmse,
            roi_extent: self.roi_extent,
            ..OutdoorConfig::default()
        }
    }
}
