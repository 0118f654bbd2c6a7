//! Depth raster to body-frame point cloud pipeline.
//!
//! A monocular depth network emits, per frame, a depth raster (canonical
//! focal-length scale), a confidence raster, and a transient-object mask.
//! This module turns that triplet into a filtered body-frame cloud through a
//! fixed stage order:
//!
//! 1. [`confidence_gate`] — invalidate low-confidence pixels,
//! 2. [`canonical_rescale`] — depth times `f_input / f_canonical`,
//! 3. [`apply_masks`] — dilate the transient mask and zero depth under it,
//! 4. [`back_project`] — pinhole back-projection to a camera-frame cloud,
//! 5. [`to_body_frame`] — extrinsic rotation + lever arm,
//! 6. [`voxel_downsample`] — centroid per occupied voxel,
//! 7. [`crop`] — forward-range and height thresholds in the body frame,
//! 8. [`apply_scale`] — global metric scale correction,
//! 9. [`sor_filter`] — statistical outlier removal, run for each configured
//!    pass (two by default).
//!
//! [`generate`] chains all stages. Invalid pixels are encoded as depth 0 and
//! never reach the cloud; the stages are pure functions so each can be tested
//! against a brute-force oracle in isolation.

use nalgebra::{Rotation3, Vector3};
use thiserror::Error;

use crate::cloud::{Frame, PointCloud};
use crate::kdtree::KdTree;
use crate::scalar::Real;

/// Pinhole camera intrinsics plus the canonical focal length the depth
/// network was trained at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<R: Real> {
    pub fx: R,
    pub fy: R,
    pub cx: R,
    pub cy: R,
    pub width: usize,
    pub height: usize,
    /// Canonical focal length of the depth predictor; metric recovery
    /// multiplies predicted depth by `fx / f_canonical`.
    pub f_canonical: R,
}

/// Camera-to-body rigid transform (`p_body = R * p_camera + t`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics<R: Real> {
    pub rotation: Rotation3<R>,
    pub translation: Vector3<R>,
}

/// One depth frame: depth, confidence, and transient-object mask rasters,
/// all row-major at the intrinsics' resolution. Depth 0 marks an invalid
/// pixel; confidence lies in [0, 1]; mask entries are 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame<R: Real> {
    pub timestamp: R,
    pub intrinsics: CameraIntrinsics<R>,
    pub depth: Vec<R>,
    pub confidence: Vec<R>,
    pub mask: Vec<u8>,
}

impl<R: Real> DepthFrame<R> {
    pub fn pixel_count(&self) -> usize {
        self.intrinsics.width * self.intrinsics.height
    }

    pub fn valid_pixel_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > R::zero()).count()
    }

    fn assert_shape(&self) {
        let n = self.pixel_count();
        assert_eq!(self.depth.len(), n, "depth raster size mismatch");
        assert_eq!(self.confidence.len(), n, "confidence raster size mismatch");
        assert_eq!(self.mask.len(), n, "mask raster size mismatch");
    }
}

/// One statistical-outlier-removal pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SorPass<R: Real> {
    pub k: usize,
    pub tau: R,
}

/// Configuration for [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct CloudgenConfig<R: Real> {
    /// Pixels below this confidence are invalidated (default 0.75).
    pub confidence_threshold: R,
    /// Square dilation kernel side for the transient mask; odd (default 7).
    pub dilation_kernel: usize,
    /// Voxel edge length for downsampling, metres (default 0.2).
    pub voxel_size: R,
    /// Forward-range crop `x_body < max_forward`, metres.
    pub max_forward: R,
    /// Height crop `z_body < max_height`, metres; `+inf` disables it.
    pub max_height: R,
    /// Global metric scale correction applied after cropping (default 1).
    pub scale: R,
    /// Outlier-removal passes, applied in order.
    pub sor_passes: Vec<SorPass<R>>,
}

impl<R: Real> CloudgenConfig<R> {
    /// Defaults for enclosed environments: tight forward range and a height
    /// cut that removes ceiling returns.
    pub fn indoor() -> Self {
        Self {
            confidence_threshold: R::c(0.75),
            dilation_kernel: 7,
            voxel_size: R::c(0.2),
            max_forward: R::c(15.0),
            max_height: R::c(2.2),
            scale: R::one(),
            sor_passes: vec![
                SorPass { k: 6, tau: R::one() },
                SorPass { k: 10, tau: R::c(2.0) },
            ],
        }
    }

    /// Defaults for open environments: longer range, no height cut.
    pub fn outdoor() -> Self {
        Self {
            max_forward: R::c(30.0),
            max_height: R::c(f64::INFINITY),
            ..Self::indoor()
        }
    }

    pub fn validate(&self) -> Result<(), CloudgenError> {
        if self.dilation_kernel == 0 || self.dilation_kernel % 2 == 0 {
            return Err(CloudgenError::InvalidConfig(format!(
                "dilation kernel must be odd and positive, got {}",
                self.dilation_kernel
            )));
        }
        if !(self.voxel_size > R::zero()) {
            return Err(CloudgenError::InvalidConfig("voxel size must be > 0".into()));
        }
        if self.confidence_threshold < R::zero() || self.confidence_threshold > R::one() {
            return Err(CloudgenError::InvalidConfig(
                "confidence threshold must lie in [0, 1]".into(),
            ));
        }
        if !(self.scale > R::zero()) {
            return Err(CloudgenError::InvalidConfig("scale must be > 0".into()));
        }
        for (i, pass) in self.sor_passes.iter().enumerate() {
            if pass.k == 0 {
                return Err(CloudgenError::InvalidConfig(format!(
                    "SOR pass {i}: k must be >= 1"
                )));
            }
            if pass.tau < R::zero() {
                return Err(CloudgenError::InvalidConfig(format!(
                    "SOR pass {i}: tau must be >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Pipeline errors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CloudgenError {
    #[error("cloud is in the {found} frame, expected {expected}")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("invalid cloudgen configuration: {0}")]
    InvalidConfig(String),
}

/// Non-fatal events raised by [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudgenWarning {
    /// A SOR pass was skipped because the cloud had too few points for its
    /// neighbourhood size; the cloud passed through unchanged.
    SorSkipped { pass: usize, size: usize },
}

/// Output of [`generate`]: the body-frame cloud plus any stage warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCloud<R: Real> {
    pub cloud: PointCloud<R>,
    pub warnings: Vec<CloudgenWarning>,
}

/// Result of one [`sor_filter`] pass. When the cloud holds `size <= k`
/// points the filter cannot form a neighbourhood and passes the cloud
/// through with `applied == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct SorOutcome<R: Real> {
    pub cloud: PointCloud<R>,
    pub applied: bool,
}

/// Invalidates pixels whose confidence falls below `threshold` (strict `<`).
pub fn confidence_gate<R: Real>(frame: &DepthFrame<R>, threshold: R) -> DepthFrame<R> {
    frame.assert_shape();
    let mut out = frame.clone();
    for (d, c) in out.depth.iter_mut().zip(frame.confidence.iter()) {
        if *c < threshold {
            *d = R::zero();
        }
    }
    out
}

/// Rescales predicted depth to metric using `fx / f_canonical`.
/// Invalid pixels (depth 0) stay invalid.
pub fn canonical_rescale<R: Real>(frame: &DepthFrame<R>) -> DepthFrame<R> {
    frame.assert_shape();
    let ratio = frame.intrinsics.fx / frame.intrinsics.f_canonical;
    let mut out = frame.clone();
    for d in out.depth.iter_mut() {
        if *d > R::zero() {
            *d *= ratio;
        }
    }
    out
}

/// Zeroes depth wherever the transient mask, dilated by a `kernel` x
/// `kernel` square structuring element (clipped at the borders), is set.
///
/// The mask raster itself is left untouched, which makes the operation
/// idempotent for a fixed kernel.
pub fn apply_masks<R: Real>(frame: &DepthFrame<R>, kernel: usize) -> DepthFrame<R> {
    frame.assert_shape();
    assert!(kernel % 2 == 1 && kernel >= 1, "kernel must be odd and >= 1");
    let (w, h) = (frame.intrinsics.width, frame.intrinsics.height);
    let half = (kernel / 2) as isize;
    let mut out = frame.clone();
    for v in 0..h as isize {
        for u in 0..w as isize {
            let mut masked = false;
            'scan: for dv in -half..=half {
                for du in -half..=half {
                    let (su, sv) = (u + du, v + dv);
                    if su >= 0
                        && sv >= 0
                        && su < w as isize
                        && sv < h as isize
                        && frame.mask[sv as usize * w + su as usize] != 0
                    {
                        masked = true;
                        break 'scan;
                    }
                }
            }
            if masked {
                out.depth[v as usize * w + u as usize] = R::zero();
            }
        }
    }
    out
}

/// Back-projects valid pixels through the pinhole model into a camera-frame
/// cloud: `X = (u - cx) d / fx`, `Y = (v - cy) d / fy`, `Z = d`.
///
/// Points appear in row-major pixel order, so downstream indices are
/// reproducible.
pub fn back_project<R: Real>(frame: &DepthFrame<R>) -> PointCloud<R> {
    frame.assert_shape();
    let intr = &frame.intrinsics;
    let mut points = Vec::with_capacity(frame.valid_pixel_count());
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d = frame.depth[v * intr.width + u];
            if d > R::zero() {
                let x = (R::from_usize(u).expect("pixel index") - intr.cx) * d / intr.fx;
                let y = (R::from_usize(v).expect("pixel index") - intr.cy) * d / intr.fy;
                points.push(Vector3::new(x, y, d));
            }
        }
    }
    PointCloud::new(points, Frame::Camera)
}

/// Rotates and translates a camera-frame cloud into the body frame.
pub fn to_body_frame<R: Real>(
    cloud: &PointCloud<R>,
    extrinsics: &Extrinsics<R>,
) -> Result<PointCloud<R>, CloudgenError> {
    if cloud.frame != Frame::Camera {
        return Err(CloudgenError::FrameMismatch {
            expected: Frame::Camera,
            found: cloud.frame,
        });
    }
    let points = cloud
        .points
        .iter()
        .map(|p| extrinsics.rotation * p + extrinsics.translation)
        .collect();
    Ok(PointCloud::new(points, Frame::Body))
}

/// Voxel index of a coordinate: `floor(c / voxel)`.
fn voxel_index<R: Real>(c: R, voxel: R) -> i64 {
    (c / voxel).floor().to_i64().expect("voxel index fits i64")
}

/// Replaces all points inside each occupied voxel with their centroid.
///
/// Output voxels are ordered by voxel index, so the result is identical for
/// any permutation of the input. Per-point covariances are dropped (a merged
/// point has no single covariance).
pub fn voxel_downsample<R: Real>(cloud: &PointCloud<R>, voxel: R) -> PointCloud<R> {
    assert!(voxel > R::zero(), "voxel size must be > 0");
    let mut cells: std::collections::BTreeMap<(i64, i64, i64), (Vector3<R>, usize)> =
        std::collections::BTreeMap::new();
    for p in &cloud.points {
        let key = (
            voxel_index(p.x, voxel),
            voxel_index(p.y, voxel),
            voxel_index(p.z, voxel),
        );
        let entry = cells.entry(key).or_insert((Vector3::zeros(), 0));
        entry.0 += p;
        entry.1 += 1;
    }
    let points = cells
        .into_values()
        .map(|(sum, n)| sum / R::from_usize(n).expect("cell count"))
        .collect();
    PointCloud::new(points, cloud.frame)
}

/// Keeps body-frame points with forward range `x < max_forward` and height
/// `z < max_height` (both strict).
pub fn crop<R: Real>(
    cloud: &PointCloud<R>,
    max_forward: R,
    max_height: R,
) -> Result<PointCloud<R>, CloudgenError> {
    if cloud.frame != Frame::Body {
        return Err(CloudgenError::FrameMismatch {
            expected: Frame::Body,
            found: cloud.frame,
        });
    }
    let points = &cloud.points;
    Ok(cloud.retain_by_index(|i| points[i].x < max_forward && points[i].z < max_height))
}

/// Scales every coordinate by the global metric correction factor `s`.
pub fn apply_scale<R: Real>(cloud: &PointCloud<R>, s: R) -> PointCloud<R> {
    assert!(s > R::zero(), "scale must be > 0");
    let points = cloud.points.iter().map(|p| p * s).collect();
    PointCloud {
        points,
        frame: cloud.frame,
        covariances: None,
    }
}

/// One statistical-outlier-removal pass.
///
/// For each point, `mu_i` is the mean Euclidean distance to its `k` nearest
/// neighbours (self excluded). A point survives when
/// `mu_i <= mean(mu) + tau * std(mu)`, with the population standard
/// deviation (divisor `n`). Neighbour search is exact with ties broken by
/// the smaller index, so the pass is fully deterministic.
pub fn sor_filter<R: Real>(cloud: &PointCloud<R>, k: usize, tau: R) -> SorOutcome<R> {
    assert!(k >= 1, "k must be >= 1");
    let n = cloud.len();
    if n <= k {
        return SorOutcome {
            cloud: cloud.clone(),
            applied: false,
        };
    }
    let tree = KdTree::build(&cloud.points);
    let k_scalar = R::from_usize(k).expect("k fits scalar");
    let mu: Vec<R> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = tree.knn_excluding(p, k, i);
            let sum = nn
                .iter()
                .fold(R::zero(), |acc, nb| acc + nb.dist_sq.sqrt());
            sum / k_scalar
        })
        .collect();
    let n_scalar = R::from_usize(n).expect("cloud size fits scalar");
    let mean = mu.iter().fold(R::zero(), |acc, m| acc + *m) / n_scalar;
    let var = mu
        .iter()
        .fold(R::zero(), |acc, m| acc + (*m - mean) * (*m - mean))
        / n_scalar;
    let cutoff = mean + tau * var.sqrt();
    SorOutcome {
        cloud: cloud.retain_by_index(|i| mu[i] <= cutoff),
        applied: true,
    }
}

/// Runs the full raster-to-cloud pipeline in the fixed stage order.
///
/// A frame with no valid pixels yields an empty cloud, not an error; SOR
/// passes that cannot run on a small cloud are reported as warnings.
pub fn generate<R: Real>(
    frame: &DepthFrame<R>,
    extrinsics: &Extrinsics<R>,
    config: &CloudgenConfig<R>,
) -> Result<GeneratedCloud<R>, CloudgenError> {
    config.validate()?;
    let gated = confidence_gate(frame, config.confidence_threshold);
    let metric = canonical_rescale(&gated);
    let masked = apply_masks(&metric, config.dilation_kernel);
    let camera_cloud = back_project(&masked);
    let body_cloud = to_body_frame(&camera_cloud, extrinsics)?;
    let down = voxel_downsample(&body_cloud, config.voxel_size);
    let cropped = crop(&down, config.max_forward, config.max_height)?;
    let scaled = apply_scale(&cropped, config.scale);

    let mut warnings = Vec::new();
    let mut cloud = scaled;
    for (i, pass) in config.sor_passes.iter().enumerate() {
        let outcome = sor_filter(&cloud, pass.k, pass.tau);
        if !outcome.applied {
            warnings.push(CloudgenWarning::SorSkipped {
                pass: i,
                size: outcome.cloud.len(),
            });
        }
        cloud = outcome.cloud;
    }
    Ok(GeneratedCloud { cloud, warnings })
}
