//! Point clouds tagged with the coordinate frame they live in.
//!
//! Frame tags exist so that pipeline stages can refuse obviously wrong input
//! (e.g. cropping a camera-frame cloud with body-frame thresholds) instead of
//! silently producing garbage.

use nalgebra::{Matrix3, Vector3};

use crate::geom::Pose;
use crate::scalar::Real;

/// Coordinate frame of a point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Camera optical frame: X right, Y down, Z along the optical axis.
    Camera,
    /// Vehicle body frame: x forward, y left, z up.
    Body,
    /// Local-level ENU navigation frame.
    LocalLevel,
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Frame::Camera => write!(f, "camera"),
            Frame::Body => write!(f, "body"),
            Frame::LocalLevel => write!(f, "local-level"),
        }
    }
}

/// Ordered point cloud with optional per-point covariances.
///
/// Covariances (used by the GICP registration stages) stay index-aligned
/// with `points`; operations that drop or reorder points must maintain that
/// alignment or clear them.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<R: Real> {
    pub points: Vec<Vector3<R>>,
    pub frame: Frame,
    pub covariances: Option<Vec<Matrix3<R>>>,
}

impl<R: Real> PointCloud<R> {
    pub fn new(points: Vec<Vector3<R>>, frame: Frame) -> Self {
        Self {
            points,
            frame,
            covariances: None,
        }
    }

    pub fn empty(frame: Frame) -> Self {
        Self::new(Vec::new(), frame)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies a rigid transform to every point (and rotates covariances),
    /// leaving the frame tag to the caller via `with_frame`.
    pub fn transformed(&self, pose: &Pose<R>) -> Self {
        let points = self.points.iter().map(|p| pose.apply(p)).collect();
        let rot = *pose.rotation.matrix();
        let covariances = self
            .covariances
            .as_ref()
            .map(|covs| covs.iter().map(|c| rot * c * rot.transpose()).collect());
        Self {
            points,
            frame: self.frame,
            covariances,
        }
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    /// Keeps the points whose index passes `keep`, preserving order and
    /// covariance alignment.
    pub fn retain_by_index(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut points = Vec::new();
        let mut covariances = self.covariances.as_ref().map(|_| Vec::new());
        for (i, p) in self.points.iter().enumerate() {
            if keep(i) {
                points.push(*p);
                if let (Some(out), Some(covs)) = (covariances.as_mut(), self.covariances.as_ref())
                {
                    out.push(covs[i]);
                }
            }
        }
        Self {
            points,
            frame: self.frame,
            covariances,
        }
    }

    /// True when every coordinate (and covariance entry) is finite.
    pub fn is_finite(&self) -> bool {
        let pts_ok = self.points.iter().all(|p| p.iter().all(|c| c.is_finite()));
        let covs_ok = self
            .covariances
            .as_ref()
            .map(|covs| covs.iter().all(|c| c.iter().all(|x| x.is_finite())))
            .unwrap_or(true);
        pts_ok && covs_ok
    }

    pub fn centroid(&self) -> Option<Vector3<R>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p);
        Some(sum / R::from_usize(self.points.len()).expect("cloud size fits scalar"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    #[test]
    fn transform_rotates_covariances_congruently() {
        let mut cloud = PointCloud::new(vec![Vector3::new(1.0, 0.0, 0.0)], Frame::Body);
        cloud.covariances = Some(vec![Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0))]);
        let pose = Pose::new(
            Rotation3::from_euler_angles(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            Vector3::new(0.0, 0.0, 1.0),
        );
        let out = cloud.transformed(&pose);
        assert_relative_eq!(out.points[0], Vector3::new(0.0, 1.0, 1.0), epsilon = 1e-12);
        // Quarter-turn about z swaps the x and y variances.
        let c = out.covariances.as_ref().unwrap()[0];
        assert_relative_eq!(c[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(c[(1, 1)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(c[(2, 2)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn retain_keeps_covariances_aligned() {
        let mut cloud = PointCloud::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(2.0, 0.0, 0.0),
            ],
            Frame::Body,
        );
        cloud.covariances = Some(
            (0..3)
                .map(|i| Matrix3::identity() * (i as f64 + 1.0))
                .collect(),
        );
        let out = cloud.retain_by_index(|i| i != 1);
        assert_eq!(out.len(), 2);
        let covs = out.covariances.unwrap();
        assert_eq!(covs[0][(0, 0)], 1.0);
        assert_eq!(covs[1][(0, 0)], 3.0);
    }

    #[test]
    fn centroid_of_empty_cloud_is_none() {
        let cloud: PointCloud<f64> = PointCloud::empty(Frame::Camera);
        assert!(cloud.centroid().is_none());
    }
}
