//! Ground-plane extraction for near-level clouds.
//!
//! [`split_ground`] partitions a cloud into ground and surround sets with a
//! seeded RANSAC plane fit, constrained to near-horizontal planes, followed
//! by a PCA refit over the consensus set. Points are canonically ordered
//! before sampling, so the result depends only on the point *set* and the
//! seed — never on input order.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::scalar::Real;

/// Configuration for [`split_ground`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroundSplitConfig<R: Real> {
    /// Points within this absolute plane distance are ground (default 0.15 m).
    pub inlier_threshold: R,
    /// Maximum plane-normal tilt from vertical, degrees (default 10).
    pub max_tilt_deg: R,
    /// RANSAC iterations (default 200).
    pub iterations: usize,
    /// RNG seed; fixing it makes the split reproducible.
    pub seed: u64,
    /// Minimum consensus fraction below which no ground plane is reported
    /// (default 0.1).
    pub min_inlier_fraction: R,
    /// When set, surround points higher than this above the fitted plane are
    /// discarded (ceiling returns). `None` keeps them.
    pub ceiling_offset: Option<R>,
}

impl<R: Real> Default for GroundSplitConfig<R> {
    fn default() -> Self {
        Self {
            inlier_threshold: R::c(0.15),
            max_tilt_deg: R::c(10.0),
            iterations: 200,
            seed: 0,
            min_inlier_fraction: R::c(0.1),
            ceiling_offset: None,
        }
    }
}

/// A fitted plane `n . p + d = 0` with `n` unit length and `n_z > 0`, so the
/// signed distance `n . p + d` is positive above ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit<R: Real> {
    pub normal: Vector3<R>,
    pub d: R,
    /// Consensus fraction of the final (refit) plane.
    pub inlier_fraction: R,
}

impl<R: Real> PlaneFit<R> {
    pub fn signed_distance(&self, p: &Vector3<R>) -> R {
        self.normal.dot(p) + self.d
    }

    /// Height of the plane under the origin (`z` where the plane crosses
    /// `x = y = 0`): useful as a ground elevation estimate.
    pub fn height_at_origin(&self) -> R {
        -self.d / self.normal.z
    }
}

/// Output of [`split_ground`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroundSplit<R: Real> {
    pub ground: PointCloud<R>,
    pub surround: PointCloud<R>,
    pub plane: PlaneFit<R>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroundError {
    #[error("cloud has {count} points; ground fitting needs at least 3")]
    TooFewPoints { count: usize },
    #[error(
        "no near-horizontal plane reached the consensus threshold \
         (best inlier fraction {best_fraction:.3})"
    )]
    NoGroundPlane { best_fraction: f64 },
}

/// Total lexicographic order on finite coordinates.
fn lex_cmp<R: Real>(a: &Vector3<R>, b: &Vector3<R>) -> std::cmp::Ordering {
    (a.x, a.y, a.z)
        .partial_cmp(&(b.x, b.y, b.z))
        .expect("finite coordinates")
}

/// Plane through three points, oriented upward. Returns `None` for
/// degenerate triples or planes tilted beyond `cos_max_tilt`.
fn plane_from_triple<R: Real>(
    a: &Vector3<R>,
    b: &Vector3<R>,
    c: &Vector3<R>,
    cos_max_tilt: R,
) -> Option<(Vector3<R>, R)> {
    let n = (b - a).cross(&(c - a));
    let norm = n.norm();
    if norm < R::c(1e-12) {
        return None;
    }
    let mut n = n / norm;
    if n.z < R::zero() {
        n = -n;
    }
    if n.z < cos_max_tilt {
        return None;
    }
    Some((n, -n.dot(a)))
}

/// Least-squares plane through a set of points: centroid plus the smallest
/// principal direction of the scatter matrix, oriented upward.
fn pca_plane<R: Real>(points: &[Vector3<R>], indices: &[usize]) -> (Vector3<R>, R) {
    let n_scalar = R::from_usize(indices.len()).expect("inlier count");
    let centroid = indices
        .iter()
        .fold(Vector3::zeros(), |acc, i| acc + points[*i])
        / n_scalar;
    let mut scatter = Matrix3::zeros();
    for i in indices {
        let q = points[*i] - centroid;
        scatter += q * q.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut min_idx = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let mut normal: Vector3<R> = eig.eigenvectors.column(min_idx).into_owned();
    normal /= normal.norm();
    if normal.z < R::zero() {
        normal = -normal;
    }
    (normal, -normal.dot(&centroid))
}

/// Splits a cloud into ground and surround by a near-horizontal RANSAC
/// plane, refit by PCA over the consensus set.
///
/// The ground set holds points within `inlier_threshold` of the refit
/// plane; everything else is surround, minus any points above the optional
/// ceiling offset. Both output clouds are sorted lexicographically by
/// coordinate, making the whole operation invariant to input permutation.
pub fn split_ground<R: Real>(
    cloud: &PointCloud<R>,
    config: &GroundSplitConfig<R>,
) -> Result<GroundSplit<R>, GroundError> {
    if cloud.len() < 3 {
        return Err(GroundError::TooFewPoints { count: cloud.len() });
    }
    let mut pts: Vec<Vector3<R>> = cloud.points.clone();
    pts.sort_unstable_by(lex_cmp);
    let n = pts.len();
    let n_scalar = R::from_usize(n).expect("cloud size");
    let cos_max_tilt = (config.max_tilt_deg * R::pi() / R::c(180.0)).cos();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, Vector3<R>, R)> = None;
    for _ in 0..config.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n);
        while j == i {
            j = rng.random_range(0..n);
        }
        let mut k = rng.random_range(0..n);
        while k == i || k == j {
            k = rng.random_range(0..n);
        }
        let Some((normal, d)) = plane_from_triple(&pts[i], &pts[j], &pts[k], cos_max_tilt)
        else {
            continue;
        };
        let count = pts
            .iter()
            .filter(|p| (normal.dot(p) + d).abs() <= config.inlier_threshold)
            .count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            best = Some((count, normal, d));
        }
    }

    let Some((best_count, normal, d)) = best else {
        return Err(GroundError::NoGroundPlane { best_fraction: 0.0 });
    };
    let best_fraction = R::from_usize(best_count).expect("count") / n_scalar;
    if best_fraction < config.min_inlier_fraction {
        return Err(GroundError::NoGroundPlane {
            best_fraction: best_fraction.as_f64(),
        });
    }

    // PCA refit over the consensus set, then a final reclassification.
    let consensus: Vec<usize> = (0..n)
        .filter(|i| (normal.dot(&pts[*i]) + d).abs() <= config.inlier_threshold)
        .collect();
    let (normal, d) = pca_plane(&pts, &consensus);

    let mut ground = Vec::new();
    let mut surround = Vec::new();
    for p in &pts {
        let dist = normal.dot(p) + d;
        if dist.abs() <= config.inlier_threshold {
            ground.push(*p);
        } else if config.ceiling_offset.is_none_or(|h| dist <= h) {
            surround.push(*p);
        }
    }
    let inlier_fraction = R::from_usize(ground.len()).expect("count") / n_scalar;
    if inlier_fraction < config.min_inlier_fraction {
        return Err(GroundError::NoGroundPlane {
            best_fraction: inlier_fraction.as_f64(),
        });
    }
    Ok(GroundSplit {
        ground: PointCloud::new(ground, cloud.frame),
        surround: PointCloud::new(surround, cloud.frame),
        plane: PlaneFit {
            normal,
            d,
            inlier_fraction,
        },
    })
}
