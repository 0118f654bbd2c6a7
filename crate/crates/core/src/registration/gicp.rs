//! Generalized-ICP: plane-to-plane alignment under per-point covariances.
//!
//! The solver minimizes `Σ rᵢᵀ (Cᵢᵗ + R Cᵢˢ Rᵀ)⁻¹ rᵢ` over nearest-neighbor
//! correspondences with Gauss-Newton on SE(3). Correspondences are re-found
//! every iteration; each accepted step is required to decrease the objective
//! on the frozen correspondence set, with step-halving as the fallback, so
//! the per-iteration objective is provably non-increasing.

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};

use super::{DegenerateKind, RegError, RegistrationResult};
use crate::cloud::PointCloud;
use crate::geom::{skew, Pose};
use crate::kdtree::KdTree;
use crate::scalar::Real;

/// Fewer inlier correspondences than this is degenerate.
pub const MIN_CORRESPONDENCES: usize = 10;
/// Condition-number ceiling for the 6×6 normal matrix.
pub const MAX_CONDITION: f64 = 1e12;

const MAX_STEP_HALVINGS: usize = 10;

/// GICP solver parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GicpConfig<R: Real> {
    /// Neighbourhood size for covariance estimation (default 20).
    pub k_neighbors: usize,
    /// Correspondences farther than this are discarded (default 1.0 m).
    pub max_correspondence_dist: R,
    /// Gauss-Newton iteration cap (default 50).
    pub max_iterations: usize,
    /// Translation step norm below which the solve has converged (default 1e-4 m).
    pub translation_epsilon: R,
    /// Rotation step norm below which the solve has converged (default 1e-4 rad).
    pub rotation_epsilon: R,
    /// Small eigenvalue replacing the surface-normal variance (default 1e-3).
    pub plane_regularization: R,
}

impl<R: Real> Default for GicpConfig<R> {
    fn default() -> Self {
        Self {
            k_neighbors: 20,
            max_correspondence_dist: R::one(),
            max_iterations: 50,
            translation_epsilon: R::c(1e-4),
            rotation_epsilon: R::c(1e-4),
            plane_regularization: R::c(1e-3),
        }
    }
}

impl<R: Real> GicpConfig<R> {
    pub fn validate(&self) -> Result<(), RegError> {
        let positive = [
            ("max_correspondence_dist", self.max_correspondence_dist),
            ("translation_epsilon", self.translation_epsilon),
            ("rotation_epsilon", self.rotation_epsilon),
            ("plane_regularization", self.plane_regularization),
        ];
        for (name, value) in positive {
            if !(value > R::zero()) {
                return Err(RegError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if self.max_iterations == 0 {
            return Err(RegError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if self.k_neighbors == 0 {
            return Err(RegError::InvalidConfig("k_neighbors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Attaches a plane-to-plane regularized covariance to every point.
///
/// For each point, the scatter matrix of the point plus its `k` nearest
/// neighbours is eigen-decomposed; the covariance is rebuilt from that basis
/// with variances `(ε, 1, 1)`, smallest-spread direction first, so every
/// output covariance has eigenvalues `{ε, 1, 1}` by construction.
pub fn estimate_covariances<R: Real>(
    cloud: &PointCloud<R>,
    k: usize,
    eps: R,
) -> Result<PointCloud<R>, RegError> {
    if cloud.len() <= k {
        return Err(RegError::TooFewPoints {
            size: cloud.len(),
            k,
        });
    }
    let tree = KdTree::build(&cloud.points);
    let covariances = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let neighbors = tree.knn_excluding(p, k, i);
            let count = R::from_usize(neighbors.len() + 1).expect("neighbourhood size");
            let mean = neighbors
                .iter()
                .fold(*p, |acc, nb| acc + cloud.points[nb.index])
                / count;
            let mut scatter = {
                let q = p - mean;
                q * q.transpose()
            };
            for nb in &neighbors {
                let q = cloud.points[nb.index] - mean;
                scatter += q * q.transpose();
            }
            let eig = scatter.symmetric_eigen();
            let mut order = [0usize, 1, 2];
            order.sort_by(|a, b| {
                eig.eigenvalues[*a]
                    .partial_cmp(&eig.eigenvalues[*b])
                    .expect("finite eigenvalues")
            });
            let variances = [eps, R::one(), R::one()];
            let mut cov = Matrix3::zeros();
            for (slot, &col) in order.iter().enumerate() {
                let v: Vector3<R> = eig.eigenvectors.column(col).into_owned();
                cov += v * v.transpose() * variances[slot];
            }
            cov
        })
        .collect();
    let mut out = cloud.clone();
    out.covariances = Some(covariances);
    Ok(out)
}

/// Attaches the flat-world covariance `diag(1, 1, ε)` to every point,
/// forcing the constrained direction to z. Used for the 2-D registration
/// stage on z-flattened clouds.
pub fn planar_covariances<R: Real>(cloud: &PointCloud<R>, eps: R) -> PointCloud<R> {
    let cov = Matrix3::from_diagonal(&Vector3::new(R::one(), R::one(), eps));
    let mut out = cloud.clone();
    out.covariances = Some(vec![cov; cloud.len()]);
    out
}

/// A registration target: cloud with covariances plus its k-d tree,
/// prepared once and reused across registrations.
#[derive(Debug, Clone)]
pub struct GicpTarget<R: Real> {
    cloud: PointCloud<R>,
    tree: KdTree<R>,
}

impl<R: Real> GicpTarget<R> {
    /// Prepares a target, estimating covariances unless already present.
    pub fn prepare(cloud: &PointCloud<R>, cfg: &GicpConfig<R>) -> Result<Self, RegError> {
        cfg.validate()?;
        let cloud = if cloud.covariances.is_some() {
            cloud.clone()
        } else {
            estimate_covariances(cloud, cfg.k_neighbors, cfg.plane_regularization)?
        };
        let tree = KdTree::build(&cloud.points);
        Ok(Self { cloud, tree })
    }

    /// Prepares a target with flat-world covariances (2-D stage).
    pub fn prepare_planar(cloud: &PointCloud<R>, cfg: &GicpConfig<R>) -> Result<Self, RegError> {
        cfg.validate()?;
        let cloud = planar_covariances(cloud, cfg.plane_regularization);
        let tree = KdTree::build(&cloud.points);
        Ok(Self { cloud, tree })
    }

    pub fn cloud(&self) -> &PointCloud<R> {
        &self.cloud
    }
}

/// One Gauss-Newton iteration record, for diagnostics and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationTrace<R: Real> {
    pub iteration: usize,
    pub correspondences: usize,
    /// Objective at the iteration start.
    pub objective_before: R,
    /// Objective after the accepted step, on the same (frozen)
    /// correspondence set. Equal to `objective_before` when no step was
    /// accepted.
    pub objective_after: R,
    /// Fraction of the full Gauss-Newton step accepted (0 = none).
    pub step_scale: R,
}

/// The weight `(Cᵗ + R Cˢ Rᵀ)⁻¹` of one correspondence.
fn pair_weight<R: Real>(
    c_target: &Matrix3<R>,
    c_source: &Matrix3<R>,
    rot: &Matrix3<R>,
) -> Matrix3<R> {
    (c_target + rot * c_source * rot.transpose())
        .try_inverse()
        .expect("regularized covariance sum is invertible")
}

/// Objective over a frozen correspondence set at the given pose.
fn frozen_objective<R: Real>(
    source: &PointCloud<R>,
    target: &PointCloud<R>,
    corr: &[(usize, usize)],
    pose: &Pose<R>,
) -> R {
    let rot = *pose.rotation.matrix();
    let src_cov = source.covariances.as_ref().expect("source covariances");
    let tgt_cov = target.covariances.as_ref().expect("target covariances");
    let mut total = R::zero();
    for &(si, ti) in corr {
        let w = pair_weight(&tgt_cov[ti], &src_cov[si], &rot);
        let r = target.points[ti] - pose.apply(&source.points[si]);
        total += (w * r).dot(&r);
    }
    total
}

/// Runs GICP against a prepared target. The source must carry covariances
/// (see [`estimate_covariances`] / [`planar_covariances`]); `init` seeds the
/// solve and the returned delta satisfies `final = delta ∘ init`.
pub fn gicp_prepared<R: Real>(
    source: &PointCloud<R>,
    target: &GicpTarget<R>,
    init: &Pose<R>,
    cfg: &GicpConfig<R>,
    mut trace: Option<&mut dyn FnMut(&IterationTrace<R>)>,
) -> Result<RegistrationResult<R>, RegError> {
    cfg.validate()?;
    let src_cov = source
        .covariances
        .as_ref()
        .ok_or(RegError::MissingCovariances)?;
    debug_assert_eq!(src_cov.len(), source.len());
    let tgt_cov = target
        .cloud
        .covariances
        .as_ref()
        .expect("prepared target has covariances");

    let max_dist = cfg.max_correspondence_dist;
    let mut transform = *init;
    let mut converged = false;
    let mut iterations = 0;

    for iteration in 0..cfg.max_iterations {
        iterations = iteration + 1;
        let rot = *transform.rotation.matrix();

        let mut corr = Vec::new();
        for (si, p) in source.points.iter().enumerate() {
            let q = transform.apply(p);
            if let Some(nb) = target.tree.nearest_within(&q, max_dist) {
                corr.push((si, nb.index));
            }
        }
        if corr.len() < MIN_CORRESPONDENCES {
            return Err(RegError::Degenerate(DegenerateKind::TooFewCorrespondences {
                found: corr.len(),
            }));
        }

        // Normal equations H u = g with u = [ρ; φ] and the increment model
        // p ↦ exp(skew(φ))·p + ρ applied on the left of the current pose.
        let mut h_pp = Matrix3::<R>::zeros();
        let mut h_pr = Matrix3::<R>::zeros();
        let mut h_rr = Matrix3::<R>::zeros();
        let mut g_p = Vector3::<R>::zeros();
        let mut g_r = Vector3::<R>::zeros();
        let mut objective_before = R::zero();
        for &(si, ti) in &corr {
            let q = transform.apply(&source.points[si]);
            let w = pair_weight(&tgt_cov[ti], &src_cov[si], &rot);
            let r = target.cloud.points[ti] - q;
            let a = -skew(&q);
            let wa = w * a;
            h_pp += w;
            h_pr += wa;
            h_rr += a.transpose() * wa;
            let wr = w * r;
            g_p += wr;
            g_r += a.transpose() * wr;
            objective_before += wr.dot(&r);
        }
        let mut h = Matrix6::<R>::zeros();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&h_pp);
        h.fixed_view_mut::<3, 3>(0, 3).copy_from(&h_pr);
        h.fixed_view_mut::<3, 3>(3, 0).copy_from(&h_pr.transpose());
        h.fixed_view_mut::<3, 3>(3, 3).copy_from(&h_rr);
        let mut g = Vector6::<R>::zeros();
        g.fixed_view_mut::<3, 1>(0, 0).copy_from(&g_p);
        g.fixed_view_mut::<3, 1>(3, 0).copy_from(&g_r);

        let eig = h.symmetric_eigen();
        let lambda_min = eig.eigenvalues.min();
        let lambda_max = eig.eigenvalues.max();
        if lambda_min <= R::zero() || lambda_max > R::c(MAX_CONDITION) * lambda_min {
            let condition = if lambda_min <= R::zero() {
                f64::INFINITY
            } else {
                (lambda_max / lambda_min).as_f64()
            };
            return Err(RegError::Degenerate(DegenerateKind::IllConditioned {
                condition,
            }));
        }
        let chol = nalgebra::Cholesky::new(h).ok_or(RegError::Degenerate(
            DegenerateKind::IllConditioned {
                condition: (lambda_max / lambda_min).as_f64(),
            },
        ))?;
        let u = chol.solve(&g);
        let rho = Vector3::new(u[0], u[1], u[2]);
        let phi = Vector3::new(u[3], u[4], u[5]);

        if rho.norm() < cfg.translation_epsilon && phi.norm() < cfg.rotation_epsilon {
            converged = true;
            if let Some(t) = trace.as_deref_mut() {
                t(&IterationTrace {
                    iteration,
                    correspondences: corr.len(),
                    objective_before,
                    objective_after: objective_before,
                    step_scale: R::zero(),
                });
            }
            break;
        }

        // Accept only steps that decrease the frozen-correspondence
        // objective; halve until one does.
        let mut scale = R::one();
        let mut accepted = None;
        for _ in 0..MAX_STEP_HALVINGS {
            let delta = Pose::new(Rotation3::new(phi * scale), rho * scale);
            let candidate = delta.compose(&transform);
            let objective_after =
                frozen_objective(source, &target.cloud, &corr, &candidate);
            if objective_after < objective_before {
                accepted = Some((candidate, objective_after, scale));
                break;
            }
            scale *= R::c(0.5);
        }
        let Some((candidate, objective_after, scale)) = accepted else {
            // No decrease possible along the Gauss-Newton direction: treat
            // the current pose as the (local) optimum.
            converged = true;
            if let Some(t) = trace.as_deref_mut() {
                t(&IterationTrace {
                    iteration,
                    correspondences: corr.len(),
                    objective_before,
                    objective_after: objective_before,
                    step_scale: R::zero(),
                });
            }
            break;
        };
        transform = candidate;
        if let Some(t) = trace.as_deref_mut() {
            t(&IterationTrace {
                iteration,
                correspondences: corr.len(),
                objective_before,
                objective_after,
                step_scale: scale,
            });
        }
        if (rho * scale).norm() < cfg.translation_epsilon
            && (phi * scale).norm() < cfg.rotation_epsilon
        {
            converged = true;
            break;
        }
    }

    // Inlier statistics at the final pose.
    let mut inliers = 0usize;
    let mut sq_sum = R::zero();
    for p in &source.points {
        let q = transform.apply(p);
        if let Some(nb) = target.tree.nearest_within(&q, max_dist) {
            inliers += 1;
            sq_sum += nb.dist_sq;
        }
    }
    let fitness = if source.is_empty() {
        R::zero()
    } else {
        R::from_usize(inliers).expect("inlier count") / R::from_usize(source.len()).expect("size")
    };
    let rmse_inliers = if inliers == 0 {
        R::zero()
    } else {
        (sq_sum / R::from_usize(inliers).expect("inlier count")).sqrt()
    };

    Ok(RegistrationResult {
        delta: transform.compose(&init.inverse()),
        fitness,
        rmse_inliers,
        iterations,
        converged,
    })
}

/// Convenience entry point: prepares the target (estimating covariances on
/// either cloud when missing) and runs [`gicp_prepared`].
pub fn gicp<R: Real>(
    source: &PointCloud<R>,
    target: &PointCloud<R>,
    init: &Pose<R>,
    cfg: &GicpConfig<R>,
) -> Result<RegistrationResult<R>, RegError> {
    cfg.validate()?;
    let source = if source.covariances.is_some() {
        source.clone()
    } else {
        estimate_covariances(source, cfg.k_neighbors, cfg.plane_regularization)?
    };
    let target = GicpTarget::prepare(target, cfg)?;
    gicp_prepared(&source, &target, init, cfg, None)
}
