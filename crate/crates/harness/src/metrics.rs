//! Trajectory accuracy metrics.
//!
//! Estimated poses are matched to ground truth by nearest timestamp within
//! a 50 ms tolerance; unmatched estimates are dropped. Horizontal error is
//! the planar Euclidean distance, vertical error the height difference, and
//! the three attitude errors are per-channel differences wrapped to
//! (-180 deg, 180 deg]. Because all errors are differences, the metrics are
//! invariant to a common time shift of both series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PoseRecord;

/// Maximum |Δt| between an estimate and its ground-truth match.
pub const MATCH_TOLERANCE_S: f64 = 0.05;

/// Raised when no estimate matches any ground-truth row in time.
#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error(
        "no time overlap between estimate ({est_rows} rows) and ground truth ({gt_rows} rows) \
         within {tolerance_s} s"
    )]
    NoOverlap {
        est_rows: usize,
        gt_rows: usize,
        tolerance_s: f64,
    },
}

/// Accuracy summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub matched_epochs: usize,
    pub horizontal_rmse_m: f64,
    pub vertical_rmse_m: f64,
    pub roll_rmse_deg: f64,
    pub pitch_rmse_deg: f64,
    pub heading_rmse_deg: f64,
    pub horizontal_max_ae_m: f64,
    pub vertical_max_ae_m: f64,
    pub roll_max_ae_deg: f64,
    pub pitch_max_ae_deg: f64,
    pub heading_max_ae_deg: f64,
    /// Percentage of matched epochs with horizontal error strictly below 1 m.
    pub pct_within_1m: f64,
    /// Percentage strictly below 1.5 m.
    pub pct_within_1p5m: f64,
}

/// Wraps an angle difference in degrees to (-180, 180].
pub fn wrap_angle_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

fn max_abs(errors: &[f64]) -> f64 {
    errors.iter().fold(0.0, |acc, e| acc.max(e.abs()))
}

/// Index of the gt row (sorted by time) closest to `t`.
fn nearest(gt_sorted: &[(f64, usize)], t: f64) -> usize {
    let pos = gt_sorted.partition_point(|(time, _)| *time < t);
    let mut best = pos.min(gt_sorted.len() - 1);
    if pos > 0 {
        let before = pos - 1;
        if (gt_sorted[before].0 - t).abs() <= (gt_sorted[best].0 - t).abs() {
            best = before;
        }
    }
    gt_sorted[best].1
}

/// Computes accuracy metrics of `est` against `gt`.
pub fn compute_metrics(est: &[PoseRecord], gt: &[PoseRecord]) -> Result<Metrics, MetricsError> {
    let mut gt_sorted: Vec<(f64, usize)> = gt.iter().map(|r| r.time).zip(0..).collect();
    gt_sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut horizontal = Vec::new();
    let mut vertical = Vec::new();
    let mut roll = Vec::new();
    let mut pitch = Vec::new();
    let mut heading = Vec::new();
    if !gt.is_empty() {
        for e in est {
            let g = &gt[nearest(&gt_sorted, e.time)];
            if (g.time - e.time).abs() > MATCH_TOLERANCE_S {
                continue;
            }
            horizontal.push(((e.x - g.x).powi(2) + (e.y - g.y).powi(2)).sqrt());
            vertical.push(e.z - g.z);
            roll.push(wrap_angle_deg(e.roll - g.roll));
            pitch.push(wrap_angle_deg(e.pitch - g.pitch));
            heading.push(wrap_angle_deg(e.yaw - g.yaw));
        }
    }
    let matched = horizontal.len();
    if matched == 0 {
        return Err(MetricsError::NoOverlap {
            est_rows: est.len(),
            gt_rows: gt.len(),
            tolerance_s: MATCH_TOLERANCE_S,
        });
    }

    let pct = |limit: f64| {
        100.0 * horizontal.iter().filter(|h| **h < limit).count() as f64 / matched as f64
    };
    Ok(Metrics {
        matched_epochs: matched,
        horizontal_rmse_m: rmse(&horizontal),
        vertical_rmse_m: rmse(&vertical),
        roll_rmse_deg: rmse(&roll),
        pitch_rmse_deg: rmse(&pitch),
        heading_rmse_deg: rmse(&heading),
        horizontal_max_ae_m: max_abs(&horizontal),
        vertical_max_ae_m: max_abs(&vertical),
        roll_max_ae_deg: max_abs(&roll),
        pitch_max_ae_deg: max_abs(&pitch),
        heading_max_ae_deg: max_abs(&heading),
        pct_within_1m: pct(1.0),
        pct_within_1p5m: pct(1.5),
    })
}
