//! Trajectory and map accuracy metrics, and per-scan timing statistics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Rotation, StampedPose};
use crate::pipeline::{simulate_drops, DropPolicy};
use crate::pointcloud::{squared_distance, PointCloud, SpatialIndex};
use crate::registration::{EnrichedCloud, Gicp, GicpConfig};

/// Processing time under which a scan counts as real time (s).
pub const REALTIME_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no pose pairs within {tol} s of each other")]
    NoAssociations { tol: f64 },
    #[error("trajectory stamps must strictly increase (index {index}: {prev} then {next})")]
    NonIncreasing { index: usize, prev: f64, next: f64 },
    #[error("{0} cloud is empty")]
    EmptyCloud(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Least-squares rotation and translation (no scale).
    #[default]
    Rigid,
    /// Compare in the frames as given.
    None,
}

/// The `eval` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub assoc_tol: f64,
    pub alignment: Alignment,
    pub map_icp_max_dist: f64,
    pub map_icp_iterations: usize,
    pub map_icp_epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            assoc_tol: 0.05,
            alignment: Alignment::Rigid,
            map_icp_max_dist: 1.0,
            map_icp_iterations: 100,
            map_icp_epsilon: 1e-7,
        }
    }
}

/// Poses with strictly increasing stamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    poses: Vec<StampedPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<StampedPose>) -> Result<Self, EvalError> {
        for (i, w) in poses.windows(2).enumerate() {
            if !(w[1].time > w[0].time) {
                return Err(EvalError::NonIncreasing {
                    index: i + 1,
                    prev: w[0].time,
                    next: w[1].time,
                });
            }
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[StampedPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Applies `t * pose` to every pose.
    pub fn transformed(&self, t: &Pose) -> Self {
        Self {
            poses: self
                .poses
                .iter()
                .map(|p| StampedPose {
                    time: p.time,
                    pose: t.compose(&p.pose),
                })
                .collect(),
        }
    }
}

/// Pairs `(est index, gt index)` of nearest stamps within `tol`.
pub fn associate(est: &Trajectory, gt: &Trajectory, tol: f64) -> Vec<(usize, usize)> {
    let g = gt.poses();
    est.poses()
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            let j = g.partition_point(|p| p.time < e.time);
            let best = [j.checked_sub(1), (j < g.len()).then_some(j)]
                .into_iter()
                .flatten()
                .min_by(|&a, &b| {
                    (g[a].time - e.time)
                        .abs()
                        .total_cmp(&(g[b].time - e.time).abs())
                        .then(a.cmp(&b))
                })?;
            ((g[best].time - e.time).abs() <= tol).then_some((i, best))
        })
        .collect()
}

/// Rigid transform minimizing `sum |dst - (R src + t)|^2` (Kabsch).
pub fn fit_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    assert_eq!(src.len(), dst.len());
    if src.is_empty() {
        return Pose::identity();
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Pose::from_translation(cd.x - cs.x, cd.y - cs.y, cd.z - cs.z);
    };
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v * fix * u.transpose();
    let rot = nalgebra::Rotation3::from_matrix_unchecked(r);
    let rotation = Rotation::from_unit_quaternion(nalgebra::UnitQuaternion::from_rotation_matrix(&rot));
    let fitted = Pose::new(rotation, cd - rotation.rotate(&cs));
    // Rounding in the SVD can leave an exact fit slightly off; keep the
    // identity when it is at least as good.
    let cost = |t: &Pose| -> f64 { src.iter().zip(dst).map(|(s, d)| (t.transform_point(s) - d).norm_squared()).sum() };
    if cost(&Pose::identity()) <= cost(&fitted) {
        Pose::identity()
    } else {
        fitted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApeReport {
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub rmse: f64,
    pub count: usize,
    /// Applied to the estimate before comparison.
    pub alignment: Pose,
    /// `(est stamp, translation error)` per matched pair.
    pub errors: Vec<(f64, f64)>,
}

/// Absolute position error of `est` against `gt`.
pub fn ape(est: &Trajectory, gt: &Trajectory, assoc_tol: f64, alignment: Alignment) -> Result<ApeReport, EvalError> {
    let pairs = associate(est, gt, assoc_tol);
    if pairs.is_empty() {
        return Err(EvalError::NoAssociations { tol: assoc_tol });
    }
    let src: Vec<_> = pairs.iter().map(|&(i, _)| est.poses()[i].pose.translation).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| gt.poses()[j].pose.translation).collect();
    let align = match alignment {
        Alignment::Rigid => fit_rigid(&src, &dst),
        Alignment::None => Pose::identity(),
    };
    let errors: Vec<(f64, f64)> = pairs
        .iter()
        .zip(src.iter().zip(&dst))
        .map(|(&(i, _), (s, d))| (est.poses()[i].time, (align.transform_point(s) - d).norm()))
        .collect();
    let values: Vec<f64> = errors.iter().map(|e| e.1).collect();
    let s = Summary::of(&values).expect("non-empty");
    Ok(ApeReport {
        max: s.max,
        mean: s.mean,
        std: s.std,
        rmse: s.rmse,
        count: values.len(),
        alignment: align,
        errors,
    })
}

/// Basic statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub rmse: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let rmse = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Some(Self {
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            mean,
            std: var.sqrt(),
            rmse,
            median,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapErrorReport {
    pub rmse: f64,
    pub icp_converged: bool,
    pub icp_iterations: usize,
    /// Applied to the estimated map before measuring.
    pub alignment: Pose,
}

/// Point-to-point ICP of `est_map` onto `gt_map`, then RMSE of each
/// estimated point's nearest ground-truth distance.
pub fn map_error(est_map: &PointCloud, gt_map: &PointCloud, cfg: &EvalConfig) -> Result<MapErrorReport, EvalError> {
    if est_map.is_empty() {
        return Err(EvalError::EmptyCloud("estimated"));
    }
    if gt_map.is_empty() {
        return Err(EvalError::EmptyCloud("ground-truth"));
    }
    let gicp = Gicp::new(GicpConfig {
        max_iterations: cfg.map_icp_iterations.max(1),
        correspondence_max_dist: cfg.map_icp_max_dist,
        translation_epsilon: cfg.map_icp_epsilon,
        rotation_epsilon: cfg.map_icp_epsilon,
        ..GicpConfig::default()
    })
    .expect("valid ICP settings");
    let src = EnrichedCloud::with_identity_covariances(est_map.clone());
    let dst = EnrichedCloud::with_identity_covariances(gt_map.clone());
    let r = gicp.align(&src, &dst, &Pose::identity());
    let index = dst.index().expect("non-empty");
    let sum: f64 = src
        .positions()
        .iter()
        .map(|p| {
            let q = r.transform.transform_point(p);
            let nn = index.nearest(&q, 1)[0].index;
            squared_distance(&q, &dst.positions()[nn])
        })
        .sum();
    Ok(MapErrorReport {
        rmse: (sum / src.len() as f64).sqrt(),
        icp_converged: r.converged,
        icp_iterations: r.iterations_used,
        alignment: r.transform,
    })
}

/// Nearest-neighbour RMSE without alignment (oracle helper).
pub fn nn_rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Option<f64> {
    let index = SpatialIndex::new(gt)?;
    if est.is_empty() {
        return None;
    }
    let sum: f64 = est
        .iter()
        .map(|p| squared_distance(p, &gt[index.nearest(p, 1)[0].index]))
        .sum();
    Some((sum / est.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub count: usize,
    pub summary: Summary,
    /// Share of scans processed within [`REALTIME_THRESHOLD`].
    pub realtime_fraction: f64,
    /// `(lower edge, upper edge, count)`; the last bin is open-ended.
    pub histogram: Vec<(f64, f64, usize)>,
    pub dropped: usize,
    pub drops_per_second: f64,
}

const HISTOGRAM_WIDTH: f64 = 0.01;
const HISTOGRAM_BINS: usize = 30;

/// Statistics over per-scan processing times. Drops are derived by replaying
/// the durations against arrivals every `period` seconds with the
/// no-buffering policy. Returns `None` for empty input.
pub fn timing_report(durations: &[f64], period: f64) -> Option<TimingReport> {
    let summary = Summary::of(durations)?;
    let policy = simulate_paced(durations, period);
    Some(build_timing(durations, summary, &policy))
}

/// As [`timing_report`], with drop counts observed in a paced replay.
pub fn timing_report_observed(durations: &[f64], drops: &DropPolicy) -> Option<TimingReport> {
    let summary = Summary::of(durations)?;
    Some(build_timing(durations, summary, drops))
}

fn build_timing(durations: &[f64], summary: Summary, policy: &DropPolicy) -> TimingReport {
    let mut histogram: Vec<(f64, f64, usize)> = (0..HISTOGRAM_BINS)
        .map(|i| {
            let lo = i as f64 * HISTOGRAM_WIDTH;
            let hi = if i + 1 == HISTOGRAM_BINS {
                f64::INFINITY
            } else {
                lo + HISTOGRAM_WIDTH
            };
            (lo, hi, 0)
        })
        .collect();
    for &d in durations {
        let bin = ((d / HISTOGRAM_WIDTH).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin].2 += 1;
    }
    let realtime = durations.iter().filter(|&&d| d < REALTIME_THRESHOLD).count();
    TimingReport {
        count: durations.len(),
        summary,
        realtime_fraction: realtime as f64 / durations.len() as f64,
        histogram,
        dropped: policy.dropped,
        drops_per_second: policy.drops_per_second(),
    }
}

/// Arrivals every `period` until every duration has been consumed and the
/// last scan has finished.
fn simulate_paced(durations: &[f64], period: f64) -> DropPolicy {
    let mut arrivals = Vec::new();
    let mut elapsed = 0usize;
    let mut busy_until = f64::NEG_INFINITY;
    let mut processed = 0usize;
    loop {
        let a = elapsed as f64 * period;
        if processed == durations.len() && a >= busy_until - crate::pipeline::ARRIVAL_TOLERANCE {
            break;
        }
        if a >= busy_until - crate::pipeline::ARRIVAL_TOLERANCE && processed < durations.len() {
            busy_until = a + durations[processed];
            processed += 1;
        }
        arrivals.push(a);
        elapsed += 1;
    }
    simulate_drops(&arrivals, durations)
}
