//! Point cloud container, spatial index and the cloud filters: range,
//! voxel-grid centroid, seeded random downsampling, and the multi-lidar
//! merger.

mod kdtree;

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::Pose;

pub use kdtree::{squared_distance, Neighbor, SpatialIndex};

/// Frame name of merged clouds.
pub const ROBOT_FRAME: &str = "base";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointCloudError {
    #[error("voxel leaf size must be positive, got {0}")]
    InvalidLeaf(f64),
    #[error("keep fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("range bounds must satisfy 0 <= min < max, got [{min}, {max}]")]
    InvalidRange { min: f64, max: f64 },
    #[error("{clouds} clouds but {extrinsics} extrinsics")]
    LengthMismatch { clouds: usize, extrinsics: usize },
    #[error("nothing to merge")]
    EmptyMerge,
    #[error("cannot index an empty cloud")]
    EmptyCloud,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub position: Vector3<f64>,
    /// Seconds after the cloud stamp at which the point was measured.
    pub time_offset: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            time_offset: 0.0,
        }
    }

    pub fn at(position: Vector3<f64>) -> Self {
        Self {
            position,
            time_offset: 0.0,
        }
    }

    pub fn timed(position: Vector3<f64>, time_offset: f64) -> Self {
        Self {
            position,
            time_offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub stamp: f64,
    pub frame: String,
    pub points: Vec<Point>,
    /// Whether `time_offset` carries real per-point timing.
    pub timed: bool,
}

impl PointCloud {
    pub fn new(stamp: f64, frame: impl Into<String>, points: Vec<Point>) -> Self {
        Self {
            stamp,
            frame: frame.into(),
            points,
            timed: false,
        }
    }

    pub fn from_positions(stamp: f64, frame: impl Into<String>, positions: &[Vector3<f64>]) -> Self {
        Self::new(
            stamp,
            frame,
            positions
                .iter()
                .map(|&position| Point {
                    position,
                    time_offset: 0.0,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| p.position).collect()
    }

    /// Same metadata, different points.
    pub fn with_points(&self, points: Vec<Point>) -> Self {
        Self {
            stamp: self.stamp,
            frame: self.frame.clone(),
            points,
            timed: self.timed,
        }
    }
}

/// Applies `pose` to every position; stamp, frame label and timing are kept.
pub fn transform_cloud(c: &PointCloud, pose: &Pose) -> PointCloud {
    let rot = pose.rotation.matrix();
    c.with_points(
        c.points
            .iter()
            .map(|p| Point {
                position: rot * p.position + pose.translation,
                time_offset: p.time_offset,
            })
            .collect(),
    )
}

/// Integer voxel coordinates of `p` for cubic cells of size `leaf`.
pub fn voxel_key(p: &Vector3<f64>, leaf: f64) -> (i64, i64, i64) {
    (
        (p.x / leaf).floor() as i64,
        (p.y / leaf).floor() as i64,
        (p.z / leaf).floor() as i64,
    )
}

/// Replaces the points of each occupied voxel by their centroid. Output is in
/// order of first occupancy.
pub fn voxel_grid_filter(c: &PointCloud, leaf: f64) -> Result<PointCloud, PointCloudError> {
    if !(leaf > 0.0) || !leaf.is_finite() {
        return Err(PointCloudError::InvalidLeaf(leaf));
    }
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(c.len());
    let mut acc: Vec<(Vector3<f64>, f64, usize)> = Vec::new();
    for p in &c.points {
        let key = voxel_key(&p.position, leaf);
        let slot = *slots.entry(key).or_insert_with(|| {
            acc.push((Vector3::zeros(), 0.0, 0));
            acc.len() - 1
        });
        let a = &mut acc[slot];
        a.0 += p.position;
        a.1 += p.time_offset;
        a.2 += 1;
    }
    let points = acc
        .into_iter()
        .map(|(sum, t, n)| {
            let n = n as f64;
            Point {
                position: sum / n,
                time_offset: t / n,
            }
        })
        .collect();
    Ok(c.with_points(points))
}

/// Keeps `round(keep_fraction * n)` points chosen uniformly by one-pass
/// sequential selection sampling. Input order is preserved and the choice is
/// fully determined by `seed`.
pub fn random_downsample(c: &PointCloud, keep_fraction: f64, seed: u64) -> Result<PointCloud, PointCloudError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(PointCloudError::InvalidFraction(keep_fraction));
    }
    let n = c.len();
    let target = (keep_fraction * n as f64).round() as usize;
    if target >= n {
        return Ok(c.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut needed = target;
    let mut points = Vec::with_capacity(target);
    for (seen, p) in c.points.iter().enumerate() {
        if needed == 0 {
            break;
        }
        let remaining = n - seen;
        // Select with probability needed / remaining.
        if rng.random_range(0..remaining) < needed {
            points.push(*p);
            needed -= 1;
        }
    }
    Ok(c.with_points(points))
}

/// Keeps points with finite coordinates and `min_r <= |p| <= max_r`.
pub fn range_filter(c: &PointCloud, min_r: f64, max_r: f64) -> Result<PointCloud, PointCloudError> {
    if !(min_r >= 0.0 && min_r < max_r) {
        return Err(PointCloudError::InvalidRange { min: min_r, max: max_r });
    }
    Ok(c.with_points(
        c.points
            .iter()
            .filter(|p| {
                let r = p.position.norm();
                r.is_finite() && r >= min_r && r <= max_r
            })
            .copied()
            .collect(),
    ))
}

/// Moves each cloud into the robot frame with its extrinsic and concatenates
/// them. The output takes the first cloud's stamp; it is timed only if every
/// input is.
pub fn merge(clouds: &[PointCloud], extrinsics: &[Pose]) -> Result<PointCloud, PointCloudError> {
    if clouds.len() != extrinsics.len() {
        return Err(PointCloudError::LengthMismatch {
            clouds: clouds.len(),
            extrinsics: extrinsics.len(),
        });
    }
    let first = clouds.first().ok_or(PointCloudError::EmptyMerge)?;
    let total = clouds.iter().map(PointCloud::len).sum();
    let mut points = Vec::with_capacity(total);
    for (c, ext) in clouds.iter().zip(extrinsics) {
        points.extend(transform_cloud(c, ext).points);
    }
    Ok(PointCloud {
        stamp: first.stamp,
        frame: ROBOT_FRAME.to_string(),
        points,
        timed: clouds.iter().all(|c| c.timed),
    })
}

pub fn build_index(c: &PointCloud) -> Result<SpatialIndex, PointCloudError> {
    SpatialIndex::new(&c.positions()).ok_or(PointCloudError::EmptyCloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use std::collections::HashSet;
    use std::f64::consts::FRAC_PI_2;

    fn random_cloud(seed: u64, n: usize, lo: f64, hi: f64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Point::timed(
                    Vector3::new(
                        rng.random_range(lo..hi),
                        rng.random_range(lo..hi),
                        rng.random_range(lo..hi),
                    ),
                    rng.random_range(0.0..0.1),
                )
            })
            .collect();
        let mut c = PointCloud::new(12.5, "lidar", pts);
        c.timed = true;
        c
    }

    #[test]
    fn transform_identity_is_bitwise() {
        let c = random_cloud(1, 100, -3.0, 3.0);
        assert_eq!(transform_cloud(&c, &Pose::identity()), c);
    }

    #[test]
    fn transform_yaw_axis() {
        let c = PointCloud::new(0.0, "lidar", vec![Point::new(1.0, 0.0, 0.0)]);
        let out = transform_cloud(&c, &Pose::from_rotation(Rotation::from_rpy(0.0, 0.0, FRAC_PI_2)));
        assert!((out.points[0].position - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn transform_round_trip() {
        for seed in 0..20 {
            let c = random_cloud(seed, 200, -10.0, 10.0);
            let pose = Pose::from_xyz_rpy(seed as f64, -2.0, 0.5, 0.3, -0.2, seed as f64 * 0.7);
            let back = transform_cloud(&transform_cloud(&c, &pose), &pose.inverse());
            assert_eq!(back.stamp, c.stamp);
            for (a, b) in back.points.iter().zip(&c.points) {
                assert!((a.position - b.position).norm() < 1e-9);
                assert_eq!(a.time_offset, b.time_offset);
            }
        }
    }

    #[test]
    fn voxel_single_cube_centroid() {
        let mut pts = Vec::new();
        for &x in &[0.02, 0.07] {
            for &y in &[0.02, 0.07] {
                for &z in &[0.02, 0.07] {
                    pts.push(Point::new(x, y, z));
                }
            }
        }
        let out = voxel_grid_filter(&PointCloud::new(0.0, "f", pts), 0.1).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points[0].position - Vector3::new(0.045, 0.045, 0.045)).norm() < 1e-15);
    }

    #[test]
    fn voxel_empty_and_bad_leaf() {
        let empty = PointCloud::new(1.0, "f", vec![]);
        assert!(voxel_grid_filter(&empty, 0.1).unwrap().is_empty());
        assert_eq!(voxel_grid_filter(&empty, 0.0), Err(PointCloudError::InvalidLeaf(0.0)));
        assert!(voxel_grid_filter(&empty, -1.0).is_err());
    }

    #[test]
    fn voxel_random_against_occupancy_oracle() {
        let c = random_cloud(7, 5000, 0.0, 1.0);
        let leaf = 0.1;
        let out = voxel_grid_filter(&c, leaf).unwrap();
        // Independent occupancy count: integer cell index via truncation of
        // non-negative coordinates.
        let occupied: HashSet<(u32, u32, u32)> = c
            .points
            .iter()
            .map(|p| {
                (
                    (p.position.x / leaf) as u32,
                    (p.position.y / leaf) as u32,
                    (p.position.z / leaf) as u32,
                )
            })
            .collect();
        assert_eq!(out.len(), occupied.len());
        for p in &out.points {
            // The centroid must fall in a cell that contains input points.
            let cell = |v: f64| (v / leaf).floor();
            let lo = Vector3::new(cell(p.position.x), cell(p.position.y), cell(p.position.z)) * leaf;
            for d in 0..3 {
                assert!(p.position[d] >= lo[d] - 1e-12 && p.position[d] <= lo[d] + leaf + 1e-12);
            }
        }
        assert_eq!(out.stamp, c.stamp);
        assert_eq!(out.frame, c.frame);
    }

    #[test]
    fn voxel_idempotent_count() {
        let c = random_cloud(9, 3000, -2.0, 2.0);
        let once = voxel_grid_filter(&c, 0.25).unwrap();
        let twice = voxel_grid_filter(&once, 0.25).unwrap();
        assert_eq!(once.len(), twice.len());
    }

    #[test]
    fn downsample_keep_all() {
        let c = random_cloud(2, 50, -1.0, 1.0);
        assert_eq!(random_downsample(&c, 1.0, 5).unwrap(), c);
    }

    #[test]
    fn downsample_ninety_percent_discarded() {
        let c = random_cloud(3, 1000, -1.0, 1.0);
        let out = random_downsample(&c, 0.1, 42).unwrap();
        assert_eq!(out.len(), 100);
        let input: Vec<_> = c.points.iter().map(|p| p.position).collect();
        for p in &out.points {
            assert!(input.contains(&p.position));
        }
    }

    #[test]
    fn downsample_deterministic_and_seed_sensitive() {
        let c = random_cloud(4, 500, -1.0, 1.0);
        let a = random_downsample(&c, 0.3, 99).unwrap();
        let b = random_downsample(&c, 0.3, 99).unwrap();
        let other = random_downsample(&c, 0.3, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 150);
        assert_ne!(a, other);
    }

    #[test]
    fn downsample_rejects_bad_fraction() {
        let c = random_cloud(4, 10, -1.0, 1.0);
        assert!(random_downsample(&c, 0.0, 1).is_err());
        assert!(random_downsample(&c, 1.5, 1).is_err());
        assert!(random_downsample(&c, f64::NAN, 1).is_err());
        assert!(random_downsample(&PointCloud::new(0.0, "f", vec![]), 0.5, 1).unwrap().is_empty());
    }

    #[test]
    fn range_filter_matches_predicate() {
        let mut c = random_cloud(5, 2000, -5.0, 5.0);
        c.points.push(Point::new(0.0, 0.0, 0.0));
        c.points.push(Point::new(f64::NAN, 1.0, 1.0));
        c.points.push(Point::new(f64::INFINITY, 1.0, 1.0));
        let out = range_filter(&c, 0.5, 4.0).unwrap();
        let expected: Vec<Point> = c
            .points
            .iter()
            .filter(|p| {
                let (x, y, z) = (p.position.x, p.position.y, p.position.z);
                let r2 = x * x + y * y + z * z;
                (0.25..=16.0).contains(&r2)
            })
            .copied()
            .collect();
        assert_eq!(out.points, expected);
        let inside = range_filter(&random_cloud(6, 100, 1.0, 2.0), 0.5, 10.0).unwrap();
        assert_eq!(inside.len(), 100);
        assert!(range_filter(&c, 2.0, 2.0).is_err());
        assert!(range_filter(&c, -1.0, 2.0).is_err());
    }

    #[test]
    fn merge_cases() {
        let a = random_cloud(1, 10, -1.0, 1.0);
        let single = merge(std::slice::from_ref(&a), &[Pose::identity()]).unwrap();
        assert_eq!(single.points, a.points);
        assert_eq!(single.stamp, a.stamp);
        let b = random_cloud(2, 10, 5.0, 6.0);
        let two = merge(&[a.clone(), b], &[Pose::identity(), Pose::from_translation(0.0, 0.0, 1.0)]).unwrap();
        assert_eq!(two.len(), 20);
        assert_eq!(two.frame, ROBOT_FRAME);
        assert!(matches!(
            merge(&[a], &[]),
            Err(PointCloudError::LengthMismatch { .. })
        ));
        assert_eq!(merge(&[], &[]), Err(PointCloudError::EmptyMerge));
    }

    #[test]
    fn build_index_empty_errors() {
        assert!(matches!(
            build_index(&PointCloud::new(0.0, "f", vec![])),
            Err(PointCloudError::EmptyCloud)
        ));
    }
}
