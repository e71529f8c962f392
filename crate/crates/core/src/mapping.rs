//! Global map accumulation at keyframes and local submap extraction.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::pointcloud::{voxel_key, Point, PointCloud};
use crate::registration::EnrichedCloud;

pub const WORLD_FRAME: &str = "world";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MappingError {
    #[error("keyframe thresholds must be positive (got {translation} m, {rotation} deg)")]
    InvalidPolicy { translation: f64, rotation: f64 },
    #[error("map resolution must be positive, got {0}")]
    InvalidResolution(f64),
    #[error("submap radius must be positive, got {0}")]
    InvalidRadius(f64),
    #[error("covariance count {covariances} does not match point count {points}")]
    CovarianceMismatch { points: usize, covariances: usize },
}

/// Insert a keyframe after `translation_threshold` meters or
/// `rotation_threshold` degrees of motion since the last one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframePolicy {
    pub translation_threshold: f64,
    pub rotation_threshold: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            translation_threshold: 1.0,
            rotation_threshold: 30.0,
        }
    }
}

impl KeyframePolicy {
    pub fn validate(&self) -> Result<(), MappingError> {
        if self.translation_threshold > 0.0 && self.rotation_threshold > 0.0 {
            Ok(())
        } else {
            Err(MappingError::InvalidPolicy {
                translation: self.translation_threshold,
                rotation: self.rotation_threshold,
            })
        }
    }
}

/// True for the first scan, or when either threshold is reached.
pub fn should_insert(pose: &Pose, policy: &KeyframePolicy, last_keyframe: Option<&Pose>) -> bool {
    let Some(last) = last_keyframe else {
        return true;
    };
    let (dt, dr) = last.distance_to(pose);
    dt >= policy.translation_threshold || dr.to_degrees() >= policy.rotation_threshold
}

/// The `mapping` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingConfig {
    pub resolution: f64,
    pub submap_radius: f64,
    pub translation_threshold: f64,
    /// Degrees.
    pub rotation_threshold: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        let p = KeyframePolicy::default();
        Self {
            resolution: 0.001,
            submap_radius: 20.0,
            translation_threshold: p.translation_threshold,
            rotation_threshold: p.rotation_threshold,
        }
    }
}

impl MappingConfig {
    pub fn policy(&self) -> KeyframePolicy {
        KeyframePolicy {
            translation_threshold: self.translation_threshold,
            rotation_threshold: self.rotation_threshold,
        }
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        self.policy().validate()?;
        if !(self.resolution > 0.0) {
            return Err(MappingError::InvalidResolution(self.resolution));
        }
        if !(self.submap_radius > 0.0) {
            return Err(MappingError::InvalidRadius(self.submap_radius));
        }
        Ok(())
    }
}

/// Voxel-hashed world-frame point store with cached covariances. At most one
/// point per cell; the first point to land in a cell is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStore {
    resolution: f64,
    cells: HashMap<(i64, i64, i64), u32>,
    points: Vec<Vector3<f64>>,
    covariances: Vec<Matrix3<f64>>,
    last_keyframe: Option<Pose>,
    insertions: usize,
}

impl Default for MapStore {
    fn default() -> Self {
        Self::new(MappingConfig::default().resolution).expect("default resolution is valid")
    }
}

impl MapStore {
    pub fn new(resolution: f64) -> Result<Self, MappingError> {
        if !(resolution > 0.0) {
            return Err(MappingError::InvalidResolution(resolution));
        }
        Ok(Self {
            resolution,
            cells: HashMap::new(),
            points: Vec::new(),
            covariances: Vec::new(),
            last_keyframe: None,
            insertions: 0,
        })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn last_keyframe(&self) -> Option<&Pose> {
        self.last_keyframe.as_ref()
    }

    /// Number of keyframes inserted so far.
    pub fn insertions(&self) -> usize {
        self.insertions
    }

    /// Adds world-frame points with their world-frame covariances; returns
    /// how many were new.
    pub fn insert(&mut self, cloud: &PointCloud, covariances: &[Matrix3<f64>]) -> Result<usize, MappingError> {
        if cloud.len() != covariances.len() {
            return Err(MappingError::CovarianceMismatch {
                points: cloud.len(),
                covariances: covariances.len(),
            });
        }
        let before = self.points.len();
        for (p, c) in cloud.points.iter().zip(covariances) {
            if !p.position.iter().all(|v| v.is_finite()) {
                continue;
            }
            if let Entry::Vacant(e) = self.cells.entry(voxel_key(&p.position, self.resolution)) {
                e.insert(self.points.len() as u32);
                self.points.push(p.position);
                self.covariances.push(*c);
            }
        }
        self.insertions += 1;
        Ok(self.points.len() - before)
    }

    /// Inserts an enriched robot-frame scan observed at `pose`, rotating its
    /// covariances into the world frame, and records the keyframe.
    pub fn insert_scan(&mut self, scan: &EnrichedCloud, pose: &Pose) -> usize {
        let r = pose.rotation.matrix();
        let points = scan
            .positions()
            .iter()
            .map(|p| Point::at(pose.transform_point(p)))
            .collect();
        let covs: Vec<_> = scan.covariances().iter().map(|c| r * c * r.transpose()).collect();
        let world = PointCloud::new(scan.cloud.stamp, WORLD_FRAME, points);
        self.last_keyframe = Some(*pose);
        self.insert(&world, &covs).expect("lengths match")
    }

    /// Inserts `scan` if the keyframe policy fires for `pose`.
    pub fn update(&mut self, scan: &EnrichedCloud, pose: &Pose, policy: &KeyframePolicy) -> bool {
        if should_insert(pose, policy, self.last_keyframe.as_ref()) {
            self.insert_scan(scan, pose);
            true
        } else {
            false
        }
    }

    /// Indices of stored points within `radius` of the pose position.
    pub fn members(&self, pose: &Pose, radius: f64) -> Vec<u32> {
        let c = pose.translation;
        let r2 = radius * radius;
        (0..self.points.len() as u32)
            .filter(|&i| (self.points[i as usize] - c).norm_squared() <= r2)
            .collect()
    }

    fn submap_from(&self, members: &[u32], stamp: f64) -> EnrichedCloud {
        let points = members
            .iter()
            .map(|&i| Point::at(self.points[i as usize]))
            .collect();
        let covs = members.iter().map(|&i| self.covariances[i as usize]).collect();
        EnrichedCloud::from_parts(PointCloud::new(stamp, WORLD_FRAME, points), covs).expect("lengths match")
    }

    /// All stored points within `radius` of the pose position, with their
    /// cached covariances. Empty results are legal.
    pub fn extract_submap(&self, pose: &Pose, radius: f64) -> EnrichedCloud {
        self.submap_from(&self.members(pose, radius), 0.0)
    }

    /// Snapshot of the whole map as a world-frame cloud.
    pub fn to_cloud(&self, stamp: f64) -> PointCloud {
        PointCloud::new(
            stamp,
            WORLD_FRAME,
            self.points.iter().map(|&p| Point::at(p)).collect(),
        )
    }
}

/// Reuses the previous submap (and its spatial index) while the set of
/// member points is unchanged.
#[derive(Debug, Default, Clone)]
pub struct SubmapCache {
    members: Vec<u32>,
    submap: Option<Arc<EnrichedCloud>>,
    rebuilds: usize,
}

impl SubmapCache {
    pub fn extract(&mut self, map: &MapStore, pose: &Pose, radius: f64) -> Arc<EnrichedCloud> {
        let members = map.members(pose, radius);
        match &self.submap {
            Some(s) if members == self.members => s.clone(),
            _ => {
                let s = Arc::new(map.submap_from(&members, 0.0));
                self.members = members;
                self.submap = Some(s.clone());
                self.rebuilds += 1;
                s
            }
        }
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }
}
