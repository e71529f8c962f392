//! Motion distortion correction and the configurable filter chain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::pointcloud::{self, Point, PointCloud, PointCloudError};

/// Default lidar revolution period in seconds.
pub const DEFAULT_SCAN_PERIOD: f64 = 0.1;

const PARALLEL_THRESHOLD: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error(transparent)]
    Filter(#[from] PointCloudError),
    #[error("scan period must be positive, got {0}")]
    InvalidScanPeriod(f64),
}

/// Source of robot poses in a common fixed frame, queried by time.
pub trait MotionProvider: Sync {
    fn pose_at(&self, t: f64) -> Option<Pose>;
}

impl<F> MotionProvider for F
where
    F: Fn(f64) -> Option<Pose> + Sync,
{
    fn pose_at(&self, t: f64) -> Option<Pose> {
        self(t)
    }
}

/// Time each de-skewed point is re-expressed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeskewReference {
    ScanStart,
    #[default]
    ScanEnd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeskewOptions {
    pub scan_period: f64,
    pub reference: DeskewReference,
    /// Pose of the sensor in the robot frame; points are in the sensor frame.
    pub extrinsic: Pose,
}

impl Default for DeskewOptions {
    fn default() -> Self {
        Self {
            scan_period: DEFAULT_SCAN_PERIOD,
            reference: DeskewReference::ScanEnd,
            extrinsic: Pose::identity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deskewed {
    pub cloud: PointCloud,
    /// Fraction of points that received a correction.
    pub coverage: f64,
    /// The input had no per-point timing and passed through untouched.
    pub bypassed: bool,
}

/// Re-expresses every point in the sensor frame at the reference time.
///
/// A point measured at `stamp + time_offset` is mapped through
/// `pose(t_ref)^-1 * pose(t_point)` (conjugated by the sensor extrinsic).
/// Points whose time the provider cannot serve are left uncorrected. The
/// output stamp is the reference time and its points carry no timing.
pub fn motion_correct(
    c: &PointCloud,
    motion: &dyn MotionProvider,
    opts: &DeskewOptions,
) -> Result<Deskewed, PreprocessError> {
    if !(opts.scan_period > 0.0) {
        return Err(PreprocessError::InvalidScanPeriod(opts.scan_period));
    }
    if !c.timed {
        return Ok(Deskewed {
            cloud: c.clone(),
            coverage: 0.0,
            bypassed: true,
        });
    }
    let t_ref = match opts.reference {
        DeskewReference::ScanStart => c.stamp,
        DeskewReference::ScanEnd => c.stamp + opts.scan_period,
    };
    let reference = motion.pose_at(t_ref);
    let ext = opts.extrinsic;
    let ext_inv = ext.inverse();
    let correct = |p: &Point| -> (Point, bool) {
        let corrected = reference.and_then(|r| {
            motion
                .pose_at(c.stamp + p.time_offset)
                .map(|pt| ext_inv.compose(&r.relative(&pt)).compose(&ext))
        });
        match corrected {
            Some(delta) => (
                Point {
                    position: delta.transform_point(&p.position),
                    time_offset: 0.0,
                },
                true,
            ),
            None => (
                Point {
                    position: p.position,
                    time_offset: 0.0,
                },
                false,
            ),
        }
    };
    let results: Vec<(Point, bool)> = if c.len() >= PARALLEL_THRESHOLD {
        c.points.par_iter().map(correct).collect()
    } else {
        c.points.iter().map(correct).collect()
    };
    let corrected = results.iter().filter(|(_, ok)| *ok).count();
    let coverage = if c.is_empty() {
        1.0
    } else {
        corrected as f64 / c.len() as f64
    };
    Ok(Deskewed {
        cloud: PointCloud {
            stamp: t_ref,
            frame: c.frame.clone(),
            points: results.into_iter().map(|(p, _)| p).collect(),
            timed: false,
        },
        coverage,
        bypassed: false,
    })
}

/// Filter chain settings; each stage can be switched off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub range_enabled: bool,
    pub range_min: f64,
    pub range_max: f64,
    pub voxel_enabled: bool,
    pub voxel_leaf: f64,
    pub random_enabled: bool,
    /// Fraction of points kept by the random stage.
    pub keep_fraction: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            range_enabled: true,
            range_min: 0.5,
            range_max: 100.0,
            voxel_enabled: true,
            voxel_leaf: 0.1,
            random_enabled: true,
            keep_fraction: 0.1,
        }
    }
}

impl FilterConfig {
    pub fn disabled() -> Self {
        Self {
            range_enabled: false,
            voxel_enabled: false,
            random_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.range_enabled && !(self.range_min >= 0.0 && self.range_min < self.range_max) {
            return Err(PointCloudError::InvalidRange {
                min: self.range_min,
                max: self.range_max,
            }
            .into());
        }
        if self.voxel_enabled && !(self.voxel_leaf > 0.0 && self.voxel_leaf.is_finite()) {
            return Err(PointCloudError::InvalidLeaf(self.voxel_leaf).into());
        }
        if self.random_enabled && !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(PointCloudError::InvalidFraction(self.keep_fraction).into());
        }
        Ok(())
    }
}

/// Range filter, then voxel grid, then random downsampling; disabled stages
/// are skipped.
pub fn apply_filters(c: &PointCloud, cfg: &FilterConfig, seed: u64) -> Result<PointCloud, PreprocessError> {
    cfg.validate()?;
    let mut out = if cfg.range_enabled {
        pointcloud::range_filter(c, cfg.range_min, cfg.range_max)?
    } else {
        c.clone()
    };
    if cfg.voxel_enabled {
        out = pointcloud::voxel_grid_filter(&out, cfg.voxel_leaf)?;
    }
    if cfg.random_enabled {
        out = pointcloud::random_downsample(&out, cfg.keep_fraction, seed)?;
    }
    Ok(out)
}

/// The `preprocess` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub mdc_enabled: bool,
    pub deskew_reference: DeskewReference,
    pub scan_period: f64,
    pub range_enabled: bool,
    pub range_min: f64,
    pub range_max: f64,
    pub voxel_enabled: bool,
    pub voxel_leaf: f64,
    pub random_enabled: bool,
    pub keep_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            mdc_enabled: true,
            deskew_reference: DeskewReference::ScanEnd,
            scan_period: DEFAULT_SCAN_PERIOD,
            range_enabled: f.range_enabled,
            range_min: f.range_min,
            range_max: f.range_max,
            voxel_enabled: f.voxel_enabled,
            voxel_leaf: f.voxel_leaf,
            random_enabled: f.random_enabled,
            keep_fraction: f.keep_fraction,
        }
    }
}

impl PreprocessConfig {
    pub fn filters(&self) -> FilterConfig {
        FilterConfig {
            range_enabled: self.range_enabled,
            range_min: self.range_min,
            range_max: self.range_max,
            voxel_enabled: self.voxel_enabled,
            voxel_leaf: self.voxel_leaf,
            random_enabled: self.random_enabled,
            keep_fraction: self.keep_fraction,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.scan_period > 0.0 && self.scan_period.is_finite()) {
            return Err(PreprocessError::InvalidScanPeriod(self.scan_period));
        }
        self.filters().validate()
    }
}
