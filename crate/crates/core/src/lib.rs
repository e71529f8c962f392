//! Multi-sensor lidar odometry.
//!
//! Scans are de-skewed, merged and filtered, then registered against the
//! previous scan (seeded by the best healthy odometry/IMU prior) and refined
//! against a local submap of the accumulated map, using Generalized ICP.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod pointcloud;
pub mod preprocess;
pub mod fusion;
pub mod registration;
pub mod mapping;
pub mod pipeline;
pub mod eval;
pub mod config;
pub mod io;

pub use geometry::{interpolate, Pose, Rotation, StampedPose};
pub use pointcloud::{Point, PointCloud, SpatialIndex};
pub use config::{Config, ConfigError};
pub use eval::{ape, map_error, timing_report, Alignment, ApeReport, MapErrorReport, TimingReport, Trajectory};
pub use fusion::{PriorResult, SourceKind, SourceSet};
pub use io::{load_dataset, run_dataset, Dataset, IoError, ScenarioScript, SynthSpec};
pub use mapping::MapStore;
pub use pipeline::{OdometryOutput, Pipeline, ReplayMode};
pub use registration::{gicp_align, EnrichedCloud, GicpConfig, RegistrationResult};
