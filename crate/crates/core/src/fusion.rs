//! Sensor integration: per-source pose buffers, rate-based health checks, a
//! static priority queue, and the prior transform between lidar stamps.

use std::collections::VecDeque;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{interpolate, GeometryError, Pose, StampedPose};
use crate::preprocess::MotionProvider;

/// Out-of-order measurements up to this age are inserted in order.
pub const LATE_TOLERANCE: f64 = 0.010;
/// Queries up to this far past the newest sample hold that sample.
pub const HOLD_TOLERANCE: f64 = 0.020;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("prior interval [{prev}, {curr}] is not increasing")]
    InvalidInterval { prev: f64, curr: f64 },
    #[error("duplicate source priority {0}")]
    DuplicatePriority(i32),
    #[error("duplicate source id `{0}`")]
    DuplicateId(String),
    #[error("unknown source `{0}`")]
    UnknownSource(String),
    #[error("invalid health settings: window {window} s, min rate {min_rate} Hz, span {span} s")]
    InvalidHealth { window: f64, min_rate: f64, span: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Full 6-DOF odometry (VIO, WIO, KIO, ...).
    #[serde(alias = "odometry")]
    FullOdometry,
    /// IMU orientation: only rotation is used.
    #[serde(alias = "imu")]
    RotationOnly,
}

/// Time-sorted poses with hold-last and no-extrapolation lookups.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseTrack {
    samples: Vec<StampedPose>,
    hold: f64,
}

impl PoseTrack {
    /// `samples` must be strictly increasing in time.
    pub fn new(samples: Vec<StampedPose>, hold: f64) -> Self {
        debug_assert!(samples.windows(2).all(|w| w[0].time < w[1].time));
        Self { samples, hold }
    }

    pub fn samples(&self) -> &[StampedPose] {
        &self.samples
    }

    /// Interpolated pose at `t`. Times after the newest sample by at most the
    /// hold tolerance return the newest pose; anything else outside the
    /// buffered span is `None`.
    pub fn pose_at(&self, t: f64) -> Option<Pose> {
        let first = self.samples.first()?;
        let last = self.samples.last()?;
        if t < first.time || !t.is_finite() {
            return None;
        }
        if t >= last.time {
            return (t - last.time <= self.hold).then_some(last.pose);
        }
        let upper = self.samples.partition_point(|s| s.time <= t);
        let a = &self.samples[upper - 1];
        if a.time == t {
            return Some(a.pose);
        }
        interpolate(a, &self.samples[upper], t).ok()
    }
}

impl MotionProvider for PoseTrack {
    fn pose_at(&self, t: f64) -> Option<Pose> {
        PoseTrack::pose_at(self, t)
    }
}

/// Health-tracked buffer of poses from one odometry or IMU source, already
/// mapped into the robot frame.
#[derive(Debug, Clone)]
pub struct SourceBuffer {
    pub id: String,
    pub kind: SourceKind,
    /// Lower is preferred.
    pub priority: i32,
    /// Pose of the source's sensor frame in the robot frame.
    pub extrinsic: Pose,
    pub health_window: f64,
    pub min_rate: f64,
    /// Seconds of history kept behind the newest sample.
    pub span: f64,
    buffer: VecDeque<StampedPose>,
    dropped: u64,
}

impl SourceBuffer {
    pub fn new(id: impl Into<String>, kind: SourceKind, priority: i32) -> Self {
        let d = FusionConfig::default();
        Self {
            id: id.into(),
            kind,
            priority,
            extrinsic: Pose::identity(),
            health_window: d.health_window,
            min_rate: d.min_rate,
            span: d.buffer_span,
            buffer: VecDeque::new(),
            dropped: 0,
        }
    }

    pub fn with_extrinsic(mut self, extrinsic: Pose) -> Self {
        self.extrinsic = extrinsic;
        self
    }

    pub fn with_health(mut self, window: f64, min_rate: f64) -> Self {
        self.health_window = window;
        self.min_rate = min_rate;
        self
    }

    pub fn with_span(mut self, span: f64) -> Self {
        self.span = span;
        self
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn samples(&self) -> impl Iterator<Item = &StampedPose> {
        self.buffer.iter()
    }

    pub fn newest_time(&self) -> Option<f64> {
        self.buffer.back().map(|s| s.time)
    }

    /// Buffers one measurement reported in the source's own frame.
    ///
    /// Measurements older than the newest by up to [`LATE_TOLERANCE`] are
    /// inserted in order; older ones, and exact duplicates of a buffered
    /// stamp, are dropped and counted.
    pub fn ingest(&mut self, m: StampedPose) {
        let mut pose = self
            .extrinsic
            .compose(&m.pose)
            .compose(&self.extrinsic.inverse());
        if self.kind == SourceKind::RotationOnly {
            pose.translation = nalgebra::Vector3::zeros();
        }
        let sample = StampedPose { time: m.time, pose };
        match self.buffer.back() {
            None => self.buffer.push_back(sample),
            Some(last) if sample.time > last.time => self.buffer.push_back(sample),
            Some(last) => {
                let late = last.time - sample.time;
                let pos = self.buffer.partition_point(|s| s.time < sample.time);
                let duplicate = self.buffer.get(pos).is_some_and(|s| s.time == sample.time);
                if late <= LATE_TOLERANCE && !duplicate {
                    self.buffer.insert(pos, sample);
                } else {
                    self.dropped += 1;
                    return;
                }
            }
        }
        self.evict();
    }

    fn evict(&mut self) {
        let Some(newest) = self.newest_time() else {
            return;
        };
        while self.buffer.front().is_some_and(|s| s.time < newest - self.span) {
            self.buffer.pop_front();
        }
    }

    /// Number of samples with stamps in `[now - window, now]`.
    pub fn count_in_window(&self, now: f64) -> usize {
        let lo = now - self.health_window;
        let start = self.buffer.partition_point(|s| s.time < lo);
        let end = self.buffer.partition_point(|s| s.time <= now);
        end.saturating_sub(start)
    }

    /// Healthy iff the message rate over the trailing window strictly
    /// exceeds `min_rate`.
    pub fn is_healthy(&self, now: f64) -> bool {
        self.count_in_window(now) as f64 > self.min_rate * self.health_window
    }

    /// Copy of the buffered poses in `[t0 - margin, t1 + margin]`.
    pub fn track(&self, t0: f64, t1: f64, margin: f64) -> PoseTrack {
        let start = self
            .buffer
            .partition_point(|s| s.time < t0 - margin)
            .saturating_sub(1);
        let end = (self.buffer.partition_point(|s| s.time <= t1 + margin) + 1).min(self.buffer.len());
        PoseTrack::new(
            self.buffer.range(start..end).copied().collect(),
            HOLD_TOLERANCE,
        )
    }

    pub fn pose_at(&self, t: f64) -> Option<Pose> {
        self.track(t, t, 0.0).pose_at(t)
    }
}

/// The prior transform handed to scan-to-scan matching.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorResult {
    pub transform: Pose,
    pub source_id: Option<String>,
    /// No source could serve both stamps; `transform` is the identity.
    pub degraded_to_identity: bool,
}

impl PriorResult {
    pub fn identity() -> Self {
        Self {
            transform: Pose::identity(),
            source_id: None,
            degraded_to_identity: true,
        }
    }
}

/// One configured prior source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub id: String,
    pub kind: SourceKind,
    pub priority: i32,
    /// `tx ty tz qx qy qz qw`; overrides the dataset's extrinsic when set.
    #[serde(default)]
    pub extrinsic: Option<[f64; 7]>,
    #[serde(default = "default_expected_rate")]
    pub expected_rate: f64,
}

fn default_expected_rate() -> f64 {
    50.0
}

/// The `fusion` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub health_window: f64,
    pub min_rate: f64,
    pub buffer_span: f64,
    pub sources: Vec<SourceConfig>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            health_window: 2.0,
            min_rate: 1.0,
            buffer_span: 30.0,
            sources: Vec::new(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.health_window > 0.0 && self.min_rate >= 0.0 && self.buffer_span >= self.health_window) {
            return Err(FusionError::InvalidHealth {
                window: self.health_window,
                min_rate: self.min_rate,
                span: self.buffer_span,
            });
        }
        let mut prios: Vec<i32> = self.sources.iter().map(|s| s.priority).collect();
        prios.sort_unstable();
        if let Some(w) = prios.windows(2).find(|w| w[0] == w[1]) {
            return Err(FusionError::DuplicatePriority(w[0]));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if self.sources[..i].iter().any(|o| o.id == s.id) {
                return Err(FusionError::DuplicateId(s.id.clone()));
            }
            if let Some(r) = &s.extrinsic {
                Pose::from_record(r)?;
            }
        }
        Ok(())
    }
}

/// The set of prior sources, ordered by priority. Each buffer sits behind its
/// own lock so feeders can ingest concurrently; readers observe whole
/// measurements only.
#[derive(Debug)]
pub struct SourceSet {
    sources: Vec<RwLock<SourceBuffer>>,
}

impl SourceSet {
    pub fn new(mut buffers: Vec<SourceBuffer>) -> Result<Self, FusionError> {
        buffers.sort_by_key(|b| b.priority);
        for w in buffers.windows(2) {
            if w[0].priority == w[1].priority {
                return Err(FusionError::DuplicatePriority(w[0].priority));
            }
        }
        for (i, b) in buffers.iter().enumerate() {
            if buffers[..i].iter().any(|o| o.id == b.id) {
                return Err(FusionError::DuplicateId(b.id.clone()));
            }
            if !(b.health_window > 0.0 && b.min_rate >= 0.0 && b.span >= b.health_window) {
                return Err(FusionError::InvalidHealth {
                    window: b.health_window,
                    min_rate: b.min_rate,
                    span: b.span,
                });
            }
        }
        Ok(Self {
            sources: buffers.into_iter().map(RwLock::new).collect(),
        })
    }

    /// Builds buffers from configuration; `dataset_extrinsic` supplies the
    /// extrinsic for sources whose config leaves it unset.
    pub fn from_config(
        cfg: &FusionConfig,
        dataset_extrinsic: impl Fn(&str) -> Option<Pose>,
    ) -> Result<Self, FusionError> {
        cfg.validate()?;
        let buffers = cfg
            .sources
            .iter()
            .map(|s| {
                let extrinsic = match &s.extrinsic {
                    Some(r) => Pose::from_record(r)?,
                    None => dataset_extrinsic(&s.id).unwrap_or_default(),
                };
                Ok(SourceBuffer::new(s.id.clone(), s.kind, s.priority)
                    .with_extrinsic(extrinsic)
                    .with_health(cfg.health_window, cfg.min_rate)
                    .with_span(cfg.buffer_span))
            })
            .collect::<Result<Vec<_>, FusionError>>()?;
        Self::new(buffers)
    }

    pub fn empty() -> Self {
        Self { sources: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    fn read(&self, i: usize) -> std::sync::RwLockReadGuard<'_, SourceBuffer> {
        self.sources[i].read().unwrap_or_else(|e| e.into_inner())
    }

    /// Ids in priority order.
    pub fn ids(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.read(i).id.clone()).collect()
    }

    pub fn kind_of(&self, id: &str) -> Option<SourceKind> {
        (0..self.len())
            .map(|i| self.read(i))
            .find(|b| b.id == id)
            .map(|b| b.kind)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.kind_of(id).is_some()
    }

    pub fn ingest(&self, id: &str, m: StampedPose) -> Result<(), FusionError> {
        for lock in &self.sources {
            let mut b = lock.write().unwrap_or_else(|e| e.into_inner());
            if b.id == id {
                b.ingest(m);
                return Ok(());
            }
        }
        Err(FusionError::UnknownSource(id.to_string()))
    }

    pub fn is_healthy(&self, id: &str, now: f64) -> Option<bool> {
        (0..self.len())
            .map(|i| self.read(i))
            .find(|b| b.id == id)
            .map(|b| b.is_healthy(now))
    }

    /// Highest-priority healthy source at `now`.
    pub fn select_source(&self, now: f64) -> Option<String> {
        (0..self.len())
            .map(|i| self.read(i))
            .find(|b| b.is_healthy(now))
            .map(|b| b.id.clone())
    }

    /// Poses of the best healthy source around `[t0, t1]`, for motion
    /// correction.
    pub fn motion_track(&self, t0: f64, t1: f64) -> Option<(String, PoseTrack)> {
        (0..self.len()).map(|i| self.read(i)).find_map(|b| {
            if !b.is_healthy(t1) {
                return None;
            }
            let track = b.track(t0, t1, 0.05);
            (track.pose_at(t0).is_some() && track.pose_at(t1).is_some()).then(|| (b.id.clone(), track))
        })
    }

    /// `E = Y(t_prev)^-1 * Y(t_curr)` from the highest-priority source that is
    /// healthy at `t_curr` and can serve both stamps without extrapolating.
    /// Falls back to the identity with `degraded_to_identity` set.
    pub fn compute_prior(&self, t_prev: f64, t_curr: f64) -> Result<PriorResult, FusionError> {
        if !(t_prev < t_curr) {
            return Err(FusionError::InvalidInterval {
                prev: t_prev,
                curr: t_curr,
            });
        }
        for i in 0..self.len() {
            let b = self.read(i);
            if !b.is_healthy(t_curr) {
                continue;
            }
            let (Some(prev), Some(curr)) = (b.pose_at(t_prev), b.pose_at(t_curr)) else {
                continue;
            };
            let mut transform = prev.relative(&curr);
            if b.kind == SourceKind::RotationOnly {
                transform.translation = nalgebra::Vector3::zeros();
            }
            return Ok(PriorResult {
                transform,
                source_id: Some(b.id.clone()),
                degraded_to_identity: false,
            });
        }
        Ok(PriorResult::identity())
    }

    /// Total measurements dropped across sources.
    pub fn dropped(&self) -> u64 {
        (0..self.len()).map(|i| self.read(i).dropped()).sum()
    }
}
