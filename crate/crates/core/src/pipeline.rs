//! The odometry loop: de-skew, merge, filter, prior, scan-to-scan,
//! scan-to-submap, flat-ground projection, pose update, map insert.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::fusion::{FusionError, PriorResult, SourceKind, SourceSet};
use crate::geometry::{Pose, Rotation, StampedPose};
use crate::mapping::{MapStore, MappingError, SubmapCache};
use crate::pointcloud::{self, PointCloud, PointCloudError};
use crate::preprocess::{self, DeskewOptions, DeskewReference, PreprocessError};
use crate::registration::{EnrichedCloud, Gicp, RegistrationError, RegistrationResult};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("scan contains no clouds")]
    EmptyScan,
    #[error("scan time {got} does not follow previous output at {prev}")]
    NonIncreasingStamp { prev: f64, got: f64 },
    #[error("cloud from unknown lidar `{0}`")]
    UnknownLidar(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

/// Flat-ground assumption mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FgaMode {
    #[default]
    Off,
    #[serde(alias = "on")]
    ForcedOn,
    ImuAuto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// Every scan is processed; wall clock ignored.
    #[default]
    Deterministic,
    /// Scans arriving while one is being processed are dropped.
    Paced,
}

/// The `pipeline` configuration section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    /// Lidar ids to merge; empty means every lidar in the dataset.
    pub lidars: Vec<String>,
    pub fga: FgaMode,
    /// Seconds of flat attitude before auto FGA engages.
    pub fga_window: f64,
    /// Degrees.
    pub fga_angle_tol: f64,
    /// IMU source for auto FGA; defaults to the first rotation-only source.
    pub fga_source: Option<String>,
    pub seed: u64,
    pub mode: ReplayMode,
    /// Emit prior-propagated poses once lidar output is this late (s).
    pub gap_timeout: f64,
    /// Spacing of prior-propagated poses during a lidar gap (s).
    pub gap_emit_period: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            lidars: Vec::new(),
            fga: FgaMode::Off,
            fga_window: 5.0,
            fga_angle_tol: 3.0,
            fga_source: None,
            seed: 0,
            mode: ReplayMode::Deterministic,
            gap_timeout: 0.3,
            gap_emit_period: 0.1,
        }
    }
}

/// Zeroes z, roll and pitch; keeps x, y and yaw.
pub fn apply_fga(pose: &Pose) -> Pose {
    let (_, _, yaw) = pose.rotation.to_rpy();
    Pose::new(
        Rotation::from_rpy(0.0, 0.0, yaw),
        Vector3::new(pose.translation.x, pose.translation.y, 0.0),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FgaEvent {
    Activated(f64),
    Deactivated(f64),
}

/// Engages FGA after `window` seconds with |roll|, |pitch| below `angle_tol`
/// (radians); disengages on the first sample that violates it.
#[derive(Debug, Clone, PartialEq)]
pub struct FgaMonitor {
    pub window: f64,
    pub angle_tol: f64,
    flat_since: Option<f64>,
    active: bool,
}

impl FgaMonitor {
    pub fn new(window: f64, angle_tol: f64) -> Self {
        Self {
            window,
            angle_tol,
            flat_since: None,
            active: false,
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn update(&mut self, t: f64, roll: f64, pitch: f64) -> Option<FgaEvent> {
        let flat = roll.abs() < self.angle_tol && pitch.abs() < self.angle_tol;
        if !flat {
            self.flat_since = None;
            return std::mem::replace(&mut self.active, false).then_some(FgaEvent::Deactivated(t));
        }
        let since = *self.flat_since.get_or_insert(t);
        if !self.active && t - since >= self.window {
            self.active = true;
            return Some(FgaEvent::Activated(t));
        }
        None
    }
}

/// Admission decision of the no-buffering drop policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Processed,
    Dropped,
}

/// Arrival times within this of the end of processing count as free.
pub const ARRIVAL_TOLERANCE: f64 = 1e-9;

/// Scans arriving while the previous one is still being processed are
/// dropped; nothing is queued. A scan arriving exactly when processing ends
/// is accepted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DropPolicy {
    busy_until: Option<f64>,
    pub processed: usize,
    pub dropped: usize,
    first_arrival: Option<f64>,
    last_arrival: Option<f64>,
}

impl DropPolicy {
    pub fn offer(&mut self, arrival: f64) -> Admission {
        self.first_arrival.get_or_insert(arrival);
        self.last_arrival = Some(arrival);
        if self.busy_until.is_some_and(|b| arrival < b - ARRIVAL_TOLERANCE) {
            self.dropped += 1;
            Admission::Dropped
        } else {
            self.processed += 1;
            Admission::Processed
        }
    }

    /// Marks the scan admitted at `arrival` as taking `duration` seconds.
    pub fn finish(&mut self, arrival: f64, duration: f64) {
        self.busy_until = Some(arrival + duration);
    }

    pub fn is_busy(&self, now: f64) -> bool {
        self.busy_until.is_some_and(|b| now < b - ARRIVAL_TOLERANCE)
    }

    /// Dropped scans per second of arrivals.
    pub fn drops_per_second(&self) -> f64 {
        match (self.first_arrival, self.last_arrival) {
            (Some(a), Some(b)) if b > a => self.dropped as f64 / (b - a),
            _ => 0.0,
        }
    }
}

/// Replays scripted arrivals with constant processing durations.
pub fn simulate_drops(arrivals: &[f64], durations: &[f64]) -> DropPolicy {
    let mut policy = DropPolicy::default();
    let mut next = durations.iter();
    for &a in arrivals {
        if policy.offer(a) == Admission::Processed {
            let d = next.next().copied().unwrap_or(0.0);
            policy.finish(a, d);
        }
    }
    policy
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Registered lidar scan.
    Scan,
    /// Scan too sparse to register; pose from the prior.
    Sparse,
    /// Lidar gap; pose from the prior.
    Propagated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryOutput {
    pub stamp: f64,
    pub pose: Pose,
    /// `previous_pose^-1 * pose`.
    pub increment: Pose,
    pub kind: OutputKind,
    pub prior_source: Option<String>,
    pub scan_to_scan_converged: bool,
    pub scan_to_submap_converged: bool,
    pub scan_to_scan_residual: f64,
    pub scan_to_submap_residual: f64,
    pub points: usize,
    pub keyframe: bool,
    pub fga_active: bool,
}

impl OdometryOutput {
    pub fn degraded(&self) -> bool {
        self.kind != OutputKind::Scan
    }

    pub fn stamped(&self) -> StampedPose {
        StampedPose {
            time: self.stamp,
            pose: self.pose,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineStats {
    pub scans_processed: usize,
    pub scans_sparse: usize,
    pub propagated: usize,
    /// Scans per prior source id; `"none"` counts identity fallbacks.
    pub prior_histogram: BTreeMap<String, usize>,
    /// Prior source whenever it changes between scans, with the scan time.
    pub prior_transitions: Vec<(f64, String)>,
    pub fga_events: Vec<FgaEvent>,
}

pub const NO_PRIOR: &str = "none";

struct PrevScan {
    cloud: EnrichedCloud,
    pose: Pose,
    time: f64,
}

/// Odometry state `X_k` with the map and previous scan.
pub struct Pipeline {
    cfg: Config,
    gicp: Gicp,
    sources: Arc<SourceSet>,
    extrinsics: HashMap<String, Pose>,
    fga_source: Option<(String, Pose)>,
    monitor: FgaMonitor,
    pose: Pose,
    last_emit: Option<f64>,
    prev: Option<PrevScan>,
    map: MapStore,
    submaps: SubmapCache,
    scan_index: u64,
    stats: PipelineStats,
}

impl Pipeline {
    /// `lidars` maps lidar ids (cloud frames) to their robot-frame extrinsics.
    /// `source_extrinsics` is used to read gravity-aligned attitude for auto
    /// FGA.
    pub fn new(
        cfg: Config,
        lidars: HashMap<String, Pose>,
        sources: Arc<SourceSet>,
        source_extrinsics: &HashMap<String, Pose>,
    ) -> Result<Self, PipelineError> {
        let gicp = Gicp::new(cfg.registration.clone())?;
        let map = MapStore::new(cfg.mapping.resolution)?;
        let extrinsics = if cfg.pipeline.lidars.is_empty() {
            lidars
        } else {
            cfg.pipeline
                .lidars
                .iter()
                .map(|id| {
                    lidars
                        .get(id)
                        .map(|e| (id.clone(), *e))
                        .ok_or_else(|| PipelineError::UnknownLidar(id.clone()))
                })
                .collect::<Result<_, _>>()?
        };
        let fga_source = match &cfg.pipeline.fga_source {
            Some(id) if sources.contains(id) => Some(id.clone()),
            Some(id) => return Err(FusionError::UnknownSource(id.clone()).into()),
            None => sources
                .ids()
                .into_iter()
                .find(|id| sources.kind_of(id) == Some(SourceKind::RotationOnly)),
        }
        .map(|id| {
            let e = source_extrinsics.get(&id).copied().unwrap_or_default();
            (id, e)
        });
        let monitor = FgaMonitor::new(cfg.pipeline.fga_window, cfg.pipeline.fga_angle_tol.to_radians());
        Ok(Self {
            cfg,
            gicp,
            sources,
            extrinsics,
            fga_source,
            monitor,
            pose: Pose::identity(),
            last_emit: None,
            prev: None,
            map,
            submaps: SubmapCache::default(),
            scan_index: 0,
            stats: PipelineStats::default(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn sources(&self) -> &Arc<SourceSet> {
        &self.sources
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn map(&self) -> &MapStore {
        &self.map
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    pub fn last_emit(&self) -> Option<f64> {
        self.last_emit
    }

    pub fn lidar_ids(&self) -> impl Iterator<Item = &String> {
        self.extrinsics.keys()
    }

    pub fn accepts_lidar(&self, id: &str) -> bool {
        self.extrinsics.contains_key(id)
    }

    pub fn fga_active(&self) -> bool {
        match self.cfg.pipeline.fga {
            FgaMode::Off => false,
            FgaMode::ForcedOn => true,
            FgaMode::ImuAuto => self.monitor.is_active(),
        }
    }

    /// Feeds one odometry/IMU measurement to the fusion buffers (and the FGA
    /// monitor when it comes from the attitude source).
    pub fn ingest(&mut self, source: &str, m: StampedPose) -> Result<(), PipelineError> {
        self.sources.ingest(source, m)?;
        if let (FgaMode::ImuAuto, Some((id, ext))) = (self.cfg.pipeline.fga, &self.fga_source) {
            if id == source {
                let attitude = m.pose.rotation * ext.rotation.inverse();
                let (roll, pitch, _) = attitude.to_rpy();
                if let Some(e) = self.monitor.update(m.time, roll, pitch) {
                    self.stats.fga_events.push(e);
                }
            }
        }
        Ok(())
    }

    /// Time the scan stamped `stamp` (scan start) is expressed at.
    pub fn scan_time(&self, stamp: f64) -> f64 {
        match self.cfg.preprocess.deskew_reference {
            DeskewReference::ScanStart => stamp,
            DeskewReference::ScanEnd => stamp + self.cfg.preprocess.scan_period,
        }
    }

    fn check_time(&self, t: f64) -> Result<(), PipelineError> {
        match self.last_emit {
            Some(prev) if !(t > prev) => Err(PipelineError::NonIncreasingStamp { prev, got: t }),
            _ => Ok(()),
        }
    }

    fn prior(&self, from: Option<f64>, to: f64) -> Result<PriorResult, PipelineError> {
        match from {
            Some(f) if f < to => Ok(self.sources.compute_prior(f, to)?),
            _ => Ok(PriorResult::identity()),
        }
    }

    fn project(&self, pose: Pose) -> Pose {
        if self.fga_active() {
            apply_fga(&pose)
        } else {
            pose
        }
    }

    fn emit(&mut self, stamp: f64, pose: Pose, out: OdometryOutput) -> OdometryOutput {
        let increment = self.pose.inverse().compose(&pose);
        self.pose = pose;
        self.last_emit = Some(stamp);
        OdometryOutput {
            stamp,
            pose,
            increment,
            fga_active: self.fga_active(),
            ..out
        }
    }

    fn blank(stamp: f64, kind: OutputKind, prior: &PriorResult) -> OdometryOutput {
        OdometryOutput {
            stamp,
            pose: Pose::identity(),
            increment: Pose::identity(),
            kind,
            prior_source: prior.source_id.clone(),
            scan_to_scan_converged: false,
            scan_to_submap_converged: false,
            scan_to_scan_residual: 0.0,
            scan_to_submap_residual: 0.0,
            points: 0,
            keyframe: false,
            fga_active: false,
        }
    }

    fn record_prior(&mut self, t: f64, prior: &PriorResult) {
        let key = prior.source_id.clone().unwrap_or_else(|| NO_PRIOR.to_string());
        *self.stats.prior_histogram.entry(key.clone()).or_default() += 1;
        if self.stats.prior_transitions.last().map(|(_, k)| k) != Some(&key) {
            self.stats.prior_transitions.push((t, key));
        }
    }

    /// De-skews, merges and filters one scan group into the robot frame.
    pub fn preprocess(&self, clouds: &[PointCloud]) -> Result<PointCloud, PipelineError> {
        let pre = &self.cfg.preprocess;
        let mut corrected = Vec::with_capacity(clouds.len());
        let mut extrinsics = Vec::with_capacity(clouds.len());
        for c in clouds {
            let ext = *self
                .extrinsics
                .get(&c.frame)
                .ok_or_else(|| PipelineError::UnknownLidar(c.frame.clone()))?;
            let track = if pre.mdc_enabled && c.timed {
                self.sources.motion_track(c.stamp, c.stamp + pre.scan_period)
            } else {
                None
            };
            let cloud = match track {
                Some((_, track)) => {
                    let opts = DeskewOptions {
                        scan_period: pre.scan_period,
                        reference: pre.deskew_reference,
                        extrinsic: ext,
                    };
                    preprocess::motion_correct(c, &track, &opts)?.cloud
                }
                None => c.clone(),
            };
            corrected.push(cloud);
            extrinsics.push(ext);
        }
        let mut merged = pointcloud::merge(&corrected, &extrinsics)?;
        merged.stamp = self.scan_time(clouds[0].stamp);
        let seed = self
            .cfg
            .pipeline
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.scan_index);
        Ok(preprocess::apply_filters(&merged, &pre.filters(), seed)?)
    }

    /// Processes one scan group (clouds sharing a scan stamp).
    pub fn process_scan(&mut self, clouds: &[PointCloud]) -> Result<OdometryOutput, PipelineError> {
        let first = clouds.first().ok_or(PipelineError::EmptyScan)?;
        let t = self.scan_time(first.stamp);
        self.check_time(t)?;
        let scan = self.preprocess(clouds)?;
        self.scan_index += 1;
        let k = self.cfg.registration.neighbors_k;

        if scan.len() < k {
            // Too sparse to register: carry the pose forward with the prior.
            let prior = self.prior(self.last_emit, t)?;
            self.stats.scans_sparse += 1;
            let pose = self.project(self.pose.compose(&prior.transform));
            let mut out = Self::blank(t, OutputKind::Sparse, &prior);
            out.points = scan.len();
            return Ok(self.emit(t, pose, out));
        }

        let curr = self.gicp.enrich(&scan)?;
        self.stats.scans_processed += 1;
        let Some(prev) = self.prev.take() else {
            // First registered scan: X_0 = identity, or the propagated pose
            // when odometry ran before the lidar.
            let pose = self.project(self.pose);
            let prior = PriorResult::identity();
            let mut out = Self::blank(t, OutputKind::Scan, &prior);
            out.points = scan.len();
            out.keyframe = self.map.update(&curr, &pose, &self.cfg.mapping.policy());
            self.prev = Some(PrevScan { cloud: curr, pose, time: t });
            return Ok(self.emit(t, pose, out));
        };

        let prior = self.prior(Some(prev.time), t)?;
        self.record_prior(t, &prior);
        let s2s = self.gicp.scan_to_scan(&curr, &prev.cloud, &prior);
        let seed_world = self.project(prev.pose.compose(&s2s.transform));

        let anchor = self.pose;
        let submap = self.submaps.extract(&self.map, &seed_world, self.cfg.mapping.submap_radius);
        let seed = RegistrationResult {
            transform: anchor.inverse().compose(&seed_world),
            ..s2s.clone()
        };
        let s2m = self.gicp.scan_to_submap(&curr, &submap, &anchor, &seed);
        let mut pose = self.project(anchor.compose(&s2m.transform));
        if !pose.is_finite() {
            pose = self.project(anchor.compose(&self.prior(self.last_emit, t)?.transform));
        }

        let mut out = Self::blank(t, OutputKind::Scan, &prior);
        out.points = scan.len();
        out.scan_to_scan_converged = s2s.converged;
        out.scan_to_submap_converged = s2m.converged && !s2m.skipped;
        out.scan_to_scan_residual = s2s.final_residual;
        out.scan_to_submap_residual = s2m.final_residual;
        out.keyframe = self.map.update(&curr, &pose, &self.cfg.mapping.policy());
        self.prev = Some(PrevScan { cloud: curr, pose, time: t });
        Ok(self.emit(t, pose, out))
    }

    /// Emits a prior-propagated pose at `t` (lidar gap). Returns `None`
    /// before the first output.
    pub fn propagate(&mut self, t: f64) -> Result<Option<OdometryOutput>, PipelineError> {
        let Some(last) = self.last_emit else {
            return Ok(None);
        };
        if !(t > last) {
            return Err(PipelineError::NonIncreasingStamp { prev: last, got: t });
        }
        let prior = self.sources.compute_prior(last, t)?;
        self.stats.propagated += 1;
        let pose = self.project(self.pose.compose(&prior.transform));
        let out = Self::blank(t, OutputKind::Propagated, &prior);
        Ok(Some(self.emit(t, pose, out)))
    }
}

/// One replayed input.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Cloud(PointCloud),
    Pose(StampedPose),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub source: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub outputs: Vec<OdometryOutput>,
    /// Wall-clock seconds per processed scan group, in order.
    pub durations: Vec<f64>,
    pub drops: DropPolicy,
}

impl RunOutput {
    pub fn trajectory(&self) -> Vec<StampedPose> {
        self.outputs.iter().map(|o| o.stamped()).collect()
    }
}

/// Replays a time-ordered event stream through the pipeline.
///
/// Clouds are grouped by stamp and processed once the stream has passed the
/// scan time (so every prior sample up to it has been ingested). While no
/// scan output arrives for `gap_timeout`, prior-propagated poses are emitted
/// every `gap_emit_period`.
pub fn replay(
    pipeline: &mut Pipeline,
    events: impl IntoIterator<Item = Event>,
    mode: ReplayMode,
) -> Result<RunOutput, PipelineError> {
    let mut run = RunOutput::default();
    let mut pending: Vec<PointCloud> = Vec::new();
    let settings = pipeline.config().pipeline.clone();
    let mut last_was_scan = true;

    let flush = |pipeline: &mut Pipeline, pending: &mut Vec<PointCloud>, run: &mut RunOutput, now: Option<f64>| {
        let mut done = false;
        while let Some(stamp) = pending.first().map(|c| c.stamp) {
            let t = pipeline.scan_time(stamp);
            if now.is_some_and(|n| n <= t) {
                break;
            }
            let split = pending.iter().position(|c| c.stamp > stamp + 1e-9).unwrap_or(pending.len());
            let group: Vec<PointCloud> = pending.drain(..split).collect();
            if pipeline.last_emit().is_some_and(|l| t <= l) {
                continue;
            }
            let admitted = match mode {
                ReplayMode::Deterministic => true,
                ReplayMode::Paced => run.drops.offer(t) == Admission::Processed,
            };
            if !admitted {
                continue;
            }
            let start = Instant::now();
            let out = pipeline.process_scan(&group)?;
            let elapsed = start.elapsed().as_secs_f64();
            if mode == ReplayMode::Paced {
                run.drops.finish(t, elapsed);
            } else {
                run.drops.offer(t);
            }
            run.durations.push(elapsed);
            run.outputs.push(out);
            done = true;
        }
        Ok::<bool, PipelineError>(done)
    };

    let mut events = events.into_iter().peekable();
    while let Some(ev) = events.next() {
        let now = ev.time;
        match ev.payload {
            Payload::Cloud(c) => {
                if pipeline.accepts_lidar(&c.frame) {
                    let pos = pending.partition_point(|p| p.stamp <= c.stamp);
                    pending.insert(pos, c);
                }
            }
            Payload::Pose(m) => {
                if pipeline.sources().contains(&ev.source) {
                    pipeline.ingest(&ev.source, m)?;
                }
            }
        }
        // Work due before `now` waits until every event stamped `now` is in.
        if events.peek().is_some_and(|next| next.time <= now) {
            continue;
        }
        if flush(pipeline, &mut pending, &mut run, Some(now))? {
            last_was_scan = true;
        }
        // Lidar gap: keep emitting from the prior.
        while let Some(last) = pipeline.last_emit() {
            let wait = if last_was_scan {
                settings.gap_timeout
            } else {
                settings.gap_emit_period
            };
            let due = last + wait;
            let scan_due = pending.first().map(|c| pipeline.scan_time(c.stamp));
            if !(due < now) || scan_due.is_some_and(|s| s <= due) {
                break;
            }
            if let Some(out) = pipeline.propagate(due)? {
                run.outputs.push(out);
                last_was_scan = false;
            }
        }
    }
    flush(pipeline, &mut pending, &mut run, None)?;
    Ok(run)
}
