//! Ray-cast synthetic datasets with analytic ground truth.
//!
//! The world is a set of axis-aligned boxes (hit face by face, so a ray from
//! inside a room hits its walls and a ray from outside hits an obstacle) and
//! infinite planes. The robot follows piecewise constant-velocity waypoints.

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetManifest, GroundTruthDecl, LidarDecl, LidarStream, OdometryDecl, OdometryStream};
use super::formats::{write_clouds, write_trajectory};
use super::IoError;
use crate::config::single_line;
use crate::fusion::SourceKind;
use crate::geometry::{interpolate, Pose, Rotation, StampedPose};
use crate::pointcloud::{Point, PointCloud};
use crate::mapping::WORLD_FRAME;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

/// Closed box running along +x from `origin` (floor centre of the near end).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorridorSpec {
    pub origin: [f64; 3],
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub boxes: Vec<BoxSpec>,
    pub planes: Vec<PlaneSpec>,
    pub corridors: Vec<CorridorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub position: [f64; 3],
    #[serde(default)]
    pub rpy_deg: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSpec {
    pub rings: usize,
    /// Lowest and highest beam elevation, degrees.
    pub vfov_deg: [f64; 2],
    pub azimuth_steps: usize,
    pub min_range: f64,
    pub max_range: f64,
    /// Range noise, metres.
    pub noise_sigma: f64,
    /// Scan duration and interval, seconds.
    pub scan_period: f64,
    pub per_point_timing: bool,
    /// Defaults to the trajectory span.
    pub duration: Option<f64>,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            rings: 16,
            vfov_deg: [-15.0, 15.0],
            azimuth_steps: 900,
            min_range: 0.5,
            max_range: 100.0,
            noise_sigma: 0.0,
            scan_period: 0.1,
            per_point_timing: true,
            duration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLidar {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrinsic: Option<[f64; 7]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOdometry {
    pub id: String,
    pub kind: SourceKind,
    #[serde(default = "default_rate")]
    pub rate: f64,
    /// Per-sample white noise: metres and radians.
    #[serde(default)]
    pub translation_noise: f64,
    #[serde(default)]
    pub rotation_noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrinsic: Option<[f64; 7]>,
}

fn default_rate() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthSpec {
    pub rate: f64,
    pub map: bool,
    pub map_spacing: f64,
    /// Map sampling extends this far past the trajectory's bounding box.
    pub margin: f64,
}

impl Default for GroundTruthSpec {
    fn default() -> Self {
        Self {
            rate: 50.0,
            map: true,
            map_spacing: 0.03,
            margin: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub world: WorldSpec,
    pub trajectory: Vec<Waypoint>,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default = "default_lidars", rename = "lidar")]
    pub lidars: Vec<SynthLidar>,
    #[serde(default, rename = "odometry")]
    pub odometry: Vec<SynthOdometry>,
    #[serde(default)]
    pub ground_truth: GroundTruthSpec,
}

fn default_lidars() -> Vec<SynthLidar> {
    vec![SynthLidar {
        id: "lidar".into(),
        extrinsic: None,
    }]
}

fn invalid(msg: impl Into<String>) -> IoError {
    IoError::Invalid(format!("synthetic spec: {}", msg.into()))
}

fn record(r: &Option<[f64; 7]>, what: &str) -> Result<Pose, IoError> {
    r.map_or(Ok(Pose::identity()), |r| {
        Pose::from_record(&r).map_err(|e| invalid(format!("extrinsic of `{what}`: {e}")))
    })
}

impl SynthSpec {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, IoError> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| IoError::format(origin, single_line(&e.to_string())))?;
        spec.validate().map_err(|e| IoError::format(origin, e.to_string()))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.trajectory.is_empty() {
            return Err(invalid("trajectory needs at least one waypoint"));
        }
        if self.trajectory.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(invalid("waypoint times must increase"));
        }
        let s = &self.sensor;
        if s.rings == 0 || s.azimuth_steps == 0 {
            return Err(invalid("rings and azimuth_steps must be positive"));
        }
        if !(s.vfov_deg[0] <= s.vfov_deg[1] && s.vfov_deg[0] >= -90.0 && s.vfov_deg[1] <= 90.0) {
            return Err(invalid("vfov_deg must be an ordered pair within [-90, 90]"));
        }
        if !(s.min_range >= 0.0 && s.max_range > s.min_range) {
            return Err(invalid("need 0 <= min_range < max_range"));
        }
        if !(s.noise_sigma >= 0.0 && s.scan_period > 0.0) {
            return Err(invalid("noise_sigma must be >= 0 and scan_period > 0"));
        }
        if s.duration.is_some_and(|d| !(d > 0.0)) {
            return Err(invalid("duration must be positive"));
        }
        if self.lidars.is_empty() {
            return Err(invalid("at least one lidar is required"));
        }
        let mut ids: Vec<&str> = Vec::new();
        for id in self.lidars.iter().map(|l| &l.id).chain(self.odometry.iter().map(|o| &o.id)) {
            if ids.contains(&id.as_str()) {
                return Err(invalid(format!("duplicate stream id `{id}`")));
            }
            ids.push(id);
        }
        for l in &self.lidars {
            record(&l.extrinsic, &l.id)?;
        }
        for o in &self.odometry {
            record(&o.extrinsic, &o.id)?;
            if !(o.rate > 0.0 && o.translation_noise >= 0.0 && o.rotation_noise >= 0.0) {
                return Err(invalid(format!("odometry `{}`: rate must be positive, noise non-negative", o.id)));
            }
        }
        let g = &self.ground_truth;
        if !(g.rate > 0.0 && g.map_spacing > 0.0 && g.margin >= 0.0) {
            return Err(invalid("ground_truth rate and map_spacing must be positive"));
        }
        for b in &self.world.boxes {
            if (0..3).any(|i| !(b.max[i] > b.min[i])) {
                return Err(invalid("box max must exceed min on every axis"));
            }
        }
        for p in &self.world.planes {
            if Vector3::from(p.normal).norm() < 1e-12 {
                return Err(invalid("plane normal must be non-zero"));
            }
        }
        for c in &self.world.corridors {
            if !(c.length > 0.0 && c.width > 0.0 && c.height > 0.0) {
                return Err(invalid("corridor dimensions must be positive"));
            }
        }
        Ok(())
    }

    fn end_time(&self) -> f64 {
        let t0 = self.trajectory[0].t;
        match self.sensor.duration {
            Some(d) => t0 + d,
            None => self.trajectory.last().map_or(t0, |w| w.t),
        }
    }
}

/// One planar surface patch (a box face) or an unbounded plane.
#[derive(Debug, Clone, Copy)]
enum Surface {
    /// Axis-aligned rectangle: `axis` is the normal axis at coordinate `at`.
    Face {
        axis: usize,
        at: f64,
        lo: [f64; 3],
        hi: [f64; 3],
    },
    Plane {
        point: Vector3<f64>,
        normal: Vector3<f64>,
    },
}

const HIT_EPS: f64 = 1e-9;

impl Surface {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Surface::Face { axis, at, lo, hi } => {
                if d[axis].abs() < 1e-15 {
                    return None;
                }
                let t = (at - o[axis]) / d[axis];
                if t <= HIT_EPS {
                    return None;
                }
                let p = o + d * t;
                let inside = (0..3)
                    .filter(|&i| i != axis)
                    .all(|i| p[i] >= lo[i] - HIT_EPS && p[i] <= hi[i] + HIT_EPS);
                inside.then_some(t)
            }
            Surface::Plane { point, normal } => {
                let den = normal.dot(d);
                if den.abs() < 1e-15 {
                    return None;
                }
                let t = normal.dot(&(point - o)) / den;
                (t > HIT_EPS).then_some(t)
            }
        }
    }
}

fn box_faces(min: [f64; 3], max: [f64; 3], out: &mut Vec<Surface>) {
    for axis in 0..3 {
        for at in [min[axis], max[axis]] {
            out.push(Surface::Face { axis, at, lo: min, hi: max });
        }
    }
}

/// The ray-castable world.
#[derive(Debug, Clone)]
pub struct World {
    surfaces: Vec<Surface>,
}

impl World {
    pub fn new(spec: &WorldSpec) -> Self {
        let mut surfaces = Vec::new();
        for b in &spec.boxes {
            box_faces(b.min, b.max, &mut surfaces);
        }
        for c in &spec.corridors {
            let [x, y, z] = c.origin;
            box_faces(
                [x, y - c.width / 2.0, z],
                [x + c.length, y + c.width / 2.0, z + c.height],
                &mut surfaces,
            );
        }
        for p in &spec.planes {
            surfaces.push(Surface::Plane {
                point: Vector3::from(p.point),
                normal: Vector3::from(p.normal).normalize(),
            });
        }
        Self { surfaces }
    }

    /// Distance along unit direction `d` to the first surface, if any.
    pub fn cast(&self, origin: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        self.surfaces
            .iter()
            .filter_map(|s| s.intersect(origin, d))
            .min_by(f64::total_cmp)
    }

    /// Grid samples of every surface inside the box `[lo, hi]`.
    pub fn sample_surfaces(&self, lo: Vector3<f64>, hi: Vector3<f64>, spacing: f64) -> Vec<Vector3<f64>> {
        let mut out = Vec::new();
        for s in &self.surfaces {
            match *s {
                Surface::Face { axis, at, lo: flo, hi: fhi } => {
                    if at < lo[axis] || at > hi[axis] {
                        continue;
                    }
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    let (u0, u1) = (flo[u].max(lo[u]), fhi[u].min(hi[u]));
                    let (v0, v1) = (flo[v].max(lo[v]), fhi[v].min(hi[v]));
                    grid(u0, u1, spacing, |a| {
                        grid(v0, v1, spacing, |b| {
                            let mut p = Vector3::zeros();
                            p[axis] = at;
                            p[u] = a;
                            p[v] = b;
                            out.push(p);
                        })
                    });
                }
                Surface::Plane { point, normal } => {
                    // Sample along the two axes least aligned with the normal
                    // and solve for the third.
                    let axis = normal.iamax();
                    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                    grid(lo[u], hi[u], spacing, |a| {
                        grid(lo[v], hi[v], spacing, |b| {
                            let mut p = Vector3::zeros();
                            p[u] = a;
                            p[v] = b;
                            p[axis] = point[axis]
                                - (normal[u] * (a - point[u]) + normal[v] * (b - point[v])) / normal[axis];
                            if p[axis] >= lo[axis] && p[axis] <= hi[axis] {
                                out.push(p);
                            }
                        })
                    });
                }
            }
        }
        out
    }
}

fn grid(a: f64, b: f64, step: f64, mut f: impl FnMut(f64)) {
    if b < a {
        return;
    }
    let n = ((b - a) / step).floor() as usize;
    for i in 0..=n {
        f(a + i as f64 * step);
    }
}

/// Piecewise constant-velocity trajectory; clamps outside its span.
#[derive(Debug, Clone)]
pub struct TrajectoryModel {
    knots: Vec<StampedPose>,
}

impl TrajectoryModel {
    pub fn new(waypoints: &[Waypoint]) -> Result<Self, IoError> {
        let knots = waypoints
            .iter()
            .map(|w| {
                let [r, p, y] = w.rpy_deg.map(f64::to_radians);
                let [x, yy, z] = w.position;
                StampedPose::new(w.t, Pose::from_xyz_rpy(x, yy, z, r, p, y)).map_err(|e| invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if knots.is_empty() {
            return Err(invalid("trajectory needs at least one waypoint"));
        }
        Ok(Self { knots })
    }

    pub fn pose_at(&self, t: f64) -> Pose {
        let first = &self.knots[0];
        let last = &self.knots[self.knots.len() - 1];
        if t <= first.time {
            return first.pose;
        }
        if t >= last.time {
            return last.pose;
        }
        let i = self.knots.partition_point(|k| k.time <= t);
        interpolate(&self.knots[i - 1], &self.knots[i], t).expect("bracketing knots")
    }

    fn positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.knots.iter().map(|k| k.pose.translation)
    }
}

/// A generated dataset plus the manifest that describes it on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub manifest: DatasetManifest,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_dir(elevation: f64, azimuth: f64) -> Vector3<f64> {
    Vector3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    )
}

fn scan(
    world: &World,
    traj: &TrajectoryModel,
    sensor: &SensorSpec,
    lidar: &SynthLidar,
    extrinsic: &Pose,
    stamp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud, IoError> {
    let noise = Normal::new(0.0, sensor.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let end = stamp + sensor.scan_period;
    let fixed = traj.pose_at(end).compose(extrinsic);
    let mut points = Vec::with_capacity(sensor.rings * sensor.azimuth_steps);
    for a in 0..sensor.azimuth_steps {
        let fraction = a as f64 / sensor.azimuth_steps as f64;
        let (offset, sensor_pose) = if sensor.per_point_timing {
            let offset = fraction * sensor.scan_period;
            (offset, traj.pose_at(stamp + offset).compose(extrinsic))
        } else {
            (0.0, fixed)
        };
        let azimuth = fraction * std::f64::consts::TAU;
        for r in 0..sensor.rings {
            let [lo, hi] = sensor.vfov_deg;
            let elevation = if sensor.rings == 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * r as f64 / (sensor.rings - 1) as f64
            }
            .to_radians();
            let local = unit_dir(elevation, azimuth);
            let dir = sensor_pose.rotation.rotate(&local);
            let Some(range) = world.cast(&sensor_pose.translation, &dir) else {
                continue;
            };
            if range < sensor.min_range || range > sensor.max_range {
                continue;
            }
            let measured = if sensor.noise_sigma > 0.0 {
                range + noise.sample(rng)
            } else {
                range
            };
            points.push(Point::timed(local * measured, offset));
        }
    }
    if points.is_empty() {
        return Err(IoError::Degenerate(format!("lidar `{}` hit no surface in the scan at t={stamp}", lidar.id)));
    }
    let mut cloud = PointCloud::new(stamp, lidar.id.clone(), points);
    cloud.timed = sensor.per_point_timing;
    Ok(cloud)
}

fn noisy(pose: Pose, t_sigma: f64, r_sigma: f64, rng: &mut ChaCha8Rng) -> Pose {
    if t_sigma == 0.0 && r_sigma == 0.0 {
        return pose;
    }
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = || Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    let dt = draw() * t_sigma;
    let dr = draw() * r_sigma;
    Pose::new(Rotation::from_scaled_axis(&dr), dt).compose(&pose)
}

/// Sample times `t0, t0 + 1/rate, ...` not exceeding `end`.
fn sample_times(t0: f64, end: f64, rate: f64) -> Vec<f64> {
    let n = ((end - t0) * rate + 1e-9).floor() as usize;
    (0..=n).map(|i| t0 + i as f64 / rate).collect()
}

fn lidar_file(id: &str) -> String {
    format!("lidar_{id}.bin")
}

fn odometry_file(id: &str) -> String {
    format!("{id}.txt")
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";
pub const GROUND_TRUTH_MAP_FILE: &str = "ground_truth_map.bin";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Ray-casts every scan and derives odometry and ground truth in memory.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData, IoError> {
    spec.validate()?;
    let world = World::new(&spec.world);
    let traj = TrajectoryModel::new(&spec.trajectory)?;
    let t0 = spec.trajectory[0].t;
    let end = spec.end_time();
    let period = spec.sensor.scan_period;
    let scans = ((end - t0) / period + 1e-9).floor() as usize;
    if scans == 0 {
        return Err(invalid("duration is shorter than one scan period"));
    }

    let mut stream = 0u64;
    let mut lidars = Vec::new();
    for l in &spec.lidars {
        let extrinsic = record(&l.extrinsic, &l.id)?;
        let mut rng = stream_rng(spec.seed, stream);
        stream += 1;
        let clouds = (0..scans)
            .map(|k| scan(&world, &traj, &spec.sensor, l, &extrinsic, t0 + k as f64 * period, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        lidars.push(LidarStream {
            id: l.id.clone(),
            extrinsic,
            clouds,
        });
    }

    let mut odometry = Vec::new();
    for o in &spec.odometry {
        let extrinsic = record(&o.extrinsic, &o.id)?;
        let ext_inv = extrinsic.inverse();
        let mut rng = stream_rng(spec.seed, stream);
        stream += 1;
        let poses = sample_times(t0, end, o.rate)
            .into_iter()
            .map(|t| {
                // The source reports its own frame's motion: E^-1 X E.
                let mut y = ext_inv.compose(&traj.pose_at(t)).compose(&extrinsic);
                if o.kind == SourceKind::RotationOnly {
                    y.translation = Vector3::zeros();
                }
                let y = noisy(y, o.translation_noise, o.rotation_noise, &mut rng);
                StampedPose::new(t, y).map_err(|e| invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        odometry.push(OdometryStream {
            id: o.id.clone(),
            kind: o.kind,
            rate: o.rate,
            extrinsic,
            poses,
        });
    }

    let gt = &spec.ground_truth;
    let ground_truth = sample_times(t0, end, gt.rate)
        .into_iter()
        .map(|t| StampedPose::new(t, traj.pose_at(t)).map_err(|e| invalid(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let ground_truth_map = gt.map.then(|| {
        let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
        for p in traj.positions() {
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        let m = Vector3::repeat(gt.margin);
        let pts = world.sample_surfaces(lo - m, hi + m, gt.map_spacing);
        let mut c = PointCloud::from_positions(t0, WORLD_FRAME, &pts);
        c.timed = false;
        c
    });

    let manifest = DatasetManifest {
        lidars: spec
            .lidars
            .iter()
            .map(|l| LidarDecl {
                id: l.id.clone(),
                extrinsic: l.extrinsic,
                log: Some(lidar_file(&l.id)),
                files: vec![],
            })
            .collect(),
        odometry: spec
            .odometry
            .iter()
            .map(|o| OdometryDecl {
                id: o.id.clone(),
                kind: o.kind,
                rate: o.rate,
                extrinsic: o.extrinsic,
                file: odometry_file(&o.id),
            })
            .collect(),
        ground_truth: Some(GroundTruthDecl {
            trajectory: Some(GROUND_TRUTH_FILE.into()),
            map: gt.map.then(|| GROUND_TRUTH_MAP_FILE.into()),
        }),
    };
    Ok(SyntheticData {
        dataset: Dataset {
            lidars,
            odometry,
            ground_truth: Some(ground_truth),
            ground_truth_map,
        },
        manifest,
    })
}

/// Writes a generated dataset; returns the manifest path.
pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<std::path::PathBuf, IoError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let ds = &data.dataset;
    for l in &ds.lidars {
        write_clouds(&dir.join(lidar_file(&l.id)), &l.clouds)?;
    }
    for o in &ds.odometry {
        write_trajectory(&dir.join(odometry_file(&o.id)), &o.poses)?;
    }
    if let Some(gt) = &ds.ground_truth {
        write_trajectory(&dir.join(GROUND_TRUTH_FILE), gt)?;
    }
    if let Some(map) = &ds.ground_truth_map {
        write_clouds(&dir.join(GROUND_TRUTH_MAP_FILE), std::slice::from_ref(map))?;
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, data.manifest.to_toml()).map_err(|e| IoError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ape, Alignment, Trajectory};
    use crate::io::load_dataset;

    fn room_spec(waypoints: Vec<Waypoint>) -> SynthSpec {
        SynthSpec {
            seed: 3,
            world: WorldSpec {
                boxes: vec![BoxSpec {
                    min: [-5.0, -5.0, -1.0],
                    max: [5.0, 5.0, 4.0],
                }],
                ..Default::default()
            },
            trajectory: waypoints,
            sensor: SensorSpec {
                azimuth_steps: 180,
                ..Default::default()
            },
            lidars: default_lidars(),
            odometry: vec![SynthOdometry {
                id: "wio".into(),
                kind: SourceKind::FullOdometry,
                rate: 50.0,
                translation_noise: 0.0,
                rotation_noise: 0.0,
                extrinsic: Some([0.3, 0.0, 0.2, 0.0, 0.0, 0.382_683_432_365_089_8, 0.923_879_532_511_286_7]),
            }],
            ground_truth: GroundTruthSpec {
                map_spacing: 0.2,
                margin: 1.0,
                ..Default::default()
            },
        }
    }

    fn wp(t: f64, x: f64, yaw: f64) -> Waypoint {
        Waypoint {
            t,
            position: [x, 0.0, 0.0],
            rpy_deg: [0.0, 0.0, yaw],
        }
    }

    #[test]
    fn static_scans_repeat() {
        let data = generate_synthetic(&room_spec(vec![wp(0.0, 0.0, 0.0), wp(0.5, 0.0, 0.0)])).unwrap();
        let clouds = &data.dataset.lidars[0].clouds;
        assert_eq!(clouds.len(), 5);
        assert!(clouds.len() > 1 && clouds.windows(2).all(|w| w[0].points == w[1].points));
        // Inside a closed room every beam hits.
        assert_eq!(clouds[0].len(), 16 * 180);
    }

    #[test]
    fn hit_geometry_matches_room() {
        let data = generate_synthetic(&room_spec(vec![wp(0.0, 0.0, 0.0), wp(0.2, 0.0, 0.0)])).unwrap();
        for p in &data.dataset.lidars[0].clouds[0].points {
            let q = p.position;
            let on_wall = (q.x.abs() - 5.0).abs() < 1e-9 || (q.y.abs() - 5.0).abs() < 1e-9;
            let on_floor = (q.z + 1.0).abs() < 1e-9 || (q.z - 4.0).abs() < 1e-9;
            assert!(on_wall || on_floor, "{q:?}");
        }
    }

    #[test]
    fn odometry_is_exact_at_zero_noise() {
        let spec = room_spec(vec![wp(0.0, 0.0, 0.0), wp(2.0, 2.0, 40.0)]);
        let data = generate_synthetic(&spec).unwrap();
        let wio = &data.dataset.odometry[0];
        let e = wio.extrinsic;
        let robot: Vec<StampedPose> = wio
            .poses
            .iter()
            .map(|p| StampedPose::new(p.time, e.compose(&p.pose).compose(&e.inverse())).unwrap())
            .collect();
        let gt = data.dataset.ground_truth.as_ref().unwrap();
        assert_eq!(robot.len(), gt.len());
        let rep = ape(
            &Trajectory::new(robot).unwrap(),
            &Trajectory::new(gt.clone()).unwrap(),
            1e-6,
            Alignment::None,
        )
        .unwrap();
        assert!(rep.max < 1e-12, "{}", rep.max);
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&room_spec(vec![wp(0.0, 0.0, 0.0), wp(0.3, 0.1, 5.0)])).unwrap();
        let manifest = write_synthetic(&data, dir.path()).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.lidars, data.dataset.lidars);
        assert_eq!(back.ground_truth_map, data.dataset.ground_truth_map);
        let (a, b) = (&back.odometry[0].poses, &data.dataset.odometry[0].poses);
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_world_errors() {
        let mut spec = room_spec(vec![wp(0.0, 0.0, 0.0), wp(0.3, 0.0, 0.0)]);
        spec.world = WorldSpec::default();
        assert!(matches!(generate_synthetic(&spec), Err(IoError::Degenerate(_))));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let mut spec = room_spec(vec![wp(0.0, 0.0, 0.0), wp(0.3, 0.0, 0.0)]);
        spec.sensor.noise_sigma = 0.01;
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        spec.seed += 1;
        assert_ne!(a, generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn spec_parsing() {
        let text = "seed = 1\n[[trajectory]]\nt = 0.0\nposition = [0.0, 0.0, 0.0]\n\
                    [[trajectory]]\nt = 1.0\nposition = [1.0, 0.0, 0.0]\n\
                    [[world.corridors]]\norigin = [-2.0, 0.0, -1.0]\nlength = 20.0\nwidth = 3.0\nheight = 3.0\n\
                    [[odometry]]\nid = \"imu\"\nkind = \"imu\"\n";
        let spec = SynthSpec::from_toml_str(text, Path::new("s.toml")).unwrap();
        assert_eq!(spec.sensor.rings, 16);
        assert_eq!(spec.odometry[0].rate, 50.0);
        assert_eq!(spec.lidars[0].id, "lidar");
        assert_eq!(SynthSpec::from_toml_str(&spec.to_toml(), Path::new("x")).unwrap(), spec);
        let err = SynthSpec::from_toml_str("[[trajectory]]\nt = 0.0\nposition = [0.0, 0.0, 0.0]\nspeed = 1\n", Path::new("s.toml"));
        assert!(err.unwrap_err().to_string().contains("speed"));
    }

    #[test]
    fn rotation_only_streams_carry_no_translation() {
        let mut spec = room_spec(vec![wp(0.0, 0.0, 0.0), wp(1.0, 1.0, 20.0)]);
        spec.odometry[0].kind = SourceKind::RotationOnly;
        let data = generate_synthetic(&spec).unwrap();
        assert!(data.dataset.odometry[0].poses.iter().all(|p| p.pose.translation == Vector3::zeros()));
    }
}
