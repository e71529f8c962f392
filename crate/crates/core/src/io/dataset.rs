//! Dataset manifests, time-ordered event streams and scenario scripts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::formats::{read_clouds, read_trajectory_records};
use super::IoError;
use crate::config::single_line;
use crate::fusion::SourceKind;
use crate::geometry::{Pose, StampedPose};
use crate::pipeline::{Event, Payload};
use crate::pointcloud::PointCloud;

/// `[[lidar]]` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarDecl {
    pub id: String,
    /// `tx ty tz qx qy qz qw`, robot frame; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrinsic: Option<[f64; 7]>,
    /// One file holding every scan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<String>,
    /// One file per scan, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<String>,
}

/// `[[odometry]]` entry (odometry or IMU stream).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdometryDecl {
    pub id: String,
    pub kind: SourceKind,
    /// Nominal rate in Hz.
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrinsic: Option<[f64; 7]>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthDecl {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
}

/// Dataset description; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default, rename = "lidar")]
    pub lidars: Vec<LidarDecl>,
    #[serde(default, rename = "odometry")]
    pub odometry: Vec<OdometryDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthDecl>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarStream {
    pub id: String,
    pub extrinsic: Pose,
    pub clouds: Vec<PointCloud>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryStream {
    pub id: String,
    pub kind: SourceKind,
    pub rate: f64,
    pub extrinsic: Pose,
    /// In the source's own frame.
    pub poses: Vec<StampedPose>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub lidars: Vec<LidarStream>,
    pub odometry: Vec<OdometryStream>,
    pub ground_truth: Option<Vec<StampedPose>>,
    pub ground_truth_map: Option<PointCloud>,
}

fn extrinsic(path: &Path, id: &str, r: &Option<[f64; 7]>) -> Result<Pose, IoError> {
    match r {
        None => Ok(Pose::identity()),
        Some(r) => Pose::from_record(r).map_err(|e| IoError::format(path, format!("extrinsic of `{id}`: {e}"))),
    }
}

impl DatasetManifest {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, IoError> {
        let m: DatasetManifest = toml::from_str(text).map_err(|e| IoError::format(origin, single_line(&e.to_string())))?;
        let mut ids: Vec<&str> = m.lidars.iter().map(|l| l.id.as_str()).collect();
        ids.extend(m.odometry.iter().map(|o| o.id.as_str()));
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(IoError::format(origin, format!("duplicate stream id `{id}`")));
            }
        }
        for l in &m.lidars {
            if l.log.is_some() == !l.files.is_empty() {
                return Err(IoError::format(origin, format!("lidar `{}` needs exactly one of `log` or `files`", l.id)));
            }
            extrinsic(origin, &l.id, &l.extrinsic)?;
        }
        for o in &m.odometry {
            if !(o.rate > 0.0) {
                return Err(IoError::format(origin, format!("odometry `{}` rate must be positive", o.id)));
            }
            extrinsic(origin, &o.id, &o.extrinsic)?;
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Loads a manifest and every stream it references.
pub fn load_dataset(manifest: &Path) -> Result<Dataset, IoError> {
    let text = std::fs::read_to_string(manifest).map_err(|e| IoError::io(manifest, e))?;
    let m = DatasetManifest::from_toml_str(&text, manifest)?;
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |f: &str| -> PathBuf { dir.join(f) };

    let mut lidars = Vec::new();
    for l in &m.lidars {
        let files: Vec<PathBuf> = match &l.log {
            Some(log) => vec![resolve(log)],
            None => l.files.iter().map(|f| resolve(f)).collect(),
        };
        let mut clouds: Vec<PointCloud> = Vec::new();
        for f in &files {
            for (block, mut c) in read_clouds(f)?.into_iter().enumerate() {
                if let Some(prev) = clouds.last() {
                    if c.stamp < prev.stamp {
                        return Err(IoError::StampRegression {
                            path: f.display().to_string(),
                            line: block + 1,
                            prev: prev.stamp,
                            got: c.stamp,
                        });
                    }
                }
                c.frame = l.id.clone();
                clouds.push(c);
            }
        }
        lidars.push(LidarStream {
            id: l.id.clone(),
            extrinsic: extrinsic(manifest, &l.id, &l.extrinsic)?,
            clouds,
        });
    }

    let mut odometry = Vec::new();
    for o in &m.odometry {
        let path = resolve(&o.file);
        odometry.push(OdometryStream {
            id: o.id.clone(),
            kind: o.kind,
            rate: o.rate,
            extrinsic: extrinsic(manifest, &o.id, &o.extrinsic)?,
            poses: read_ordered(&path)?,
        });
    }

    let gt = m.ground_truth.clone().unwrap_or_default();
    let ground_truth = gt.trajectory.as_deref().map(|f| read_ordered(&resolve(f))).transpose()?;
    let ground_truth_map = match gt.map.as_deref() {
        None => None,
        Some(f) => {
            let path = resolve(f);
            let mut clouds = read_clouds(&path)?;
            if clouds.len() != 1 {
                return Err(IoError::format(&path, format!("map file must hold one cloud, found {}", clouds.len())));
            }
            clouds.pop()
        }
    };
    Ok(Dataset {
        lidars,
        odometry,
        ground_truth,
        ground_truth_map,
    })
}

fn read_ordered(path: &Path) -> Result<Vec<StampedPose>, IoError> {
    let records = read_trajectory_records(path)?;
    for w in records.windows(2) {
        if w[1].1.time < w[0].1.time {
            return Err(IoError::StampRegression {
                path: path.display().to_string(),
                line: w[1].0,
                prev: w[0].1.time,
                got: w[1].1.time,
            });
        }
    }
    Ok(records.into_iter().map(|(_, p)| p).collect())
}

impl Dataset {
    /// Every measurement as one stream ordered by time, ties broken by
    /// source id (then file order).
    pub fn events(&self) -> Vec<Event> {
        let mut events: Vec<Event> = Vec::new();
        for l in &self.lidars {
            events.extend(l.clouds.iter().map(|c| Event {
                time: c.stamp,
                source: l.id.clone(),
                payload: Payload::Cloud(c.clone()),
            }));
        }
        for o in &self.odometry {
            events.extend(o.poses.iter().map(|p| Event {
                time: p.time,
                source: o.id.clone(),
                payload: Payload::Pose(*p),
            }));
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time).then_with(|| a.source.cmp(&b.source)));
        events
    }

    pub fn lidar_extrinsics(&self) -> HashMap<String, Pose> {
        self.lidars.iter().map(|l| (l.id.clone(), l.extrinsic)).collect()
    }

    pub fn source_extrinsics(&self) -> HashMap<String, Pose> {
        self.odometry.iter().map(|o| (o.id.clone(), o.extrinsic)).collect()
    }

    pub fn odometry_stream(&self, id: &str) -> Option<&OdometryStream> {
        self.odometry.iter().find(|o| o.id == id)
    }

    /// Time span covered by all streams.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        let times = self
            .lidars
            .iter()
            .flat_map(|l| l.clouds.iter().map(|c| c.stamp))
            .chain(self.odometry.iter().flat_map(|o| o.poses.iter().map(|p| p.time)));
        times.fold(None, |acc, t| match acc {
            None => Some((t, t)),
            Some((a, b)) => Some((a.min(t), b.max(t))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioAction {
    DropSource(String),
    RestoreSource(String),
    /// Removes lidar scans stamped in `[time, time + duration)`.
    LidarGap(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    pub time: f64,
    pub action: ScenarioAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    time: f64,
    action: String,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawScript {
    #[serde(default)]
    event: Vec<RawEvent>,
}

/// Ordered failure-injection events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioScript {
    events: Vec<ScenarioEvent>,
}

impl ScenarioScript {
    pub fn new(events: Vec<ScenarioEvent>) -> Result<Self, IoError> {
        for w in events.windows(2) {
            if w[1].time < w[0].time {
                return Err(IoError::Invalid(format!(
                    "scenario event times must not decrease ({} then {})",
                    w[0].time, w[1].time
                )));
            }
        }
        for e in &events {
            if !e.time.is_finite() {
                return Err(IoError::Invalid(format!("scenario event time {} is not finite", e.time)));
            }
            if let ScenarioAction::LidarGap(d) = e.action {
                if !(d > 0.0) {
                    return Err(IoError::Invalid(format!("lidar_gap duration must be positive, got {d}")));
                }
            }
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[ScenarioEvent] {
        &self.events
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, IoError> {
        let raw: RawScript = toml::from_str(text).map_err(|e| IoError::format(origin, single_line(&e.to_string())))?;
        let events = raw
            .event
            .into_iter()
            .map(|r| {
                let need_source = || {
                    r.source
                        .clone()
                        .ok_or_else(|| IoError::format(origin, format!("`{}` needs a `source`", r.action)))
                };
                let action = match r.action.as_str() {
                    "drop_source" => ScenarioAction::DropSource(need_source()?),
                    "restore_source" => ScenarioAction::RestoreSource(need_source()?),
                    "lidar_gap" => ScenarioAction::LidarGap(
                        r.duration
                            .ok_or_else(|| IoError::format(origin, "`lidar_gap` needs a `duration`"))?,
                    ),
                    other => return Err(IoError::format(origin, format!("unknown scenario action `{other}`"))),
                };
                Ok(ScenarioEvent { time: r.time, action })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        Self::new(events).map_err(|e| IoError::format(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    /// Half-open intervals during which `source` is silenced.
    fn drop_intervals(&self) -> HashMap<&str, Vec<(f64, f64)>> {
        let mut open: HashMap<&str, f64> = HashMap::new();
        let mut out: HashMap<&str, Vec<(f64, f64)>> = HashMap::new();
        for e in &self.events {
            match &e.action {
                ScenarioAction::DropSource(s) => {
                    open.entry(s.as_str()).or_insert(e.time);
                }
                ScenarioAction::RestoreSource(s) => {
                    if let Some(start) = open.remove(s.as_str()) {
                        out.entry(s.as_str()).or_default().push((start, e.time));
                    }
                }
                ScenarioAction::LidarGap(_) => {}
            }
        }
        for (s, start) in open {
            out.entry(s).or_default().push((start, f64::INFINITY));
        }
        out
    }

    fn gaps(&self) -> Vec<(f64, f64)> {
        self.events
            .iter()
            .filter_map(|e| match e.action {
                ScenarioAction::LidarGap(d) => Some((e.time, e.time + d)),
                _ => None,
            })
            .collect()
    }
}

/// Removes silenced events; survivors keep their order and content.
pub fn apply_scenario(events: &[Event], script: &ScenarioScript) -> Vec<Event> {
    let drops = script.drop_intervals();
    let gaps = script.gaps();
    let inside = |iv: &[(f64, f64)], t: f64| iv.iter().any(|&(a, b)| t >= a && t < b);
    events
        .iter()
        .filter(|e| {
            if drops.get(e.source.as_str()).is_some_and(|iv| inside(iv, e.time)) {
                return false;
            }
            !(matches!(e.payload, Payload::Cloud(_)) && inside(&gaps, e.time))
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::formats::{write_clouds, write_trajectory};

    fn pose_event(t: f64, id: &str) -> Event {
        Event {
            time: t,
            source: id.into(),
            payload: Payload::Pose(StampedPose::new(t, Pose::identity()).unwrap()),
        }
    }

    fn cloud_event(t: f64, id: &str) -> Event {
        Event {
            time: t,
            source: id.into(),
            payload: Payload::Cloud(PointCloud::new(t, id, vec![])),
        }
    }

    fn write_dataset(dir: &Path, lidar_rate: f64, imu_rate: f64, seconds: f64) -> PathBuf {
        let n = (seconds * lidar_rate).round() as usize;
        let clouds: Vec<_> = (0..n)
            .map(|i| PointCloud::new(i as f64 / lidar_rate, "x", vec![]))
            .collect();
        write_clouds(&dir.join("lidar.cloud"), &clouds).unwrap();
        let m = (seconds * imu_rate).round() as usize;
        let poses: Vec<_> = (0..m)
            .map(|i| StampedPose::new(i as f64 / imu_rate, Pose::identity()).unwrap())
            .collect();
        write_trajectory(&dir.join("imu.txt"), &poses).unwrap();
        let manifest = DatasetManifest {
            lidars: vec![LidarDecl {
                id: "velo".into(),
                extrinsic: Some([0.1, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0]),
                log: Some("lidar.cloud".into()),
                files: vec![],
            }],
            odometry: vec![OdometryDecl {
                id: "imu".into(),
                kind: SourceKind::RotationOnly,
                rate: imu_rate,
                extrinsic: None,
                file: "imu.txt".into(),
            }],
            ground_truth: None,
        };
        let path = dir.join("manifest.toml");
        std::fs::write(&path, manifest.to_toml()).unwrap();
        path
    }

    #[test]
    fn merged_stream_counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), 10.0, 50.0, 1.0);
        let ds = load_dataset(&path).unwrap();
        let ev = ds.events();
        assert_eq!(ev.len(), 60);
        assert!(ev.windows(2).all(|w| w[0].time <= w[1].time));
        // Equal stamps: "imu" sorts before "velo".
        assert_eq!(ev[0].source, "imu");
        assert_eq!(ev[1].source, "velo");
        assert_eq!(ds.lidars[0].clouds[0].frame, "velo");
        assert!((ds.lidar_extrinsics()["velo"].translation.z - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_scan_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), 10.0, 50.0, 0.3);
        let ds = load_dataset(&path).unwrap();
        let scans: Vec<f64> = ds
            .events()
            .iter()
            .filter(|e| matches!(e.payload, Payload::Cloud(_)))
            .map(|e| e.time)
            .collect();
        assert_eq!(scans.len(), 3);
        assert!(scans.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn regressions_and_bad_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(dir.path(), 10.0, 50.0, 0.2);
        std::fs::write(dir.path().join("imu.txt"), "0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n0.2 0 0 0 0 0 0 1\n").unwrap();
        let msg = load_dataset(&path).unwrap_err().to_string();
        assert!(msg.contains("imu.txt") && msg.contains("line 3"), "{msg}");
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[[lidar]]\nid = \"a\"\nlog = \"x\"\ncolour = 1\n").unwrap();
        let msg = load_dataset(&bad).unwrap_err().to_string();
        assert!(msg.contains("bad.toml") && msg.contains("colour"), "{msg}");
        std::fs::write(&bad, "[[lidar]]\nid = \"a\"\n").unwrap();
        assert!(load_dataset(&bad).is_err());
        std::fs::write(&bad, "[[lidar]]\nid = \"a\"\nlog = \"missing.cloud\"\n").unwrap();
        assert!(load_dataset(&bad).unwrap_err().to_string().contains("missing.cloud"));
    }

    #[test]
    fn scenario_filters() {
        let mut events = Vec::new();
        for i in 0..3000 {
            let t = i as f64 * 0.5;
            events.push(pose_event(t, "imu"));
            events.push(pose_event(t, "wio"));
            events.push(cloud_event(t, "velo"));
        }
        assert_eq!(apply_scenario(&events, &ScenarioScript::default()), events);

        let script = ScenarioScript::from_toml_str(
            "[[event]]\ntime = 1200.0\naction = \"drop_source\"\nsource = \"wio\"\n",
            Path::new("s.toml"),
        )
        .unwrap();
        let out = apply_scenario(&events, &script);
        assert!(!out.iter().any(|e| e.source == "wio" && e.time >= 1200.0));
        assert!(out.iter().any(|e| e.source == "wio" && e.time < 1200.0));

        let script = ScenarioScript::from_toml_str(
            "[[event]]\ntime = 30.0\naction = \"lidar_gap\"\nduration = 10.0\n\
             [[event]]\ntime = 50.0\naction = \"drop_source\"\nsource = \"imu\"\n\
             [[event]]\ntime = 60.0\naction = \"restore_source\"\nsource = \"imu\"\n",
            Path::new("s.toml"),
        )
        .unwrap();
        let out = apply_scenario(&events, &script);
        assert!(!out
            .iter()
            .any(|e| e.source == "velo" && (30.0..40.0).contains(&e.time)));
        assert!(out.iter().any(|e| e.source == "velo" && e.time == 40.0));
        assert!(!out.iter().any(|e| e.source == "imu" && (50.0..60.0).contains(&e.time)));
        assert!(out.iter().any(|e| e.source == "imu" && e.time == 60.0));
        // Pure filter: survivors appear in their original relative order.
        let mut it = events.iter();
        for e in &out {
            assert!(it.any(|o| o == e));
        }
    }

    #[test]
    fn scenario_validation() {
        let p = Path::new("s.toml");
        assert!(ScenarioScript::from_toml_str("[[event]]\ntime = 5.0\naction = \"explode\"\n", p).is_err());
        assert!(ScenarioScript::from_toml_str("[[event]]\ntime = 5.0\naction = \"drop_source\"\n", p).is_err());
        assert!(ScenarioScript::from_toml_str(
            "[[event]]\ntime = 5.0\naction = \"lidar_gap\"\nduration = 1.0\n[[event]]\ntime = 4.0\naction = \"lidar_gap\"\nduration = 1.0\n",
            p
        )
        .is_err());
    }
}
