//! Running a dataset through the pipeline and writing run and eval outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use super::dataset::{apply_scenario, Dataset, ScenarioScript};
use super::formats::{write_clouds, write_trajectory};
use super::IoError;
use crate::config::Config;
use crate::eval::{timing_report_observed, ApeReport, MapErrorReport, TimingReport};
use crate::fusion::{FusionError, SourceBuffer, SourceKind, SourceSet};
use crate::pipeline::{replay, OdometryOutput, OutputKind, Pipeline, PipelineStats, ReplayMode, RunOutput};
use crate::pointcloud::PointCloud;

/// Fusion sources for a run. With no configured sources every dataset stream
/// is used: full odometry before rotation-only, dataset order otherwise.
pub fn build_sources(cfg: &Config, ds: &Dataset) -> Result<SourceSet, IoError> {
    let f = &cfg.fusion;
    if f.sources.is_empty() {
        let mut streams: Vec<_> = ds.odometry.iter().collect();
        streams.sort_by_key(|o| o.kind != SourceKind::FullOdometry);
        let buffers = streams
            .iter()
            .enumerate()
            .map(|(i, o)| {
                SourceBuffer::new(o.id.clone(), o.kind, i as i32)
                    .with_extrinsic(o.extrinsic)
                    .with_health(f.health_window, f.min_rate)
                    .with_span(f.buffer_span)
            })
            .collect();
        return Ok(SourceSet::new(buffers)?);
    }
    for s in &f.sources {
        if ds.odometry_stream(&s.id).is_none() {
            return Err(FusionError::UnknownSource(s.id.clone()).into());
        }
    }
    Ok(SourceSet::from_config(f, |id| ds.odometry_stream(id).map(|o| o.extrinsic))?)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub output: RunOutput,
    pub stats: PipelineStats,
    pub map: PointCloud,
    pub mode: ReplayMode,
    pub config: Config,
}

impl RunResult {
    pub fn timing(&self) -> Option<TimingReport> {
        timing_report_observed(&self.output.durations, &self.output.drops)
    }
}

/// Replays a dataset (optionally through a failure scenario).
pub fn run_dataset(
    cfg: &Config,
    ds: &Dataset,
    scenario: Option<&ScenarioScript>,
    mode: ReplayMode,
) -> Result<RunResult, IoError> {
    cfg.validate()?;
    let sources = Arc::new(build_sources(cfg, ds)?);
    let mut pipeline = Pipeline::new(cfg.clone(), ds.lidar_extrinsics(), sources, &ds.source_extrinsics())?;
    let events = ds.events();
    let events = match scenario {
        Some(s) => apply_scenario(&events, s),
        None => events,
    };
    let output = replay(&mut pipeline, events, mode)?;
    let stamp = output.outputs.last().map_or(0.0, |o| o.stamp);
    Ok(RunResult {
        stats: pipeline.stats().clone(),
        map: pipeline.map().to_cloud(stamp),
        output,
        mode,
        config: cfg.clone(),
    })
}

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const MAP_FILE: &str = "map.bin";
pub const TIMING_FILE: &str = "timing.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|e| IoError::io(path, e))
}

fn kind_name(k: OutputKind) -> &'static str {
    match k {
        OutputKind::Scan => "scan",
        OutputKind::Sparse => "sparse",
        OutputKind::Propagated => "propagated",
    }
}

/// Per-output log: `stamp kind prior points duration` (duration `-` for
/// propagated poses).
fn timing_log(outputs: &[OdometryOutput], durations: &[f64]) -> String {
    let mut s = String::from("# stamp kind prior points duration_s\n");
    let mut d = durations.iter();
    for o in outputs {
        let dur = match o.kind {
            OutputKind::Propagated => "-".to_string(),
            _ => d.next().map_or("-".to_string(), |v| format!("{v:.6}")),
        };
        let prior = o.prior_source.as_deref().unwrap_or(crate::pipeline::NO_PRIOR);
        let _ = writeln!(s, "{} {} {} {} {}", o.stamp, kind_name(o.kind), prior, o.points, dur);
    }
    s
}

pub fn summary_text(r: &RunResult) -> String {
    let mut s = String::new();
    let st = &r.stats;
    let _ = writeln!(s, "mode = {:?}", r.mode);
    let _ = writeln!(s, "poses = {}", r.output.outputs.len());
    let _ = writeln!(s, "scans_processed = {}", st.scans_processed);
    let _ = writeln!(s, "scans_sparse = {}", st.scans_sparse);
    let _ = writeln!(s, "propagated = {}", st.propagated);
    let _ = writeln!(s, "map_points = {}", r.map.len());
    for (k, v) in &st.prior_histogram {
        let _ = writeln!(s, "prior.{k} = {v}");
    }
    let order: Vec<&str> = st.prior_transitions.iter().map(|(_, k)| k.as_str()).collect();
    let _ = writeln!(s, "prior_order = {}", order.join(","));
    let _ = writeln!(s, "fga_events = {}", st.fga_events.len());
    if let Some(t) = r.timing() {
        let _ = writeln!(s, "time_median = {:.6}", t.summary.median);
        let _ = writeln!(s, "time_mean = {:.6}", t.summary.mean);
        let _ = writeln!(s, "time_max = {:.6}", t.summary.max);
        let _ = writeln!(s, "realtime_fraction = {:.4}", t.realtime_fraction);
        let _ = writeln!(s, "dropped = {}", t.dropped);
        let _ = writeln!(s, "drops_per_second = {:.4}", t.drops_per_second);
    }
    s
}

/// Writes trajectory, map, timing log, summary and the effective config.
pub fn write_run_outputs(r: &RunResult, dir: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    write_trajectory(&dir.join(TRAJECTORY_FILE), &r.output.trajectory())?;
    write_clouds(&dir.join(MAP_FILE), std::slice::from_ref(&r.map))?;
    write_text(&dir.join(TIMING_FILE), &timing_log(&r.output.outputs, &r.output.durations))?;
    write_text(&dir.join(SUMMARY_FILE), &summary_text(r))?;
    write_text(&dir.join(EFFECTIVE_CONFIG_FILE), &r.config.to_toml())
}

/// Key/value metrics for an eval run.
pub fn eval_metrics(ape: &ApeReport, map: Option<&MapErrorReport>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("ape.count".into(), ape.count.to_string());
    m.insert("ape.max".into(), format!("{:.6}", ape.max));
    m.insert("ape.mean".into(), format!("{:.6}", ape.mean));
    m.insert("ape.rmse".into(), format!("{:.6}", ape.rmse));
    m.insert("ape.std".into(), format!("{:.6}", ape.std));
    if let Some(e) = map {
        m.insert("map.rmse".into(), format!("{:.6}", e.rmse));
        m.insert("map.icp_converged".into(), e.icp_converged.to_string());
        m.insert("map.icp_iterations".into(), e.icp_iterations.to_string());
    }
    m
}

/// Writes `report.txt` (human), `metrics.txt` (key = value) and
/// `ape.dat` (gnuplot: stamp error).
pub fn write_eval_reports(dir: &Path, ape: &ApeReport, map: Option<&MapErrorReport>) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut report = String::new();
    let _ = writeln!(report, "APE over {} poses", ape.count);
    let _ = writeln!(report, "  mean  {:.4} m", ape.mean);
    let _ = writeln!(report, "  rmse  {:.4} m", ape.rmse);
    let _ = writeln!(report, "  std   {:.4} m", ape.std);
    let _ = writeln!(report, "  max   {:.4} m", ape.max);
    if let Some(e) = map {
        let _ = writeln!(report, "Map error");
        let _ = writeln!(report, "  rmse  {:.4} m", e.rmse);
        let _ = writeln!(
            report,
            "  icp   {} after {} iterations",
            if e.icp_converged { "converged" } else { "not converged" },
            e.icp_iterations
        );
    }
    write_text(&dir.join("report.txt"), &report)?;
    let metrics: String = eval_metrics(ape, map)
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    write_text(&dir.join("metrics.txt"), &metrics)?;
    let mut dat = String::from("# stamp ape_m\n");
    for (t, e) in &ape.errors {
        let _ = writeln!(dat, "{t} {e}");
    }
    write_text(&dir.join("ape.dat"), &dat)
}
