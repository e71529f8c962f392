use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gicp_odom::io::dataset::ScenarioScript;
use gicp_odom::io::formats::read_clouds;
use gicp_odom::io::run::{eval_metrics, summary_text, write_eval_reports, write_run_outputs};
use gicp_odom::io::synth::{generate_synthetic, write_synthetic};
use gicp_odom::io::{load_dataset, read_trajectory, run_dataset, Dataset, IoError};
use gicp_odom::{ape, map_error, Config, PointCloud, ReplayMode, SynthSpec, Trajectory};

#[derive(Parser)]
#[command(name = "gicp-odom", version, about = "Multi-sensor lidar odometry replay and evaluation")]
struct Cli {
    /// Seed for every randomized stage (overrides config and spec seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a dataset through the odometry pipeline.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory (and optionally map) with ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, requires = "map_gt")]
        map_est: Option<PathBuf>,
        #[arg(long, requires = "map_est")]
        map_gt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory; defaults to the directory of `--est`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a dataset summary.
    Inspect {
        #[arg(long)]
        dataset: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Deterministic,
    Paced,
}

impl From<Mode> for ReplayMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Deterministic => ReplayMode::Deterministic,
            Mode::Paced => ReplayMode::Paced,
        }
    }
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn classify(e: IoError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config, Failure> {
    let mut cfg = match path {
        Some(p) => Config::load(p).map_err(invalid)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.pipeline.seed = s;
    }
    Ok(cfg)
}

fn run(
    cli_seed: Option<u64>,
    config: Option<&Path>,
    dataset: &Path,
    scenario: Option<&Path>,
    mode: Option<Mode>,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = load_config(config, cli_seed)?;
    let ds = load_dataset(dataset).map_err(invalid)?;
    let script = scenario.map(ScenarioScript::load).transpose().map_err(invalid)?;
    let mode = mode.map_or(cfg.pipeline.mode, ReplayMode::from);

    let lidars = if cfg.pipeline.lidars.is_empty() {
        ds.lidars.iter().map(|l| l.id.clone()).collect()
    } else {
        cfg.pipeline.lidars.clone()
    };
    println!("lidars = {}", lidars.join(","));
    let p = &cfg.preprocess;
    match p.voxel_enabled {
        true => println!("voxel_leaf = {}", p.voxel_leaf),
        false => println!("voxel_leaf = off"),
    }
    println!("submap_max_iterations = {}", cfg.registration.submap_max_iterations);
    println!("workers = {}", cfg.registration.workers);

    let result = run_dataset(&cfg, &ds, script.as_ref(), mode).map_err(Failure::classify)?;
    write_run_outputs(&result, out).map_err(runtime)?;
    print!("{}", summary_text(&result));
    Ok(())
}

fn read_map(path: &Path) -> Result<PointCloud, Failure> {
    let clouds = read_clouds(path).map_err(invalid)?;
    let stamp = clouds.first().map_or(0.0, |c| c.stamp);
    let frame = clouds.first().map_or_else(String::new, |c| c.frame.clone());
    let points = clouds.into_iter().flat_map(|c| c.points).collect();
    Ok(PointCloud::new(stamp, frame, points))
}

fn eval(
    est: &Path,
    gt: &Path,
    maps: Option<(&Path, &Path)>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(config, None)?;
    let est_traj = Trajectory::new(read_trajectory(est).map_err(invalid)?).map_err(invalid)?;
    let gt_traj = Trajectory::new(read_trajectory(gt).map_err(invalid)?).map_err(invalid)?;
    let report = ape(&est_traj, &gt_traj, cfg.eval.assoc_tol, cfg.eval.alignment).map_err(invalid)?;
    let map = match maps {
        Some((m_est, m_gt)) => Some(map_error(&read_map(m_est)?, &read_map(m_gt)?, &cfg.eval).map_err(invalid)?),
        None => None,
    };
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => est.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    write_eval_reports(&dir, &report, map.as_ref()).map_err(runtime)?;
    for (k, v) in eval_metrics(&report, map.as_ref()) {
        println!("{k} = {v}");
    }
    Ok(())
}

fn synth(cli_seed: Option<u64>, spec: &Path, out: &Path) -> Result<(), Failure> {
    let mut spec = SynthSpec::load(spec).map_err(invalid)?;
    if let Some(s) = cli_seed {
        spec.seed = s;
    }
    let data = generate_synthetic(&spec).map_err(Failure::classify)?;
    let manifest = write_synthetic(&data, out).map_err(runtime)?;
    println!("{}", manifest.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let ds: Dataset = load_dataset(path).map_err(invalid)?;
    if let Some((t0, t1)) = ds.time_span() {
        println!("span {t0:.3} .. {t1:.3} s");
    }
    for l in &ds.lidars {
        let points: usize = l.clouds.iter().map(|c| c.len()).sum();
        let mean = if l.clouds.is_empty() { 0 } else { points / l.clouds.len() };
        println!(
            "lidar {}: {} scans, {} points/scan, extrinsic {}",
            l.id,
            l.clouds.len(),
            mean,
            record_text(&l.extrinsic.to_record())
        );
    }
    for o in &ds.odometry {
        println!(
            "odometry {}: {:?}, {} poses at {} Hz, extrinsic {}",
            o.id,
            o.kind,
            o.poses.len(),
            o.rate,
            record_text(&o.extrinsic.to_record())
        );
    }
    match &ds.ground_truth {
        Some(gt) => println!("ground truth: {} poses", gt.len()),
        None => println!("ground truth: none"),
    }
    if let Some(m) = &ds.ground_truth_map {
        println!("ground truth map: {} points", m.len());
    }
    Ok(())
}

fn record_text(r: &[f64; 7]) -> String {
    r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or("").trim_start_matches("error: "));
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match &cli.command {
        Command::Run {
            config,
            dataset,
            scenario,
            mode,
            out,
        } => run(cli.seed, config.as_deref(), dataset, scenario.as_deref(), *mode, out),
        Command::Eval {
            est,
            gt,
            map_est,
            map_gt,
            config,
            out,
        } => {
            let maps = map_est.as_deref().zip(map_gt.as_deref());
            eval(est, gt, maps, config.as_deref(), out.as_deref())
        }
        Command::Synth { spec, out } => synth(cli.seed, spec, out),
        Command::Inspect { dataset } => inspect(dataset),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {}", single(&m));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {}", single(&m));
            ExitCode::from(2)
        }
    }
}

fn single(m: &str) -> String {
    gicp_odom::config::single_line(m)
}
