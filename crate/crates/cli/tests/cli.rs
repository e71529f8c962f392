use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gicp-odom");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_spec(lidars: &[&str], noise: f64) -> String {
    let mut s = format!(
        r#"seed = 3

[[world.corridors]]
origin = [-4.0, 0.0, -0.5]
length = 14.0
width = 4.0
height = 3.0

[[world.boxes]]
min = [1.5, 1.6, -0.5]
max = [1.9, 2.0, 2.5]

[[world.boxes]]
min = [2.7, -1.3, -0.5]
max = [3.3, -0.7, 0.1]

[[trajectory]]
t = 0.0
position = [0.0, 0.0, 0.0]

[[trajectory]]
t = 1.5
position = [1.5, 0.0, 0.0]

[sensor]
azimuth_steps = 360
noise_sigma = {noise}

[[odometry]]
id = "wio"
kind = "full_odometry"

[[odometry]]
id = "imu"
kind = "rotation_only"

[ground_truth]
map = false
"#
    );
    for (i, id) in lidars.iter().enumerate() {
        s.push_str(&format!(
            "\n[[lidar]]\nid = \"{id}\"\nextrinsic = [{}, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0]\n",
            0.2 * i as f64
        ));
    }
    s
}

fn synth(dir: &Path, spec: &str, extra: &[&str]) -> PathBuf {
    let spec_path = dir.join("spec.toml");
    std::fs::write(&spec_path, spec).unwrap();
    let out = dir.join("ds");
    let mut args = vec!["synth", "--spec", spec_path.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = cli(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.toml")
}

#[test]
fn run_writes_one_pose_per_scan() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &small_spec(&["velo"], 0.01), &[]);
    let out = dir.path().join("run");
    let o = cli(&["run", "--dataset", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let text = stdout(&o);
    let scans: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("scans_processed = "))
        .expect("summary line")
        .parse()
        .unwrap();
    assert_eq!(scans, 15);
    let traj = std::fs::read_to_string(out.join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().filter(|l| !l.starts_with('#')).count(), scans);
    for f in ["map.bin", "timing.txt", "summary.txt", "effective_config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn eval_of_identical_trajectories_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &small_spec(&["velo"], 0.0), &[]);
    let gt = manifest.with_file_name("ground_truth.txt");
    let out = dir.path().join("eval");
    let o = cli(&[
        "eval",
        "--est",
        gt.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ape.mean = 0.000000"), "{}", stdout(&o));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("mean  0.0000 m"), "{report}");
    assert!(out.join("metrics.txt").exists() && out.join("ape.dat").exists());
}

#[test]
fn husky_profile_echoes_its_settings() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &small_spec(&["velo_front", "velo_rear"], 0.01), &[]);
    let out = dir.path().join("run");
    let config = configs().join("husky.toml");
    let o = cli(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for line in [
        "lidars = velo_front,velo_rear",
        "voxel_leaf = 0.1",
        "submap_max_iterations = 20",
        "workers = 4",
        "prior.wio = ",
    ] {
        assert!(text.contains(line), "missing `{line}` in\n{text}");
    }
    let effective = std::fs::read_to_string(out.join("effective_config.toml")).unwrap();
    let cfg = gicp_odom::Config::from_toml_str(&effective, "effective_config.toml").unwrap();
    assert_eq!(cfg.fusion.sources[0].id, "wio");
    assert_eq!(cfg.registration.workers, 4);
}

#[test]
fn spot_profile_loads() {
    let cfg = gicp_odom::Config::load(&configs().join("spot.toml")).unwrap();
    assert!(!cfg.preprocess.voxel_enabled);
    assert_eq!(cfg.registration.submap_max_iterations, 25);
    assert_eq!(cfg.registration.workers, 1);
    assert_eq!(cfg.fusion.sources[0].id, "vio");
}

#[test]
fn shipped_specs_and_scenarios_parse() {
    for name in ["corridor.toml", "husky.toml"] {
        gicp_odom::SynthSpec::load(&configs().join("synth").join(name)).unwrap();
    }
    for name in ["wio_imu_loss.toml", "wio_loss.toml", "lidar_gap.toml"] {
        gicp_odom::ScenarioScript::load(&configs().join("scenarios").join(name)).unwrap();
    }
}

#[test]
fn seed_flag_reaches_the_generator() {
    let spec = small_spec(&["velo"], 0.02);
    let read = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth(dir.path(), &spec, &["--seed", seed]);
        std::fs::read(manifest.with_file_name("lidar_velo.bin")).unwrap()
    };
    let a = read("11");
    assert_eq!(a, read("11"));
    assert_ne!(a, read("12"));
}

#[test]
fn inspect_summarizes_streams() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &small_spec(&["velo"], 0.0), &[]);
    let o = cli(&["inspect", "--dataset", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("lidar velo: 15 scans"), "{text}");
    assert!(text.contains("odometry wio: FullOdometry"), "{text}");
    assert!(text.contains("ground truth: 76 poses"), "{text}");
}

fn assert_single_line_failure(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &small_spec(&["velo"], 0.0), &[]);
    let m = manifest.to_str().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[registration]\nmax_iteration = 3\n").unwrap();
    let o = cli(&["run", "--config", bad.to_str().unwrap(), "--dataset", m, "--out", out]);
    assert_single_line_failure(&o, 1);
    assert!(stderr(&o).contains("max_iteration"));

    // The Spot profile names sources this dataset does not have.
    let spot = configs().join("spot.toml");
    let o = cli(&["run", "--config", spot.to_str().unwrap(), "--dataset", m, "--out", out]);
    assert_single_line_failure(&o, 1);

    let o = cli(&["run", "--dataset", "/nonexistent/manifest.toml", "--out", out]);
    assert_single_line_failure(&o, 1);

    let o = cli(&["run", "--dataset", m]);
    assert_single_line_failure(&o, 1);

    let script = dir.path().join("s.toml");
    std::fs::write(&script, "[[event]]\ntime = 2.0\naction = \"lidar_gap\"\n").unwrap();
    let o = cli(&["run", "--dataset", m, "--scenario", script.to_str().unwrap(), "--out", out]);
    assert_single_line_failure(&o, 1);
    assert!(stderr(&o).contains("duration"));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &small_spec(&["velo"], 0.0), &[]);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = blocker.join("run");
    let o = cli(&["run", "--dataset", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_single_line_failure(&o, 2);
}
