mod common;

use gicp_odom::io::dataset::{ScenarioAction, ScenarioEvent};
use gicp_odom::io::generate_synthetic;
use gicp_odom::pipeline::OutputKind;
use gicp_odom::{run_dataset, ReplayMode, ScenarioScript};

// The IMU and WIO samples share stamps and "imu" sorts first, so gap
// propagation must wait for the WIO sample at the same instant.
#[test]
fn gap_propagation_sees_every_sample_at_its_stamp() {
    let mut spec = common::corridor_spec(3.0, 1.0, 0.0, 1);
    spec.ground_truth.map = false;
    let data = generate_synthetic(&spec).unwrap();
    let script = ScenarioScript::new(vec![ScenarioEvent {
        time: 1.0,
        action: ScenarioAction::LidarGap(1.2),
    }])
    .unwrap();
    let run = run_dataset(&common::test_config(), &data.dataset, Some(&script), ReplayMode::Deterministic).unwrap();

    let propagated: Vec<_> = run
        .output
        .outputs
        .iter()
        .filter(|o| o.kind == OutputKind::Propagated)
        .collect();
    assert!(propagated.len() >= 5, "{} propagated poses", propagated.len());
    for pair in propagated.windows(2) {
        let dt = pair[1].stamp - pair[0].stamp;
        let step = pair[1].increment.translation;
        assert_eq!(pair[1].prior_source.as_deref(), Some("wio"));
        assert!((step.x - dt).abs() < 1e-6, "step {step:?} over {dt} s");
        assert!(step.y.abs() < 1e-9 && step.z.abs() < 1e-9);
    }
}

#[test]
fn replay_resumes_scan_matching_after_the_gap() {
    let mut spec = common::corridor_spec(3.0, 1.0, 0.0, 2);
    spec.ground_truth.map = false;
    let data = generate_synthetic(&spec).unwrap();
    let script = ScenarioScript::new(vec![ScenarioEvent {
        time: 1.0,
        action: ScenarioAction::LidarGap(1.0),
    }])
    .unwrap();
    let run = run_dataset(&common::test_config(), &data.dataset, Some(&script), ReplayMode::Deterministic).unwrap();
    let last = run.output.outputs.last().unwrap();
    assert_eq!(last.kind, OutputKind::Scan);
    assert!(last.stamp > 2.9);
    let first = &run.output.outputs[0];
    // 1 m/s along x.
    let expected = last.stamp - first.stamp;
    let travelled = (last.pose.translation - first.pose.translation).x;
    assert!((travelled - expected).abs() < 0.02, "travelled {travelled}");
}
