//! Shared synthetic scenes and configs for integration tests.
#![allow(dead_code)]

use gicp_odom::fusion::SourceKind;
use gicp_odom::io::synth::{
    BoxSpec, CorridorSpec, GroundTruthSpec, SensorSpec, SynthLidar, SynthOdometry, Waypoint, WorldSpec,
};
use gicp_odom::io::{generate_synthetic, SyntheticData};
use gicp_odom::{Config, SynthSpec};

pub const LIDAR_Z: f64 = 0.5;

/// A closed corridor along +x with pillars on both walls.
pub fn corridor_world(length: f64) -> WorldSpec {
    let mut boxes = Vec::new();
    let mut x = 1.5;
    let mut left = true;
    while x < length - 3.0 {
        let y = if left { 1.6 } else { -2.0 };
        boxes.push(BoxSpec {
            min: [x, y, -0.5],
            max: [x + 0.4, y + 0.4, 2.5],
        });
        // Low crates break the floor/ceiling symmetry.
        boxes.push(BoxSpec {
            min: [x + 1.2, -y.signum() * 1.0 - 0.3, -0.5],
            max: [x + 1.8, -y.signum() * 1.0 + 0.3, 0.1],
        });
        x += 2.7;
        left = !left;
    }
    WorldSpec {
        boxes,
        corridors: vec![CorridorSpec {
            origin: [-4.0, 0.0, -0.5],
            length: length + 8.0,
            width: 4.0,
            height: 3.0,
        }],
        ..Default::default()
    }
}

/// Straight run at `speed` m/s for `seconds`, one lidar, exact WIO and IMU.
pub fn corridor_spec(seconds: f64, speed: f64, noise: f64, seed: u64) -> SynthSpec {
    let length = seconds * speed;
    SynthSpec {
        seed,
        world: corridor_world(length + 2.0),
        trajectory: vec![
            Waypoint {
                t: 0.0,
                position: [0.0, 0.0, 0.0],
                rpy_deg: [0.0, 0.0, 0.0],
            },
            Waypoint {
                t: seconds,
                position: [length, 0.0, 0.0],
                rpy_deg: [0.0, 0.0, 0.0],
            },
        ],
        sensor: SensorSpec {
            noise_sigma: noise,
            ..Default::default()
        },
        lidars: vec![SynthLidar {
            id: "velo".into(),
            extrinsic: Some([0.0, 0.0, LIDAR_Z, 0.0, 0.0, 0.0, 1.0]),
        }],
        odometry: vec![
            SynthOdometry {
                id: "wio".into(),
                kind: SourceKind::FullOdometry,
                rate: 50.0,
                translation_noise: 0.0,
                rotation_noise: 0.0,
                extrinsic: Some([-0.2, 0.0, 0.1, 0.0, 0.0, 0.0, 1.0]),
            },
            SynthOdometry {
                id: "imu".into(),
                kind: SourceKind::RotationOnly,
                rate: 50.0,
                translation_noise: 0.0,
                rotation_noise: 0.0,
                extrinsic: None,
            },
        ],
        ground_truth: GroundTruthSpec {
            map_spacing: 0.02,
            margin: 20.0,
            ..Default::default()
        },
    }
}

pub fn corridor(seconds: f64, noise: f64, seed: u64) -> SyntheticData {
    generate_synthetic(&corridor_spec(seconds, 1.0, noise, seed)).expect("synthetic corridor")
}

/// Defaults with the random stage off, so scans keep their voxel density.
pub fn test_config() -> Config {
    let mut cfg = Config::default();
    cfg.preprocess.random_enabled = false;
    cfg.preprocess.voxel_leaf = 0.1;
    cfg
}

/// A 12 x 9 x 4 m room with a pillar and two crates.
pub fn room_world() -> WorldSpec {
    WorldSpec {
        boxes: vec![
            BoxSpec {
                min: [-6.0, -4.5, -1.0],
                max: [6.0, 4.5, 3.0],
            },
            BoxSpec {
                min: [2.0, 1.0, -1.0],
                max: [2.6, 1.6, 3.0],
            },
            BoxSpec {
                min: [-3.5, -3.0, -1.0],
                max: [-2.3, -2.2, 0.2],
            },
            BoxSpec {
                min: [-1.0, 2.5, -1.0],
                max: [0.5, 4.5, 0.8],
            },
        ],
        ..Default::default()
    }
}

/// One noiseless, untimed scan from `position` with heading `yaw_deg`.
pub fn room_scan(position: [f64; 3], yaw_deg: f64, azimuth_steps: usize) -> gicp_odom::PointCloud {
    let spec = SynthSpec {
        seed: 0,
        world: room_world(),
        trajectory: vec![Waypoint {
            t: 0.0,
            position,
            rpy_deg: [0.0, 0.0, yaw_deg],
        }],
        sensor: SensorSpec {
            azimuth_steps,
            per_point_timing: false,
            duration: Some(0.1),
            ..Default::default()
        },
        lidars: vec![SynthLidar {
            id: "velo".into(),
            extrinsic: None,
        }],
        odometry: vec![],
        ground_truth: GroundTruthSpec {
            map: false,
            ..Default::default()
        },
    };
    let mut data = generate_synthetic(&spec).expect("room scan");
    data.dataset.lidars.remove(0).clouds.remove(0)
}
