//! Scenes shared by the benchmarks.

use std::path::Path;

use gicp_odom::io::{generate_synthetic, SyntheticData};
use gicp_odom::{PointCloud, SynthSpec};

const ROOM: &str = r#"
[[world.boxes]]
min = [-6.0, -4.5, -1.0]
max = [6.0, 4.5, 3.0]

[[world.boxes]]
min = [2.0, 1.0, -1.0]
max = [2.6, 1.6, 3.0]

[[world.boxes]]
min = [-3.5, -3.0, -1.0]
max = [-2.3, -2.2, 0.2]

[[trajectory]]
t = 0.0
position = [0.0, 0.0, 0.0]

[sensor]
per_point_timing = false
duration = 0.1

[ground_truth]
map = false
"#;

const CORRIDOR: &str = r#"
seed = 1

[[world.corridors]]
origin = [-4.0, 0.0, -0.5]
length = 12.0
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
t = 2.0
position = [2.0, 0.0, 0.0]

[sensor]
noise_sigma = 0.01

[[lidar]]
id = "velo"
extrinsic = [0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0]

[[odometry]]
id = "wio"
kind = "full_odometry"

[ground_truth]
map = false
"#;

fn spec(text: &str) -> SynthSpec {
    SynthSpec::from_toml_str(text, Path::new("bench")).expect("bench spec")
}

/// One noiseless scan of a furnished room (~14k points).
pub fn room_scan() -> PointCloud {
    let mut data = generate_synthetic(&spec(ROOM)).expect("room scan");
    data.dataset.lidars.remove(0).clouds.remove(0)
}

/// A 2 s corridor run with WIO.
pub fn corridor_run() -> SyntheticData {
    generate_synthetic(&spec(CORRIDOR)).expect("corridor run")
}
