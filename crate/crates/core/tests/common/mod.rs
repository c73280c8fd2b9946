//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::Rng;
use rand_distr::StandardNormal;
use vnfmig::rng;
use vnfmig::trajdata::EARTH_RADIUS_M;

pub const BIN: &str = env!("CARGO_BIN_EXE_vnfmig");

/// A configuration small enough for every subcommand to finish in seconds.
pub const SMALL_CONFIG: &str = r#"
seed = 7

[economics]
interval = 10

[mdn]
epochs = 2

[sim]
region_side = 3000.0
population = 30
preconvergence_steps = 40
training_steps = 120
evaluation_steps = 60
n_rollouts = 4
kernel_count = 4
train_epochs = 1

[sim.ec]
center = [1500.0, 1500.0]
radius = 600.0

[benchmark]
p_o_grid = [0.01, 0.5]
p_v_grid = [0.3, 0.7]
n_seeds = 2
"#;

pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Geolife-style `.plt` text of a drifting walk sampled every 5 s.
pub fn plt_walk(seed: u64, points: usize) -> String {
    let mut r = rng::seeded(seed);
    let (lat0, lon0) = (39.98, 116.30);
    let heading = r.random_range(0.0..std::f64::consts::TAU);
    let speed = r.random_range(0.3..1.2);
    let mut text = String::from(
        "Geolife trajectory\nWGS 84\nAltitude is in Feet\nReserved 3\n0,2,255,My Track,0,0,2,8421376\n0\n",
    );
    let (mut x, mut y) = (0.0f64, 0.0f64);
    let start = 3600 + (seed % 7) as usize * 60;
    for i in 0..points {
        let t = start + 5 * i;
        let lat = lat0 + (y / EARTH_RADIUS_M).to_degrees();
        let lon = lon0 + (x / (EARTH_RADIUS_M * lat0.to_radians().cos())).to_degrees();
        let days = 39744.0 + t as f64 / 86400.0;
        writeln!(
            text,
            "{lat:.7},{lon:.7},0,492,{days:.10},2008-10-23,{:02}:{:02}:{:02}",
            t / 3600,
            (t / 60) % 60,
            t % 60
        )
        .unwrap();
        let zx: f64 = r.sample(StandardNormal);
        let zy: f64 = r.sample(StandardNormal);
        x += 5.0 * (speed * heading.cos() + 0.6 * zx);
        y += 5.0 * (speed * heading.sin() + 0.6 * zy);
    }
    text
}

/// Writes `files` walks of `points` samples each into `dir`.
pub fn write_plt_dir(dir: &Path, files: usize, points: usize) {
    let traj = dir.join("000").join("Trajectory");
    fs::create_dir_all(&traj).unwrap();
    for f in 0..files {
        fs::write(traj.join(format!("2008102302{f:04}.plt")), plt_walk(100 + f as u64, points)).unwrap();
    }
}

/// Working directory with the small config and a `.plt` tree under `plt/`.
pub fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL_CONFIG).unwrap();
    write_plt_dir(&dir.path().join("plt"), 8, 2400);
    dir
}

/// Runs `args` and panics with the captured output unless it exits 0.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

/// preprocess + train in `dir`, producing `dataset.csv` and `mdn.ckpt`.
pub fn prepare_model(dir: &Path) {
    ok(dir, &["--config", "small.toml", "preprocess", "plt", "--out", "dataset.csv"]);
    ok(
        dir,
        &["--config", "small.toml", "train", "--dataset", "dataset.csv", "--out", "mdn.ckpt", "--loss-csv", "loss.csv"],
    );
}
