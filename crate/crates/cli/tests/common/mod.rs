#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A one-lane world small enough for a test run.
pub const SMALL_CONFIG: &str = "\
scenario.lanes = 1
scenario.lane_length = 60
world.extent = 120
world.num_landmarks = 25
world.num_clutter = 80
";

pub fn lpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpr")).args(args).output().expect("lpr runs")
}

pub fn lpr_ok(args: &[&str]) -> Output {
    let out = lpr(args);
    assert!(
        out.status.success(),
        "lpr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub struct SmallRun {
    pub root: PathBuf,
    pub config: PathBuf,
    pub map: PathBuf,
    pub model: PathBuf,
    pub queries: PathBuf,
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// World, survey, calibration, map, voting model and queries, all written
/// by the binary under `root`.
pub fn small_run(root: &Path, seed: &str) -> SmallRun {
    let config = root.join("small.cfg");
    fs::write(&config, SMALL_CONFIG).unwrap();
    let common = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = vec!["--seed".into(), seed.into(), "--config".into(), s(&config).into(), "--out".into(), s(root).into()];
        v.extend(extra.iter().map(|a| a.to_string()));
        v
    };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        lpr_ok(&refs);
    };
    let world = root.join("world.json");
    run(common(&["synth-world"]));
    run(common(&["synth-scan", "--world", s(&world), "--scan-set", "survey"]));
    run(common(&["synth-scan", "--world", s(&world), "--scan-set", "train", "--count", "6"]));
    run(common(&["synth-scan", "--world", s(&world), "--scan-set", "query", "--count", "4"]));
    run(common(&["calibrate", "--scans", s(&root.join("survey"))]));
    run(common(&[
        "build-map",
        "--scans",
        s(&root.join("survey")),
        "--trajectory",
        s(&root.join("trajectory.txt")),
        "--calibration",
        s(&root.join("calibration.txt")),
    ]));
    run(common(&["fit-voting", "--map", s(&root.join("map.lprdb")), "--scans", s(&root.join("train"))]));
    SmallRun {
        root: root.to_path_buf(),
        config,
        map: root.join("map.lprdb"),
        model: root.join("model.txt"),
        queries: root.join("query"),
    }
}
