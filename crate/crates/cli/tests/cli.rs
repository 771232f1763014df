use std::path::Path;
use std::process::{Command, Output};

fn uavloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uavloc"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn small_scenario(dir: &Path) -> String {
    let path = dir.join("small.toml");
    let text = "name = \"small\"\nseeds = [1, 2]\n[users]\ncount = 3\n[mission]\nbudget = 200.0\nepochs = 20\n";
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small_scenario(dir.path());
    let out = dir.path().join("run");
    let o = uavloc(&["run", "-s", &sc, "--seed", "3", "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "map.toml",
        "measurements/odometry.csv",
        "measurements/links.csv",
        "measurements/truth.csv",
        "measurements/positions_truth.csv",
        "params.toml",
        "labels.csv",
        "trace.csv",
        "solver_trace.csv",
        "estimate.csv",
        "mission.json",
        "scenario.toml",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    // The dumped measurements can be estimated again without the truth file.
    std::fs::remove_file(out.join("measurements/truth.csv")).unwrap();
    let est = dir.path().join("est");
    let o = uavloc(&[
        "estimate",
        "-s",
        &sc,
        out.join("measurements").to_str().unwrap(),
        "--map",
        out.join("map.toml").to_str().unwrap(),
        "-o",
        est.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(est.join("params.toml").exists());
}

#[test]
fn batch_then_replay_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small_scenario(dir.path());
    let out = dir.path().join("batch");
    let o = uavloc(&[
        "batch",
        "-s",
        &sc,
        "--seeds",
        "4,2",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.toml")).unwrap();
    assert!(summary.contains("seeds = [4, 2]"));
    let again = dir.path().join("again");
    let o = uavloc(&[
        "replay",
        out.join("summary.toml").to_str().unwrap(),
        "-o",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("byte-identical"));
    assert_eq!(
        std::fs::read(out.join("trials.csv")).unwrap(),
        std::fs::read(again.join("trials.csv")).unwrap()
    );

    // A tampered summary no longer replays to the same bytes.
    std::fs::write(
        out.join("summary.toml"),
        summary.replace("n_trials = 2", "n_trials = 3"),
    )
    .unwrap();
    let o = uavloc(&[
        "replay",
        out.join("summary.toml").to_str().unwrap(),
        "-o",
        again.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn trials_flag_picks_seeds_one_to_n() {
    let dir = tempfile::tempdir().unwrap();
    let sc = small_scenario(dir.path());
    let out = dir.path().join("b");
    let o = uavloc(&["batch", "-s", &sc, "-n", "1", "-o", out.to_str().unwrap()]);
    assert!(o.status.success());
    let trials = std::fs::read_to_string(out.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 2);
    assert!(trials.lines().nth(1).unwrap().starts_with("1,"));
}

#[test]
fn hard_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[mission]\nbudget = -5.0\n").unwrap();
    let o = uavloc(&[
        "run",
        "-s",
        bad.to_str().unwrap(),
        "-o",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let o = uavloc(&["batch", "-s", bad.to_str().unwrap()]);
    assert!(!o.status.success());

    let o = uavloc(&[
        "run",
        "-s",
        dir.path().join("missing.toml").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn shipped_scenario_loads() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/default.toml");
    let dir = tempfile::tempdir().unwrap();
    let o = uavloc(&[
        "batch",
        "-s",
        path,
        "--seeds",
        "1",
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
