use std::path::Path;

use vifusion::cli::{cmd_eval, cmd_simulate, cmd_track, SimulateArgs, TrackArgs, TrajectorySpec};
use vifusion::config::RunConfig;
use vifusion::eval::{ate, drift_curve, Trajectory};
use vifusion::io::read_sequence;
use vifusion::manifold::rotation_boxminus;
use vifusion::par::Execution;
use vifusion::synth::{simulate, CanonicalScene, SimOptions};

fn small(scene: &str, out: &Path, seconds: f64) -> SimulateArgs {
    SimulateArgs {
        width: 80,
        height: 60,
        duration: Some(seconds),
        seed: 7,
        ..SimulateArgs::new(scene, out)
    }
}

fn sequential() -> RunConfig {
    RunConfig {
        execution: Execution::Sequential,
        ..Default::default()
    }
}

#[test]
fn stationary_sequence_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small("room", &dir.path().join("seq"), 9.0 / 30.0);
    args.trajectory = TrajectorySpec::Stationary;
    assert_eq!(cmd_simulate(&args).unwrap(), 10);
    let data = read_sequence(&args.out).unwrap();
    assert_eq!(data.frames.len(), 10);
    let pngs = std::fs::read_dir(args.out.join("intensity"))
        .unwrap()
        .count();
    assert_eq!(pngs, 10);
    // 200 Hz from t = 0 to half a second past the last frame
    let span = data.imu.last().unwrap().timestamp - data.imu[0].timestamp;
    assert_eq!(data.imu.len(), (span * 200.0).round() as usize + 1);
    let gt = data.ground_truth.unwrap();
    assert!(gt.poses.iter().all(|p| p.translation.vector.norm() < 1e-9));
}

#[test]
fn generated_sequence_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let args = small("fast_room", &dir.path().join("seq"), 0.5);
    cmd_simulate(&args).unwrap();
    let options = SimOptions {
        width: 80,
        height: 60,
        duration: Some(0.5),
        seed: 7,
        ..Default::default()
    };
    let seq = simulate(CanonicalScene::FastRoom, &options).unwrap();
    let data = read_sequence(&args.out).unwrap();
    assert_eq!(data.frames.len(), seq.len());
    let gt = data.ground_truth.unwrap();
    for (p, s) in gt.poses.iter().zip(&seq.ground_truth) {
        assert!((p.translation.vector - s.p_wc).norm() < 1e-8);
        assert!(rotation_boxminus(&p.rotation, &s.q_wc).norm() < 1e-8);
    }
    for (a, b) in data.frames.iter().zip(&seq.frames) {
        // 8-bit intensity and 0.2 mm depth steps
        let di = a
            .intensity
            .data
            .iter()
            .zip(&b.intensity.data)
            .map(|(x, y)| (x - y).abs());
        assert!(di.fold(0.0, f64::max) <= 0.5 + 1e-9);
        let dd = a
            .depth
            .data
            .iter()
            .zip(&b.depth.data)
            .map(|(x, y)| (x - y).abs());
        assert!(dd.fold(0.0, f64::max) <= 1e-4 + 1e-12);
    }
    assert_eq!(data.imu.len(), seq.imu.len());
    let states = data.true_states.unwrap();
    assert!((states[5].bg - seq.ground_truth[5].bg).norm() < 1e-9);
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = small("white_wall", &dir.path().join("a"), 0.3);
    let b = small("white_wall", &dir.path().join("b"), 0.3);
    cmd_simulate(&a).unwrap();
    cmd_simulate(&b).unwrap();
    for f in [
        "imu.csv",
        "groundtruth.txt",
        "depth/frame_000004.png",
        "intensity/frame_000008.png",
    ] {
        assert_eq!(
            std::fs::read(a.out.join(f)).unwrap(),
            std::fs::read(b.out.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn track_and_eval_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let sim = small("room", &dir.path().join("seq"), 1.0);
    cmd_simulate(&sim).unwrap();
    let run = dir.path().join("run");
    let summary = cmd_track(&TrackArgs {
        sequence: sim.out.clone(),
        out: run.clone(),
        config: sequential(),
        profile: None,
    })
    .unwrap();
    assert_eq!(summary.frames, 31);
    assert!(!summary.flagged);
    for f in [
        "trajectory.txt",
        "map.txt",
        "frames.csv",
        "config.toml",
        "summary.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let replay = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(replay.execution, Execution::Sequential);

    let report = cmd_eval(&run.join("trajectory.txt"), &sim.out, &run).unwrap();
    let est = Trajectory::read_tum(&run.join("trajectory.txt")).unwrap();
    let truth = Trajectory::read_tum(&sim.out.join("groundtruth.txt")).unwrap();
    let direct = ate(&est, &truth).unwrap();
    assert_eq!(report.ate_rmse, direct.rmse);
    assert_eq!(report.matched, 31);
    assert_eq!(
        report.final_drift,
        drift_curve(&est, &truth).last().map(|d| d.error)
    );
    assert!(report.reconstruction.is_some());
    assert_eq!(report.flagged, Some(false));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    for key in [
        "ate_rmse",
        "matched",
        "reconstruction",
        "final_drift",
        "distance",
        "flagged",
        "failed",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let drift = std::fs::read_to_string(run.join("drift.csv")).unwrap();
    assert_eq!(drift.lines().count(), 32);
}

#[test]
fn ground_truth_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let sim = small("room", &dir.path().join("seq"), 0.5);
    cmd_simulate(&sim).unwrap();
    let r = cmd_eval(
        &sim.out.join("groundtruth.txt"),
        &sim.out,
        &dir.path().join("eval"),
    )
    .unwrap();
    assert!(r.ate_rmse < 1e-9);
    assert!(r.final_drift.unwrap() < 1e-9);
    assert!(r.reconstruction.is_none());
    assert!(!r.failed);
}

#[test]
fn sequential_tracking_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sim = small("fast_room", &dir.path().join("seq"), 1.0);
    cmd_simulate(&sim).unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        cmd_track(&TrackArgs {
            sequence: sim.out.clone(),
            out: out.clone(),
            config: sequential(),
            profile: None,
        })
        .unwrap();
        outputs.push(out);
    }
    for f in ["trajectory.txt", "map.txt", "frames.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(outputs[0].join(f)).unwrap(),
            std::fs::read(outputs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn malformed_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let sim = small("room", &dir.path().join("seq"), 0.2);
    cmd_simulate(&sim).unwrap();
    let imu = sim.out.join("imu.csv");
    let mut text = std::fs::read_to_string(&imu).unwrap();
    text.push_str("oops,1,2\n");
    std::fs::write(&imu, text).unwrap();
    let e = cmd_track(&TrackArgs {
        sequence: sim.out.clone(),
        out: dir.path().join("run"),
        config: sequential(),
        profile: None,
    })
    .unwrap_err();
    assert!(e.to_string().contains("imu.csv"), "{e}");

    let bad = SimulateArgs::new("atrium", dir.path().join("x"));
    assert!(cmd_simulate(&bad)
        .unwrap_err()
        .to_string()
        .contains("atrium"));
    let missing = cmd_eval(&dir.path().join("none.txt"), &sim.out, dir.path()).unwrap_err();
    assert!(missing.to_string().contains("none.txt"));
}
