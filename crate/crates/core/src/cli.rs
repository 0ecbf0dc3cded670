//! Command implementations behind the `vifusion` binary: sequence
//! generation, tracking and evaluation. All file output goes through here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    associate, ate, drift_curve, is_failure, reconstruction_error, Trajectory, ASSOCIATION_GATE,
};
use crate::imu::NoiseProfile;
use crate::io::{create_dir, read_sequence, read_sequence_meta, write_atomic, write_sequence};
use crate::manifold::{make_transform, RigidTransform, Vec3};
use crate::pipeline::{parse_constraints, run, RunInput};
use crate::synth::{simulate_with, CanonicalScene, SimOptions};

/// Camera path used by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectorySpec {
    /// The scene's own trajectory.
    Scene,
    /// Camera held at the scene's initial pose.
    Stationary,
    /// TUM file of scene-from-camera poses, interpolated between samples.
    File(PathBuf),
}

impl std::str::FromStr for TrajectorySpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "scene" => TrajectorySpec::Scene,
            "stationary" => TrajectorySpec::Stationary,
            path => TrajectorySpec::File(path.into()),
        })
    }
}

/// Inputs of `simulate`; also written to `simulation.toml` in the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateArgs {
    pub scene: String,
    pub out: PathBuf,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub profile: NoiseProfile,
    /// Seconds; the scene default when absent.
    pub duration: Option<f64>,
    pub trajectory: TrajectorySpec,
    /// Sensor noise on the images (IMU noise is always on).
    pub image_noise: bool,
}

impl SimulateArgs {
    pub fn new(scene: &str, out: impl Into<PathBuf>) -> Self {
        SimulateArgs {
            scene: scene.to_string(),
            out: out.into(),
            seed: 0,
            width: 160,
            height: 120,
            profile: NoiseProfile::Synthetic,
            duration: None,
            trajectory: TrajectorySpec::Scene,
            image_noise: true,
        }
    }
}

/// Pose at `t` by linear/spherical interpolation, clamped at both ends.
fn interpolate(traj: &Trajectory, t: f64) -> RigidTransform {
    let ts = &traj.timestamps;
    let k = ts.partition_point(|&x| x <= t);
    if k == 0 {
        return traj.poses[0];
    }
    if k == ts.len() {
        return traj.poses[k - 1];
    }
    let (a, b) = (&traj.poses[k - 1], &traj.poses[k]);
    let s = (t - ts[k - 1]) / (ts[k] - ts[k - 1]);
    let q = a.rotation.slerp(&b.rotation, s);
    let p = a.translation.vector.lerp(&b.translation.vector, s);
    make_transform(q, p)
}

/// Renders a sequence directory. Returns the number of frames written.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<usize> {
    let scene: CanonicalScene = args.scene.parse()?;
    let options = SimOptions {
        width: args.width,
        height: args.height,
        duration: args.duration,
        profile: args.profile,
        seed: args.seed,
        image_noise: args.image_noise,
        ..Default::default()
    };
    let duration = args.duration.unwrap_or_else(|| scene.default_duration());
    let model = scene.model();
    let name = scene.to_string();
    let seq = match &args.trajectory {
        TrajectorySpec::Scene => {
            simulate_with(&name, &model, |t| scene.pose(t), duration, &options)?
        }
        TrajectorySpec::Stationary => {
            let start = scene.pose(0.0);
            simulate_with(&name, &model, |_| start, duration, &options)?
        }
        TrajectorySpec::File(path) => {
            let traj = Trajectory::read_tum(path)?;
            simulate_with(&name, &model, |t| interpolate(&traj, t), duration, &options)?
        }
    };
    create_dir(&args.out)?;
    write_sequence(&args.out, &seq, Some(&name), args.seed)?;
    let snapshot = toml::to_string(args).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&args.out.join("simulation.toml"), snapshot.as_bytes())?;
    Ok(seq.len())
}

#[derive(Debug, Clone)]
pub struct TrackArgs {
    pub sequence: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
    /// Overrides the profile recorded with the sequence.
    pub profile: Option<NoiseProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub frames: usize,
    pub failed_frames: Vec<usize>,
    pub flagged: bool,
    pub closures: Vec<usize>,
    pub surfels: usize,
}

/// Runs the pipeline over a sequence directory and writes
/// `trajectory.txt` (TUM), `map.txt`, `frames.csv`, `config.toml` and
/// `summary.json` into `out`.
pub fn cmd_track(args: &TrackArgs) -> Result<TrackSummary> {
    let data = read_sequence(&args.sequence)?;
    if data.frames.is_empty() {
        return Err(Error::TooFewPoses { needed: 1, got: 0 });
    }
    let mut config = args.config.clone();
    config.profile = args.profile.unwrap_or(data.meta.profile);
    config.validate()?;
    let constraints = match &config.constraints {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_constraints(&text, p)?
        }
        None => Vec::new(),
    };
    let truth = data.ground_truth.as_ref().map(|g| g.poses.clone());
    if let Some(t) = &truth {
        if t.len() != data.frames.len() {
            return Err(Error::Mismatch(format!(
                "{} ground-truth poses for {} frames",
                t.len(),
                data.frames.len()
            )));
        }
    }
    let input = RunInput {
        intrinsics: data.meta.intrinsics()?,
        t_cs: data.meta.t_cs.transform(),
        frames: &data.frames,
        imu: &data.imu,
        truth: truth.as_deref(),
    };
    let output = run(&input, &config, &constraints)?;

    create_dir(&args.out)?;
    write_atomic(
        &args.out.join("trajectory.txt"),
        output.trajectory().to_tum().as_bytes(),
    )?;
    let mut map = Vec::new();
    output
        .map
        .export_ascii(&mut map)
        .map_err(|e| Error::io(args.out.join("map.txt"), e))?;
    write_atomic(&args.out.join("map.txt"), &map)?;
    output.write_log(&args.out.join("frames.csv"))?;
    write_atomic(&args.out.join("config.toml"), config.to_toml().as_bytes())?;
    let summary = TrackSummary {
        frames: output.states.len(),
        failed_frames: output.failed_frames(),
        flagged: output.flagged(),
        closures: output.closures.iter().map(|c| c.frame).collect(),
        surfels: output.map.len(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSummary {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ate_rmse: f64,
    pub matched: usize,
    /// Present when the sequence names a shipped scene and a `map.txt`
    /// sits next to the estimate.
    pub reconstruction: Option<ReconstructionSummary>,
    pub final_drift: Option<f64>,
    pub distance: Option<f64>,
    /// From `summary.json` next to the estimate, when present.
    pub flagged: Option<bool>,
    pub failed: bool,
}

/// Reads the first three columns of a `map.txt` export.
pub fn read_map_points(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let v: Vec<f64> = l
                .split_whitespace()
                .take(3)
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, n + 1, format!("{e}")))?;
            if v.len() < 3 {
                return Err(Error::parse(path, n + 1, "expected x y z"));
            }
            Ok(Vec3::new(v[0], v[1], v[2]))
        })
        .collect()
}

/// Scores an estimate against a sequence's ground truth and writes
/// `report.json` and `drift.csv` into `out`.
pub fn cmd_eval(estimate: &Path, sequence: &Path, out: &Path) -> Result<EvalReport> {
    let est = Trajectory::read_tum(estimate)?;
    let truth = Trajectory::read_tum(&sequence.join("groundtruth.txt"))?;
    let meta = read_sequence_meta(sequence)?;
    let a = ate(&est, &truth)?;
    let dir = estimate.parent().unwrap_or(Path::new("."));

    let map_path = dir.join("map.txt");
    let scene = meta
        .scene
        .as_deref()
        .and_then(|s| s.parse::<CanonicalScene>().ok());
    let reconstruction = match (scene, &meta.scene_from_world, map_path.exists()) {
        (Some(scene), Some(sw), true) => {
            let points = read_map_points(&map_path)?;
            // the map lives in the frame anchored at the first estimated
            // pose; the ATE alignment rotation is poorly determined on short
            // or straight paths
            let register = match associate(&est, &truth, ASSOCIATION_GATE).first() {
                Some(&(i, j)) => truth.poses[j] * est.poses[i].inverse(),
                None => RigidTransform::identity(),
            };
            let r = reconstruction_error(&points, &scene.model(), &(sw.transform() * register))?;
            Some(ReconstructionSummary {
                mean: r.mean,
                median: r.median,
                count: r.count,
            })
        }
        _ => None,
    };

    let drift = drift_curve(&est, &truth);
    let mut csv = String::from("distance_m,error_m\n");
    for d in &drift {
        csv.push_str(&format!("{:.6},{:.6}\n", d.distance, d.error));
    }

    let summary_path = dir.join("summary.json");
    let flagged = if summary_path.exists() {
        let text =
            std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        let s: TrackSummary = serde_json::from_str(&text)
            .map_err(|e| Error::parse(&summary_path, e.line(), e.to_string()))?;
        Some(s.flagged)
    } else {
        None
    };

    let report = EvalReport {
        ate_rmse: a.rmse,
        matched: a.matched,
        reconstruction,
        final_drift: drift.last().map(|d| d.error),
        distance: drift.last().map(|d| d.distance),
        flagged,
        failed: is_failure(Some(a.rmse), flagged.unwrap_or(false)),
    };
    create_dir(out)?;
    write_atomic(&out.join("drift.csv"), csv.as_bytes())?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
