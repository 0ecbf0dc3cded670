//! Frame-by-frame tracking and mapping over a recorded or generated sequence.

use std::path::Path;

use nalgebra::Point3;
use serde::Serialize;

use crate::camera::{
    build_pyramid_with, CameraIntrinsics, Frame, FramePyramid, PyramidLevel, MAX_DEPTH, MIN_DEPTH,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::imu::{
    gravity_from_accel, preintegrate, samples_between, ImuNoiseModel, ImuSample, NoiseProfile,
};
use crate::manifold::{RigidTransform, State, Vec3};
use crate::map::{
    deform, deform_grouped, optimize_graph, ConstraintKind, DeformationConstraint,
    DeformationGraph, EnergyKind, SurfelMap,
};
use crate::residuals::{ModelView, SensorNoise};
use crate::synth::Sequence;
use crate::tracker::{
    initial_prior, initial_tilt_sigma, Prior, Tracker, TrackingInput, TrackingStatus,
};

pub struct RunInput<'a> {
    pub intrinsics: CameraIntrinsics,
    pub t_cs: RigidTransform,
    pub frames: &'a [Frame],
    pub imu: &'a [ImuSample],
    /// True camera poses in `W`, enabling the ground-truth-assisted loop
    /// detector in SLAM mode.
    pub truth: Option<&'a [RigidTransform]>,
}

impl Sequence {
    pub fn truth_poses(&self) -> Vec<RigidTransform> {
        self.ground_truth.iter().map(State::pose).collect()
    }
}

/// A loop-closure constraint read from file, applied after tracking `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledConstraint {
    pub frame: usize,
    pub constraint: DeformationConstraint,
}

/// Parses `frame kind sx sy sz dx dy dz` lines (`kind`: surface, pin or
/// relative); `#` starts a comment.
pub fn parse_constraints(text: &str, path: &Path) -> Result<Vec<ScheduledConstraint>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(Error::parse(
                path,
                n + 1,
                format!("expected 8 fields, found {}", f.len()),
            ));
        }
        let frame = f[0]
            .parse::<usize>()
            .map_err(|e| Error::parse(path, n + 1, format!("frame: {e}")))?;
        let kind = match f[1] {
            "surface" => ConstraintKind::Surface,
            "pin" => ConstraintKind::Pin,
            "relative" => ConstraintKind::Relative,
            k => {
                return Err(Error::parse(
                    path,
                    n + 1,
                    format!("unknown constraint kind '{k}'"),
                ))
            }
        };
        let mut v = [0.0; 6];
        for (i, s) in f[2..].iter().enumerate() {
            v[i] = s
                .parse()
                .map_err(|e| Error::parse(path, n + 1, format!("{s}: {e}")))?;
        }
        out.push(ScheduledConstraint {
            frame,
            constraint: DeformationConstraint {
                source: Vec3::new(v[0], v[1], v[2]),
                destination: Vec3::new(v[3], v[4], v[5]),
                kind,
                group: 0,
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameLog {
    pub frame: usize,
    pub timestamp_s: f64,
    pub status: &'static str,
    pub iterations_coarse: usize,
    pub iterations_mid: usize,
    pub iterations_fine: usize,
    pub cost: f64,
    pub rgb_count: usize,
    pub icp_count: usize,
    /// Translation directions left to the IMU.
    pub weak_directions: usize,
    pub rgb_rms: f64,
    pub icp_rms: f64,
    pub imu_cost: f64,
    pub position_sigma: f64,
    pub rotation_sigma: f64,
    /// Velocity in `W`.
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub bgx: f64,
    pub bgy: f64,
    pub bgz: f64,
    pub bax: f64,
    pub bay: f64,
    pub baz: f64,
    pub surfels: usize,
    pub closure: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosureEvent {
    pub frame: usize,
    /// Frame of the revisited (inactive) part of the map; `None` for file
    /// constraints.
    pub matched: Option<usize>,
    pub constraints: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub timestamps: Vec<f64>,
    pub states: Vec<State>,
    pub status: Vec<TrackingStatus>,
    pub log: Vec<FrameLog>,
    pub map: SurfelMap,
    pub closures: Vec<ClosureEvent>,
}

impl RunOutput {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            timestamps: self.timestamps.clone(),
            poses: self.states.iter().map(State::pose).collect(),
        }
    }

    pub fn failed_frames(&self) -> Vec<usize> {
        (0..self.status.len())
            .filter(|&i| self.status[i].failed())
            .collect()
    }

    /// True when any frame raised the tracking-failure flag.
    pub fn flagged(&self) -> bool {
        self.status.iter().any(TrackingStatus::failed)
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.log {
            w.serialize(row)
                .map_err(|e| Error::parse(path, 0, e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io(path, e.into_error()))?;
        crate::io::write_atomic(path, &bytes)
    }
}

fn sensor_noise(profile: NoiseProfile) -> SensorNoise {
    match profile {
        NoiseProfile::Synthetic => SensorNoise::synthetic(),
        NoiseProfile::Real => SensorNoise::real(),
    }
}

fn status_name(s: &TrackingStatus) -> &'static str {
    match s {
        TrackingStatus::Ok => "ok",
        TrackingStatus::Degenerate { .. } => "degenerate",
        TrackingStatus::SolverFailed => "solver_failed",
    }
}

/// Camera-frame sample points of a level, every `stride` pixels.
fn sample_points(level: &PyramidLevel, stride: usize) -> Vec<Vec3> {
    let (w, h) = (level.width(), level.height());
    let mut out = Vec::new();
    for v in (stride / 2..h).step_by(stride.max(1)) {
        for u in (stride / 2..w).step_by(stride.max(1)) {
            let i = v * w + u;
            if level.depth.data[i] > 0.0 {
                out.push(level.vertices[i]);
            }
        }
    }
    out
}

struct Runner<'a> {
    config: &'a RunConfig,
    input: &'a RunInput<'a>,
    tracker: Tracker,
    noise: ImuNoiseModel,
    map: SurfelMap,
    state: State,
    prior: Prior,
    /// Estimated poses of frames that were fused.
    fused_at: Vec<Option<RigidTransform>>,
    last_closure: Option<usize>,
    closures: Vec<ClosureEvent>,
}

impl Runner<'_> {
    /// Moves the current state (and the prior anchored on it) by `delta`,
    /// a rigid correction of `W`.
    fn correct_state(&mut self, corrected: RigidTransform) {
        let delta = corrected * self.state.pose().inverse();
        let r_iw = self.state.q_iw;
        let v_w = r_iw.inverse() * self.state.v_iis;
        self.state.set_pose(&corrected);
        self.state.v_iis = r_iw * (delta.rotation * v_w);
        self.prior.linearization = self.state.clone();
    }

    fn gravity_w(&self) -> Vec3 {
        self.state.q_iw.inverse() * Vec3::new(0.0, 0.0, -self.noise.gravity)
    }

    fn ground_truth_closure(&mut self, i: usize, level: &PyramidLevel) -> Result<bool> {
        let Some(truth) = self.input.truth else {
            return Ok(false);
        };
        let lc = self.config.loop_closure;
        let delta_t = self.map.config.delta_t;
        if i <= delta_t
            || self.last_closure.is_some_and(|c| i - c < lc.cooldown)
            || truth.len() <= i
        {
            return Ok(false);
        }
        let here = truth[i];
        let mut best: Option<(usize, f64)> = None;
        for j in 0..i - delta_t {
            if self.fused_at[j].is_none() {
                continue;
            }
            let d = (truth[j].translation.vector - here.translation.vector).norm();
            let a = truth[j].rotation.angle_to(&here.rotation);
            // the oldest match: early map regions have accumulated the least drift
            if d < lc.radius && a < lc.max_angle {
                best = Some((j, d));
                break;
            }
        }
        let Some((j, _)) = best else {
            return Ok(false);
        };
        let active = self.map.active_mask(i);
        let inactive: Vec<Vec3> = self
            .map
            .surfels
            .iter()
            .zip(&active)
            .filter(|(_, a)| !**a)
            .map(|(s, _)| s.position)
            .collect();
        if inactive.is_empty() {
            return Ok(false);
        }
        let t_est_i = self.state.pose();
        let t_est_j = self.fused_at[j].expect("checked above");
        let destination_pose = t_est_j * truth[j].inverse() * here;
        // active surfels (group 1) move onto the inactive map (group 0); both
        // may occupy the same space, so they get separate nodes
        let mut constraints: Vec<DeformationConstraint> = sample_points(level, lc.sample_stride)
            .iter()
            .map(|p| {
                let p = Point3::from(*p);
                DeformationConstraint::surface((t_est_i * p).coords, (destination_pose * p).coords)
                    .in_group(1)
            })
            .collect();
        if constraints.is_empty() {
            return Ok(false);
        }
        let stride = inactive.len().div_ceil(lc.max_pins.max(1));
        constraints.extend(
            inactive
                .iter()
                .step_by(stride.max(1))
                .map(|p| DeformationConstraint::pin(*p)),
        );
        let groups: Vec<u8> = active.iter().map(|&a| u8::from(a)).collect();
        let mut graph = DeformationGraph::sample_grouped(
            &self.map.positions(),
            &groups,
            &self.config.deformation,
        )?;
        let gravity = self.gravity_w();
        let report = optimize_graph(
            &mut graph,
            &constraints,
            &gravity,
            EnergyKind::Local,
            &self.config.deformation,
        )?;
        deform_grouped(&mut self.map, &graph, |k| groups[k]);
        self.correct_state(destination_pose);
        self.reactivate(i, level);
        log::info!(
            "frame {i}: loop closure against frame {j}, energy {:.4} -> {:.4}",
            report.initial_energy,
            report.final_energy
        );
        self.closures.push(ClosureEvent {
            frame: i,
            matched: Some(j),
            constraints: constraints.len(),
            initial_energy: report.initial_energy,
            final_energy: report.final_energy,
        });
        self.last_closure = Some(i);
        Ok(true)
    }

    /// Marks inactive surfels consistent with the current view as active.
    fn reactivate(&mut self, i: usize, level: &PyramidLevel) {
        let k = level.intrinsics;
        let inv = self.state.pose().inverse();
        for s in &mut self.map.surfels {
            let p = inv * Point3::from(s.position);
            if p.z <= MIN_DEPTH || p.z >= MAX_DEPTH {
                continue;
            }
            let u = (k.fx * p.x / p.z + k.cx).round();
            let v = (k.fy * p.y / p.z + k.cy).round();
            if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                continue;
            }
            let d = level.depth.data[v as usize * k.width + u as usize];
            if d > 0.0 && (d - p.z).abs() < self.map.config.fuse_distance {
                s.last_seen = s.last_seen.max(i);
            }
        }
    }

    fn file_closure(&mut self, i: usize, constraints: &[DeformationConstraint]) -> Result<()> {
        let mut graph = DeformationGraph::sample(&self.map.positions(), &self.config.deformation)?;
        let gravity = self.gravity_w();
        let report = optimize_graph(
            &mut graph,
            constraints,
            &gravity,
            EnergyKind::Global,
            &self.config.deformation,
        )?;
        deform(&mut self.map, &graph);
        let pose = self.state.pose();
        let inf = graph.influence(&pose.translation.vector);
        if !inf.is_empty() {
            let mut blend = nalgebra::Matrix3::zeros();
            for &(l, w) in &inf {
                blend += w * graph.nodes[l].r;
            }
            let rot = nalgebra::Rotation3::from_matrix(&blend);
            let corrected = crate::manifold::make_transform(
                nalgebra::UnitQuaternion::from_rotation_matrix(&rot) * pose.rotation,
                graph.apply(&pose.translation.vector, &inf),
            );
            self.correct_state(corrected);
        }
        self.closures.push(ClosureEvent {
            frame: i,
            matched: None,
            constraints: constraints.len(),
            initial_energy: report.initial_energy,
            final_energy: report.final_energy,
        });
        self.last_closure = Some(i);
        Ok(())
    }

    fn model_views(&self, previous: &FramePyramid, frame: usize) -> Vec<ModelView> {
        let pose = self.state.pose();
        let mut views = vec![self
            .map
            .render_model(&pose, &previous.levels[0].intrinsics, frame)];
        for _ in 1..previous.levels.len() {
            let coarser = views.last().unwrap().downsampled();
            views.push(coarser);
        }
        views
    }
}

/// Tracks every frame, fusing successfully tracked ones into the map.
/// Failed frames are flagged and skipped for fusion; the state then follows
/// the remaining (inertial) information.
pub fn run(
    input: &RunInput,
    config: &RunConfig,
    file_constraints: &[ScheduledConstraint],
) -> Result<RunOutput> {
    config.validate()?;
    if input.frames.is_empty() {
        return Err(Error::TooFewPoses { needed: 1, got: 0 });
    }
    let mode = config.imu;
    let noise = ImuNoiseModel::for_profile(config.profile);
    let tracker = Tracker::new(
        config.tracker_config(),
        noise.clone(),
        sensor_noise(config.profile),
        input.intrinsics,
        input.t_cs,
    );
    let t0 = input.frames[0].timestamp;
    let mut state = State::default();
    let mut prior = Prior::zero(state.clone());
    if mode.uses_imu() {
        let start = input.imu.partition_point(|s| s.timestamp < t0 - 1e-9);
        let q_iw = gravity_from_accel(
            &input.imu[start..],
            config.gravity_init_samples,
            &input.t_cs,
        )
        .ok_or(Error::EmptyImuBatch)?;
        state.q_iw = q_iw;
        prior = initial_prior(
            &state,
            &noise,
            initial_tilt_sigma(&noise, config.gravity_init_samples),
        );
    }
    let mut runner = Runner {
        config,
        input,
        tracker,
        noise,
        map: SurfelMap::new(config.map_config()),
        state,
        prior,
        fused_at: vec![None; input.frames.len()],
        last_closure: None,
        closures: Vec::new(),
    };
    let mut out = RunOutput {
        timestamps: Vec::with_capacity(input.frames.len()),
        states: Vec::with_capacity(input.frames.len()),
        status: Vec::with_capacity(input.frames.len()),
        log: Vec::with_capacity(input.frames.len()),
        map: SurfelMap::default(),
        closures: Vec::new(),
    };

    let mut previous = build_pyramid_with(&input.frames[0], &input.intrinsics, &config.pyramid)?;
    runner
        .map
        .fuse(&previous.levels[0], &runner.state.pose(), 0);
    runner.fused_at[0] = Some(runner.state.pose());
    out.timestamps.push(t0);
    out.states.push(runner.state.clone());
    out.status.push(TrackingStatus::Ok);
    out.log.push(frame_log(0, t0, &runner, None, false));

    for i in 1..input.frames.len() {
        let frame = &input.frames[i];
        let current = build_pyramid_with(frame, &input.intrinsics, &config.pyramid)?;
        let pre = if mode.uses_imu() {
            let batch = samples_between(input.imu, input.frames[i - 1].timestamp, frame.timestamp)?;
            Some(preintegrate(
                &batch,
                &runner.state.bg,
                &runner.state.ba,
                &runner.noise,
            )?)
        } else {
            None
        };
        let model = runner.model_views(&previous, i);
        let result = runner.tracker.track(
            &runner.state,
            &runner.prior,
            &TrackingInput {
                previous: &previous,
                current: &current,
                model: &model,
                imu: pre.as_ref(),
            },
        )?;
        if result.status.failed() {
            log::warn!("frame {i}: tracking flagged ({:?})", result.status);
        }
        runner.state = result.x1.clone();
        runner.prior = result.prior.clone();
        let ok = !result.status.failed();
        let mut closed = false;
        if ok {
            if config.slam {
                closed = runner.ground_truth_closure(i, &current.levels[0])?;
            }
            let pose = runner.state.pose();
            runner.map.fuse(&current.levels[0], &pose, i);
            runner.fused_at[i] = Some(pose);
        }
        let scheduled: Vec<DeformationConstraint> = file_constraints
            .iter()
            .filter(|c| c.frame == i)
            .map(|c| c.constraint)
            .collect();
        if !scheduled.is_empty() {
            runner.file_closure(i, &scheduled)?;
            closed = true;
        }
        runner.map.prune(i);
        out.timestamps.push(frame.timestamp);
        out.states.push(runner.state.clone());
        out.status.push(result.status);
        out.log.push(frame_log(
            i,
            frame.timestamp,
            &runner,
            Some(&result),
            closed,
        ));
        previous = current;
    }
    out.map = runner.map;
    out.closures = runner.closures;
    Ok(out)
}

fn frame_log(
    i: usize,
    t: f64,
    runner: &Runner,
    result: Option<&crate::tracker::TrackingResult>,
    closure: bool,
) -> FrameLog {
    let x = &runner.state;
    let v = x.velocity_world();
    let (status, it, cost, rc, ic, wd, rr, ir, imu, ps, rs) = match result {
        Some(r) => (
            status_name(&r.status),
            r.iterations,
            r.cost,
            r.rgb_count,
            r.icp_count,
            r.weak_directions,
            r.rgb_rms,
            r.icp_rms,
            r.imu_cost,
            r.position_sigma,
            r.rotation_sigma,
        ),
        None => ("ok", [0; 3], 0.0, 0, 0, 0, 0.0, 0.0, 0.0, 0.0, 0.0),
    };
    FrameLog {
        frame: i,
        timestamp_s: t,
        status,
        iterations_coarse: it[0],
        iterations_mid: it[1],
        iterations_fine: it[2],
        cost,
        rgb_count: rc,
        icp_count: ic,
        weak_directions: wd,
        rgb_rms: rr,
        icp_rms: ir,
        imu_cost: imu,
        position_sigma: ps,
        rotation_sigma: rs,
        vx: v.x,
        vy: v.y,
        vz: v.z,
        bgx: x.bg.x,
        bgy: x.bg.y,
        bgz: x.bg.z,
        bax: x.ba.x,
        bay: x.ba.y,
        baz: x.ba.z,
        surfels: runner.map.len(),
        closure,
    }
}

/// Convenience wrapper for in-memory sequences.
pub fn run_sequence(seq: &Sequence, config: &RunConfig) -> Result<RunOutput> {
    let truth = seq.truth_poses();
    let input = RunInput {
        intrinsics: seq.intrinsics,
        t_cs: seq.t_cs,
        frames: &seq.frames,
        imu: &seq.imu,
        truth: Some(&truth),
    };
    run(&input, config, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{simulate_with, SimOptions};
    use crate::tracker::ImuMode;

    #[test]
    fn constraint_file_parsing() {
        let text =
            "# frame kind sx sy sz dx dy dz\n12 surface 0 0 1 0 0 1.1\n12 pin 1 1 1 1 1 1 # keep\n";
        let c = parse_constraints(text, Path::new("c.txt")).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].frame, 12);
        assert_eq!(c[1].constraint.kind, ConstraintKind::Pin);
        let e = parse_constraints("1 twist 0 0 0 0 0 0\n", Path::new("c.txt")).unwrap_err();
        assert!(e.to_string().contains("c.txt:1"));
        assert!(parse_constraints("1 pin 0 0 0\n", Path::new("c.txt")).is_err());
    }

    fn stationary_box(frames: usize) -> Sequence {
        let scene = crate::synth::CanonicalScene::Room.model();
        let pose = RigidTransform::from_parts(
            nalgebra::Translation3::new(0.3, -0.2, 1.2),
            crate::synth::scenes::look(0.4, -0.1, 0.0),
        );
        let o = SimOptions {
            width: 80,
            height: 60,
            image_noise: false,
            ..Default::default()
        };
        let mut o = o;
        o.imu.white_noise = false;
        o.imu.bias_drift = false;
        o.imu.initial_gyro_bias = Vec3::zeros();
        o.imu.initial_accel_bias = Vec3::zeros();
        simulate_with("box", &scene, |_| pose, (frames - 1) as f64 / 30.0, &o).unwrap()
    }

    #[test]
    fn stationary_noise_free_pair() {
        let seq = stationary_box(2);
        for imu in [ImuMode::Full, ImuMode::Gyro, ImuMode::Off] {
            let cfg = RunConfig {
                imu,
                ..Default::default()
            };
            let out = run_sequence(&seq, &cfg).unwrap();
            assert_eq!(out.states.len(), 2);
            let d = out.states[0].pose().inverse() * out.states[1].pose();
            assert!(
                d.translation.vector.norm() < 1e-3,
                "{imu:?}: {}",
                d.translation.vector.norm()
            );
            assert!(d.rotation.angle() < 1e-3);
            assert!(!out.flagged(), "{imu:?}");
        }
    }

    #[test]
    fn log_has_one_row_per_frame() {
        let seq = stationary_box(4);
        let out = run_sequence(&seq, &RunConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        out.write_log(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("frame,timestamp_s,status"));
        assert!(!out.map.is_empty());
    }

    #[test]
    fn file_constraints_move_the_map() {
        let seq = stationary_box(3);
        let before = run_sequence(&seq, &RunConfig::default()).unwrap();
        let p = before.map.surfels[0].position;
        let c = ScheduledConstraint {
            frame: 2,
            constraint: DeformationConstraint::surface(p, p + Vec3::new(0.0, 0.0, 0.05)),
        };
        let truth = seq.truth_poses();
        let input = RunInput {
            intrinsics: seq.intrinsics,
            t_cs: seq.t_cs,
            frames: &seq.frames,
            imu: &seq.imu,
            truth: Some(&truth),
        };
        let out = run(&input, &RunConfig::default(), &[c]).unwrap();
        assert_eq!(out.closures.len(), 1);
        assert!(out.closures[0].final_energy < out.closures[0].initial_energy);
        assert!(out.log[2].closure);
    }
}
