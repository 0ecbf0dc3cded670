//! Synthetic RGB-D + IMU sequence generation.

pub mod imu;
pub mod noise;
pub mod scene;
pub mod scenes;
pub mod spline;

pub use imu::{sample_imu, ImuSimOptions, ImuSimulation};
pub use scene::{SceneModel, Shape, Texture};
pub use scenes::{CanonicalScene, SCENE_NAMES};
pub use spline::{fit_spline, TrajectorySpline};

use crate::camera::{CameraIntrinsics, Frame};
use crate::error::{Error, Result};
use crate::imu::{ImuNoiseModel, ImuSample, NoiseProfile};
use crate::manifold::{make_transform, Quat, RigidTransform, State, Vec3};
use crate::par::{map_indices, Execution};
use crate::residuals::SensorNoise;

/// Camera-from-sensor extrinsics used by generated sequences.
pub fn default_extrinsics() -> RigidTransform {
    make_transform(Quat::identity(), Vec3::new(0.02, -0.01, 0.005))
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    /// Seconds; the scene default when `None`.
    pub duration: Option<f64>,
    pub profile: NoiseProfile,
    pub seed: u64,
    pub imu: ImuSimOptions,
    pub image_noise: bool,
    pub t_cs: RigidTransform,
    pub execution: Execution,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            width: 160,
            height: 120,
            fps: 30.0,
            duration: None,
            profile: NoiseProfile::Synthetic,
            seed: 0,
            imu: ImuSimOptions {
                initial_gyro_bias: Vec3::new(0.01, -0.008, 0.006),
                initial_accel_bias: Vec3::new(0.05, -0.04, 0.03),
                white_noise: true,
                bias_drift: true,
            },
            image_noise: true,
            t_cs: default_extrinsics(),
            execution: Execution::default(),
        }
    }
}

/// A generated sequence. Ground truth is expressed in `W`, the frame of the
/// first camera.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub t_cs: RigidTransform,
    pub profile: NoiseProfile,
    pub frames: Vec<Frame>,
    pub imu: Vec<ImuSample>,
    pub ground_truth: Vec<State>,
    /// Maps `W` into the scene frame.
    pub scene_from_world: RigidTransform,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    pub fn imu_noise(&self) -> ImuNoiseModel {
        ImuNoiseModel::for_profile(self.profile)
    }

    pub fn sensor_noise(&self) -> SensorNoise {
        match self.profile {
            NoiseProfile::Synthetic => SensorNoise::synthetic(),
            NoiseProfile::Real => SensorNoise::real(),
        }
    }
}

/// Renders `scene` along `trajectory` (scene-from-camera) and synthesizes
/// the matching IMU stream.
pub fn simulate_with(
    name: &str,
    scene: &SceneModel,
    trajectory: impl Fn(f64) -> RigidTransform,
    duration: f64,
    options: &SimOptions,
) -> Result<Sequence> {
    if !(duration > 0.0) || !(options.fps > 0.0) {
        return Err(Error::Config(format!(
            "duration {duration} and fps {} must be positive",
            options.fps
        )));
    }
    let k = CameraIntrinsics::new(
        525.0 * options.width as f64 / 640.0,
        525.0 * options.width as f64 / 640.0,
        options.width as f64 / 2.0 - 0.5,
        options.height as f64 / 2.0 - 0.5,
        options.width,
        options.height,
    )?;
    let frame_count = (duration * options.fps + 1e-9).floor() as usize + 1;
    // pad a second on both sides so the spline ends stay away from the frames
    let pad = options.fps.ceil() as usize;
    let times: Vec<f64> = (0..frame_count + 2 * pad)
        .map(|i| (i as f64 - pad as f64) / options.fps)
        .collect();
    let poses: Vec<RigidTransform> = times.iter().map(|&t| trajectory(t)).collect();
    let spline = fit_spline(&times, &poses, 10)?;

    let imu_noise = ImuNoiseModel::for_profile(options.profile);
    let mut sim = sample_imu(
        &spline,
        &imu_noise,
        &options.imu,
        &options.t_cs,
        options.seed,
    );
    let t_last = (frame_count - 1) as f64 / options.fps + 0.5;
    let keep: Vec<usize> = (0..sim.samples.len())
        .filter(|&j| sim.samples[j].timestamp > -1e-9 && sim.samples[j].timestamp <= t_last)
        .collect();
    sim = ImuSimulation {
        samples: keep.iter().map(|&j| sim.samples[j]).collect(),
        gyro_bias: keep.iter().map(|&j| sim.gyro_bias[j]).collect(),
        accel_bias: keep.iter().map(|&j| sim.accel_bias[j]).collect(),
    };
    let sensor = match options.profile {
        NoiseProfile::Synthetic => SensorNoise::synthetic(),
        NoiseProfile::Real => SensorNoise::real(),
    };

    let scene_c0 = spline.evaluate(0.0).pose();
    let p_cs = options.t_cs.translation.vector;

    let mut frames = Vec::with_capacity(frame_count);
    let mut ground_truth = Vec::with_capacity(frame_count);
    for i in 0..frame_count {
        let t = i as f64 / options.fps;
        let s = spline.evaluate(t);
        let pose = s.pose();
        let frame = scene.render(&pose, &k, t, options.execution);
        let frame = if options.image_noise {
            noise::add_image_noise(&frame, &sensor, &k, &mut noise::frame_rng(options.seed, i))
        } else {
            frame
        };
        frames.push(frame);

        let w_c = scene_c0.inverse() * pose;
        let j = ((t - sim.samples[0].timestamp) * imu_noise.rate).round() as usize;
        let j = j.min(sim.samples.len() - 1);
        // sensor velocity: camera velocity plus the lever-arm term
        let v_sensor = s.velocity + s.orientation * s.angular_velocity.cross(&p_cs);
        ground_truth.push(State {
            p_wc: w_c.translation.vector,
            q_wc: w_c.rotation,
            v_iis: v_sensor,
            bg: sim.gyro_bias[j],
            ba: sim.accel_bias[j],
            q_iw: scene_c0.rotation,
        });
    }
    Ok(Sequence {
        name: name.to_string(),
        intrinsics: k,
        t_cs: options.t_cs,
        profile: options.profile,
        frames,
        imu: sim.samples,
        ground_truth,
        scene_from_world: scene_c0,
    })
}

pub fn simulate(scene: CanonicalScene, options: &SimOptions) -> Result<Sequence> {
    let duration = options.duration.unwrap_or_else(|| scene.default_duration());
    simulate_with(
        &scene.to_string(),
        &scene.model(),
        |t| scene.pose(t),
        duration,
        options,
    )
}

/// Frames rendered at exactly the sequence ground truth; a noise-free
/// reference for tests.
pub fn render_ground_truth(
    seq: &Sequence,
    scene: &SceneModel,
    index: usize,
    exec: Execution,
) -> Frame {
    let pose = seq.scene_from_world * seq.ground_truth[index].pose();
    scene.render(&pose, &seq.intrinsics, seq.frames[index].timestamp, exec)
}

/// Renders a batch of poses in parallel.
pub fn render_many(
    scene: &SceneModel,
    poses: &[RigidTransform],
    k: &CameraIntrinsics,
    exec: Execution,
) -> Vec<Frame> {
    map_indices(exec, poses.len(), |i| {
        scene.render(&poses[i], k, i as f64, Execution::Sequential)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::{predict, preintegrate, samples_between};
    use crate::manifold::rotation_boxminus;

    fn short(scene: CanonicalScene, seconds: f64) -> Sequence {
        let o = SimOptions {
            width: 80,
            height: 60,
            duration: Some(seconds),
            ..Default::default()
        };
        simulate(scene, &o).unwrap()
    }

    #[test]
    fn first_ground_truth_is_identity() {
        let s = short(CanonicalScene::Room, 1.0);
        assert_eq!(s.len(), 31);
        let x = &s.ground_truth[0];
        assert!(x.p_wc.norm() < 1e-9);
        assert!(x.q_wc.angle() < 1e-9);
        assert!(x.v_iis.norm() < 1e-2, "{}", x.v_iis.norm());
        assert!(s.imu.last().unwrap().timestamp >= s.frames.last().unwrap().timestamp);
    }

    #[test]
    fn imu_is_consistent_with_ground_truth() {
        let mut o = SimOptions {
            width: 40,
            height: 30,
            duration: Some(4.0),
            ..Default::default()
        };
        o.imu.white_noise = false;
        o.imu.bias_drift = false;
        let s = simulate(CanonicalScene::FastRoom, &o).unwrap();
        let noise = s.imu_noise();
        for i in [10, 60, 100] {
            let (a, b) = (&s.ground_truth[i], &s.ground_truth[i + 1]);
            let batch =
                samples_between(&s.imu, s.frames[i].timestamp, s.frames[i + 1].timestamp).unwrap();
            let pre = preintegrate(&batch, &a.bg, &a.ba, &noise).unwrap();
            let x1 = predict(a, &pre, noise.gravity, &s.t_cs);
            assert!(
                (x1.p_wc - b.p_wc).norm() < 1e-5,
                "{}",
                (x1.p_wc - b.p_wc).norm()
            );
            assert!(rotation_boxminus(&x1.q_wc, &b.q_wc).norm() < 1e-5);
            assert!((x1.v_iis - b.v_iis).norm() < 1e-4);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = short(CanonicalScene::WhiteWall, 0.3);
        let b = short(CanonicalScene::WhiteWall, 0.3);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.imu, b.imu);
    }
}
