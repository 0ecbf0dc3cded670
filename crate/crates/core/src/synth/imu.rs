//! IMU measurement synthesis along a spline trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::spline::TrajectorySpline;
use crate::imu::{ImuNoiseModel, ImuSample};
use crate::manifold::{RigidTransform, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSimOptions {
    pub initial_gyro_bias: Vec3,
    pub initial_accel_bias: Vec3,
    pub white_noise: bool,
    pub bias_drift: bool,
}

impl Default for ImuSimOptions {
    fn default() -> Self {
        ImuSimOptions {
            initial_gyro_bias: Vec3::zeros(),
            initial_accel_bias: Vec3::zeros(),
            white_noise: true,
            bias_drift: true,
        }
    }
}

/// Synthesized samples with the true biases at each sample.
#[derive(Debug, Clone)]
pub struct ImuSimulation {
    pub samples: Vec<ImuSample>,
    pub gyro_bias: Vec<Vec3>,
    pub accel_bias: Vec<Vec3>,
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

/// Samples the IMU at `noise.rate` over the spline span. The spline is the
/// camera trajectory in the gravity-aligned frame; `t_cs` places the sensor.
pub fn sample_imu(
    spline: &TrajectorySpline,
    noise: &ImuNoiseModel,
    options: &ImuSimOptions,
    t_cs: &RigidTransform,
    seed: u64,
) -> ImuSimulation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / noise.rate;
    let count = ((spline.end() - spline.start()) * noise.rate + 1e-9).floor() as usize + 1;
    let g_i = Vec3::new(0.0, 0.0, -noise.gravity);
    let sg = noise.gyro_noise_density * noise.rate.sqrt();
    let sa = noise.accel_noise_density * noise.rate.sqrt();
    let dg = noise.gyro_drift_density * dt.sqrt();
    let da = noise.accel_drift_density * dt.sqrt();
    let static_bias = Vec3::from(noise.static_accel_bias);
    let r_cs = t_cs.rotation.to_rotation_matrix().into_inner();
    let p_cs = t_cs.translation.vector;
    let mut bg = options.initial_gyro_bias;
    let mut ba = options.initial_accel_bias;
    let mut out = ImuSimulation {
        samples: Vec::with_capacity(count),
        gyro_bias: Vec::with_capacity(count),
        accel_bias: Vec::with_capacity(count),
    };
    for k in 0..count {
        let t = spline.start() + k as f64 * dt;
        let s = spline.evaluate(t);
        let w = s.angular_velocity;
        let r_ic = s.orientation.to_rotation_matrix().into_inner();
        // sensor-origin acceleration including the lever arm
        let lever = s.angular_acceleration.cross(&p_cs) + w.cross(&w.cross(&p_cs));
        let a_i = s.acceleration + r_ic * lever;
        let mut gyro = r_cs.transpose() * w + bg;
        let mut accel = r_cs.transpose() * (r_ic.transpose() * (a_i - g_i)) + ba + static_bias;
        if options.white_noise {
            gyro += normal3(&mut rng) * sg;
            accel += normal3(&mut rng) * sa;
        }
        gyro = gyro.map(|v| v.clamp(-noise.gyro_saturation, noise.gyro_saturation));
        accel = accel.map(|v| v.clamp(-noise.accel_saturation, noise.accel_saturation));
        out.samples.push(ImuSample::new(t, gyro, accel));
        out.gyro_bias.push(bg);
        out.accel_bias.push(ba + static_bias);
        if options.bias_drift {
            bg += normal3(&mut rng) * dg;
            ba += normal3(&mut rng) * da;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::{predict, preintegrate, samples_between};
    use crate::manifold::{exp_rotation, make_transform, rotation_boxminus, Quat, State};
    use crate::synth::spline::fit_spline;

    fn quiet() -> ImuSimOptions {
        ImuSimOptions {
            white_noise: false,
            bias_drift: false,
            ..Default::default()
        }
    }

    fn spline_of(f: impl Fn(f64) -> RigidTransform, seconds: f64) -> TrajectorySpline {
        let n = (seconds * 30.0) as usize + 1;
        let t: Vec<f64> = (0..n).map(|i| i as f64 / 30.0).collect();
        let poses: Vec<_> = t.iter().map(|&x| f(x)).collect();
        fit_spline(&t, &poses, 10).unwrap()
    }

    #[test]
    fn stationary_level_body_measures_gravity_reaction() {
        let s = spline_of(|_| RigidTransform::identity(), 2.0);
        let sim = sample_imu(
            &s,
            &ImuNoiseModel::synthetic(),
            &quiet(),
            &RigidTransform::identity(),
            1,
        );
        assert_eq!(sim.samples.len(), 401);
        for m in &sim.samples {
            assert!(m.gyro.norm() < 1e-12);
            assert!((m.accel - Vec3::new(0.0, 0.0, 9.81)).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_velocity_matches_stationary_output() {
        let s = spline_of(
            |t| make_transform(Quat::identity(), Vec3::new(0.4 * t, -0.2 * t, 0.1 * t)),
            2.0,
        );
        let sim = sample_imu(
            &s,
            &ImuNoiseModel::synthetic(),
            &quiet(),
            &RigidTransform::identity(),
            1,
        );
        for m in &sim.samples {
            assert!((m.accel - Vec3::new(0.0, 0.0, 9.81)).norm() < 1e-10);
        }
    }

    #[test]
    fn gyro_noise_variance_matches_density() {
        let s = spline_of(|_| RigidTransform::identity(), 60.0);
        let noise = ImuNoiseModel::synthetic();
        let opts = ImuSimOptions {
            bias_drift: false,
            ..Default::default()
        };
        let sim = sample_imu(&s, &noise, &opts, &RigidTransform::identity(), 3);
        let xs: Vec<f64> = sim.samples.iter().take(10_000).map(|m| m.gyro.x).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let expected = (12e-4f64).powi(2) * 200.0;
        assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
    }

    #[test]
    fn seed_determinism() {
        let s = spline_of(|_| RigidTransform::identity(), 1.0);
        let n = ImuNoiseModel::synthetic();
        let a = sample_imu(&s, &n, &Default::default(), &RigidTransform::identity(), 42);
        let b = sample_imu(&s, &n, &Default::default(), &RigidTransform::identity(), 42);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn preintegration_reproduces_spline_poses() {
        let truth = |x: f64| {
            make_transform(
                exp_rotation(&Vec3::new(
                    0.2 * (1.3 * x).sin(),
                    0.3 * (0.9 * x).sin(),
                    0.5 * x,
                )),
                Vec3::new(0.5 * (0.8 * x).sin(), 0.3 * (1.1 * x).cos(), 0.2 * x),
            )
        };
        let s = spline_of(truth, 3.0);
        let noise = ImuNoiseModel::synthetic();
        let sim = sample_imu(&s, &noise, &quiet(), &RigidTransform::identity(), 0);
        let (t0, t1) = (0.5, 1.5);
        let batch = samples_between(&sim.samples, t0, t1).unwrap();
        let pre = preintegrate(&batch, &Vec3::zeros(), &Vec3::zeros(), &noise).unwrap();
        let a = s.evaluate(t0);
        let b = s.evaluate(t1);
        // W = I here
        let x0 = State {
            p_wc: a.position,
            q_wc: a.orientation,
            v_iis: a.velocity,
            ..Default::default()
        };
        let x1 = predict(&x0, &pre, noise.gravity, &RigidTransform::identity());
        assert!(
            (x1.p_wc - b.position).norm() < 1e-4,
            "{}",
            (x1.p_wc - b.position).norm()
        );
        assert!(rotation_boxminus(&x1.q_wc, &b.orientation).norm() < 1e-4);
        assert!((x1.v_iis - b.velocity).norm() < 1e-3);
    }
}
