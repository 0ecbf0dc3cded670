//! IMU preintegration between camera frames, state prediction and the
//! 18-dimensional inertial residual.
//!
//! Deltas are expressed in the sensor frame at the start of the interval and
//! are independent of the absolute start state. Integration uses the midpoint
//! rule on linearly interpolated measurements, with a fixed number of
//! sub-steps per sample interval.

use nalgebra::{SMatrix, SVector, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{
    block, exp_rotation, left_jacobian_inv, right_jacobian, right_jacobian_inv, rotation_boxminus,
    skew, Mat3, Quat, RigidTransform, State, Vec3, STATE_DIM,
};

/// Sub-steps of the midpoint rule per IMU sample interval.
pub const SUBSTEPS: usize = 8;

pub type Mat15 = SMatrix<f64, 15, 15>;
pub type Mat18 = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type Vec18 = SVector<f64, STATE_DIM>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Angular rate in the sensor frame (rad/s).
    pub gyro: Vec3,
    /// Specific force in the sensor frame (m/s²).
    pub accel: Vec3,
}

impl ImuSample {
    pub fn new(timestamp: f64, gyro: Vec3, accel: Vec3) -> Self {
        ImuSample {
            timestamp,
            gyro,
            accel,
        }
    }

    fn lerp(&self, other: &ImuSample, t: f64) -> ImuSample {
        let s = (t - self.timestamp) / (other.timestamp - self.timestamp);
        ImuSample {
            timestamp: t,
            gyro: self.gyro + s * (other.gyro - self.gyro),
            accel: self.accel + s * (other.accel - self.accel),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseProfile {
    #[default]
    Synthetic,
    Real,
}

impl std::str::FromStr for NoiseProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(NoiseProfile::Synthetic),
            "real" => Ok(NoiseProfile::Real),
            _ => Err(Error::Unknown {
                kind: "noise profile",
                name: s.to_string(),
            }),
        }
    }
}

/// Sensor noise parameters. Densities are continuous-time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuNoiseModel {
    pub gyro_saturation: f64,
    pub accel_saturation: f64,
    /// rad s⁻¹ Hz⁻⁰·⁵
    pub gyro_noise_density: f64,
    /// m s⁻² Hz⁻⁰·⁵
    pub accel_noise_density: f64,
    /// Prior standard deviation of the gyro bias (rad/s).
    pub gyro_bias_prior: f64,
    /// Prior standard deviation of the accelerometer bias (m/s²).
    pub accel_bias_prior: f64,
    /// rad s⁻² Hz⁻⁰·⁵
    pub gyro_drift_density: f64,
    /// m s⁻³ Hz⁻⁰·⁵
    pub accel_drift_density: f64,
    pub gravity: f64,
    pub rate: f64,
    pub static_accel_bias: [f64; 3],
    /// Random-walk density assigned to the gravity direction between frames
    /// (rad s⁻¹ Hz⁻⁰·⁵); keeps the inertial weight finite.
    pub gravity_pseudo_noise: f64,
}

impl ImuNoiseModel {
    pub fn synthetic() -> Self {
        ImuNoiseModel {
            gyro_saturation: 7.8,
            accel_saturation: 176.0,
            gyro_noise_density: 12.0e-4,
            accel_noise_density: 8.0e-3,
            gyro_bias_prior: 0.03,
            accel_bias_prior: 0.1,
            gyro_drift_density: 4.0e-6,
            accel_drift_density: 2.0e-5,
            gravity: 9.81,
            rate: 200.0,
            static_accel_bias: [0.0; 3],
            gravity_pseudo_noise: 1e-6,
        }
    }

    pub fn real() -> Self {
        ImuNoiseModel {
            accel_noise_density: 8.0e-2,
            accel_bias_prior: 1.0,
            static_accel_bias: [0.060, 0.258, 0.126],
            ..Self::synthetic()
        }
    }

    pub fn for_profile(profile: NoiseProfile) -> Self {
        match profile {
            NoiseProfile::Synthetic => Self::synthetic(),
            NoiseProfile::Real => Self::real(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gyro_saturation,
            self.accel_saturation,
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_prior,
            self.accel_bias_prior,
            self.gyro_drift_density,
            self.accel_drift_density,
            self.gravity,
            self.rate,
            self.gravity_pseudo_noise,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(
                "IMU noise parameters must be strictly positive".into(),
            ))
        }
    }

    pub fn gravity_inertial(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, -self.gravity)
    }
}

/// Relative motion between two frames integrated from IMU samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedImu {
    pub delta_q: Quat,
    pub delta_v: Vec3,
    pub delta_p: Vec3,
    pub dt: f64,
    /// Covariance of `(δα, δv, δp, δb_g, δb_a)`.
    pub covariance: Mat15,
    pub dq_dbg: Mat3,
    pub dv_dbg: Mat3,
    pub dv_dba: Mat3,
    pub dp_dbg: Mat3,
    pub dp_dba: Mat3,
    /// Biases the deltas were integrated with.
    pub lin_bg: Vec3,
    pub lin_ba: Vec3,
}

impl PreintegratedImu {
    fn identity(bg: Vec3, ba: Vec3) -> Self {
        PreintegratedImu {
            delta_q: Quat::identity(),
            delta_v: Vec3::zeros(),
            delta_p: Vec3::zeros(),
            dt: 0.0,
            covariance: Mat15::zeros(),
            dq_dbg: Mat3::zeros(),
            dv_dbg: Mat3::zeros(),
            dv_dba: Mat3::zeros(),
            dp_dbg: Mat3::zeros(),
            dp_dba: Mat3::zeros(),
            lin_bg: bg,
            lin_ba: ba,
        }
    }

    /// Deltas re-corrected to first order for new biases.
    pub fn corrected(&self, bg: &Vec3, ba: &Vec3) -> CorrectedDeltas {
        let dbg = bg - self.lin_bg;
        let dba = ba - self.lin_ba;
        let psi = self.dq_dbg * dbg;
        CorrectedDeltas {
            delta_q: self.delta_q * exp_rotation(&psi),
            delta_v: self.delta_v + self.dv_dbg * dbg + self.dv_dba * dba,
            delta_p: self.delta_p + self.dp_dbg * dbg + self.dp_dba * dba,
            psi,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CorrectedDeltas {
    pub delta_q: Quat,
    pub delta_v: Vec3,
    pub delta_p: Vec3,
    /// Rotation correction `dq_dbg · (b_g − b̄_g)`.
    pub psi: Vec3,
}

fn check_monotonic(samples: &[ImuSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyImuBatch);
    }
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].timestamp > w[0].timestamp) {
            return Err(Error::NonMonotonicImu {
                index: i + 1,
                timestamp: w[1].timestamp,
            });
        }
    }
    Ok(())
}

/// Returns the samples covering `[t0, t1]` with the endpoints replaced by
/// measurements linearly interpolated to the frame timestamps.
pub fn samples_between(samples: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    check_monotonic(samples)?;
    let coverage = Error::ImuCoverage { start: t0, end: t1 };
    if !(t1 > t0) || samples[0].timestamp > t0 || samples[samples.len() - 1].timestamp < t1 {
        return Err(coverage);
    }
    let interp = |t: f64| -> ImuSample {
        let j = samples.partition_point(|s| s.timestamp < t);
        if samples[j].timestamp == t || j == 0 {
            ImuSample {
                timestamp: t,
                ..samples[j]
            }
        } else {
            samples[j - 1].lerp(&samples[j], t)
        }
    };
    let mut out = vec![interp(t0)];
    out.extend(
        samples
            .iter()
            .filter(|s| s.timestamp > t0 && s.timestamp < t1)
            .copied(),
    );
    out.push(interp(t1));
    Ok(out)
}

/// Integrates a batch of samples with the given linearization biases.
pub fn preintegrate(
    samples: &[ImuSample],
    bg: &Vec3,
    ba: &Vec3,
    noise: &ImuNoiseModel,
) -> Result<PreintegratedImu> {
    check_monotonic(samples)?;
    let mut pre = PreintegratedImu::identity(*bg, *ba);
    let gyro_var = noise.gyro_noise_density.powi(2);
    let accel_var = noise.accel_noise_density.powi(2);
    let bg_walk = noise.gyro_drift_density.powi(2);
    let ba_walk = noise.accel_drift_density.powi(2);
    let i3 = Mat3::identity();

    for pair in samples.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let interval = s1.timestamp - s0.timestamp;
        let h = interval / SUBSTEPS as f64;
        for k in 0..SUBSTEPS {
            let fa = k as f64 / SUBSTEPS as f64;
            let fb = (k + 1) as f64 / SUBSTEPS as f64;
            let w_a = s0.gyro + fa * (s1.gyro - s0.gyro) - bg;
            let w_b = s0.gyro + fb * (s1.gyro - s0.gyro) - bg;
            let a_a = s0.accel + fa * (s1.accel - s0.accel) - ba;
            let a_b = s0.accel + fb * (s1.accel - s0.accel) - ba;

            let w_mid = 0.5 * (w_a + w_b);
            let phi = w_mid * h;
            let d_rot = exp_rotation(&phi);
            let r = pre.delta_q.to_rotation_matrix().into_inner();
            let q_next = UnitQuaternion::new_normalize((pre.delta_q * d_rot).into_inner());
            let r_next = q_next.to_rotation_matrix().into_inner();
            let acc = 0.5 * (r * a_a + r_next * a_b);

            // bias Jacobians
            let d_rot_t = d_rot.to_rotation_matrix().into_inner().transpose();
            let jr = right_jacobian(&phi);
            let dq_dbg_next = d_rot_t * pre.dq_dbg - jr * h;
            let dacc_dbg = -0.5 * (r * skew(&a_a) * pre.dq_dbg + r_next * skew(&a_b) * dq_dbg_next);
            let dacc_dba = -0.5 * (r + r_next);
            pre.dp_dbg += pre.dv_dbg * h + 0.5 * h * h * dacc_dbg;
            pre.dp_dba += pre.dv_dba * h + 0.5 * h * h * dacc_dba;
            pre.dv_dbg += dacc_dbg * h;
            pre.dv_dba += dacc_dba * h;
            pre.dq_dbg = dq_dbg_next;

            // error-state covariance
            let a_mid = 0.5 * (a_a + a_b);
            let ra = r * skew(&a_mid);
            let mut f = Mat15::identity();
            f.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_rot_t);
            f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-jr * h));
            f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra * h));
            f.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-r * h));
            f.fixed_view_mut::<3, 3>(6, 0)
                .copy_from(&(-0.5 * ra * h * h));
            f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(i3 * h));
            f.fixed_view_mut::<3, 3>(6, 12)
                .copy_from(&(-0.5 * r * h * h));
            let mut g = SMatrix::<f64, 15, 12>::zeros();
            g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr * h));
            g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-r * h));
            g.fixed_view_mut::<3, 3>(6, 3)
                .copy_from(&(-0.5 * r * h * h));
            g.fixed_view_mut::<3, 3>(9, 6).copy_from(&i3);
            g.fixed_view_mut::<3, 3>(12, 9).copy_from(&i3);
            let mut q = SMatrix::<f64, 12, 12>::zeros();
            for i in 0..3 {
                q[(i, i)] = gyro_var / h;
                q[(3 + i, 3 + i)] = accel_var / h;
                q[(6 + i, 6 + i)] = bg_walk * h;
                q[(9 + i, 9 + i)] = ba_walk * h;
            }
            pre.covariance = f * pre.covariance * f.transpose() + g * q * g.transpose();

            pre.delta_p += pre.delta_v * h + 0.5 * h * h * acc;
            pre.delta_v += acc * h;
            pre.delta_q = q_next;
        }
        pre.dt += interval;
    }
    pre.covariance = 0.5 * (pre.covariance + pre.covariance.transpose());
    Ok(pre)
}

/// Extrinsic-dependent quantities shared by prediction and residual.
struct Kinematics {
    r_wc0: Mat3,
    r_cs: Mat3,
    p_cs: Vec3,
    r_iw: Mat3,
    r_hat: Mat3,
    corrected: CorrectedDeltas,
    y: Vec3,
}

fn kinematics(
    x0: &State,
    pre: &PreintegratedImu,
    gravity: f64,
    t_cs: &RigidTransform,
) -> (State, Kinematics) {
    let c = pre.corrected(&x0.bg, &x0.ba);
    let g_i = Vec3::new(0.0, 0.0, -gravity);
    let r_wc0 = x0.q_wc.to_rotation_matrix().into_inner();
    let r_cs = t_cs.rotation.to_rotation_matrix().into_inner();
    let p_cs = t_cs.translation.vector;
    let r_iw = x0.q_iw.to_rotation_matrix().into_inner();
    let dt = pre.dt;

    let q_wc1 = UnitQuaternion::new_normalize(
        (x0.q_wc * t_cs.rotation * c.delta_q * t_cs.rotation.inverse()).into_inner(),
    );
    let r_hat = q_wc1.to_rotation_matrix().into_inner();
    let y = x0.v_iis * dt + 0.5 * g_i * dt * dt;
    let p_wc1 =
        x0.p_wc + r_wc0 * p_cs + r_iw.transpose() * y + r_wc0 * r_cs * c.delta_p - r_hat * p_cs;
    let v1 = x0.v_iis + g_i * dt + r_iw * r_wc0 * r_cs * c.delta_v;
    let x1 = State {
        p_wc: p_wc1,
        q_wc: q_wc1,
        v_iis: v1,
        bg: x0.bg,
        ba: x0.ba,
        q_iw: x0.q_iw,
    };
    (
        x1,
        Kinematics {
            r_wc0,
            r_cs,
            p_cs,
            r_iw,
            r_hat,
            corrected: c,
            y,
        },
    )
}

/// Integrates the preintegrated motion onto `x0`. Biases and the gravity
/// direction are carried over unchanged.
pub fn predict(x0: &State, pre: &PreintegratedImu, gravity: f64, t_cs: &RigidTransform) -> State {
    kinematics(x0, pre, gravity, t_cs).0
}

#[derive(Debug, Clone)]
pub struct ImuResidual {
    /// `x̂₁(x₀) ⊟ x₁`.
    pub error: Vec18,
    pub covariance: Mat18,
    pub weight: Mat18,
    pub jac_x0: Mat18,
    pub jac_x1: Mat18,
}

/// Inertial residual between two states with analytic Jacobians.
pub fn imu_residual(
    x0: &State,
    x1: &State,
    pre: &PreintegratedImu,
    noise: &ImuNoiseModel,
    t_cs: &RigidTransform,
) -> Result<ImuResidual> {
    use block::*;
    let (pred, k) = kinematics(x0, pre, noise.gravity, t_cs);
    let error = pred.boxminus(x1);
    let e_rot = error.fixed_rows::<3>(ROT).into_owned();
    let e_grav = error.fixed_rows::<3>(GRAV).into_owned();
    let c = &k.corrected;
    let i3 = Mat3::identity();
    let dt = pre.dt;

    let r0_cs = k.r_wc0 * k.r_cs;
    let rot_dbg = k.r_hat * k.r_cs * right_jacobian(&c.psi) * pre.dq_dbg;
    let jl_inv_rot = left_jacobian_inv(&e_rot);
    let mut j0 = Mat18::zeros();
    let set = |m: &mut Mat18, r: usize, col: usize, v: Mat3| {
        m.fixed_view_mut::<3, 3>(r, col).copy_from(&v)
    };
    // position row
    set(&mut j0, POS, POS, i3);
    set(
        &mut j0,
        POS,
        ROT,
        -skew(&(k.r_wc0 * k.p_cs + r0_cs * c.delta_p - k.r_hat * k.p_cs)),
    );
    set(&mut j0, POS, VEL, k.r_iw.transpose() * dt);
    set(
        &mut j0,
        POS,
        BG,
        r0_cs * pre.dp_dbg + skew(&(k.r_hat * k.p_cs)) * rot_dbg,
    );
    set(&mut j0, POS, BA, r0_cs * pre.dp_dba);
    set(&mut j0, POS, GRAV, k.r_iw.transpose() * skew(&k.y));
    // orientation row
    set(&mut j0, ROT, ROT, jl_inv_rot);
    set(&mut j0, ROT, BG, jl_inv_rot * rot_dbg);
    // velocity row
    let r_is0 = k.r_iw * r0_cs;
    set(&mut j0, VEL, ROT, -k.r_iw * skew(&(r0_cs * c.delta_v)));
    set(&mut j0, VEL, VEL, i3);
    set(&mut j0, VEL, BG, r_is0 * pre.dv_dbg);
    set(&mut j0, VEL, BA, r_is0 * pre.dv_dba);
    set(&mut j0, VEL, GRAV, -skew(&(r_is0 * c.delta_v)));
    // biases and gravity direction
    set(&mut j0, BG, BG, i3);
    set(&mut j0, BA, BA, i3);
    set(&mut j0, GRAV, GRAV, left_jacobian_inv(&e_grav));

    let mut j1 = Mat18::zeros();
    set(&mut j1, POS, POS, -i3);
    set(&mut j1, ROT, ROT, -right_jacobian_inv(&e_rot));
    set(&mut j1, VEL, VEL, -i3);
    set(&mut j1, BG, BG, -i3);
    set(&mut j1, BA, BA, -i3);
    set(&mut j1, GRAV, GRAV, -right_jacobian_inv(&e_grav));

    // map the preintegration covariance into residual coordinates
    let mut g = SMatrix::<f64, STATE_DIM, 15>::zeros();
    let rot_noise = k.r_hat * k.r_cs;
    g.fixed_view_mut::<3, 3>(POS, 0)
        .copy_from(&(skew(&(k.r_hat * k.p_cs)) * rot_noise));
    g.fixed_view_mut::<3, 3>(POS, 6).copy_from(&r0_cs);
    g.fixed_view_mut::<3, 3>(ROT, 0)
        .copy_from(&(jl_inv_rot * rot_noise));
    g.fixed_view_mut::<3, 3>(VEL, 3).copy_from(&r_is0);
    g.fixed_view_mut::<3, 3>(BG, 9).copy_from(&i3);
    g.fixed_view_mut::<3, 3>(BA, 12).copy_from(&i3);
    let mut covariance = g * pre.covariance * g.transpose();
    let grav_var = noise.gravity_pseudo_noise.powi(2) * dt;
    for i in 0..3 {
        covariance[(GRAV + i, GRAV + i)] += grav_var;
    }
    covariance = 0.5 * (covariance + covariance.transpose());
    let weight = information(&covariance).ok_or(Error::SingularImuCovariance)?;
    Ok(ImuResidual {
        error,
        covariance,
        weight,
        jac_x0: j0,
        jac_x1: j1,
    })
}

/// Inverse of a symmetric positive-definite matrix, computed on the
/// diagonally scaled matrix for conditioning.
pub fn information<const N: usize>(cov: &SMatrix<f64, N, N>) -> Option<SMatrix<f64, N, N>> {
    let mut scale = SVector::<f64, N>::zeros();
    for i in 0..N {
        let d = cov[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        scale[i] = 1.0 / d.sqrt();
    }
    let scaled = SMatrix::<f64, N, N>::from_fn(|i, j| cov[(i, j)] * scale[i] * scale[j]);
    let inv = scaled.cholesky()?.inverse();
    let out = SMatrix::<f64, N, N>::from_fn(|i, j| inv[(i, j)] * scale[i] * scale[j]);
    Some(0.5 * (out + out.transpose()))
}

/// Information of the selected residual blocks only (inverse of the marginal
/// covariance); rows and columns of dropped blocks are zero.
pub fn masked_information(cov: &Mat18, keep: &[bool; 6]) -> Option<Mat18> {
    let idx: Vec<usize> = (0..STATE_DIM).filter(|i| keep[i / 3]).collect();
    let n = idx.len();
    let mut out = Mat18::zeros();
    if n == 0 {
        return Some(out);
    }
    let sub = nalgebra::DMatrix::from_fn(n, n, |i, j| cov[(idx[i], idx[j])]);
    let scale: Vec<f64> = (0..n).map(|i| 1.0 / sub[(i, i)].sqrt()).collect();
    if scale.iter().any(|s| !s.is_finite()) {
        return None;
    }
    let scaled = nalgebra::DMatrix::from_fn(n, n, |i, j| sub[(i, j)] * scale[i] * scale[j]);
    let inv = scaled.cholesky()?.inverse();
    for i in 0..n {
        for j in 0..n {
            out[(idx[i], idx[j])] = inv[(i, j)] * scale[i] * scale[j];
        }
    }
    Some(out)
}

/// Gravity direction from the mean specific force of a static start.
/// Returns `q_IW` with zero yaw, assuming the first camera frame is `W`.
pub fn gravity_from_accel(
    samples: &[ImuSample],
    count: usize,
    t_cs: &RigidTransform,
) -> Option<Quat> {
    let n = samples.len().min(count);
    if n == 0 {
        return None;
    }
    let mean = samples[..n].iter().map(|s| s.accel).sum::<Vec3>() / n as f64;
    let up_w = t_cs.rotation * mean;
    let norm = up_w.norm();
    if norm < 1e-9 {
        return None;
    }
    // rotation taking the measured "up" in W onto +z of I
    UnitQuaternion::rotation_between(&(up_w / norm), &Vec3::z()).or(Some(
        UnitQuaternion::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI),
    ))
}

/// Residual of the estimated gravity direction only, used by tests and logs.
pub fn gravity_error(q_iw_est: &Quat, q_iw_true: &Quat) -> f64 {
    let z = Vec3::z();
    let a = q_iw_est.inverse() * z;
    let b = q_iw_true.inverse() * z;
    a.angle(&b)
}

/// `Log(q_a q_b⁻¹)` restricted to the tilt part (x, y components in `I`).
pub fn tilt_difference(q_a: &Quat, q_b: &Quat) -> f64 {
    let d = rotation_boxminus(q_a, q_b);
    (d.x * d.x + d.y * d.y).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{make_transform, LocalPerturbation};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise() -> ImuNoiseModel {
        ImuNoiseModel::synthetic()
    }

    fn constant_batch(n: usize, gyro: Vec3, accel: Vec3) -> Vec<ImuSample> {
        (0..n)
            .map(|i| ImuSample::new(i as f64 * 0.005, gyro, accel))
            .collect()
    }

    fn random_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    /// Smooth random measurements at 200 Hz over 0.2 s.
    pub(crate) fn smooth_batch(rng: &mut ChaCha8Rng) -> Vec<ImuSample> {
        let amp_w = random_vec(rng, 1.0);
        let amp_a = random_vec(rng, 2.0);
        let freq = rng.random_range(0.5..2.0);
        let phase = rng.random_range(0.0..6.0);
        let bias_w = random_vec(rng, 0.3);
        let g = Vec3::new(0.3, -0.4, 9.7);
        (0..=40)
            .map(|i| {
                let t = i as f64 * 0.005;
                let s = (std::f64::consts::TAU * freq * t + phase).sin();
                let c = (std::f64::consts::TAU * freq * t + phase).cos();
                ImuSample::new(t, bias_w + amp_w * s, g + amp_a * c)
            })
            .collect()
    }

    #[test]
    fn pure_bias_input_gives_identity_deltas() {
        let bg = Vec3::new(0.01, -0.02, 0.03);
        let ba = Vec3::new(0.1, 0.2, -0.1);
        let pre = preintegrate(&constant_batch(41, bg, ba), &bg, &ba, &noise()).unwrap();
        assert!(pre.delta_q.angle() < 1e-15);
        assert!(pre.delta_v.norm() < 1e-15);
        assert!(pre.delta_p.norm() < 1e-15);
        assert_abs_diff_eq!(pre.dt, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn constant_yaw_rate_rotates_about_z() {
        let w = 0.7;
        let pre = preintegrate(
            &constant_batch(41, Vec3::new(0.0, 0.0, w), Vec3::zeros()),
            &Vec3::zeros(),
            &Vec3::zeros(),
            &noise(),
        )
        .unwrap();
        let expected = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), w * 0.2);
        assert!(pre.delta_q.angle_to(&expected) < 1e-12);
    }

    #[test]
    fn empty_and_unordered_batches_fail() {
        let z = Vec3::zeros();
        assert!(matches!(
            preintegrate(&[], &z, &z, &noise()),
            Err(Error::EmptyImuBatch)
        ));
        let mut b = constant_batch(5, z, z);
        b[3].timestamp = b[2].timestamp;
        assert!(matches!(
            preintegrate(&b, &z, &z, &noise()),
            Err(Error::NonMonotonicImu { index: 3, .. })
        ));
    }

    #[test]
    fn covariance_is_pd_and_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = smooth_batch(&mut rng);
        let z = Vec3::zeros();
        let mut last = 0.0;
        for n in [3, 10, 20, 41] {
            let pre = preintegrate(&batch[..n], &z, &z, &noise()).unwrap();
            let tr = pre.covariance.trace();
            assert!(tr > last);
            last = tr;
            assert!(pre.covariance.cholesky().is_some());
            assert_abs_diff_eq!(pre.covariance, pre.covariance.transpose(), epsilon = 0.0);
        }
    }

    #[test]
    fn first_order_bias_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let batch = smooth_batch(&mut rng);
            let bg = random_vec(&mut rng, 0.02);
            let ba = random_vec(&mut rng, 0.1);
            let pre = preintegrate(&batch, &bg, &ba, &noise()).unwrap();
            let dbg = random_vec(&mut rng, 0.01 / 3f64.sqrt());
            let dba = random_vec(&mut rng, 0.01 / 3f64.sqrt());
            let full = preintegrate(&batch, &(bg + dbg), &(ba + dba), &noise()).unwrap();
            let c = pre.corrected(&(bg + dbg), &(ba + dba));
            assert!(c.delta_q.angle_to(&full.delta_q) < 1e-5);
            assert!((c.delta_v - full.delta_v).norm() < 1e-5);
            assert!((c.delta_p - full.delta_p).norm() < 1e-5);
        }
    }

    #[test]
    fn samples_between_interpolates_frame_boundaries() {
        let batch: Vec<_> = (0..10)
            .map(|i| {
                ImuSample::new(
                    i as f64 * 0.005,
                    Vec3::new(i as f64, 0.0, 0.0),
                    Vec3::zeros(),
                )
            })
            .collect();
        let s = samples_between(&batch, 0.0075, 0.0301).unwrap();
        assert_abs_diff_eq!(s[0].timestamp, 0.0075);
        assert_abs_diff_eq!(s[0].gyro.x, 1.5, epsilon = 1e-12);
        assert_eq!(s.len(), 2 + 5);
        assert_abs_diff_eq!(s.last().unwrap().gyro.x, 6.02, epsilon = 1e-9);
        assert!(samples_between(&batch, 0.0, 0.1).is_err());
    }

    fn t_cs_random(rng: &mut ChaCha8Rng) -> RigidTransform {
        make_transform(exp_rotation(&random_vec(rng, 0.5)), random_vec(rng, 0.05))
    }

    #[test]
    fn stationary_prediction_is_equilibrium() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let t_cs = t_cs_random(&mut rng);
            let mut x0 = State {
                q_wc: exp_rotation(&random_vec(&mut rng, 1.0)),
                q_iw: exp_rotation(&random_vec(&mut rng, 1.0)),
                p_wc: random_vec(&mut rng, 2.0),
                bg: random_vec(&mut rng, 0.01),
                ba: random_vec(&mut rng, 0.1),
                ..State::default()
            };
            x0.v_iis = Vec3::zeros();
            // specific force in S that cancels gravity
            let r_is = x0.q_iw * x0.q_wc * t_cs.rotation;
            let f = r_is.inverse() * Vec3::new(0.0, 0.0, 9.81) + x0.ba;
            let batch = constant_batch(7, x0.bg, f);
            let pre = preintegrate(&batch, &x0.bg, &x0.ba, &noise()).unwrap();
            let x1 = predict(&x0, &pre, 9.81, &t_cs);
            assert!(x1.boxminus(&x0).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_acceleration_kinematics() {
        let x0 = State::default();
        let a = Vec3::new(0.5, 0.0, 0.0);
        let f = a + Vec3::new(0.0, 0.0, 9.81);
        let pre = preintegrate(
            &constant_batch(41, Vec3::zeros(), f),
            &Vec3::zeros(),
            &Vec3::zeros(),
            &noise(),
        )
        .unwrap();
        let x1 = predict(&x0, &pre, 9.81, &RigidTransform::identity());
        assert_abs_diff_eq!(x1.v_iis, a * 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(x1.p_wc, 0.5 * a * 0.04, epsilon = 1e-12);
        // without the gravity reaction the body falls
        let pre = preintegrate(
            &constant_batch(41, Vec3::zeros(), a),
            &Vec3::zeros(),
            &Vec3::zeros(),
            &noise(),
        )
        .unwrap();
        let x1 = predict(&x0, &pre, 9.81, &RigidTransform::identity());
        assert_abs_diff_eq!(
            x1.v_iis,
            a * 0.2 + Vec3::new(0.0, 0.0, -9.81 * 0.2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn residual_zero_at_prediction_and_position_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = smooth_batch(&mut rng);
        let x0 = State::default();
        let pre = preintegrate(&batch, &x0.bg, &x0.ba, &noise()).unwrap();
        let t = RigidTransform::identity();
        let x1 = predict(&x0, &pre, 9.81, &t);
        let r = imu_residual(&x0, &x1, &pre, &noise(), &t).unwrap();
        assert!(r.error.norm() < 1e-15);
        let mut x1b = x1.clone();
        x1b.p_wc += Vec3::new(0.01, 0.0, 0.0);
        let r = imu_residual(&x0, &x1b, &pre, &noise(), &t).unwrap();
        let mut expected = LocalPerturbation::zeros();
        expected[0] = -0.01;
        assert_abs_diff_eq!(r.error, expected, epsilon = 1e-15);
    }

    #[test]
    fn zero_interval_is_singular() {
        let z = Vec3::zeros();
        let pre = preintegrate(&constant_batch(1, z, z), &z, &z, &noise()).unwrap();
        let x = State::default();
        let err = imu_residual(&x, &x, &pre, &noise(), &RigidTransform::identity()).unwrap_err();
        assert!(matches!(err, Error::SingularImuCovariance));
    }

    #[test]
    fn weight_inverts_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = smooth_batch(&mut rng);
        let x0 = State::default();
        let pre = preintegrate(&batch[..7], &x0.bg, &x0.ba, &noise()).unwrap();
        let t = RigidTransform::identity();
        let x1 = predict(&x0, &pre, 9.81, &t);
        let r = imu_residual(&x0, &x1, &pre, &noise(), &t).unwrap();
        let prod = r.weight * r.covariance;
        assert!((prod - Mat18::identity()).amax() < 1e-6);
        let keep = [false, true, false, true, false, true];
        let m = masked_information(&r.covariance, &keep).unwrap();
        for i in 0..18 {
            if !keep[i / 3] {
                assert!(m.row(i).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn gravity_initialization_levels_the_inertial_frame() {
        let q_iw_true = exp_rotation(&Vec3::new(0.2, -0.1, 0.0));
        let f = q_iw_true.inverse() * Vec3::new(0.0, 0.0, 9.81);
        let batch = constant_batch(20, Vec3::zeros(), f);
        let q = gravity_from_accel(&batch, 20, &RigidTransform::identity()).unwrap();
        assert!(gravity_error(&q, &q_iw_true) < 1e-12);
    }
}
