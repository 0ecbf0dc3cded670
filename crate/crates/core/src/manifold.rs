//! Rotations, rigid transforms and the estimation state with its ⊞/⊟ operators.
//!
//! Frames: `W` world (first camera frame), `I` gravity-aligned inertial frame
//! sharing the origin of `W`, `C` camera, `S` IMU sensor. Quaternions are
//! Hamilton; rotation perturbations are applied on the left, `exp(δα) ⊗ q`.

use nalgebra::{Isometry3, Matrix3, Quaternion, SVector, Translation3, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;
/// Rotation + translation; `T_AB` maps points from frame `B` into frame `A`.
pub type RigidTransform = Isometry3<f64>;

/// Dimension of the local tangent space of [`State`].
pub const STATE_DIM: usize = 18;

/// Minimal local coordinates `[δr, δα, δv, δb_g, δb_a, δg]`.
pub type LocalPerturbation = SVector<f64, STATE_DIM>;

/// Offsets of the six 3-blocks inside a [`LocalPerturbation`].
pub mod block {
    pub const POS: usize = 0;
    pub const ROT: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const GRAV: usize = 15;
}

const SMALL_ANGLE: f64 = 1e-8;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from an axis-angle vector to a unit quaternion.
pub fn exp_rotation(alpha: &Vec3) -> Quat {
    let theta = alpha.norm();
    let q = if theta < SMALL_ANGLE {
        Quaternion::new(1.0, 0.5 * alpha.x, 0.5 * alpha.y, 0.5 * alpha.z)
    } else {
        let half = 0.5 * theta;
        let s = half.sin() / theta;
        Quaternion::new(half.cos(), s * alpha.x, s * alpha.y, s * alpha.z)
    };
    UnitQuaternion::new_normalize(q)
}

/// Logarithm map; returns the minimal-angle axis-angle vector (norm ≤ π).
///
/// At exactly π the axis sign is fixed so that its largest-magnitude
/// component is positive.
pub fn log_rotation(q: &Quat) -> Vec3 {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    if n < SMALL_ANGLE {
        // w ≈ 1 here
        return v * (2.0 / w);
    }
    let angle = 2.0 * n.atan2(w);
    let mut axis = v / n;
    if w == 0.0 {
        let imax = axis.iamax();
        if axis[imax] < 0.0 {
            axis = -axis;
        }
    }
    axis * angle
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Mat3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let theta = theta2.sqrt();
    Mat3::identity() - ((1.0 - theta.cos()) / theta2) * k
        + ((theta - theta.sin()) / (theta2 * theta)) * k * k
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Mat3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let theta = theta2.sqrt();
    let c = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * k + c * k * k
}

/// Left Jacobian: `Exp(φ + δ) ≈ Exp(Jl(φ) δ) Exp(φ)`.
pub fn left_jacobian(phi: &Vec3) -> Mat3 {
    right_jacobian(&-phi)
}

pub fn left_jacobian_inv(phi: &Vec3) -> Mat3 {
    right_jacobian_inv(&-phi)
}

/// `exp(δα) ⊗ q`, renormalized.
pub fn rotation_boxplus(q: &Quat, delta: &Vec3) -> Quat {
    UnitQuaternion::new_normalize((exp_rotation(delta) * q).into_inner())
}

/// `log(p ⊗ q⁻¹)`.
pub fn rotation_boxminus(p: &Quat, q: &Quat) -> Vec3 {
    log_rotation(&(p * q.inverse()))
}

pub fn make_transform(rotation: Quat, translation: Vec3) -> RigidTransform {
    Isometry3::from_parts(Translation3::from(translation), rotation)
}

/// Full estimation state of one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    /// Camera position in `W` (m).
    pub p_wc: Vec3,
    /// Camera orientation `q_WC`.
    pub q_wc: Quat,
    /// IMU velocity in the inertial frame (m/s).
    pub v_iis: Vec3,
    /// Gyroscope bias (rad/s).
    pub bg: Vec3,
    /// Accelerometer bias (m/s²).
    pub ba: Vec3,
    /// Orientation of `W` in `I`; encodes the gravity direction.
    pub q_iw: Quat,
}

impl Default for State {
    fn default() -> Self {
        State {
            p_wc: Vec3::zeros(),
            q_wc: Quat::identity(),
            v_iis: Vec3::zeros(),
            bg: Vec3::zeros(),
            ba: Vec3::zeros(),
            q_iw: Quat::identity(),
        }
    }
}

impl State {
    pub fn pose(&self) -> RigidTransform {
        make_transform(self.q_wc, self.p_wc)
    }

    pub fn set_pose(&mut self, pose: &RigidTransform) {
        self.p_wc = pose.translation.vector;
        self.q_wc = pose.rotation;
    }

    /// Camera velocity expressed in `W` (assumes the IMU and camera share an origin).
    pub fn velocity_world(&self) -> Vec3 {
        self.q_iw.inverse() * self.v_iis
    }

    pub fn boxplus(&self, delta: &LocalPerturbation) -> State {
        use block::*;
        State {
            p_wc: self.p_wc + delta.fixed_rows::<3>(POS),
            q_wc: rotation_boxplus(&self.q_wc, &delta.fixed_rows::<3>(ROT).into_owned()),
            v_iis: self.v_iis + delta.fixed_rows::<3>(VEL),
            bg: self.bg + delta.fixed_rows::<3>(BG),
            ba: self.ba + delta.fixed_rows::<3>(BA),
            q_iw: rotation_boxplus(&self.q_iw, &delta.fixed_rows::<3>(GRAV).into_owned()),
        }
    }

    /// `self ⊟ other`.
    pub fn boxminus(&self, other: &State) -> LocalPerturbation {
        use block::*;
        let mut d = LocalPerturbation::zeros();
        d.fixed_rows_mut::<3>(POS)
            .copy_from(&(self.p_wc - other.p_wc));
        d.fixed_rows_mut::<3>(ROT)
            .copy_from(&rotation_boxminus(&self.q_wc, &other.q_wc));
        d.fixed_rows_mut::<3>(VEL)
            .copy_from(&(self.v_iis - other.v_iis));
        d.fixed_rows_mut::<3>(BG).copy_from(&(self.bg - other.bg));
        d.fixed_rows_mut::<3>(BA).copy_from(&(self.ba - other.ba));
        d.fixed_rows_mut::<3>(GRAV)
            .copy_from(&rotation_boxminus(&self.q_iw, &other.q_iw));
        d
    }

    pub fn is_finite(&self) -> bool {
        let v = [self.p_wc, self.v_iis, self.bg, self.ba];
        v.iter().all(|x| x.iter().all(|c| c.is_finite()))
            && self.q_wc.coords.iter().all(|c| c.is_finite())
            && self.q_iw.coords.iter().all(|c| c.is_finite())
    }
}

pub fn boxplus(x: &State, delta: &LocalPerturbation) -> State {
    x.boxplus(delta)
}

pub fn boxminus(xa: &State, xb: &State) -> LocalPerturbation {
    xa.boxminus(xb)
}
