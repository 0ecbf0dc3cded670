//! Uniform cubic B-spline trajectories: cumulative form on both R³ and SO(3),
//! with control points fit so that the curve interpolates the knots.

use crate::error::{Error, Result};
use crate::manifold::{
    exp_rotation, log_rotation, make_transform, skew, Mat3, Quat, RigidTransform, Vec3,
};

#[derive(Debug, Clone)]
pub struct TrajectorySpline {
    pub t0: f64,
    pub dt: f64,
    /// Control points, one before the first knot and one after the last.
    pub ctrl_p: Vec<Vec3>,
    pub ctrl_q: Vec<Quat>,
}

/// Pose and derivatives at one instant. Linear quantities are in the
/// spline's frame; angular ones in the body frame.
#[derive(Debug, Clone, Copy)]
pub struct SplineSample {
    pub position: Vec3,
    pub orientation: Quat,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub angular_velocity: Vec3,
    pub angular_acceleration: Vec3,
}

impl SplineSample {
    pub fn pose(&self) -> RigidTransform {
        make_transform(self.orientation, self.position)
    }
}

/// Cumulative basis values and their first two `u`-derivatives (j = 1..3).
fn basis(u: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let (u2, u3) = (u * u, u * u * u);
    (
        [
            (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
            (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
            u3 / 6.0,
        ],
        [
            (3.0 - 6.0 * u + 3.0 * u2) / 6.0,
            (3.0 + 6.0 * u - 6.0 * u2) / 6.0,
            0.5 * u2,
        ],
        [u - 1.0, 1.0 - 2.0 * u, u],
    )
}

fn rot_at_knot(c: &[Quat], i: usize) -> Quat {
    // value at u = 0 of the segment whose first control point is c[i]
    let o1 = log_rotation(&(c[i].inverse() * c[i + 1]));
    let o2 = log_rotation(&(c[i + 1].inverse() * c[i + 2]));
    c[i] * exp_rotation(&(o1 * (5.0 / 6.0))) * exp_rotation(&(o2 * (1.0 / 6.0)))
}

fn extend_rotations(c: &mut [Quat]) {
    let n = c.len();
    c[0] = c[1] * exp_rotation(&-log_rotation(&(c[1].inverse() * c[2])));
    c[n - 1] = c[n - 2] * exp_rotation(&log_rotation(&(c[n - 3].inverse() * c[n - 2])));
}

/// Fits a spline through every `subsample`-th pose. Knots are assumed to
/// be (nearly) uniformly spaced in time.
pub fn fit_spline(
    times: &[f64],
    poses: &[RigidTransform],
    subsample: usize,
) -> Result<TrajectorySpline> {
    if times.len() != poses.len() {
        return Err(Error::Mismatch(format!(
            "{} timestamps for {} poses",
            times.len(),
            poses.len()
        )));
    }
    let step = subsample.max(1);
    let idx: Vec<usize> = (0..times.len()).step_by(step).collect();
    let n = idx.len();
    if n < 4 {
        return Err(Error::TooFewPoses { needed: 4, got: n });
    }
    let t0 = times[idx[0]];
    let dt = (times[idx[n - 1]] - t0) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Mismatch("knot timestamps must increase".into()));
    }
    let p: Vec<Vec3> = idx.iter().map(|&i| poses[i].translation.vector).collect();
    let q: Vec<Quat> = idx.iter().map(|&i| poses[i].rotation).collect();

    // positions: c₀ = p₀, c_{n−1} = p_{n−1}, (c_{i−1} + 4cᵢ + c_{i+1}) / 6 = pᵢ inside
    let mut c = p.clone();
    if n > 2 {
        let m = n - 2;
        let mut diag = vec![4.0 / 6.0; m];
        let mut rhs: Vec<Vec3> = (1..n - 1).map(|i| p[i]).collect();
        rhs[0] -= p[0] / 6.0;
        rhs[m - 1] -= p[n - 1] / 6.0;
        let off = 1.0 / 6.0;
        for i in 1..m {
            let w = off / diag[i - 1];
            diag[i] -= w * off;
            let prev = rhs[i - 1];
            rhs[i] -= prev * w;
        }
        c[m] = rhs[m - 1] / diag[m - 1];
        for i in (0..m - 1).rev() {
            c[i + 1] = (rhs[i] - c[i + 2] * off) / diag[i];
        }
    }
    let mut ctrl_p = Vec::with_capacity(n + 2);
    ctrl_p.push(c[0] * 2.0 - c[1]);
    ctrl_p.extend_from_slice(&c);
    ctrl_p.push(c[n - 1] * 2.0 - c[n - 2]);

    // rotations: Gauss-Seidel on the knot conditions
    let mut ctrl_q = Vec::with_capacity(n + 2);
    ctrl_q.push(q[0]);
    ctrl_q.extend_from_slice(&q);
    ctrl_q.push(q[n - 1]);
    extend_rotations(&mut ctrl_q);
    for _ in 0..200 {
        let mut worst: f64 = 0.0;
        for i in 1..n - 1 {
            let r = rot_at_knot(&ctrl_q, i);
            let d = log_rotation(&(q[i] * r.inverse()));
            worst = worst.max(d.norm());
            ctrl_q[i + 1] = exp_rotation(&d) * ctrl_q[i + 1];
        }
        extend_rotations(&mut ctrl_q);
        if worst < 1e-14 {
            break;
        }
    }
    Ok(TrajectorySpline {
        t0,
        dt,
        ctrl_p,
        ctrl_q,
    })
}

impl TrajectorySpline {
    pub fn start(&self) -> f64 {
        self.t0
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.dt * (self.ctrl_p.len() - 3) as f64
    }

    /// Evaluates at `t`, clamped to the knot span.
    pub fn evaluate(&self, t: f64) -> SplineSample {
        let segments = self.ctrl_p.len() - 3;
        let s = ((t - self.t0) / self.dt).clamp(0.0, segments as f64);
        let i = (s.floor() as usize).min(segments - 1);
        let u = s - i as f64;
        let (b, db, ddb) = basis(u);
        let inv_dt = 1.0 / self.dt;

        let cp = &self.ctrl_p[i..i + 4];
        let mut position = cp[0];
        let mut velocity = Vec3::zeros();
        let mut acceleration = Vec3::zeros();
        for j in 0..3 {
            let d = cp[j + 1] - cp[j];
            position += d * b[j];
            velocity += d * (db[j] * inv_dt);
            acceleration += d * (ddb[j] * inv_dt * inv_dt);
        }

        let cq = &self.ctrl_q[i..i + 4];
        let mut orientation = cq[0];
        let mut w = Vec3::zeros();
        let mut wd = Vec3::zeros();
        for j in 0..3 {
            let omega = log_rotation(&(cq[j].inverse() * cq[j + 1]));
            let a = exp_rotation(&(omega * b[j]));
            let at: Mat3 = a.inverse().to_rotation_matrix().into_inner();
            let rate = omega * (db[j] * inv_dt);
            let w_prev = w;
            w = at * w_prev + rate;
            wd = at * wd - skew(&rate) * at * w_prev + omega * (ddb[j] * inv_dt * inv_dt);
            orientation *= a;
        }
        SplineSample {
            position,
            orientation,
            velocity,
            acceleration,
            angular_velocity: w,
            angular_acceleration: wd,
        }
    }
}
