//! Joint two-state tracker: coarse-to-fine damped Gauss-Newton over the
//! previous and current states, followed by marginalization of the previous
//! state into a prior.

mod normal_equations;

pub use normal_equations::*;

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::camera::{FramePyramid, PyramidLevel, PYRAMID_LEVELS};
use crate::error::{Error, Result};
use crate::imu::{
    imu_residual, masked_information, predict, ImuNoiseModel, ImuResidual, Mat18, PreintegratedImu,
};
use crate::manifold::{block, LocalPerturbation, RigidTransform, State, STATE_DIM};
use crate::par::{map_chunks, Execution};
use crate::residuals::{
    associate_pixel, icp_residual, photometric_at, AssociationParams, ImageGradient, ModelView,
    PhotometricWarp, ResidualWeights, SensorNoise, Vec6,
};

/// How much of the inertial measurement enters the cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImuMode {
    #[default]
    Full,
    /// Gyroscope only: accelerometer-driven residual blocks are dropped and
    /// velocity / accelerometer bias are frozen.
    Gyro,
    /// Vision only; the previous state is held fixed.
    Off,
}

impl FromStr for ImuMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ImuMode::Full),
            "gyro" => Ok(ImuMode::Gyro),
            "off" => Ok(ImuMode::Off),
            _ => Err(Error::Unknown {
                kind: "imu mode",
                name: s.to_string(),
            }),
        }
    }
}

impl ImuMode {
    pub fn uses_imu(self) -> bool {
        self != ImuMode::Off
    }

    /// Dimensions of `[x₀, x₁]` that are optimized.
    pub fn active_dims(self) -> [bool; JOINT_DIM] {
        let mut active = [true; JOINT_DIM];
        match self {
            ImuMode::Full => {}
            ImuMode::Gyro => {
                for s in [0, STATE_DIM] {
                    for b in [block::VEL, block::BA] {
                        for i in 0..3 {
                            active[s + b + i] = false;
                        }
                    }
                }
            }
            ImuMode::Off => {
                for (i, a) in active.iter_mut().enumerate() {
                    *a = (STATE_DIM..STATE_DIM + 6).contains(&i);
                }
            }
        }
        active
    }

    /// Residual blocks `[r, α, v, bg, ba, g]` kept in the inertial term.
    pub fn imu_blocks(self) -> [bool; 6] {
        match self {
            ImuMode::Gyro => [false, true, false, true, false, true],
            _ => [true; 6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Iterations per pyramid level, coarsest first.
    pub iterations: [usize; PYRAMID_LEVELS],
    /// Stop a level once the step norm falls below this.
    pub convergence: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    #[serde(skip)]
    pub imu_mode: ImuMode,
    pub use_rgb: bool,
    pub use_icp: bool,
    /// Huber threshold in standard deviations; `None` for plain least squares.
    pub huber: Option<f64>,
    /// Photometric pixels need an intensity gradient above this many
    /// intensity-noise sigmas.
    pub gradient_threshold_sigmas: f64,
    pub image_gradient: ImageGradient,
    pub association: AssociationParams,
    /// Marginal standard deviations of the current pose above which the
    /// frame is flagged as a tracking failure.
    pub max_position_sigma: f64,
    pub max_rotation_sigma: f64,
    /// Visual translation directions whose information is below this
    /// fraction of the strongest one are treated as unobserved and removed
    /// from the visual system.
    pub degeneracy_ratio: f64,
    #[serde(skip)]
    pub execution: Execution,
    pub chunk: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            iterations: [10, 5, 4],
            convergence: 1e-6,
            lambda_min: 1e-6,
            lambda_max: 1e6,
            imu_mode: ImuMode::Full,
            use_rgb: true,
            use_icp: true,
            huber: Some(3.0),
            gradient_threshold_sigmas: 3.5,
            image_gradient: ImageGradient::Central,
            association: AssociationParams::default(),
            max_position_sigma: 0.25,
            max_rotation_sigma: 0.05,
            degeneracy_ratio: 5e-3,
            execution: Execution::default(),
            chunk: 2048,
        }
    }
}

/// Accumulated visual normal equations over `[δr₁, δα₁, δr₀, δα₀]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualSystem {
    pub h: [[f64; 12]; 12],
    pub b: [f64; 12],
    pub cost: f64,
    pub rgb_count: usize,
    pub icp_count: usize,
    /// Sums of squared raw errors, for logging.
    pub rgb_sq: f64,
    pub icp_sq: f64,
    /// Translation directions of the current pose removed by
    /// [`VisualSystem::remove_weak_translation`].
    pub removed: usize,
}

impl Default for VisualSystem {
    fn default() -> Self {
        VisualSystem {
            h: [[0.0; 12]; 12],
            b: [0.0; 12],
            cost: 0.0,
            rgb_count: 0,
            icp_count: 0,
            rgb_sq: 0.0,
            icp_sq: 0.0,
            removed: 0,
        }
    }
}

fn robust(e: f64, w: f64, huber: Option<f64>) -> (f64, f64) {
    let r2 = e * e * w;
    match huber {
        Some(k) if r2 > k * k => {
            let r = r2.sqrt();
            (w * k / r, 2.0 * k * r - k * k)
        }
        _ => (w, r2),
    }
}

impl VisualSystem {
    /// Adds a residual depending on the current pose only.
    #[inline]
    pub fn add_current(&mut self, e: f64, j: &Vec6, w: f64) {
        for i in 0..6 {
            let wi = w * j[i];
            for k in i..6 {
                self.h[i][k] += wi * j[k];
            }
            self.b[i] -= wi * e;
        }
    }

    /// Adds a residual depending on both poses.
    #[inline]
    pub fn add_joint(&mut self, e: f64, j1: &Vec6, j0: &Vec6, w: f64) {
        let mut j = [0.0; 12];
        j[..6].copy_from_slice(j1.as_slice());
        j[6..].copy_from_slice(j0.as_slice());
        for i in 0..12 {
            let wi = w * j[i];
            for k in i..12 {
                self.h[i][k] += wi * j[k];
            }
            self.b[i] -= wi * e;
        }
    }

    /// Accumulation leaves the lower triangle empty; call once after summing.
    pub fn fill_lower(&mut self) {
        for i in 0..12 {
            for k in 0..i {
                self.h[i][k] = self.h[k][i];
            }
        }
    }

    /// Projects out current-pose translation directions carrying less than
    /// `ratio` of the largest translational information. A blank plane, for
    /// instance, only pins the distance along its normal; whatever noisy
    /// normals say about sliding along it is dropped. Call after
    /// [`fill_lower`](Self::fill_lower).
    pub fn remove_weak_translation(&mut self, ratio: f64) {
        let m = Matrix3::from_fn(|i, k| self.h[i][k]);
        let eig = m.symmetric_eigen();
        let max = eig.eigenvalues.max();
        if !(max > 0.0) {
            return;
        }
        let mut p = [[0.0; 12]; 12];
        for (i, row) in p.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for (k, &l) in eig.eigenvalues.iter().enumerate() {
            if l < ratio * max {
                let u = eig.eigenvectors.column(k);
                for i in 0..3 {
                    for j in 0..3 {
                        p[i][j] -= u[i] * u[j];
                    }
                }
                self.removed += 1;
            }
        }
        if self.removed == 0 {
            return;
        }
        // P is symmetric: H ← P H P, b ← P b
        let mut ph = [[0.0; 12]; 12];
        for i in 0..12 {
            for k in 0..12 {
                ph[i][k] = (0..12).map(|j| p[i][j] * self.h[j][k]).sum();
            }
        }
        for i in 0..12 {
            for k in 0..12 {
                self.h[i][k] = (0..12).map(|j| ph[i][j] * p[j][k]).sum();
            }
        }
        let b = self.b;
        for i in 0..12 {
            self.b[i] = (0..12).map(|j| p[i][j] * b[j]).sum();
        }
    }

    pub fn merge(&mut self, o: &VisualSystem) {
        for i in 0..12 {
            for k in 0..12 {
                self.h[i][k] += o.h[i][k];
            }
            self.b[i] += o.b[i];
        }
        self.cost += o.cost;
        self.rgb_count += o.rgb_count;
        self.icp_count += o.icp_count;
        self.rgb_sq += o.rgb_sq;
        self.icp_sq += o.icp_sq;
    }
}

/// Inertial term with the weight actually used.
#[derive(Debug, Clone)]
pub struct ImuTerm {
    pub residual: ImuResidual,
    pub weight: Mat18,
}

impl ImuTerm {
    pub fn cost(&self) -> f64 {
        let e = &self.residual.error;
        (e.transpose() * self.weight * e)[0]
    }
}

/// Joint normal equations of the visual, inertial and prior terms at
/// `(x₀, x₁)`, with inactive dimensions frozen. Returns the system and the
/// total cost.
pub fn build_normal_equations(
    x0: &State,
    prior: Option<&Prior>,
    visual: &VisualSystem,
    imu: Option<&ImuTerm>,
    active: &[bool; JOINT_DIM],
) -> (NormalEquations, f64) {
    let mut ne = NormalEquations::default();
    let map = |i: usize| if i < 6 { STATE_DIM + i } else { i - 6 };
    for i in 0..12 {
        for k in 0..12 {
            ne.h[(map(i), map(k))] += visual.h[i][k];
        }
        ne.b[map(i)] += visual.b[i];
    }
    let mut cost = visual.cost;
    if let Some(t) = imu {
        ne.add_joint(
            &t.residual.error,
            &t.weight,
            &t.residual.jac_x0,
            &t.residual.jac_x1,
        );
        cost += t.cost();
    }
    if let Some(p) = prior {
        ne.add_prior(p, x0);
        cost += p.cost(x0);
    }
    ne.symmetrize();
    ne.apply_mask(active);
    (ne, cost)
}

/// Prior on the first state: tight pose, loose velocity, biases from the
/// noise model, and gravity tilt from the initial accelerometer average.
pub fn initial_prior(x0: &State, noise: &ImuNoiseModel, tilt_sigma: f64) -> Prior {
    let mut sig = [0.0; STATE_DIM];
    for i in 0..3 {
        sig[block::POS + i] = 1e-4;
        sig[block::ROT + i] = 1e-4;
        sig[block::VEL + i] = 0.1;
        sig[block::BG + i] = noise.gyro_bias_prior;
        sig[block::BA + i] = noise.accel_bias_prior;
    }
    sig[block::GRAV] = tilt_sigma;
    sig[block::GRAV + 1] = tilt_sigma;
    sig[block::GRAV + 2] = 1e-4;
    let mut p = Prior::zero(x0.clone());
    for (i, s) in sig.iter().enumerate() {
        p.h[(i, i)] = 1.0 / (s * s);
    }
    p
}

/// Tilt uncertainty of a gravity direction averaged from `count` samples.
pub fn initial_tilt_sigma(noise: &ImuNoiseModel, count: usize) -> f64 {
    let white = noise.accel_noise_density * noise.rate.sqrt();
    let var = white * white / count.max(1) as f64 + noise.accel_bias_prior.powi(2);
    var.sqrt() / noise.gravity
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrackingStatus {
    Ok,
    /// The current pose is poorly constrained in some direction.
    Degenerate {
        position_sigma: f64,
        rotation_sigma: f64,
    },
    /// No damped step could be solved.
    SolverFailed,
}

impl TrackingStatus {
    pub fn failed(&self) -> bool {
        *self != TrackingStatus::Ok
    }
}

#[derive(Debug, Clone)]
pub struct TrackingResult {
    pub x0: State,
    pub x1: State,
    /// Prior on `x₁` for the next frame pair.
    pub prior: Prior,
    pub status: TrackingStatus,
    /// Iterations spent per level, coarsest first.
    pub iterations: [usize; PYRAMID_LEVELS],
    pub cost: f64,
    pub rgb_count: usize,
    pub icp_count: usize,
    /// Translation directions vision left unconstrained.
    pub weak_directions: usize,
    pub rgb_rms: f64,
    pub icp_rms: f64,
    pub imu_cost: f64,
    pub position_sigma: f64,
    pub rotation_sigma: f64,
}

pub struct TrackingInput<'a> {
    pub previous: &'a FramePyramid,
    pub current: &'a FramePyramid,
    /// Model predicted at the previous pose, one view per pyramid level.
    pub model: &'a [ModelView],
    pub imu: Option<&'a PreintegratedImu>,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    pub config: TrackerConfig,
    pub imu_noise: ImuNoiseModel,
    pub sensor_noise: SensorNoise,
    pub weights: ResidualWeights,
    pub t_cs: RigidTransform,
}

struct LevelData<'a> {
    prev: &'a PyramidLevel,
    cur: &'a PyramidLevel,
    model: Option<&'a ModelView>,
    rgb_pixels: Vec<usize>,
    icp_pixels: Vec<usize>,
}

impl Tracker {
    pub fn new(
        config: TrackerConfig,
        imu_noise: ImuNoiseModel,
        sensor_noise: SensorNoise,
        k_full: crate::camera::CameraIntrinsics,
        t_cs: RigidTransform,
    ) -> Self {
        Tracker {
            config,
            imu_noise,
            sensor_noise,
            weights: ResidualWeights::new(sensor_noise, k_full),
            t_cs,
        }
    }

    /// Initial guess for the current state.
    pub fn initial_guess(&self, x0: &State, imu: Option<&PreintegratedImu>) -> State {
        match (self.config.imu_mode, imu) {
            (ImuMode::Full, Some(pre)) => predict(x0, pre, self.imu_noise.gravity, &self.t_cs),
            (ImuMode::Gyro, Some(pre)) => {
                let pred = predict(x0, pre, self.imu_noise.gravity, &self.t_cs);
                State {
                    q_wc: pred.q_wc,
                    ..x0.clone()
                }
            }
            _ => x0.clone(),
        }
    }

    fn level_data<'a>(&self, input: &TrackingInput<'a>, l: usize) -> LevelData<'a> {
        let prev = &input.previous.levels[l];
        let cur = &input.current.levels[l];
        let n = cur.width() * cur.height();
        let thr = self.config.gradient_threshold_sigmas * self.sensor_noise.intensity_sigma;
        let thr2 = thr * thr;
        let rgb_pixels = if self.config.use_rgb {
            (0..n)
                .filter(|&i| {
                    cur.depth.data[i] > 0.0
                        && cur.grad_u.data[i].powi(2) + cur.grad_v.data[i].powi(2) > thr2
                })
                .collect()
        } else {
            Vec::new()
        };
        let model = input
            .model
            .get(l)
            .filter(|m| self.config.use_icp && m.intrinsics == cur.intrinsics);
        let icp_pixels = if model.is_some() {
            (0..n)
                .filter(|&i| cur.depth.data[i] > 0.0 && cur.has_normal(i))
                .collect()
        } else {
            Vec::new()
        };
        LevelData {
            prev,
            cur,
            model,
            rgb_pixels,
            icp_pixels,
        }
    }

    /// Visual normal equations for one level at `(x₀, x₁)`.
    fn visual_system(&self, data: &LevelData, x0: &State, x1: &State, joint: bool) -> VisualSystem {
        let t0 = x0.pose();
        let t1 = x1.pose();
        let warp = PhotometricWarp::new(&t0, &t1).with_gradient(self.config.image_gradient);
        let huber = self.config.huber;
        let w_rgb = self.weights.rgb;
        let exec = self.config.execution;
        let chunk = self.config.chunk;
        let rgb_parts = map_chunks(exec, data.rgb_pixels.len(), chunk, |range| {
            let mut s = VisualSystem::default();
            for &i in &data.rgb_pixels[range] {
                if let Some(r) = photometric_at(i, data.prev, data.cur, &warp) {
                    let (w, c) = robust(r.error, w_rgb, huber);
                    if joint {
                        s.add_joint(r.error, &r.jac_current, &r.jac_previous, w);
                    } else {
                        s.add_current(r.error, &r.jac_current, w);
                    }
                    s.cost += c;
                    s.rgb_count += 1;
                    s.rgb_sq += r.error * r.error;
                }
            }
            s
        });
        let mut total = VisualSystem::default();
        for p in &rgb_parts {
            total.merge(p);
        }
        if let Some(model) = data.model {
            let view_from_world = model.pose.inverse();
            let assoc = self.config.association;
            let icp_parts = map_chunks(exec, data.icp_pixels.len(), chunk, |range| {
                let mut s = VisualSystem::default();
                for &i in &data.icp_pixels[range] {
                    let Some(k) =
                        associate_pixel(i, model, data.cur, &t1, &view_from_world, &assoc)
                    else {
                        continue;
                    };
                    if !k.is_valid() {
                        continue;
                    }
                    let (e, j) = icp_residual(&k, &t1);
                    let w0 = self.weights.icp(k.point.z);
                    let (w, c) = robust(e, w0, huber);
                    s.add_current(e, &j, w);
                    s.cost += c;
                    s.icp_count += 1;
                    s.icp_sq += e * e;
                }
                s
            });
            for p in &icp_parts {
                total.merge(p);
            }
        }
        total.fill_lower();
        total.remove_weak_translation(self.config.degeneracy_ratio);
        total
    }

    fn imu_term(&self, x0: &State, x1: &State, pre: &PreintegratedImu) -> Result<ImuTerm> {
        let residual = imu_residual(x0, x1, pre, &self.imu_noise, &self.t_cs)?;
        let weight = match self.config.imu_mode {
            ImuMode::Full => residual.weight,
            ImuMode::Gyro => masked_information(&residual.covariance, &ImuMode::Gyro.imu_blocks())
                .ok_or(Error::SingularImuCovariance)?,
            ImuMode::Off => Mat18::zeros(),
        };
        Ok(ImuTerm { residual, weight })
    }

    fn system(
        &self,
        data: &LevelData,
        x0: &State,
        x1: &State,
        prior: &Prior,
        imu: Option<&PreintegratedImu>,
    ) -> Result<(NormalEquations, f64, VisualSystem, f64)> {
        let mode = self.config.imu_mode;
        let visual = self.visual_system(data, x0, x1, mode.uses_imu());
        let imu_term = match (mode.uses_imu(), imu) {
            (true, Some(pre)) => Some(self.imu_term(x0, x1, pre)?),
            _ => None,
        };
        let imu_cost = imu_term.as_ref().map_or(0.0, ImuTerm::cost);
        let prior = mode.uses_imu().then_some(prior);
        let (ne, cost) =
            build_normal_equations(x0, prior, &visual, imu_term.as_ref(), &mode.active_dims());
        Ok((ne, cost, visual, imu_cost))
    }

    /// Estimates the current state from the previous one. `prior` is the
    /// marginalization prior on `x₀` (ignored when the IMU is off).
    pub fn track(
        &self,
        x0: &State,
        prior: &Prior,
        input: &TrackingInput,
    ) -> Result<TrackingResult> {
        let mode = self.config.imu_mode;
        if mode.uses_imu() && input.imu.is_none() {
            return Err(Error::EmptyImuBatch);
        }
        if input.previous.levels.len() != input.current.levels.len() {
            return Err(Error::Mismatch(format!(
                "pyramid levels differ: {} vs {}",
                input.previous.levels.len(),
                input.current.levels.len()
            )));
        }
        let n_levels = input.current.levels.len().min(PYRAMID_LEVELS);
        let mut x0 = x0.clone();
        let mut x1 = self.initial_guess(&x0, input.imu);
        let mut iterations = [0; PYRAMID_LEVELS];
        let mut any_solved = false;
        let mut last = None;

        for step in 0..n_levels {
            let l = n_levels - 1 - step;
            let data = self.level_data(input, l);
            let (mut ne, mut cost, mut visual, mut imu_cost) =
                self.system(&data, &x0, &x1, prior, input.imu)?;
            let mut lambda = self.config.lambda_min;
            let max_it = self.config.iterations[PYRAMID_LEVELS - n_levels + step];
            for _ in 0..max_it {
                iterations[PYRAMID_LEVELS - n_levels + step] += 1;
                let h = DMatrix::from_column_slice(JOINT_DIM, JOINT_DIM, ne.h.as_slice());
                let b = DVector::from_column_slice(ne.b.as_slice());
                let mut accepted = None;
                let mut converged = false;
                while lambda <= self.config.lambda_max {
                    let Some(delta) = solve_damped(&h, &b, lambda) else {
                        lambda *= 10.0;
                        continue;
                    };
                    any_solved = true;
                    let d0 =
                        LocalPerturbation::from_iterator(delta.rows(0, STATE_DIM).iter().copied());
                    let d1 = LocalPerturbation::from_iterator(
                        delta.rows(STATE_DIM, STATE_DIM).iter().copied(),
                    );
                    let (t0, t1) = (x0.boxplus(&d0), x1.boxplus(&d1));
                    let trial = self.system(&data, &t0, &t1, prior, input.imu)?;
                    if trial.1.is_finite() && trial.1 <= cost {
                        accepted = Some((t0, t1, trial));
                        converged = delta.norm() < self.config.convergence;
                        lambda = (lambda / 10.0).max(self.config.lambda_min);
                        break;
                    }
                    if delta.norm() < self.config.convergence {
                        converged = true;
                        break;
                    }
                    lambda *= 10.0;
                }
                match accepted {
                    Some((t0, t1, trial)) => {
                        x0 = t0;
                        x1 = t1;
                        (ne, cost, visual, imu_cost) = trial;
                    }
                    None => break,
                }
                if converged {
                    break;
                }
            }
            last = Some((ne, cost, visual, imu_cost));
        }

        let (ne, cost, visual, imu_cost) =
            last.ok_or_else(|| Error::Mismatch("empty pyramid".into()))?;
        let (position_sigma, rotation_sigma) = pose_sigmas(&ne);
        let status = if !any_solved {
            TrackingStatus::SolverFailed
        } else if !(position_sigma <= self.config.max_position_sigma
            && rotation_sigma <= self.config.max_rotation_sigma)
        {
            TrackingStatus::Degenerate {
                position_sigma,
                rotation_sigma,
            }
        } else {
            TrackingStatus::Ok
        };
        let prior = if mode.uses_imu() {
            marginalize(&ne, &x1).unwrap_or_else(|e| {
                log::warn!("marginalization failed ({e}); keeping diagonal information only");
                let mut p = Prior::zero(x1.clone());
                let h11 = ne.h11();
                for i in 0..STATE_DIM {
                    p.h[(i, i)] = h11[(i, i)].max(0.0);
                }
                p
            })
        } else {
            Prior::zero(x1.clone())
        };
        let rms = |sq: f64, n: usize| if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
        Ok(TrackingResult {
            x0,
            x1,
            prior,
            status,
            iterations,
            cost,
            rgb_count: visual.rgb_count,
            icp_count: visual.icp_count,
            weak_directions: visual.removed,
            rgb_rms: rms(visual.rgb_sq, visual.rgb_count),
            icp_rms: rms(visual.icp_sq, visual.icp_count),
            imu_cost,
            position_sigma,
            rotation_sigma,
        })
    }
}

/// Largest marginal standard deviations of the current position and
/// orientation; infinite when the system is singular.
pub fn pose_sigmas(ne: &NormalEquations) -> (f64, f64) {
    let h = DMatrix::from_column_slice(JOINT_DIM, JOINT_DIM, ne.h.as_slice());
    let Some(cov) = spd_inverse(&h) else {
        return (f64::INFINITY, f64::INFINITY);
    };
    let sigma = |o: usize| {
        let m = Matrix3::from_fn(|i, j| cov[(o + i, o + j)]);
        let l = m.symmetric_eigen().eigenvalues.max();
        if l.is_finite() {
            l.max(0.0).sqrt()
        } else {
            f64::INFINITY
        }
    };
    (sigma(STATE_DIM + block::POS), sigma(STATE_DIM + block::ROT))
}
