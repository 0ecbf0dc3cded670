//! Dense photometric residuals, point-to-plane ICP residuals and projective
//! data association. Jacobians are w.r.t. the left perturbation `[δr, δα]`
//! of a camera pose `T_WC`.

use nalgebra::{SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::camera::{
    backproject_point, project, project_jacobian, CameraIntrinsics, PyramidLevel,
    DEPTH_DISCONTINUITY, MIN_DEPTH,
};
use crate::manifold::{skew, Mat3, RigidTransform, Vec3};

pub type Vec6 = SVector<f64, 6>;

/// Maximum point gap for a correspondence (m).
pub const MAX_ASSOCIATION_GAP: f64 = 0.10;
/// Maximum normal angle for a correspondence (degrees).
pub const MAX_ASSOCIATION_ANGLE_DEG: f64 = 30.0;

/// Image and depth noise model shared by the residual weights and the
/// synthetic sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    /// Intensity noise standard deviation (0–255 units).
    pub intensity_sigma: f64,
    /// Disparity noise (pixels) before scaling.
    pub disparity_sigma: f64,
    /// Divisor turning `disparity_sigma` into the per-pixel effective value.
    pub disparity_scale: f64,
    /// Stereo/projector baseline (m); `f·b` uses the focal length of a
    /// 640-pixel-wide native sensor.
    pub baseline: f64,
    pub native_width: f64,
}

impl SensorNoise {
    pub fn synthetic() -> Self {
        SensorNoise {
            intensity_sigma: 4.0,
            disparity_sigma: 5.5,
            disparity_scale: 33.0,
            baseline: 0.075,
            native_width: 640.0,
        }
    }

    pub fn real() -> Self {
        SensorNoise {
            intensity_sigma: 1.0,
            ..Self::synthetic()
        }
    }

    /// `f·b` in native pixels·meters for the given intrinsics.
    pub fn focal_baseline(&self, k: &CameraIntrinsics) -> f64 {
        self.baseline * k.fx * self.native_width / k.width as f64
    }

    pub fn effective_disparity_sigma(&self) -> f64 {
        self.disparity_sigma / self.disparity_scale
    }

    /// Depth standard deviation at depth `d`: `σ_disp · d² / (f·b)`.
    pub fn depth_sigma(&self, k: &CameraIntrinsics, d: f64) -> f64 {
        self.effective_disparity_sigma() * d * d / self.focal_baseline(k)
    }
}

/// Inverse-variance weights of the visual terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualWeights {
    pub rgb: f64,
    noise: SensorNoise,
    k_full: CameraIntrinsics,
}

impl ResidualWeights {
    /// `k_full` are the full-resolution intrinsics the depth noise refers to.
    pub fn new(noise: SensorNoise, k_full: CameraIntrinsics) -> Self {
        ResidualWeights {
            rgb: 1.0 / noise.intensity_sigma.powi(2),
            noise,
            k_full,
        }
    }

    pub fn icp(&self, depth: f64) -> f64 {
        1.0 / self.noise.depth_sigma(&self.k_full, depth).powi(2)
    }
}

/// Precomputed rotation/translation blocks of the two poses used by the
/// photometric warp `I₀(π(K T_WC0⁻¹ T_WC1 ρ(u, d)))`.
#[derive(Debug, Clone, Copy)]
pub struct PhotometricWarp {
    r0_t: Mat3,
    p0: Vec3,
    r1: Mat3,
    p1: Vec3,
    pub gradient: ImageGradient,
}

/// Source of the image gradient in the photometric Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageGradient {
    /// Exact derivative of the bilinear interpolant. Its noise is correlated
    /// with the sampled value, which biases Gauss-Newton steps on noisy images.
    #[default]
    Interpolant,
    /// Bilinearly sampled central differences; equal to the interpolant
    /// derivative on affine intensity and uncorrelated with the value noise.
    Central,
}

impl PhotometricWarp {
    pub fn new(t_wc0: &RigidTransform, t_wc1: &RigidTransform) -> Self {
        PhotometricWarp {
            r0_t: t_wc0.rotation.to_rotation_matrix().into_inner().transpose(),
            p0: t_wc0.translation.vector,
            r1: t_wc1.rotation.to_rotation_matrix().into_inner(),
            p1: t_wc1.translation.vector,
            gradient: ImageGradient::Interpolant,
        }
    }

    pub fn with_gradient(self, gradient: ImageGradient) -> Self {
        PhotometricWarp { gradient, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricResidual {
    pub error: f64,
    /// d e / d [δr₁, δα₁]
    pub jac_current: Vec6,
    /// d e / d [δr₀, δα₀]
    pub jac_previous: Vec6,
}

/// Photometric residual of pixel `index` of `current` against `previous`.
#[inline]
pub fn photometric_at(
    index: usize,
    previous: &PyramidLevel,
    current: &PyramidLevel,
    warp: &PhotometricWarp,
) -> Option<PhotometricResidual> {
    if current.depth.data[index] <= 0.0 {
        return None;
    }
    let p1 = current.vertices[index];
    let r1p = warp.r1 * p1;
    let pw_rel0 = r1p + warp.p1 - warp.p0;
    let p0 = warp.r0_t * pw_rel0;
    if p0.z <= MIN_DEPTH {
        return None;
    }
    let k = &previous.intrinsics;
    let u0 = Vector2::new(k.fx * p0.x / p0.z + k.cx, k.fy * p0.y / p0.z + k.cy);
    let (value, mut gu, mut gv) = previous.intensity.sample_bilinear(u0.x, u0.y)?;
    if warp.gradient == ImageGradient::Central {
        gu = previous.grad_u.sample_bilinear(u0.x, u0.y)?.0;
        gv = previous.grad_v.sample_bilinear(u0.x, u0.y)?.0;
    }
    let error = value - current.intensity.data[index];
    let jp = project_jacobian(k, &p0);
    let de_dp0 = Vector2::new(gu, gv).transpose() * jp; // 1x3
    let de_dpw = de_dp0 * warp.r0_t; // d e / d(world point)
    let mut jac_current = Vec6::zeros();
    let mut jac_previous = Vec6::zeros();
    // δr₁ moves the world point directly; δα₁ by −[R₁P₁]×
    let rot1 = -(de_dpw * skew(&r1p));
    let rot0 = de_dpw * skew(&pw_rel0);
    for i in 0..3 {
        jac_current[i] = de_dpw[i];
        jac_current[3 + i] = rot1[i];
        jac_previous[i] = -de_dpw[i];
        jac_previous[3 + i] = rot0[i];
    }
    Some(PhotometricResidual {
        error,
        jac_current,
        jac_previous,
    })
}

/// Photometric residual at integer pixel `(u, v)` of the current level.
pub fn photometric_residual(
    u: (usize, usize),
    previous: &PyramidLevel,
    current: &PyramidLevel,
    t_wc0: &RigidTransform,
    t_wc1: &RigidTransform,
) -> Option<PhotometricResidual> {
    if u.0 >= current.width() || u.1 >= current.height() {
        return None;
    }
    let warp = PhotometricWarp::new(t_wc0, t_wc1);
    photometric_at(u.1 * current.width() + u.0, previous, current, &warp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    OutOfView,
    DepthGap,
    NormalAngle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Pixel index in the current level.
    pub pixel: usize,
    /// Measured point in the current camera frame.
    pub point: Vec3,
    /// Matched model point in `W`.
    pub model_point: Vec3,
    /// Matched unit model normal in `W`.
    pub model_normal: Vec3,
    pub rejection: Option<Rejection>,
}

impl Correspondence {
    pub fn is_valid(&self) -> bool {
        self.rejection.is_none()
    }
}

/// Point-to-plane residual `n_Wᵀ (T_WC1 p − p_W)` and its pose Jacobian.
#[inline]
pub fn icp_residual(k: &Correspondence, t_wc1: &RigidTransform) -> (f64, Vec6) {
    let a = t_wc1.rotation * k.point;
    let d = a + t_wc1.translation.vector - k.model_point;
    let n = k.model_normal;
    let e = n.dot(&d);
    let rot = a.cross(&n);
    (e, Vec6::new(n.x, n.y, n.z, rot.x, rot.y, rot.z))
}

/// Model surface predicted from the map at a given pose; vertices and
/// normals are in `W`, invalid pixels carry a zero normal.
#[derive(Debug, Clone)]
pub struct ModelView {
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub intensity: Vec<f64>,
    /// Camera-frame depth; 0 where nothing was rendered.
    pub depth: Vec<f64>,
}

impl ModelView {
    pub fn empty(pose: RigidTransform, intrinsics: CameraIntrinsics) -> Self {
        let n = intrinsics.width * intrinsics.height;
        ModelView {
            pose,
            intrinsics,
            vertices: vec![Vec3::zeros(); n],
            normals: vec![Vec3::zeros(); n],
            intensity: vec![0.0; n],
            depth: vec![0.0; n],
        }
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.depth[idx] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// Half-resolution view built like the frame pyramid: per 2×2 block, the
    /// samples near the closest one are averaged (depth in the inverse
    /// domain, normals renormalized).
    pub fn downsampled(&self) -> ModelView {
        let k = self.intrinsics.downsampled();
        let mut out = ModelView::empty(self.pose, k);
        let w = self.intrinsics.width;
        for v in 0..k.height {
            for u in 0..k.width {
                let block = [
                    2 * v * w + 2 * u,
                    2 * v * w + 2 * u + 1,
                    (2 * v + 1) * w + 2 * u,
                    (2 * v + 1) * w + 2 * u + 1,
                ];
                let nearest = block
                    .iter()
                    .map(|&j| self.depth[j])
                    .filter(|d| *d > 0.0)
                    .fold(f64::INFINITY, f64::min);
                if !nearest.is_finite() {
                    continue;
                }
                let (mut inv, mut intensity, mut normal, mut n) = (0.0, 0.0, Vec3::zeros(), 0usize);
                for &j in &block {
                    let d = self.depth[j];
                    if d > 0.0 && d - nearest <= DEPTH_DISCONTINUITY {
                        inv += 1.0 / d;
                        intensity += self.intensity[j];
                        normal += self.normals[j];
                        n += 1;
                    }
                }
                let norm = normal.norm();
                if norm < 1e-9 {
                    continue;
                }
                let i = v * k.width + u;
                let d = n as f64 / inv;
                out.depth[i] = d;
                out.intensity[i] = intensity / n as f64;
                out.normals[i] = normal / norm;
                out.vertices[i] = (self.pose
                    * nalgebra::Point3::from(backproject_point(&k, u as f64, v as f64, d)))
                .coords;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationParams {
    pub max_gap: f64,
    pub max_angle_deg: f64,
}

impl Default for AssociationParams {
    fn default() -> Self {
        AssociationParams {
            max_gap: MAX_ASSOCIATION_GAP,
            max_angle_deg: MAX_ASSOCIATION_ANGLE_DEG,
        }
    }
}

/// Projective association of one current pixel against the model view.
#[inline]
pub fn associate_pixel(
    index: usize,
    model: &ModelView,
    current: &PyramidLevel,
    t_wc1: &RigidTransform,
    view_from_world: &RigidTransform,
    params: &AssociationParams,
) -> Option<Correspondence> {
    if current.depth.data[index] <= 0.0 || !current.has_normal(index) {
        return None;
    }
    let point = current.vertices[index];
    let pw = t_wc1 * nalgebra::Point3::from(point);
    let pm = view_from_world * pw;
    let mut c = Correspondence {
        pixel: index,
        point,
        model_point: Vec3::zeros(),
        model_normal: Vec3::zeros(),
        rejection: Some(Rejection::OutOfView),
    };
    let Some(uv) = project(&model.intrinsics, &pm.coords) else {
        return Some(c);
    };
    let (mu, mv) = (uv.x.round() as usize, uv.y.round() as usize);
    let j = mv * model.intrinsics.width + mu;
    if !model.is_valid(j) {
        return Some(c);
    }
    c.model_point = model.vertices[j];
    c.model_normal = model.normals[j];
    let n_cur = t_wc1.rotation * current.normals[index];
    if (pw.coords - c.model_point).norm() > params.max_gap {
        c.rejection = Some(Rejection::DepthGap);
    } else if n_cur.dot(&c.model_normal) < params.max_angle_deg.to_radians().cos() {
        c.rejection = Some(Rejection::NormalAngle);
    } else {
        c.rejection = None;
    }
    Some(c)
}

/// Associates every current pixel with valid vertex and normal. `t_wc1` is
/// the current pose estimate; the model view carries its own render pose.
pub fn associate(
    model: &ModelView,
    current: &PyramidLevel,
    t_wc1: &RigidTransform,
    params: &AssociationParams,
) -> Vec<Correspondence> {
    let view_from_world = model.pose.inverse();
    (0..current.width() * current.height())
        .filter_map(|i| associate_pixel(i, model, current, t_wc1, &view_from_world, params))
        .collect()
}
