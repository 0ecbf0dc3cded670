//! Pinhole camera model, images and the coarse-to-fine frame pyramid.

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::Vec3;

pub const MIN_DEPTH: f64 = 0.05;
pub const MAX_DEPTH: f64 = 10.0;
pub const PYRAMID_LEVELS: usize = 3;
/// Depth jump beyond which neighbouring pixels are not mixed.
pub const DEPTH_DISCONTINUITY: f64 = 0.1;

pub fn depth_is_valid(d: f64) -> bool {
    d > MIN_DEPTH && d <= MAX_DEPTH
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive: {fx}, {fy}"
            )));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::Config(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(k)
    }

    /// Kinect-like 62°×48° field of view at the requested resolution.
    pub fn kinect_like(width: usize, height: usize) -> Self {
        let s = width as f64 / 640.0;
        CameraIntrinsics {
            fx: 525.0 * s,
            fy: 525.0 * s,
            cx: 0.5 * width as f64 - 0.5,
            cy: 0.5 * height as f64 - 0.5,
            width,
            height,
        }
    }

    /// Intrinsics of the next coarser pyramid level. Coarse pixel `i` covers
    /// fine pixels `2i` and `2i + 1`, hence the quarter-pixel shift.
    pub fn downsampled(&self) -> Self {
        CameraIntrinsics {
            fx: 0.5 * self.fx,
            fy: 0.5 * self.fy,
            cx: 0.5 * self.cx - 0.25,
            cy: 0.5 * self.cy - 0.25,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0
            && u.y >= 0.0
            && u.x <= (self.width - 1) as f64
            && u.y <= (self.height - 1) as f64
    }
}

/// Projects a camera-frame point; `None` if behind the near plane or out of view.
pub fn project(k: &CameraIntrinsics, p: &Vec3) -> Option<Vector2<f64>> {
    if p.z <= MIN_DEPTH {
        return None;
    }
    let u = project_unchecked(k, p);
    k.contains(&u).then_some(u)
}

pub fn project_unchecked(k: &CameraIntrinsics, p: &Vec3) -> Vector2<f64> {
    Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

/// Derivative of the projection w.r.t. the camera-frame point.
pub fn project_jacobian(k: &CameraIntrinsics, p: &Vec3) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    )
}

/// Homogeneous back-projection of pixel `u` at depth `d`.
pub fn backproject(k: &CameraIntrinsics, u: &Vector2<f64>, d: f64) -> Option<Vector4<f64>> {
    if d <= 0.0 {
        return None;
    }
    Some(Vector4::new(
        (u.x - k.cx) * d / k.fx,
        (u.y - k.cy) * d / k.fy,
        d,
        1.0,
    ))
}

pub fn backproject_point(k: &CameraIntrinsics, u: f64, v: f64, d: f64) -> Vec3 {
    Vec3::new((u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d)
}

/// Row-major scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Image {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.data[v * self.width + u] = value;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear sample and the exact derivative of the bilinear interpolant.
    /// `None` outside `[0, w-1] × [0, h-1]`.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<(f64, f64, f64)> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if x > max_x || y > max_y {
            return None;
        }
        let mut x0 = x.floor() as usize;
        let mut y0 = y.floor() as usize;
        // Right/bottom edges sample from the last full cell.
        if x0 + 1 >= self.width {
            x0 = self.width - 2;
        }
        if y0 + 1 >= self.height {
            y0 = self.height - 2;
        }
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let i = y0 * self.width + x0;
        let a = self.data[i];
        let b = self.data[i + 1];
        let c = self.data[i + self.width];
        let d = self.data[i + self.width + 1];
        let top = a + fx * (b - a);
        let bottom = c + fx * (d - c);
        let value = top + fy * (bottom - top);
        let du = (b - a) + fy * ((d - c) - (b - a));
        let dv = bottom - top;
        Some((value, du, dv))
    }
}

/// One RGB-D frame: grayscale intensity in [0, 255] and metric depth (0 = invalid).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub intensity: Image,
    pub depth: Image,
}

impl Frame {
    pub fn new(timestamp: f64, intensity: Image, depth: Image) -> Result<Self> {
        if intensity.width != depth.width || intensity.height != depth.height {
            return Err(Error::Config(format!(
                "intensity {}x{} and depth {}x{} differ",
                intensity.width, intensity.height, depth.width, depth.height
            )));
        }
        Ok(Frame {
            timestamp,
            intensity,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.intensity.width
    }

    pub fn height(&self) -> usize {
        self.intensity.height
    }
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub intrinsics: CameraIntrinsics,
    pub intensity: Image,
    pub depth: Image,
    /// Camera-frame vertices; only meaningful where `depth` is valid.
    pub vertices: Vec<Vec3>,
    /// Unit normals facing the camera; zero where undefined.
    pub normals: Vec<Vec3>,
    pub grad_u: Image,
    pub grad_v: Image,
}

impl PyramidLevel {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn has_normal(&self, idx: usize) -> bool {
        self.normals[idx] != Vec3::zeros()
    }
}

#[derive(Debug, Clone)]
pub struct FramePyramid {
    pub timestamp: f64,
    pub levels: Vec<PyramidLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PyramidOptions {
    /// Edge-preserving smoothing of level-0 depth before vertex/normal
    /// computation: (spatial sigma in pixels, range sigma in meters). Disabled when `None`.
    pub bilateral: Option<(f64, f64)>,
}


pub fn build_pyramid(frame: &Frame, k: &CameraIntrinsics) -> Result<FramePyramid> {
    build_pyramid_with(frame, k, &PyramidOptions::default())
}

pub fn build_pyramid_with(
    frame: &Frame,
    k: &CameraIntrinsics,
    options: &PyramidOptions,
) -> Result<FramePyramid> {
    let (w, h) = (frame.width(), frame.height());
    let divisor = 1 << (PYRAMID_LEVELS - 1);
    if w % divisor != 0 || h % divisor != 0 || w < 2 * divisor || h < 2 * divisor {
        return Err(Error::Dimensions {
            width: w,
            height: h,
            divisor,
        });
    }
    if k.width != w || k.height != h {
        return Err(Error::Config(format!(
            "intrinsics are {}x{} but frame is {w}x{h}",
            k.width, k.height
        )));
    }
    let mut depth = sanitize_depth(&frame.depth);
    if let Some((sigma_px, sigma_m)) = options.bilateral {
        depth = bilateral_depth(&depth, sigma_px, sigma_m);
    }
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    levels.push(make_level(*k, frame.intensity.clone(), depth, 1.0));
    for l in 1..PYRAMID_LEVELS {
        let prev = levels.last().unwrap();
        let intensity = downsample_intensity(&prev.intensity);
        let depth = downsample_depth(&prev.depth);
        levels.push(make_level(
            prev.intrinsics.downsampled(),
            intensity,
            depth,
            (1 << l) as f64,
        ));
    }
    Ok(FramePyramid {
        timestamp: frame.timestamp,
        levels,
    })
}

fn sanitize_depth(depth: &Image) -> Image {
    let mut out = depth.clone();
    for d in out.data.iter_mut() {
        if !depth_is_valid(*d) {
            *d = 0.0;
        }
    }
    out
}

/// `scale` is the level's pixel size in level-0 pixels.
fn make_level(k: CameraIntrinsics, intensity: Image, depth: Image, scale: f64) -> PyramidLevel {
    let (w, h) = (k.width, k.height);
    let vertices: Vec<Vec3> = (0..w * h)
        .map(|i| {
            let d = depth.data[i];
            if d > 0.0 {
                backproject_point(&k, (i % w) as f64, (i / w) as f64, d)
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    let normals = normal_map(&vertices, &depth, w, h, scale * DEPTH_DISCONTINUITY);
    let (grad_u, grad_v) = gradients(&intensity);
    PyramidLevel {
        intrinsics: k,
        intensity,
        depth,
        vertices,
        normals,
        grad_u,
        grad_v,
    }
}

fn normal_map(vertices: &[Vec3], depth: &Image, w: usize, h: usize, max_step: f64) -> Vec<Vec3> {
    let mut normals = vec![Vec3::zeros(); w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w - 1 {
            let i = v * w + u;
            let d = depth.data[i];
            if d <= 0.0 {
                continue;
            }
            let nb = [i - 1, i + 1, i - w, i + w];
            if nb
                .iter()
                .any(|&j| depth.data[j] <= 0.0 || (depth.data[j] - d).abs() > max_step)
            {
                continue;
            }
            let du = vertices[i + 1] - vertices[i - 1];
            let dv = vertices[i + w] - vertices[i - w];
            let n = du.cross(&dv);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            let mut n = n / norm;
            if n.dot(&vertices[i]) > 0.0 {
                n = -n;
            }
            normals[i] = n;
        }
    }
    normals
}

fn gradients(img: &Image) -> (Image, Image) {
    let (w, h) = (img.width, img.height);
    let mut gu = Image::new(w, h, 0.0);
    let mut gv = Image::new(w, h, 0.0);
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            gu.set(u, v, 0.5 * (img.at(u + 1, v) - img.at(u - 1, v)));
            gv.set(u, v, 0.5 * (img.at(u, v + 1) - img.at(u, v - 1)));
        }
    }
    (gu, gv)
}

fn downsample_intensity(img: &Image) -> Image {
    Image::from_fn(img.width / 2, img.height / 2, |u, v| {
        let (x, y) = (2 * u, 2 * v);
        0.25 * (img.at(x, y) + img.at(x + 1, y) + img.at(x, y + 1) + img.at(x + 1, y + 1))
    })
}

/// Averages the valid depths of each 2×2 block that lie within the
/// discontinuity threshold of the nearest one. The mean is taken over
/// inverse depth, which is affine in the pixel coordinates on a plane.
fn downsample_depth(depth: &Image) -> Image {
    Image::from_fn(depth.width / 2, depth.height / 2, |u, v| {
        let (x, y) = (2 * u, 2 * v);
        let block = [
            depth.at(x, y),
            depth.at(x + 1, y),
            depth.at(x, y + 1),
            depth.at(x + 1, y + 1),
        ];
        let nearest = block
            .iter()
            .copied()
            .filter(|d| *d > 0.0)
            .fold(f64::INFINITY, f64::min);
        if !nearest.is_finite() {
            return 0.0;
        }
        let (sum, n) = block
            .iter()
            .filter(|d| **d > 0.0 && **d - nearest <= DEPTH_DISCONTINUITY)
            .fold((0.0, 0usize), |(s, n), d| (s + 1.0 / d, n + 1));
        n as f64 / sum
    })
}

fn bilateral_depth(depth: &Image, sigma_px: f64, sigma_m: f64) -> Image {
    let radius = (2.0 * sigma_px).ceil() as isize;
    let (w, h) = (depth.width as isize, depth.height as isize);
    let inv_s = 0.5 / (sigma_px * sigma_px);
    let inv_r = 0.5 / (sigma_m * sigma_m);
    Image::from_fn(depth.width, depth.height, |u, v| {
        let center = depth.at(u, v);
        if center <= 0.0 {
            return 0.0;
        }
        let (mut acc, mut wsum) = (0.0, 0.0);
        for dy in -radius..=radius {
            let y = v as isize + dy;
            if y < 0 || y >= h {
                continue;
            }
            for dx in -radius..=radius {
                let x = u as isize + dx;
                if x < 0 || x >= w {
                    continue;
                }
                let d = depth.at(x as usize, y as usize);
                if d <= 0.0 {
                    continue;
                }
                let r = d - center;
                let wgt = (-((dx * dx + dy * dy) as f64) * inv_s - r * r * inv_r).exp();
                acc += wgt * d;
                wsum += wgt;
            }
        }
        acc / wsum
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k640() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn project_optical_axis_and_offset() {
        let k = k640();
        let u = project(&k, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(u, Vector2::new(320.0, 240.0));
        let u = project(&k, &Vec3::new(0.1, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(u, Vector2::new(370.0, 240.0), epsilon = 1e-12);
    }

    #[test]
    fn project_rejects_near_and_outside() {
        let k = k640();
        assert!(project(&k, &Vec3::new(0.0, 0.0, 0.05)).is_none());
        assert!(project(&k, &Vec3::new(0.0, 0.0, -1.0)).is_none());
        assert!(project(&k, &Vec3::new(5.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn backproject_examples() {
        let k = k640();
        let p = backproject(&k, &Vector2::new(320.0, 240.0), 2.0).unwrap();
        assert_eq!(p, Vector4::new(0.0, 0.0, 2.0, 1.0));
        let p = backproject(&k, &Vector2::new(820.0, 240.0), 1.0).unwrap();
        assert_abs_diff_eq!(p, Vector4::new(1.0, 0.0, 1.0, 1.0), epsilon = 1e-12);
        assert!(backproject(&k, &Vector2::new(1.0, 1.0), 0.0).is_none());
    }

    #[test]
    fn project_backproject_round_trip() {
        let k = k640();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let u = Vector2::new(rng.random_range(0.0..639.0), rng.random_range(0.0..479.0));
            let d = rng.random_range(0.1..10.0);
            let p = backproject(&k, &u, d).unwrap().xyz();
            let u2 = project(&k, &p).unwrap();
            assert!((u2 - u).norm() < 1e-9);
        }
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 1.0, 4, 4).is_err());
    }

    fn frame(w: usize, h: usize, i: impl Fn(usize, usize) -> f64, d: f64) -> Frame {
        Frame::new(0.0, Image::from_fn(w, h, i), Image::new(w, h, d)).unwrap()
    }

    #[test]
    fn pyramid_sizes() {
        let k = CameraIntrinsics::kinect_like(640, 480);
        let p = build_pyramid(&frame(640, 480, |_, _| 10.0, 2.0), &k).unwrap();
        let sizes: Vec<_> = p.levels.iter().map(|l| (l.width(), l.height())).collect();
        assert_eq!(sizes, vec![(640, 480), (320, 240), (160, 120)]);
    }

    #[test]
    fn pyramid_rejects_bad_dimensions() {
        let k = CameraIntrinsics::kinect_like(642, 480);
        let err = build_pyramid(&frame(642, 480, |_, _| 0.0, 1.0), &k).unwrap_err();
        assert!(matches!(err, Error::Dimensions { .. }));
    }

    #[test]
    fn constant_image_has_zero_gradient() {
        let k = CameraIntrinsics::kinect_like(160, 120);
        let p = build_pyramid(&frame(160, 120, |_, _| 77.0, 1.5), &k).unwrap();
        for l in &p.levels {
            assert!(l.grad_u.data.iter().all(|g| *g == 0.0));
            assert!(l.grad_v.data.iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn flat_plane_normals_face_camera() {
        let k = CameraIntrinsics::kinect_like(160, 120);
        let p = build_pyramid(&frame(160, 120, |_, _| 0.0, 2.0), &k).unwrap();
        for l in &p.levels {
            let mut count = 0;
            for (i, n) in l.normals.iter().enumerate() {
                if l.has_normal(i) {
                    assert_abs_diff_eq!(*n, Vec3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
                    count += 1;
                }
            }
            assert_eq!(count, (l.width() - 2) * (l.height() - 2));
        }
    }

    #[test]
    fn normals_are_unit_on_curved_surface() {
        let k = CameraIntrinsics::kinect_like(160, 120);
        let depth = Image::from_fn(160, 120, |u, v| {
            1.5 + 0.2 * ((u as f64) * 0.05).sin() + 0.1 * ((v as f64) * 0.07).cos()
        });
        let f = Frame::new(0.0, Image::new(160, 120, 0.0), depth).unwrap();
        let p = build_pyramid(&f, &k).unwrap();
        for l in &p.levels {
            for (i, n) in l.normals.iter().enumerate() {
                if l.has_normal(i) {
                    assert!((n.norm() - 1.0).abs() < 1e-6);
                    assert!(n.dot(&l.vertices[i]) < 0.0);
                }
            }
        }
    }

    #[test]
    fn box_filter_preserves_mean() {
        let k = CameraIntrinsics::kinect_like(160, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..160 * 120)
            .map(|_| rng.random_range(0.0..255.0))
            .collect();
        let f = frame(160, 120, |u, v| vals[v * 160 + u], 1.0);
        let p = build_pyramid(&f, &k).unwrap();
        let m0 = p.levels[0].intensity.mean();
        for l in &p.levels[1..] {
            assert!((l.intensity.mean() - m0).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_downsampling_does_not_blend_edges() {
        let depth = Image::from_fn(8, 8, |u, _| if u < 3 { 1.0 } else { 3.0 });
        let small = downsample_depth(&depth);
        // block covering columns 2..4 straddles the edge: keep the near side only
        assert_eq!(small.at(1, 0), 1.0);
        assert_eq!(small.at(2, 0), 3.0);
    }

    #[test]
    fn bilinear_sampling_and_derivative() {
        let img = Image::from_fn(4, 4, |u, v| 2.0 * u as f64 + 3.0 * v as f64);
        let (val, du, dv) = img.sample_bilinear(1.25, 2.5).unwrap();
        assert_abs_diff_eq!(val, 2.5 + 7.5, epsilon = 1e-12);
        assert_abs_diff_eq!(du, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dv, 3.0, epsilon = 1e-12);
        assert!(img.sample_bilinear(3.0, 3.0).is_some());
        assert!(img.sample_bilinear(3.01, 0.0).is_none());
        assert!(img.sample_bilinear(-0.01, 0.0).is_none());
    }

    #[test]
    fn downsampled_intrinsics_keep_pixel_centres_aligned() {
        let k = CameraIntrinsics::kinect_like(160, 120);
        let kc = k.downsampled();
        let p = Vec3::new(0.3, -0.2, 1.7);
        let uf = project_unchecked(&k, &p);
        let uc = project_unchecked(&kc, &p);
        assert_abs_diff_eq!(uc, (uf - Vector2::new(0.5, 0.5)) / 2.0, epsilon = 1e-12);
    }

    /// Depth of the plane `n·X = c` along the ray of pixel `(u, v)`.
    fn plane_depth(k: &CameraIntrinsics, n: &Vec3, c: f64, u: f64, v: f64) -> f64 {
        c / n.dot(&Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0))
    }

    #[test]
    fn coarse_levels_stay_on_a_slanted_plane() {
        let k = CameraIntrinsics::kinect_like(160, 120);
        let n = Vec3::new(0.5, -0.3, -1.0).normalize();
        let c = -1.5;
        let depth = Image::from_fn(160, 120, |u, v| plane_depth(&k, &n, c, u as f64, v as f64));
        let f = Frame::new(0.0, Image::new(160, 120, 100.0), depth).unwrap();
        let p = build_pyramid(&f, &k).unwrap();
        for l in &p.levels[1..] {
            let kl = &l.intrinsics;
            for v in 1..kl.height - 1 {
                for u in 1..kl.width - 1 {
                    let i = v * kl.width + u;
                    let d = plane_depth(kl, &n, c, u as f64, v as f64);
                    assert_abs_diff_eq!(l.depth.data[i], d, epsilon = 1e-9);
                    assert_abs_diff_eq!(l.normals[i], n, epsilon = 1e-9);
                }
            }
        }
    }
}
