//! Surfel map: fusion, active/inactive segmentation, model prediction for
//! tracking, and non-rigid correction through a deformation graph.

pub mod deformation;
mod grid;

pub use deformation::*;
pub use grid::PointGrid;

use std::io::Write;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, PyramidLevel, MIN_DEPTH};
use crate::manifold::{RigidTransform, Vec3};
use crate::par::{map_chunks, Execution};
use crate::residuals::ModelView;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surfel {
    /// World position (m).
    pub position: Vec3,
    /// Unit world normal.
    pub normal: Vec3,
    pub radius: f64,
    pub confidence: f64,
    /// Frame index of the last fusion.
    pub last_seen: usize,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub fuse_distance: f64,
    pub fuse_angle_deg: f64,
    /// Frames after which an unobserved surfel becomes inactive.
    pub delta_t: usize,
    /// New-surfel radius is `radius_scale · d / fx`.
    pub radius_scale: f64,
    /// Surfels still below this confidence `prune_age` frames after their
    /// last observation are dropped; 0 disables pruning.
    pub prune_confidence: f64,
    pub prune_age: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            fuse_distance: 0.05,
            fuse_angle_deg: 20.0,
            delta_t: 200,
            radius_scale: std::f64::consts::SQRT_2,
            prune_confidence: 2.0,
            prune_age: 30,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SurfelMap {
    pub surfels: Vec<Surfel>,
    pub config: MapConfig,
}

/// `true` for surfels observed within the last `delta_t` frames.
pub fn segment_active(surfels: &[Surfel], frame: usize, delta_t: usize) -> Vec<bool> {
    surfels
        .iter()
        .map(|s| frame.saturating_sub(s.last_seen) <= delta_t)
        .collect()
}

enum FuseAction {
    Update(usize),
    Insert,
}

impl SurfelMap {
    pub fn new(config: MapConfig) -> Self {
        SurfelMap {
            surfels: Vec::new(),
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn active_mask(&self, frame: usize) -> Vec<bool> {
        segment_active(&self.surfels, frame, self.config.delta_t)
    }

    /// Nearest active surfel per pixel (by projected centre).
    fn index_map(
        &self,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
        active: &[bool],
    ) -> Vec<Option<usize>> {
        let n = k.width * k.height;
        let mut depth = vec![f64::INFINITY; n];
        let mut idx = vec![None; n];
        let inv = pose.inverse();
        for (i, s) in self.surfels.iter().enumerate() {
            if !active[i] {
                continue;
            }
            let p = inv * Point3::from(s.position);
            if p.z <= MIN_DEPTH {
                continue;
            }
            let u = (k.fx * p.x / p.z + k.cx).round();
            let v = (k.fy * p.y / p.z + k.cy).round();
            if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                continue;
            }
            let j = v as usize * k.width + u as usize;
            if p.z < depth[j] {
                depth[j] = p.z;
                idx[j] = Some(i);
            }
        }
        idx
    }

    /// Fuses a full-resolution level observed at `pose` during `frame`.
    pub fn fuse(&mut self, level: &PyramidLevel, pose: &RigidTransform, frame: usize) {
        let k = level.intrinsics;
        let active = self.active_mask(frame);
        let index = self.index_map(pose, &k, &active);
        let cos_max = self.config.fuse_angle_deg.to_radians().cos();
        let gate = self.config.fuse_distance;
        let (w, h) = (k.width, k.height);
        let surfels = &self.surfels;
        let decide = |i: usize| -> Option<(FuseAction, Vec3, Vec3)> {
            if level.depth.data[i] <= 0.0 || !level.has_normal(i) {
                return None;
            }
            let pw = pose * Point3::from(level.vertices[i]);
            let nw = pose.rotation * level.normals[i];
            let (u, v) = ((i % w) as i64, (i / w) as i64);
            let mut best: Option<(usize, f64)> = None;
            for dv in -1..=1 {
                for du in -1..=1 {
                    let (x, y) = (u + du, v + dv);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let Some(j) = index[y as usize * w + x as usize] else {
                        continue;
                    };
                    let s = &surfels[j];
                    let d = (s.position - pw.coords).norm();
                    if d <= gate && s.normal.dot(&nw) >= cos_max && best.is_none_or(|b| d < b.1) {
                        best = Some((j, d));
                    }
                }
            }
            let action = match best {
                Some((j, _)) => FuseAction::Update(j),
                None => FuseAction::Insert,
            };
            Some((action, pw.coords, nw))
        };
        let chunks = map_chunks(self.config.execution, w * h, 4096, |r| {
            r.filter_map(|i| decide(i).map(|a| (i, a)))
                .collect::<Vec<_>>()
        });
        for (i, (action, p, n)) in chunks.into_iter().flatten() {
            let intensity = level.intensity.data[i];
            let d = level.depth.data[i];
            let radius = self.config.radius_scale * d / k.fx;
            match action {
                FuseAction::Update(j) => {
                    let s = &mut self.surfels[j];
                    let c = s.confidence;
                    s.position = (s.position * c + p) / (c + 1.0);
                    s.normal = (s.normal * c + n).normalize();
                    s.intensity = (s.intensity * c + intensity) / (c + 1.0);
                    s.radius = s.radius.min(radius);
                    s.confidence = c + 1.0;
                    s.last_seen = frame;
                }
                FuseAction::Insert => self.surfels.push(Surfel {
                    position: p,
                    normal: n,
                    radius,
                    confidence: 1.0,
                    last_seen: frame,
                    intensity,
                }),
            }
        }
    }

    /// Drops unstable surfels (see `MapConfig::prune_confidence`).
    pub fn prune(&mut self, frame: usize) -> usize {
        if self.config.prune_confidence <= 0.0 {
            return 0;
        }
        let before = self.surfels.len();
        let (c, age) = (self.config.prune_confidence, self.config.prune_age);
        self.surfels
            .retain(|s| s.confidence >= c || frame.saturating_sub(s.last_seen) <= age);
        before - self.surfels.len()
    }

    /// Predicts vertex, normal and intensity maps of the active surfels at
    /// `pose`. Each surfel is splatted over its projected radius, with depth
    /// taken from the ray / surfel-plane intersection.
    pub fn render_model(
        &self,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
        frame: usize,
    ) -> ModelView {
        let active = self.active_mask(frame);
        render_surfels(&self.surfels, Some(&active), pose, k)
    }

    pub fn export_ascii(&self, out: &mut impl Write) -> std::io::Result<()> {
        for s in &self.surfels {
            writeln!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                s.position.x,
                s.position.y,
                s.position.z,
                s.normal.x,
                s.normal.y,
                s.normal.z,
                s.radius,
                s.confidence,
                s.intensity
            )?;
        }
        Ok(())
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.surfels.iter().map(|s| s.position).collect()
    }
}

const MAX_SPLAT: i64 = 3;
/// Depth band (m) behind the front-most splat treated as the same surface.
const SURFACE_TOLERANCE: f64 = 0.02;

pub fn render_surfels(
    surfels: &[Surfel],
    active: Option<&[bool]>,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
) -> ModelView {
    let mut view = ModelView::empty(*pose, *k);
    let n = k.width * k.height;
    let inv = pose.inverse();
    let rot = inv.rotation.to_rotation_matrix().into_inner();
    // calls `f(surfel, pixel, depth, squared pixel distance to the centre)`
    let splat = |f: &mut dyn FnMut(usize, usize, f64, f64)| {
        for (i, s) in surfels.iter().enumerate() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let pc = (inv * Point3::from(s.position)).coords;
            if pc.z <= MIN_DEPTH {
                continue;
            }
            let nc = rot * s.normal;
            let uc = k.fx * pc.x / pc.z + k.cx;
            let vc = k.fy * pc.y / pc.z + k.cy;
            let half = ((s.radius * k.fx / pc.z).floor() as i64).clamp(0, MAX_SPLAT);
            let (u0, v0) = (uc.round() as i64, vc.round() as i64);
            let plane = nc.dot(&pc);
            for v in (v0 - half)..=(v0 + half) {
                if v < 0 || v >= k.height as i64 {
                    continue;
                }
                for u in (u0 - half)..=(u0 + half) {
                    if u < 0 || u >= k.width as i64 {
                        continue;
                    }
                    let ray = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                    let denom = nc.dot(&ray);
                    let z = if denom.abs() >= 0.3 * ray.norm() {
                        plane / denom
                    } else if (u, v) == (u0, v0) {
                        pc.z
                    } else {
                        continue;
                    };
                    if !(z > MIN_DEPTH) || (z - pc.z).abs() > 2.0 * s.radius.max(1e-3) + 0.01 {
                        continue;
                    }
                    let d2 = (u as f64 - uc).powi(2) + (v as f64 - vc).powi(2);
                    f(i, v as usize * k.width + u as usize, z, d2);
                }
            }
        }
    };
    // front surface per pixel, then the splat centred nearest to the pixel
    // among those lying on it; a plain depth test favours splats tilted
    // towards the camera and biases the prediction
    let mut front = vec![f64::INFINITY; n];
    splat(&mut |_, j, z, _| front[j] = front[j].min(z));
    let mut zbuf = vec![f64::INFINITY; n];
    let mut best = vec![f64::INFINITY; n];
    let mut owner = vec![usize::MAX; n];
    splat(&mut |i, j, z, d2| {
        if z <= front[j] + SURFACE_TOLERANCE && (d2 < best[j] || (d2 == best[j] && z < zbuf[j])) {
            best[j] = d2;
            zbuf[j] = z;
            owner[j] = i;
        }
    });
    for j in 0..n {
        if owner[j] == usize::MAX {
            continue;
        }
        let s = &surfels[owner[j]];
        let z = zbuf[j];
        let (u, v) = ((j % k.width) as f64, (j / k.width) as f64);
        let pc = Vec3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
        view.vertices[j] = (pose * Point3::from(pc)).coords;
        view.normals[j] = s.normal;
        view.intensity[j] = s.intensity;
        view.depth[j] = z;
    }
    view
}
