//! Analytic scenes: ray casting for rendering and nearest-surface distance
//! for reconstruction error.

use crate::camera::{CameraIntrinsics, Frame, Image};
use crate::manifold::{RigidTransform, Vec3};
use crate::par::{map_chunks, Execution};

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Rectangle spanned by unit axes `u`, `v` with half extents.
    Rect {
        center: Vec3,
        u: Vec3,
        v: Vec3,
        half_u: f64,
        half_v: f64,
    },
    /// Solid axis-aligned box.
    Cuboid {
        center: Vec3,
        half: Vec3,
    },
    Sphere {
        center: Vec3,
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    pub amplitude: f64,
    /// Wave vector (rad/m).
    pub k: Vec3,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Uniform(f64),
    /// Sum of plane waves evaluated at the world point.
    Waves {
        base: f64,
        waves: Vec<Wave>,
    },
    /// 3-D checkerboard with cell size `size`.
    Checker {
        size: f64,
        low: f64,
        high: f64,
    },
}

impl Texture {
    pub fn at(&self, p: &Vec3) -> f64 {
        let v = match self {
            Texture::Uniform(c) => *c,
            Texture::Waves { base, waves } => {
                base + waves
                    .iter()
                    .map(|w| w.amplitude * (w.k.dot(p) + w.phase).sin())
                    .sum::<f64>()
            }
            Texture::Checker { size, low, high } => {
                let s = (p / *size).map(|x| x.floor() as i64);
                if (s.x + s.y + s.z).rem_euclid(2) == 0 {
                    *low
                } else {
                    *high
                }
            }
        };
        v.clamp(0.0, 255.0)
    }

    /// Smooth sinusoidal texture from a compact seed: three waves with
    /// wavelengths 0.2, 0.35 and 0.6 m in seed-dependent directions.
    pub fn waves_from(seed: u32, base: f64, amplitude: f64) -> Texture {
        let dirs = [
            Vec3::new(1.0, 0.3, 0.7),
            Vec3::new(-0.4, 1.0, 0.5),
            Vec3::new(0.6, -0.8, 1.0),
            Vec3::new(0.9, 0.9, -0.3),
        ];
        let lambdas = [0.2, 0.35, 0.6];
        let waves = lambdas
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let d = dirs[(seed as usize + i) % dirs.len()].normalize();
                Wave {
                    amplitude: amplitude / (1.0 + i as f64 * 0.3),
                    k: d * (2.0 * std::f64::consts::PI / l),
                    phase: 0.7 * seed as f64 + 1.3 * i as f64,
                }
            })
            .collect();
        Texture::Waves { base, waves }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    pub low_texture: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneModel {
    pub primitives: Vec<Primitive>,
}

/// Ray `o + t d` hit with parameter `t > 0`.
pub fn intersect(shape: &Shape, o: &Vec3, d: &Vec3) -> Option<f64> {
    const EPS: f64 = 1e-12;
    match shape {
        Shape::Rect {
            center,
            u,
            v,
            half_u,
            half_v,
        } => {
            let n = u.cross(v);
            let denom = n.dot(d);
            if denom.abs() < EPS {
                return None;
            }
            let t = n.dot(&(center - o)) / denom;
            if t <= EPS {
                return None;
            }
            let q = o + d * t - center;
            (q.dot(u).abs() <= *half_u && q.dot(v).abs() <= *half_v).then_some(t)
        }
        Shape::Cuboid { center, half } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for a in 0..3 {
                let lo = center[a] - half[a] - o[a];
                let hi = center[a] + half[a] - o[a];
                if d[a].abs() < EPS {
                    if lo > 0.0 || hi < 0.0 {
                        return None;
                    }
                    continue;
                }
                let (mut a0, mut a1) = (lo / d[a], hi / d[a]);
                if a0 > a1 {
                    std::mem::swap(&mut a0, &mut a1);
                }
                t0 = t0.max(a0);
                t1 = t1.min(a1);
            }
            (t0 <= t1 && t0 > EPS).then_some(t0)
        }
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let a = d.dot(d);
            let b = oc.dot(d);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            // numerically stable roots
            let q = if b > 0.0 { -(b + sq) } else { -b + sq };
            let (r0, r1) = if q != 0.0 { (q / a, c / q) } else { (0.0, 0.0) };
            let (lo, hi) = if r0 < r1 { (r0, r1) } else { (r1, r0) };
            if lo > EPS {
                Some(lo)
            } else if hi > EPS {
                Some(hi)
            } else {
                None
            }
        }
    }
}

/// Unsigned distance from `p` to the surface of `shape`.
pub fn surface_distance(shape: &Shape, p: &Vec3) -> f64 {
    match shape {
        Shape::Rect {
            center,
            u,
            v,
            half_u,
            half_v,
        } => {
            let q = p - center;
            let n = u.cross(v);
            let a = (q.dot(u).abs() - half_u).max(0.0);
            let b = (q.dot(v).abs() - half_v).max(0.0);
            (a * a + b * b + q.dot(&n).powi(2)).sqrt()
        }
        Shape::Cuboid { center, half } => {
            let q = (p - center).abs() - half;
            let outside = q.map(|x| x.max(0.0)).norm();
            if outside > 0.0 {
                outside
            } else {
                -q.max()
            }
        }
        Shape::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
    }
}

impl SceneModel {
    pub fn push(&mut self, shape: Shape, texture: Texture) {
        let low_texture = matches!(texture, Texture::Uniform(_));
        self.primitives.push(Primitive {
            shape,
            texture,
            low_texture,
        });
    }

    /// Nearest hit: `(t, primitive index)`.
    pub fn cast(&self, o: &Vec3, d: &Vec3) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = intersect(&p.shape, o, d) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|q| surface_distance(&q.shape, p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Noise-free frame seen from `pose` (scene-from-camera). Depth is the
    /// camera-z of the nearest hit; misses give depth 0 and intensity 0.
    pub fn render(
        &self,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
        timestamp: f64,
        exec: Execution,
    ) -> Frame {
        let (w, h) = (k.width, k.height);
        let o = pose.translation.vector;
        let rows = map_chunks(exec, h, 8, |range| {
            let mut out = Vec::with_capacity(range.len() * w);
            for v in range {
                for u in 0..w {
                    let ray_c = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                    let d = pose.rotation * ray_c;
                    match self.cast(&o, &d) {
                        Some((t, i)) => {
                            let p = o + d * t;
                            out.push((t, self.primitives[i].texture.at(&p)));
                        }
                        None => out.push((0.0, 0.0)),
                    }
                }
            }
            out
        });
        let px: Vec<(f64, f64)> = rows.into_iter().flatten().collect();
        let depth = Image {
            width: w,
            height: h,
            data: px.iter().map(|p| p.0).collect(),
        };
        let intensity = Image {
            width: w,
            height: h,
            data: px.iter().map(|p| p.1).collect(),
        };
        Frame {
            timestamp,
            intensity,
            depth,
        }
    }

    /// Scene point seen at pixel `(u, v)`, if any.
    pub fn point_at(
        &self,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
        u: f64,
        v: f64,
    ) -> Option<Vec3> {
        let d = pose.rotation * Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let o = pose.translation.vector;
        self.cast(&o, &d).map(|(t, _)| o + d * t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{exp_rotation, make_transform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::kinect_like(160, 120)
    }

    fn wall(z: f64) -> SceneModel {
        let mut s = SceneModel::default();
        s.push(
            Shape::Rect {
                center: Vec3::new(0.0, 0.0, z),
                u: Vec3::x(),
                v: Vec3::y(),
                half_u: 50.0,
                half_v: 50.0,
            },
            Texture::Uniform(128.0),
        );
        s
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let f = wall(2.0).render(
            &RigidTransform::identity(),
            &k(),
            0.0,
            Execution::Sequential,
        );
        assert!(f.depth.data.iter().all(|d| (*d - 2.0).abs() < 1e-12));
        assert!(f.intensity.data.iter().all(|i| *i == 128.0));
    }

    #[test]
    fn empty_half_space_is_invalid() {
        let back = make_transform(
            exp_rotation(&Vec3::new(0.0, std::f64::consts::PI, 0.0)),
            Vec3::zeros(),
        );
        let f = wall(2.0).render(&back, &k(), 0.0, Execution::Sequential);
        assert!(f.depth.data.iter().all(|d| *d == 0.0));
        assert!(f.intensity.data.iter().all(|i| *i == 0.0));
    }

    #[test]
    fn sphere_depth_matches_analytic_intersection() {
        let c = Vec3::new(0.1, -0.05, 2.0);
        let r = 0.5;
        let mut s = SceneModel::default();
        s.push(
            Shape::Sphere {
                center: c,
                radius: r,
            },
            Texture::Uniform(50.0),
        );
        let kk = k();
        let f = s.render(&RigidTransform::identity(), &kk, 0.0, Execution::Sequential);
        let mut hits = 0;
        for v in 0..kk.height {
            for u in 0..kk.width {
                let d = Vec3::new((u as f64 - kk.cx) / kk.fx, (v as f64 - kk.cy) / kk.fy, 1.0);
                // |t d − c|² = r², smallest root, in closed form
                let a = d.norm_squared();
                let b = -2.0 * d.dot(&c);
                let cc = c.norm_squared() - r * r;
                let disc = b * b - 4.0 * a * cc;
                let got = f.depth.at(u, v);
                if disc < 0.0 {
                    assert_eq!(got, 0.0);
                } else {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    assert!((got - t).abs() < 1e-9);
                    hits += 1;
                }
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn cuboid_hits_front_face() {
        let shape = Shape::Cuboid {
            center: Vec3::new(0.0, 0.0, 3.0),
            half: Vec3::new(0.5, 0.5, 0.5),
        };
        assert_eq!(intersect(&shape, &Vec3::zeros(), &Vec3::z()), Some(2.5));
        assert_eq!(intersect(&shape, &Vec3::zeros(), &-Vec3::z()), None);
        assert!((surface_distance(&shape, &Vec3::new(0.0, 0.0, 3.0)) - 0.5).abs() < 1e-15);
        assert!((surface_distance(&shape, &Vec3::new(0.0, 0.0, 1.0)) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn distance_matches_brute_force_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Shape::Rect {
            center: Vec3::new(0.0, 0.0, 1.0),
            u: Vec3::x(),
            v: Vec3::y(),
            half_u: 1.0,
            half_v: 0.5,
        };
        for _ in 0..20 {
            let p = Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            let mut best = f64::INFINITY;
            for i in 0..=400 {
                for j in 0..=200 {
                    let q = Vec3::new(-1.0 + i as f64 * 0.005, -0.5 + j as f64 * 0.005, 1.0);
                    best = best.min((p - q).norm());
                }
            }
            assert!((surface_distance(&shape, &p) - best).abs() < 5e-3);
        }
    }

    #[test]
    fn textures_are_bounded() {
        let t = Texture::waves_from(3, 128.0, 90.0);
        let c = Texture::Checker {
            size: 0.1,
            low: 20.0,
            high: 220.0,
        };
        for i in 0..1000 {
            let p = Vec3::new(i as f64 * 0.013, -(i as f64) * 0.007, 0.3);
            let v = t.at(&p);
            assert!((0.0..=255.0).contains(&v));
            assert!([20.0, 220.0].contains(&c.at(&p)));
        }
    }
}
