//! The shipped scene suite and its camera trajectories. Scenes live in a
//! z-up frame aligned with gravity; cameras look along +z with y down.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::manifold::{make_transform, Mat3, Quat, RigidTransform, Vec3};

use super::scene::{SceneModel, Shape, Texture};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanonicalScene {
    /// Furnished textured room, gentle hand-held motion.
    Room,
    /// Same room with one uniform wall that the camera faces up close.
    WhiteWall,
    /// White-wall scene with a longer, translating dwell at the wall.
    WhiteWallLong,
    /// Textured room with fast motion.
    FastRoom,
    /// Corridor looping around a central block; the path revisits its start.
    LoopCorridor,
    /// Long straight corridor.
    LongCorridor,
}

pub const SCENE_NAMES: [&str; 6] = [
    "room",
    "white_wall",
    "white_wall_long",
    "fast_room",
    "loop_corridor",
    "long_corridor",
];

impl FromStr for CanonicalScene {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "room" => CanonicalScene::Room,
            "white_wall" => CanonicalScene::WhiteWall,
            "white_wall_long" => CanonicalScene::WhiteWallLong,
            "fast_room" => CanonicalScene::FastRoom,
            "loop_corridor" => CanonicalScene::LoopCorridor,
            "long_corridor" => CanonicalScene::LongCorridor,
            _ => {
                return Err(Error::Unknown {
                    kind: "scene",
                    name: s.to_string(),
                })
            }
        })
    }
}

impl std::fmt::Display for CanonicalScene {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let i = match self {
            CanonicalScene::Room => 0,
            CanonicalScene::WhiteWall => 1,
            CanonicalScene::WhiteWallLong => 2,
            CanonicalScene::FastRoom => 3,
            CanonicalScene::LoopCorridor => 4,
            CanonicalScene::LongCorridor => 5,
        };
        f.write_str(SCENE_NAMES[i])
    }
}

fn rect(center: Vec3, u: Vec3, v: Vec3, half_u: f64, half_v: f64) -> Shape {
    Shape::Rect {
        center,
        u,
        v,
        half_u,
        half_v,
    }
}

/// Axis-aligned box interior as six inward-visible rectangles (floor,
/// ceiling, −x, +x, −y, +y), textured by `tex(i)`.
fn shell(scene: &mut SceneModel, min: Vec3, max: Vec3, tex: impl Fn(usize) -> Texture) {
    let c = (min + max) / 2.0;
    let h = (max - min) / 2.0;
    let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
    let walls = [
        rect(Vec3::new(c.x, c.y, min.z), x, y, h.x, h.y),
        rect(Vec3::new(c.x, c.y, max.z), x, y, h.x, h.y),
        rect(Vec3::new(min.x, c.y, c.z), y, z, h.y, h.z),
        rect(Vec3::new(max.x, c.y, c.z), y, z, h.y, h.z),
        rect(Vec3::new(c.x, min.y, c.z), x, z, h.x, h.z),
        rect(Vec3::new(c.x, max.y, c.z), x, z, h.x, h.z),
    ];
    for (i, w) in walls.into_iter().enumerate() {
        scene.push(w, tex(i));
    }
}

fn room(white_wall: bool) -> SceneModel {
    let mut s = SceneModel::default();
    shell(
        &mut s,
        Vec3::new(-2.5, -2.0, 0.0),
        Vec3::new(2.5, 2.0, 2.6),
        |i| {
            if white_wall && i == 3 {
                Texture::Uniform(200.0)
            } else {
                Texture::waves_from(i as u32, 125.0, 60.0)
            }
        },
    );
    s.push(
        Shape::Cuboid {
            center: Vec3::new(1.2, 1.2, 0.4),
            half: Vec3::new(0.5, 0.4, 0.4),
        },
        Texture::waves_from(7, 110.0, 55.0),
    );
    s.push(
        Shape::Cuboid {
            center: Vec3::new(-1.8, -1.3, 0.7),
            half: Vec3::new(0.4, 0.5, 0.7),
        },
        Texture::waves_from(8, 140.0, 55.0),
    );
    s.push(
        Shape::Sphere {
            center: Vec3::new(-1.5, 1.2, 1.0),
            radius: 0.35,
        },
        Texture::waves_from(9, 100.0, 50.0),
    );
    s.push(
        Shape::Sphere {
            center: Vec3::new(1.6, -1.4, 0.9),
            radius: 0.3,
        },
        Texture::waves_from(10, 150.0, 50.0),
    );
    s
}

fn loop_corridor() -> SceneModel {
    let mut s = SceneModel::default();
    shell(
        &mut s,
        Vec3::new(-3.0, -2.0, 0.0),
        Vec3::new(3.0, 2.0, 2.5),
        |i| Texture::waves_from(i as u32 + 11, 125.0, 60.0),
    );
    s.push(
        Shape::Cuboid {
            center: Vec3::new(0.0, 0.0, 1.25),
            half: Vec3::new(1.5, 0.6, 1.25),
        },
        Texture::waves_from(20, 120.0, 60.0),
    );
    s
}

fn long_corridor() -> SceneModel {
    let mut s = SceneModel::default();
    shell(
        &mut s,
        Vec3::new(-1.0, -1.0, 0.0),
        Vec3::new(14.0, 1.0, 2.5),
        |i| Texture::waves_from(i as u32 + 21, 125.0, 60.0),
    );
    s
}

/// Quintic smoothstep on [0, 1].
fn smooth(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)
}

/// Camera orientation (scene-from-camera) looking along yaw / pitch with
/// roll about the optical axis.
pub fn look(yaw: f64, pitch: f64, roll: f64) -> Quat {
    let f = Vec3::new(
        pitch.cos() * yaw.cos(),
        pitch.cos() * yaw.sin(),
        pitch.sin(),
    );
    let x = f.cross(&Vec3::z()).normalize();
    let y = f.cross(&x);
    let base = Mat3::from_columns(&[x, y, f]);
    let (s, c) = roll.sin_cos();
    let r_roll = Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    Quat::from_matrix(&(base * r_roll))
}

/// Pose parameters: position, yaw, pitch, roll.
type PoseParams = (Vec3, f64, f64, f64);

fn ramped(t: f64, raw: impl Fn(f64) -> PoseParams) -> PoseParams {
    let r = smooth(t / 2.0);
    let (p0, y0, pi0, r0) = raw(0.0);
    let (p, y, pi, ro) = raw(t);
    (
        p0 + (p - p0) * r,
        y0 + (y - y0) * r,
        pi0 + (pi - pi0) * r,
        r0 + (ro - r0) * r,
    )
}

fn room_motion(t: f64, speed: f64) -> PoseParams {
    let s = t * speed;
    (
        Vec3::new(
            0.3 + 0.5 * (0.31 * s).sin() + 0.15 * (0.83 * s + 0.5).sin(),
            0.5 * (0.23 * s + 0.3).sin() + 0.1 * (0.97 * s).sin(),
            1.3 + 0.15 * (0.41 * s + 1.0).sin(),
        ),
        0.8 * (0.17 * s).sin() + 0.3 * (0.53 * s + 0.2).sin(),
        -0.15 + 0.1 * (0.37 * s).sin(),
        0.08 * (0.29 * s).sin(),
    )
}

/// Starts facing the textured +y wall, turns to face the white +x wall from
/// 0.9 m, dwells, then turns back.
fn white_wall_motion(t: f64, dwell: f64, sweep: f64) -> PoseParams {
    let base = |t: f64| -> PoseParams {
        (
            Vec3::new(
                0.2 + 0.2 * (0.4 * t).sin(),
                0.3 * (0.3 * t).sin(),
                1.3 + 0.1 * (0.5 * t).sin(),
            ),
            1.3 + 0.25 * (0.45 * t).sin(),
            -0.1 + 0.08 * (0.6 * t).sin(),
            0.05 * (0.35 * t).sin(),
        )
    };
    let (arrive, leave) = (4.0, 6.0 + dwell);
    let a = smooth((t - arrive) / 2.0) - smooth((t - leave) / 2.0);
    let (bp, by, bpi, br) = base(t);
    let dwell_t = (t - arrive - 2.0).max(0.0);
    let wall_p = Vec3::new(
        1.6,
        sweep * (0.6 * dwell_t).sin(),
        1.3 + 0.05 * (0.9 * t).sin(),
    );
    let wall_yaw = 0.05 * (0.7 * t).sin();
    (
        bp + (wall_p - bp) * a,
        by + (wall_yaw - by) * a,
        bpi * (1.0 - a),
        br * (1.0 - a),
    )
}

fn loop_motion(t: f64) -> PoseParams {
    let omega = 2.0 * std::f64::consts::PI / 22.0;
    let th = -std::f64::consts::FRAC_PI_2 + omega * t;
    let p = Vec3::new(2.2 * th.cos(), 1.3 * th.sin(), 1.3 + 0.05 * (0.7 * t).sin());
    // tangent direction, turned slightly towards the outer wall
    let tangent = Vec3::new(-2.2 * th.sin(), 1.3 * th.cos(), 0.0);
    let yaw = tangent.y.atan2(tangent.x) - 0.45;
    (
        p,
        yaw,
        -0.1 + 0.05 * (0.5 * t).sin(),
        0.04 * (0.3 * t).sin(),
    )
}

fn corridor_motion(t: f64) -> PoseParams {
    let x = 0.5 * t;
    (
        Vec3::new(x, 0.2 * (0.5 * t).sin(), 1.3 + 0.05 * (0.8 * t).sin()),
        0.3 * (0.35 * t).sin(),
        -0.05 + 0.05 * (0.6 * t).sin(),
        0.03 * (0.4 * t).sin(),
    )
}

impl CanonicalScene {
    pub fn model(self) -> SceneModel {
        match self {
            CanonicalScene::Room | CanonicalScene::FastRoom => room(false),
            CanonicalScene::WhiteWall | CanonicalScene::WhiteWallLong => room(true),
            CanonicalScene::LoopCorridor => loop_corridor(),
            CanonicalScene::LongCorridor => long_corridor(),
        }
    }

    /// Default sequence length in seconds.
    pub fn default_duration(self) -> f64 {
        match self {
            CanonicalScene::Room => 30.0,
            CanonicalScene::WhiteWall => 14.0,
            CanonicalScene::WhiteWallLong => 18.0,
            CanonicalScene::FastRoom => 15.0,
            CanonicalScene::LoopCorridor => 26.0,
            CanonicalScene::LongCorridor => 20.0,
        }
    }

    /// True camera pose (scene-from-camera) at time `t`.
    pub fn pose(self, t: f64) -> RigidTransform {
        let (p, yaw, pitch, roll) = match self {
            CanonicalScene::Room => ramped(t, |s| room_motion(s, 1.0)),
            CanonicalScene::FastRoom => ramped(t, |s| room_motion(s, 2.2)),
            CanonicalScene::WhiteWall => ramped(t, |s| white_wall_motion(s, 2.0, 0.1)),
            CanonicalScene::WhiteWallLong => ramped(t, |s| white_wall_motion(s, 6.0, 0.4)),
            CanonicalScene::LoopCorridor => ramped(t, loop_motion),
            CanonicalScene::LongCorridor => ramped(t, corridor_motion),
        };
        make_transform(look(yaw, pitch, roll), p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraIntrinsics;
    use crate::par::Execution;

    #[test]
    fn names_round_trip() {
        for n in SCENE_NAMES {
            assert_eq!(n.parse::<CanonicalScene>().unwrap().to_string(), n);
        }
        assert!("garden".parse::<CanonicalScene>().is_err());
    }

    #[test]
    fn look_convention() {
        let q = look(0.0, 0.0, 0.0);
        assert!((q * Vec3::z() - Vec3::x()).norm() < 1e-12);
        assert!((q * Vec3::y() - -Vec3::z()).norm() < 1e-12);
        assert!((q * Vec3::x() - -Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn trajectories_stay_inside_and_see_valid_depth() {
        let k = CameraIntrinsics::kinect_like(80, 60);
        for name in SCENE_NAMES {
            let s: CanonicalScene = name.parse().unwrap();
            let model = s.model();
            let mut t = 0.0;
            while t < s.default_duration() {
                let pose = s.pose(t);
                let f = model.render(&pose, &k, t, Execution::Sequential);
                let valid = f.depth.data.iter().filter(|d| **d > 0.3).count();
                assert!(
                    valid as f64 > 0.8 * f.depth.data.len() as f64,
                    "{name} at {t}"
                );
                t += 0.5;
            }
        }
    }

    #[test]
    fn white_wall_dwell_sees_only_the_wall() {
        let k = CameraIntrinsics::kinect_like(160, 120);
        for s in [CanonicalScene::WhiteWall, CanonicalScene::WhiteWallLong] {
            let model = s.model();
            let f = model.render(&s.pose(8.0), &k, 8.0, Execution::Sequential);
            assert!(f.intensity.data.iter().all(|i| *i == 200.0), "{s}");
        }
    }

    #[test]
    fn starts_at_rest() {
        for name in SCENE_NAMES {
            let s: CanonicalScene = name.parse().unwrap();
            let a = s.pose(0.0).translation.vector;
            let b = s.pose(0.05).translation.vector;
            assert!((b - a).norm() < 1e-3, "{name}");
        }
    }
}
