//! Trajectory and reconstruction metrics, TUM trajectory files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::manifold::{make_transform, Quat, RigidTransform, State, Vec3};
use crate::synth::SceneModel;

/// Nearest-timestamp association gate (s).
pub const ASSOCIATION_GATE: f64 = 0.02;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub poses: Vec<RigidTransform>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<RigidTransform>) -> Result<Self> {
        if timestamps.len() != poses.len() {
            return Err(Error::Mismatch(format!(
                "{} timestamps for {} poses",
                timestamps.len(),
                poses.len()
            )));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Mismatch(
                "trajectory timestamps must increase".into(),
            ));
        }
        Ok(Trajectory { timestamps, poses })
    }

    pub fn from_states(timestamps: &[f64], states: &[State]) -> Result<Self> {
        Self::new(
            timestamps.to_vec(),
            states.iter().map(|s| s.pose()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.poses.iter().map(|p| p.translation.vector).collect()
    }

    pub fn transformed(&self, t: &RigidTransform) -> Trajectory {
        Trajectory {
            timestamps: self.timestamps.clone(),
            poses: self.poses.iter().map(|p| t * p).collect(),
        }
    }

    /// Parses the TUM format `timestamp tx ty tz qx qy qz qw`.
    pub fn from_tum(text: &str, path: &Path) -> Result<Self> {
        let mut ts = Vec::new();
        let mut poses = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
            if v.len() != 8 {
                return Err(Error::parse(
                    path,
                    n + 1,
                    format!("expected 8 fields, found {}", v.len()),
                ));
            }
            let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
            if !(q.norm() > 0.0) {
                return Err(Error::parse(path, n + 1, "zero quaternion"));
            }
            ts.push(v[0]);
            poses.push(make_transform(
                Quat::from_quaternion(q),
                Vec3::new(v[1], v[2], v[3]),
            ));
        }
        Trajectory::new(ts, poses).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn read_tum(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tum(&text, path)
    }

    pub fn to_tum(&self) -> String {
        let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for (t, p) in self.timestamps.iter().zip(&self.poses) {
            let x = p.translation.vector;
            let q = p.rotation.coords;
            writeln!(
                s,
                "{t:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                x.x, x.y, x.z, q.x, q.y, q.z, q.w
            )
            .unwrap();
        }
        s
    }
}

/// Index pairs (estimate, truth) matched by nearest timestamp within `gate`.
pub fn associate(estimate: &Trajectory, truth: &Trajectory, gate: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if truth.is_empty() {
        return out;
    }
    let mut j = 0;
    for (i, &t) in estimate.timestamps.iter().enumerate() {
        while j + 1 < truth.len()
            && (truth.timestamps[j + 1] - t).abs() <= (truth.timestamps[j] - t).abs()
        {
            j += 1;
        }
        if (truth.timestamps[j] - t).abs() <= gate {
            out.push((i, j));
        }
    }
    out
}

/// Least-squares rigid transform `T` minimizing Σ‖T·src − dst‖².
pub fn align_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::Mismatch(format!(
            "{} vs {} points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientOverlap { matched: src.len() });
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vec3>() / n;
    let md = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * vt;
    let q = Quat::from_matrix(&r);
    Ok(make_transform(q, md - q * ms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub matched: usize,
    /// Maps the estimate onto the truth.
    pub alignment: RigidTransform,
}

pub fn ate(estimate: &Trajectory, truth: &Trajectory) -> Result<AteReport> {
    let pairs = associate(estimate, truth, ASSOCIATION_GATE);
    if pairs.len() < 3 {
        return Err(Error::InsufficientOverlap {
            matched: pairs.len(),
        });
    }
    let src: Vec<Vec3> = pairs
        .iter()
        .map(|&(i, _)| estimate.poses[i].translation.vector)
        .collect();
    let dst: Vec<Vec3> = pairs
        .iter()
        .map(|&(_, j)| truth.poses[j].translation.vector)
        .collect();
    let alignment = align_rigid(&src, &dst)?;
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (alignment * nalgebra::Point3::from(*s)).coords - d)
        .map(|e| e.norm_squared())
        .sum();
    Ok(AteReport {
        rmse: (sq / src.len() as f64).sqrt(),
        matched: src.len(),
        alignment,
    })
}

pub fn ate_rmse(estimate: &Trajectory, truth: &Trajectory) -> Result<f64> {
    Ok(ate(estimate, truth)?.rmse)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

/// Mean unsigned distance of map points to the nearest scene surface.
/// `scene_from_map` is the full chain from map coordinates to the scene
/// (typically `scene_from_world · ate_alignment`).
pub fn reconstruction_error(
    points: &[Vec3],
    scene: &SceneModel,
    scene_from_map: &RigidTransform,
) -> Result<ReconstructionReport> {
    if points.is_empty() {
        return Err(Error::EmptyMap);
    }
    let mut d: Vec<f64> = points
        .iter()
        .map(|p| scene.distance(&(scene_from_map * nalgebra::Point3::from(*p)).coords))
        .collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    Ok(ReconstructionReport {
        mean,
        median: d[d.len() / 2],
        count: d.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftPoint {
    pub distance: f64,
    pub error: f64,
}

/// Position error against distance travelled along the truth, with the
/// first associated estimate pose registered onto its truth pose.
pub fn drift_curve(estimate: &Trajectory, truth: &Trajectory) -> Vec<DriftPoint> {
    let pairs = associate(estimate, truth, ASSOCIATION_GATE);
    let Some(&(i0, j0)) = pairs.first() else {
        return Vec::new();
    };
    let register = truth.poses[j0] * estimate.poses[i0].inverse();
    let mut out = Vec::with_capacity(pairs.len());
    let mut travelled = 0.0;
    let mut last = truth.poses[j0].translation.vector;
    for &(i, j) in &pairs {
        let p = truth.poses[j].translation.vector;
        travelled += (p - last).norm();
        last = p;
        let e = (register * estimate.poses[i]).translation.vector - p;
        out.push(DriftPoint {
            distance: travelled,
            error: e.norm(),
        });
    }
    out
}

/// Tracking-failure rule: ATE above 1 m or a raised solver/degeneracy flag.
pub fn is_failure(ate: Option<f64>, flagged: bool) -> bool {
    flagged || ate.is_none_or(|a| !(a <= 1.0))
}
