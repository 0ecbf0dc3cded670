use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::{CameraIntrinsics, Frame};
use crate::residuals::SensorNoise;

/// Random stream for frame `index` of a run seeded with `seed`.
pub fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Adds intensity noise (clamped to [0, 255]) and disparity-domain depth
/// noise `d' = f_b / (f_b / d + n)`, `n ~ N(0, σ_disp_eff)`.
pub fn add_image_noise(
    frame: &Frame,
    noise: &SensorNoise,
    k: &CameraIntrinsics,
    rng: &mut ChaCha8Rng,
) -> Frame {
    let mut out = frame.clone();
    let si = noise.intensity_sigma;
    let sd = noise.effective_disparity_sigma();
    let fb = noise.focal_baseline(k);
    if si > 0.0 {
        for v in &mut out.intensity.data {
            let n: f64 = StandardNormal.sample(rng);
            *v = (*v + si * n).clamp(0.0, 255.0);
        }
    }
    if sd > 0.0 {
        for d in &mut out.depth.data {
            if *d > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                let disparity = fb / *d + sd * n;
                *d = if disparity > 0.0 { fb / disparity } else { 0.0 };
            }
        }
    }
    out
}
