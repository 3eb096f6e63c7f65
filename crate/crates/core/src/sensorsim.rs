//! Sparse, noisy depth-sensor simulation and semi-dense supervision built by
//! aggregating sparse depth across neighboring frames.

use nalgebra::Vector2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{warp_pixel, CameraIntrinsics, Se3Transform};
use crate::imaging::{DepthMap, SparseDepth};

/// Corrupted depth values are clamped here: the proportional Gaussian can
/// produce non-positive depth at high noise levels, which would invalidate
/// the depth-map positivity contract.
pub const MIN_DEPTH_M: f64 = 1e-3;

/// Multiplicative Gaussian noise (sigma = depth * f) plus Bernoulli pixel
/// retention.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Noise level: sigma at a pixel is `depth * f`.
    pub f: f64,
    /// Probability that a pixel is retained.
    pub sample_rate: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(f: f64, sample_rate: f64, seed: u64) -> Result<Self> {
        if f < 0.0 || f.is_nan() {
            return Err(Error::InvalidValue(format!("noise level f must be >= 0, got {f}")));
        }
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "sample_rate must be in (0, 1], got {sample_rate}"
            )));
        }
        Ok(NoiseModel { f, sample_rate, seed })
    }
}

/// Simulate a sparse, noisy sensor reading of a dense depth map.
///
/// Each pixel is retained independently with probability `sample_rate`;
/// retained pixels get `depth + eps` with `eps ~ N(0, (depth * f)^2)`,
/// clamped below at [`MIN_DEPTH_M`]. Bit-reproducible for a fixed seed.
pub fn corrupt_depth(depth: &DepthMap, model: &NoiseModel) -> SparseDepth {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let (w, h) = (depth.width(), depth.height());
    let mut out = SparseDepth::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if rng.random::<f64>() >= model.sample_rate {
                continue;
            }
            let d = depth.at(x, y);
            let z: f64 = rng.sample(StandardNormal);
            let noisy = d + d * model.f * z;
            out.set(x, y, noisy.max(MIN_DEPTH_M));
        }
    }
    out
}

/// Aggregate sparse depth from several frames into the key frame's grid.
///
/// `frames` pairs each sparse map with its camera-to-world pose. Every valid
/// point of every neighbor is reprojected into the key frame and splatted to
/// the nearest pixel; conflicts keep the smallest depth (occlusion-safe),
/// and the key frame's own measurements always win.
pub fn aggregate_supervision(
    frames: &[(SparseDepth, Se3Transform)],
    key_index: usize,
    k: &CameraIntrinsics,
) -> Result<SparseDepth> {
    if frames.is_empty() {
        return Err(Error::InvalidValue("aggregation needs at least one frame".into()));
    }
    if key_index >= frames.len() {
        return Err(Error::InvalidValue(format!(
            "key index {key_index} out of range for {} frames",
            frames.len()
        )));
    }
    let (key_sparse, key_pose) = &frames[key_index];
    let (w, h) = (key_sparse.width(), key_sparse.height());

    let mut out = key_sparse.clone();
    let locked = key_sparse.valid().to_vec();

    let world_to_key = key_pose.inverse();
    for (j, (sparse, pose)) in frames.iter().enumerate() {
        if j == key_index {
            continue;
        }
        if sparse.width() != w || sparse.height() != h {
            return Err(Error::DimensionMismatch {
                context: "aggregation frame",
                left: format!("{}x{}", sparse.width(), sparse.height()),
                right: format!("{w}x{h}"),
            });
        }
        let t_j_to_key = world_to_key.compose(pose);
        for y in 0..h {
            for x in 0..w {
                let Some(d) = sparse.at(x, y) else { continue };
                let u = Vector2::new(x as f64, y as f64);
                let (pix, valid) = warp_pixel(k, &t_j_to_key, d, &u);
                if !valid {
                    continue;
                }
                let px = pix.x.round() as usize;
                let py = pix.y.round() as usize;
                if px >= w || py >= h || locked[py * w + px] {
                    continue;
                }
                let p = k.ray_direction(&u) * d;
                let z_key = t_j_to_key.transform_point(&p).z;
                if z_key <= 0.0 {
                    continue;
                }
                match out.at(px, py) {
                    Some(existing) if existing <= z_key => {}
                    _ => out.set(px, py, z_key),
                }
            }
        }
    }
    Ok(out)
}
