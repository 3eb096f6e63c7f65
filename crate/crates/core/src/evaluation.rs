//! Trajectory metrics (ATE, RE), depth-completion metrics (RMSE, MAE,
//! iRMSE, iMAE), the average-photometric-loss comparator, and the
//! nearest-neighbor interpolation baseline.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Se3Transform};
use crate::imaging::{build_pyramid, DepthMap, IntensityImage, SparseDepth};
use crate::losses::{photometric_residual_with_grad, unmasked_photometric, IndicatorMode};

/// Default timestamp-association window in seconds (TUM tooling convention).
pub const DEFAULT_MAX_ASSOC_OFFSET_S: f64 = 0.02;

/// Timestamped camera-to-world poses, strictly increasing in time.
#[derive(Debug, Clone)]
pub struct Trajectory {
    entries: Vec<(f64, Se3Transform)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Se3Transform)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidValue(format!(
                    "trajectory timestamps must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(Trajectory { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, Se3Transform)] {
        &self.entries
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    pub fn poses(&self) -> impl Iterator<Item = &Se3Transform> {
        self.entries.iter().map(|(_, p)| p)
    }

    /// Apply a fixed rigid transform to every pose (left-multiplication in
    /// the world frame).
    pub fn rigidly_transformed(&self, t: &Se3Transform) -> Trajectory {
        Trajectory {
            entries: self
                .entries
                .iter()
                .map(|(ts, p)| (*ts, t.compose(p)))
                .collect(),
        }
    }
}

/// Associate estimated entries to ground-truth entries by nearest timestamp
/// within `max_offset` seconds.
fn associate(est: &Trajectory, gt: &Trajectory, max_offset: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let gts: Vec<f64> = gt.timestamps().collect();
    if gts.is_empty() {
        return pairs;
    }
    for (ei, (ts, _)) in est.entries.iter().enumerate() {
        let gi = match gts.binary_search_by(|t| t.partial_cmp(ts).unwrap()) {
            Ok(i) => i,
            Err(i) => {
                if i == 0 {
                    0
                } else if i == gts.len() {
                    gts.len() - 1
                } else if (gts[i] - ts).abs() < (gts[i - 1] - ts).abs() {
                    i
                } else {
                    i - 1
                }
            }
        };
        if (gts[gi] - ts).abs() <= max_offset {
            pairs.push((ei, gi));
        }
    }
    pairs
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Closed-form rigid alignment (rotation + translation, no scale) of point
/// set `from` onto `to`, minimizing the sum of squared distances.
fn rigid_align(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = from.len() as f64;
    let c_from = from.iter().sum::<Vector3<f64>>() / n;
    let c_to = to.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (e, g) in from.iter().zip(to) {
        h += (e - c_from) * (g - c_to).transpose();
    }
    let svd = nalgebra::SVD::new(h, true, true);
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let d = (v * u.transpose()).determinant();
    let rot = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * u.transpose();
    let trans = c_to - rot * c_from;
    (rot, trans)
}

/// Absolute trajectory error: rigidly align the estimated positions to the
/// ground truth, then return the mean and standard deviation of the
/// per-pose translational error magnitudes.
pub fn compute_ate(est: &Trajectory, gt: &Trajectory, max_offset: f64) -> Result<(f64, f64)> {
    let pairs = associate(est, gt, max_offset);
    if pairs.len() < 2 {
        return Err(Error::InsufficientOverlap);
    }
    let e_pts: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|(ei, _)| est.entries[*ei].1.translation)
        .collect();
    let g_pts: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|(_, gi)| gt.entries[*gi].1.translation)
        .collect();
    let (rot, trans) = rigid_align(&e_pts, &g_pts);
    let errors: Vec<f64> = e_pts
        .iter()
        .zip(&g_pts)
        .map(|(e, g)| (g - (rot * e + trans)).norm())
        .collect();
    Ok(mean_std(&errors))
}

/// Windowed ATE: align and score over every sliding window of `window`
/// consecutive matched poses, pooling the per-pose errors. Small windows
/// discount global drift the way per-frame evaluation does; `window` equal
/// to the trajectory length reduces to [`compute_ate`].
pub fn compute_ate_windowed(
    est: &Trajectory,
    gt: &Trajectory,
    max_offset: f64,
    window: usize,
) -> Result<(f64, f64)> {
    if window < 2 {
        return Err(Error::InvalidValue("ATE window must cover at least 2 poses".into()));
    }
    let pairs = associate(est, gt, max_offset);
    if pairs.len() < 2 {
        return Err(Error::InsufficientOverlap);
    }
    let window = window.min(pairs.len());
    let mut errors = Vec::new();
    for start in 0..=pairs.len() - window {
        let e_pts: Vec<Vector3<f64>> = pairs[start..start + window]
            .iter()
            .map(|(ei, _)| est.entries[*ei].1.translation)
            .collect();
        let g_pts: Vec<Vector3<f64>> = pairs[start..start + window]
            .iter()
            .map(|(_, gi)| gt.entries[*gi].1.translation)
            .collect();
        let (rot, trans) = rigid_align(&e_pts, &g_pts);
        for (e, g) in e_pts.iter().zip(&g_pts) {
            errors.push((g - (rot * e + trans)).norm());
        }
    }
    Ok(mean_std(&errors))
}

/// Relative pose error: for each consecutive matched pair, the translation
/// magnitude of the discrepancy between the estimated and ground-truth
/// relative motions. Needs no global alignment.
pub fn compute_re(est: &Trajectory, gt: &Trajectory, max_offset: f64) -> Result<(f64, f64)> {
    let pairs = associate(est, gt, max_offset);
    if pairs.len() < 2 {
        return Err(Error::InsufficientOverlap);
    }
    let mut errors = Vec::with_capacity(pairs.len() - 1);
    for w in pairs.windows(2) {
        let (e0, g0) = w[0];
        let (e1, g1) = w[1];
        let m_est = est.entries[e0].1.inverse().compose(&est.entries[e1].1);
        let m_gt = gt.entries[g0].1.inverse().compose(&gt.entries[g1].1);
        let disc = m_gt.inverse().compose(&m_est);
        errors.push(disc.translation.norm());
    }
    Ok(mean_std(&errors))
}

/// Depth-completion metric bundle. RMSE/MAE in millimeters; iRMSE/iMAE on
/// inverse depth in 1/km.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_1perkm: f64,
    pub imae_1perkm: f64,
}

/// Metrics over the valid ground-truth pixels.
pub fn depth_metrics(pred: &DepthMap, gt: &SparseDepth) -> Result<DepthMetrics> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::DimensionMismatch {
            context: "depth metrics",
            left: format!("{}x{}", pred.width(), pred.height()),
            right: format!("{}x{}", gt.width(), gt.height()),
        });
    }
    let mut n = 0usize;
    let (mut se, mut ae, mut ise, mut iae) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let Some(g) = gt.at(x, y) else { continue };
            let p = pred.at(x, y);
            let e = p - g;
            se += e * e;
            ae += e.abs();
            let ie = 1.0 / p - 1.0 / g;
            ise += ie * ie;
            iae += ie.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        rmse_mm: (se / nf).sqrt() * 1000.0,
        mae_mm: ae / nf * 1000.0,
        irmse_1perkm: (ise / nf).sqrt() * 1000.0,
        imae_1perkm: iae / nf * 1000.0,
    })
}

/// Mean over consecutive frame pairs of the unmasked multi-scale
/// photometric loss (mask identically 1, no sparse-depth indicator): a
/// pure cross-method comparator on identical pixel sets.
///
/// `poses` are camera-to-world, one per frame.
pub fn avg_photometric_loss(
    images: &[IntensityImage],
    depths: &[DepthMap],
    poses: &[Se3Transform],
    k: &CameraIntrinsics,
    levels: usize,
) -> Result<f64> {
    let n = images.len();
    if n < 2 || depths.len() != n || poses.len() != n {
        return Err(Error::DimensionMismatch {
            context: "photometric metric inputs",
            left: format!("{n} images"),
            right: format!("{} depths / {} poses", depths.len(), poses.len()),
        });
    }
    let lumas: Vec<_> = images.iter().map(|i| i.luma()).collect();
    let image_pyrs = lumas
        .iter()
        .map(|i| build_pyramid(i, levels))
        .collect::<Result<Vec<_>>>()?;
    let depth_pyrs = depths
        .iter()
        .map(|d| build_pyramid(d, levels))
        .collect::<Result<Vec<_>>>()?;
    let empty = build_pyramid(&SparseDepth::empty(k.width, k.height), levels)?;

    let mut total = 0.0;
    for i in 0..n - 1 {
        let t_fwd = poses[i + 1].inverse().compose(&poses[i]);
        let tangent = crate::geometry::log_map(&t_fwd)?;
        let residuals = (0..levels)
            .map(|s| {
                photometric_residual_with_grad(
                    &image_pyrs[i],
                    &image_pyrs[i + 1],
                    &depth_pyrs[i],
                    &depth_pyrs[i + 1],
                    &empty,
                    &empty,
                    &tangent,
                    k,
                    s,
                    IndicatorMode::Disabled,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        total += unmasked_photometric(&residuals);
    }
    Ok(total / (n - 1) as f64)
}

/// Fill every pixel with the value of the nearest valid measurement
/// (Euclidean pixel distance, row-major tie-break): the interpolation
/// baseline the refinement is compared against.
pub fn nearest_neighbor_fill(sparse: &SparseDepth) -> Result<DepthMap> {
    let (w, h) = (sparse.width(), sparse.height());
    let valid: Vec<(usize, usize, f64)> = (0..h)
        .flat_map(|y| (0..w).filter_map(move |x| sparse.at(x, y).map(|d| (x, y, d))))
        .collect();
    if valid.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    DepthMap::from_fn(w, h, |x, y| {
        let mut best = f64::INFINITY;
        let mut value = valid[0].2;
        for (vx, vy, d) in &valid {
            let dx = *vx as f64 - x as f64;
            let dy = *vy as f64 - y as f64;
            let dist = dx * dx + dy * dy;
            if dist < best {
                best = dist;
                value = *d;
            }
        }
        value
    })
}
