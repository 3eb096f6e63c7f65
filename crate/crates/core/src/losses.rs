//! The loss stack: supervised depth loss, multi-scale masked photometric
//! loss, second-order smoothness, and mask regularization, each with
//! analytic gradients with respect to depth values, the pose tangent, and
//! mask values.
//!
//! Every loss is a mean over its valid pixel set, not a sum, so the weights
//! are resolution-independent. The per-scale photometric residual carries
//! the factor `1 / (2 * 2^s)` with `s` the pyramid level.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{warp_with_jacobian, CameraIntrinsics, PoseJacContext, Se3Tangent, Se3Transform};
use crate::imaging::{second_order_gradients, DepthMap, IntensityImage, Pyramid, SparseDepth};

/// Weights (alpha, beta, gamma, theta) of the total loss. Defaults are the
/// empirical values 1.0, 0.1, 0.1, 0.2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            theta: 0.2,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, theta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || gamma < 0.0 || theta < 0.0 {
            return Err(Error::InvalidValue("loss weights must be nonnegative".into()));
        }
        Ok(LossWeights {
            alpha,
            beta,
            gamma,
            theta,
        })
    }
}

/// Per-term and total loss values. `total` is the weighted sum computed with
/// the exact same arithmetic as [`total_loss`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub photometric_masked: f64,
    pub smoothness: f64,
    pub mask_reg: f64,
    pub total: f64,
    pub per_scale_photometric: Vec<f64>,
}

/// Combine the four term values into the weighted total.
pub fn total_loss(
    supervised: f64,
    photometric_masked: f64,
    smoothness: f64,
    mask_reg: f64,
    per_scale_photometric: Vec<f64>,
    w: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        supervised,
        photometric_masked,
        smoothness,
        mask_reg,
        total: w.alpha * supervised
            + w.beta * photometric_masked
            + w.gamma * smoothness
            + w.theta * mask_reg,
        per_scale_photometric,
    }
}

/// Mean squared error against the valid sparse pixels.
///
/// Returns the value and its gradient with respect to every predicted depth
/// value. Empty ground truth yields (0, zero gradient).
pub fn supervised_loss(pred: &DepthMap, gt: &SparseDepth) -> Result<(f64, Vec<f64>)> {
    let (w, h) = (pred.width(), pred.height());
    if gt.width() != w || gt.height() != h {
        return Err(Error::DimensionMismatch {
            context: "supervised loss",
            left: format!("{}x{}", w, h),
            right: format!("{}x{}", gt.width(), gt.height()),
        });
    }
    let n_valid = gt.valid_count();
    let mut grad = vec![0.0; w * h];
    if n_valid == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n_valid as f64;
    let mut value = 0.0;
    for y in 0..h {
        for x in 0..w {
            if let Some(g) = gt.at(x, y) {
                let e = pred.at(x, y) - g;
                value += e * e * inv_n;
                grad[y * w + x] = 2.0 * e * inv_n;
            }
        }
    }
    Ok((value, grad))
}

/// How the sparse-measurement indicator gates the photometric residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorMode {
    /// As written in the residual definition: only pixels with no sparse
    /// measurement contribute (supervised and photometric partition the
    /// domain).
    ExcludeMeasured,
    /// The flipped reading: only measured pixels contribute.
    MeasuredOnly,
    /// No gating; every geometrically valid pixel contributes.
    Disabled,
}

impl IndicatorMode {
    fn admits(&self, measured: bool) -> bool {
        match self {
            IndicatorMode::ExcludeMeasured => !measured,
            IndicatorMode::MeasuredOnly => measured,
            IndicatorMode::Disabled => true,
        }
    }
}

/// Per-pixel chain data for one scale of the photometric residual. The
/// stored derivatives already include the per-scale factor and the term
/// liveness, so downstream code only multiplies by mask value and the
/// valid-count normalizer.
#[derive(Debug, Clone)]
pub struct ResidualLevel {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub residual: Vec<f64>,
    pub valid: Vec<bool>,
    pub n_valid: usize,
    d_depth1: Vec<f64>,
    d_depth2: Vec<f64>,
    d_tangent: Vec<[f64; 6]>,
}

fn sign_or_zero(e: f64) -> f64 {
    if e > 0.0 {
        1.0
    } else if e < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct TermEval {
    geo_valid: bool,
    live: bool,
    r: f64,
    d_depth: f64,
    d_tangent: [f64; 6],
}

/// One warp-and-compare term on the grid of `img_grid`, sampling
/// `img_sampled` through `ctx`.
fn eval_term(
    k: &CameraIntrinsics,
    ctx: &PoseJacContext,
    depth: f64,
    u: &Vector2<f64>,
    img_sampled: &IntensityImage,
    grid_value: f64,
    admits: bool,
) -> TermEval {
    let mut out = TermEval {
        geo_valid: false,
        live: false,
        r: 0.0,
        d_depth: 0.0,
        d_tangent: [0.0; 6],
    };
    let Some((pix, jac)) = warp_with_jacobian(k, ctx, depth, u) else {
        return out;
    };
    let Some((value, grad_img)) = img_sampled.sample_scalar(&pix) else {
        return out;
    };
    out.geo_valid = true;
    if !admits {
        return out;
    }
    out.live = true;
    let e = value - grid_value;
    out.r = e.abs();
    let sgn = sign_or_zero(e);
    out.d_depth = sgn * grad_img.dot(&jac.d_depth);
    for i in 0..6 {
        out.d_tangent[i] =
            sgn * (grad_img.x * jac.d_tangent[(0, i)] + grad_img.y * jac.d_tangent[(1, i)]);
    }
    out
}

/// The symmetric two-warp residual of one pyramid level, with chain data for
/// the gradients. The forward term warps the first frame's grid through the
/// pose; the reverse term warps the second frame's grid through its inverse
/// (the negated tangent).
#[allow(clippy::too_many_arguments)]
pub fn photometric_residual_with_grad(
    i1: &Pyramid<IntensityImage>,
    i2: &Pyramid<IntensityImage>,
    d1: &Pyramid<DepthMap>,
    d2: &Pyramid<DepthMap>,
    s1: &Pyramid<SparseDepth>,
    s2: &Pyramid<SparseDepth>,
    tangent: &Se3Tangent,
    k: &CameraIntrinsics,
    level: usize,
    indicator: IndicatorMode,
) -> Result<ResidualLevel> {
    let n_levels = i1.n_levels();
    if [i2.n_levels(), d1.n_levels(), d2.n_levels(), s1.n_levels(), s2.n_levels()]
        .iter()
        .any(|n| *n != n_levels)
        || level >= n_levels
    {
        return Err(Error::DimensionMismatch {
            context: "photometric pyramids",
            left: format!("level {level}"),
            right: format!("{n_levels} levels"),
        });
    }
    let i1l = i1.level(level);
    let i2l = i2.level(level);
    let (w, h) = (i1l.width(), i1l.height());
    let same = |iw: usize, ih: usize| iw == w && ih == h;
    if !same(i2l.width(), i2l.height())
        || !same(d1.level(level).width(), d1.level(level).height())
        || !same(d2.level(level).width(), d2.level(level).height())
        || !same(s1.level(level).width(), s1.level(level).height())
        || !same(s2.level(level).width(), s2.level(level).height())
    {
        return Err(Error::DimensionMismatch {
            context: "photometric level shapes",
            left: format!("{w}x{h}"),
            right: "mismatched pyramid level".into(),
        });
    }

    let kl = k.at_level(level);
    if kl.width != w || kl.height != h {
        return Err(Error::DimensionMismatch {
            context: "photometric intrinsics",
            left: format!("{}x{}", kl.width, kl.height),
            right: format!("{w}x{h}"),
        });
    }

    let fwd = PoseJacContext::new(tangent);
    let rev = PoseJacContext::new(&tangent.negated());
    let scale_factor = 0.5 / (1usize << level) as f64;

    let mut out = ResidualLevel {
        level,
        width: w,
        height: h,
        residual: vec![0.0; w * h],
        valid: vec![false; w * h],
        n_valid: 0,
        d_depth1: vec![0.0; w * h],
        d_depth2: vec![0.0; w * h],
        d_tangent: vec![[0.0; 6]; w * h],
    };

    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let u = Vector2::new(x as f64, y as f64);
            let t1 = eval_term(
                &kl,
                &fwd,
                d1.level(level).at(x, y),
                &u,
                i2l,
                i1l.value(x, y, 0),
                indicator.admits(s1.level(level).is_valid(x, y)),
            );
            let t2 = eval_term(
                &kl,
                &rev,
                d2.level(level).at(x, y),
                &u,
                i1l,
                i2l.value(x, y, 0),
                indicator.admits(s2.level(level).is_valid(x, y)),
            );
            if !(t1.geo_valid || t2.geo_valid) {
                continue;
            }
            out.valid[idx] = true;
            out.n_valid += 1;
            out.residual[idx] = scale_factor * (t1.r + t2.r);
            out.d_depth1[idx] = scale_factor * t1.d_depth;
            out.d_depth2[idx] = scale_factor * t2.d_depth;
            for i in 0..6 {
                // The reverse warp differentiates at the negated tangent.
                out.d_tangent[idx][i] = scale_factor * (t1.d_tangent[i] - t2.d_tangent[i]);
            }
        }
    }
    Ok(out)
}

/// Value-and-validity view of one residual level (spec-level operation).
#[allow(clippy::too_many_arguments)]
pub fn photometric_residual(
    i1: &Pyramid<IntensityImage>,
    i2: &Pyramid<IntensityImage>,
    d1: &Pyramid<DepthMap>,
    d2: &Pyramid<DepthMap>,
    s1: &Pyramid<SparseDepth>,
    s2: &Pyramid<SparseDepth>,
    t_1to2: &Se3Transform,
    k: &CameraIntrinsics,
    level: usize,
    indicator: IndicatorMode,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let tangent = crate::geometry::log_map(t_1to2)?;
    let r = photometric_residual_with_grad(i1, i2, d1, d2, s1, s2, &tangent, k, level, indicator)?;
    Ok((r.residual, r.valid))
}

/// Gradients produced by [`masked_photometric_loss`].
#[derive(Debug, Clone)]
pub struct PhotometricGrads {
    /// d(loss)/d(frame-1 full-resolution depth values).
    pub d_depth1: Vec<f64>,
    /// d(loss)/d(frame-2 full-resolution depth values).
    pub d_depth2: Vec<f64>,
    /// d(loss)/d(pose tangent).
    pub d_tangent: [f64; 6],
    /// d(loss)/d(mask values), one map per scale.
    pub d_masks: Vec<Vec<f64>>,
}

/// Sum over scales of the masked mean residual, with gradients for every
/// parameter block. `masks` holds one value map per scale, in (0, 1).
pub fn masked_photometric_loss(
    levels: &[ResidualLevel],
    masks: &[Vec<f64>],
) -> Result<(f64, Vec<f64>, PhotometricGrads)> {
    if masks.len() != levels.len() {
        return Err(Error::DimensionMismatch {
            context: "mask levels",
            left: format!("{}", masks.len()),
            right: format!("{}", levels.len()),
        });
    }
    let mut per_scale = Vec::with_capacity(levels.len());
    let mut value = 0.0;
    let mut d_tangent = [0.0; 6];
    let mut d_masks = Vec::with_capacity(levels.len());
    // Per-level depth gradients, folded to full resolution afterwards.
    let mut depth1_levels = Vec::with_capacity(levels.len());
    let mut depth2_levels = Vec::with_capacity(levels.len());
    let mut dims = Vec::with_capacity(levels.len());

    for (level, mask) in levels.iter().zip(masks) {
        let n = level.width * level.height;
        if mask.len() != n {
            return Err(Error::DimensionMismatch {
                context: "mask shape",
                left: format!("{}", mask.len()),
                right: format!("{n}"),
            });
        }
        dims.push((level.width, level.height));
        let mut level_value = 0.0;
        let mut d_mask = vec![0.0; n];
        let mut d1 = vec![0.0; n];
        let mut d2 = vec![0.0; n];
        if level.n_valid > 0 {
            let inv_n = 1.0 / level.n_valid as f64;
            for idx in 0..n {
                if !level.valid[idx] {
                    continue;
                }
                let m = mask[idx];
                level_value += m * level.residual[idx] * inv_n;
                d_mask[idx] = level.residual[idx] * inv_n;
                d1[idx] = m * level.d_depth1[idx] * inv_n;
                d2[idx] = m * level.d_depth2[idx] * inv_n;
                for i in 0..6 {
                    d_tangent[i] += m * level.d_tangent[idx][i] * inv_n;
                }
            }
        }
        value += level_value;
        per_scale.push(level_value);
        d_masks.push(d_mask);
        depth1_levels.push(d1);
        depth2_levels.push(d2);
    }

    let d_depth1 = pyramid_adjoint(depth1_levels, &dims);
    let d_depth2 = pyramid_adjoint(depth2_levels, &dims);
    Ok((
        value,
        per_scale,
        PhotometricGrads {
            d_depth1,
            d_depth2,
            d_tangent,
            d_masks,
        },
    ))
}

/// Multi-scale photometric value with the mask and indicator disabled: the
/// cross-method comparison metric. Levels with no valid pixel contribute 0.
pub fn unmasked_photometric(levels: &[ResidualLevel]) -> f64 {
    levels
        .iter()
        .map(|l| {
            if l.n_valid == 0 {
                0.0
            } else {
                l.residual.iter().sum::<f64>() / l.n_valid as f64
            }
        })
        .sum()
}

/// Adjoint of the repeated 2x2 box-average pyramid: fold per-level gradient
/// maps back onto the full-resolution grid. Each parent pixel distributes a
/// quarter of its gradient to its four children; rows/columns truncated by
/// floor halving receive nothing, matching the forward pass.
fn pyramid_adjoint(mut grads: Vec<Vec<f64>>, dims: &[(usize, usize)]) -> Vec<f64> {
    for s in (1..grads.len()).rev() {
        let (ws, hs) = dims[s];
        let (wp, _) = dims[s - 1];
        let (head, tail) = grads.split_at_mut(s);
        let parent = &mut head[s - 1];
        let child = &tail[0];
        for y in 0..hs {
            for x in 0..ws {
                let g = child[y * ws + x] * 0.25;
                if g == 0.0 {
                    continue;
                }
                parent[(2 * y) * wp + 2 * x] += g;
                parent[(2 * y) * wp + 2 * x + 1] += g;
                parent[(2 * y + 1) * wp + 2 * x] += g;
                parent[(2 * y + 1) * wp + 2 * x + 1] += g;
            }
        }
    }
    grads.swap_remove(0)
}

/// L1 norm of the second-order depth gradients, averaged over interior
/// pixels. The subgradient at kink points is zero.
pub fn smoothness_loss(pred: &DepthMap) -> Result<(f64, Vec<f64>)> {
    let g = second_order_gradients(pred)?;
    let (w, h) = (g.width, g.height);
    let n_interior = ((w - 2) * (h - 2)) as f64;
    let inv_n = 1.0 / n_interior;
    let mut value = 0.0;
    let mut grad = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            value += (g.dxx[i].abs() + g.dyy[i].abs() + g.dxy[i].abs()) * inv_n;

            let sx = sign_or_zero(g.dxx[i]) * inv_n;
            grad[i] -= 2.0 * sx;
            grad[y * w + x + 1] += sx;
            grad[y * w + x - 1] += sx;

            let sy = sign_or_zero(g.dyy[i]) * inv_n;
            grad[i] -= 2.0 * sy;
            grad[(y + 1) * w + x] += sy;
            grad[(y - 1) * w + x] += sy;

            let sxy = sign_or_zero(g.dxy[i]) * inv_n * 0.25;
            grad[(y + 1) * w + x + 1] += sxy;
            grad[(y - 1) * w + x - 1] += sxy;
            grad[(y - 1) * w + x + 1] -= sxy;
            grad[(y + 1) * w + x - 1] -= sxy;
        }
    }
    Ok((value, grad))
}

/// Cross-entropy of the masks against an all-ones target, summed over
/// scales: `sum_s mean_u [-log E_s(u)]`. Keeps the masks away from the
/// degenerate all-zero solution.
pub fn mask_regularization_loss(masks: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(masks.len());
    for mask in masks {
        let n = mask.len();
        if n == 0 {
            return Err(Error::InvalidValue("empty mask level".into()));
        }
        let inv_n = 1.0 / n as f64;
        let mut grad = vec![0.0; n];
        for (g, m) in grad.iter_mut().zip(mask) {
            if *m <= 0.0 {
                return Err(Error::Domain(format!(
                    "mask value {m} outside (0, 1); cannot take log"
                )));
            }
            value -= m.ln() * inv_n;
            *g = -inv_n / *m;
        }
        grads.push(grad);
    }
    Ok((value, grads))
}
