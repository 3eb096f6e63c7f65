//! Pluggable depth / pose / explainability-mask predictors.
//!
//! Two families are provided: a direct parameter field (log-depth values,
//! one tangent per pair, mask logits per scale) whose Jacobians are
//! elementwise and trivially exact, and small fixed-architecture
//! convolutional nets that prove the end-to-end gradient path through
//! learned weights. Neither replicates a full-resolution DCNN.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Se3Tangent;
use crate::imaging::{DepthMap, IntensityImage, SparseDepth};

/// Keeps toy-net depth bounded away from zero.
pub const EPS_POS: f64 = 1e-3;

/// Tangent outputs of the pose net are scaled by this factor so that
/// freshly initialized networks predict small motions.
pub const POSE_OUTPUT_SCALE: f64 = 0.01;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub fn elu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Per-scale confidence maps stored as logits; `sigmoid` keeps the values
/// in (0, 1) for any finite parameters.
#[derive(Debug, Clone)]
pub struct ExplainabilityMask {
    pub levels: Vec<MaskLogits>,
}

#[derive(Debug, Clone)]
pub struct MaskLogits {
    pub width: usize,
    pub height: usize,
    pub logits: Vec<f64>,
}

impl ExplainabilityMask {
    /// Mask values per scale.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.levels
            .iter()
            .map(|l| l.logits.iter().map(|x| sigmoid(*x)).collect())
            .collect()
    }

    /// Chain d(loss)/d(value) back to d(loss)/d(logit).
    pub fn d_logits_from_d_values(&self, d_values: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.levels
            .iter()
            .zip(d_values)
            .map(|(l, dv)| {
                l.logits
                    .iter()
                    .zip(dv)
                    .map(|(x, g)| {
                        let m = sigmoid(*x);
                        g * m * (1.0 - m)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Identity predictor: depth = exp(log-depth field), pose = the stored
/// tangent, masks = sigmoid(logits). Gradients are elementwise.
pub fn direct_field_predict(
    log_depth: &[f64],
    width: usize,
    height: usize,
    tangent: &[f64; 6],
    mask_logits: &[MaskLogits],
) -> Result<(DepthMap, Se3Tangent, ExplainabilityMask)> {
    if log_depth.len() != width * height {
        return Err(Error::DimensionMismatch {
            context: "direct field",
            left: format!("{}", log_depth.len()),
            right: format!("{width}x{height}"),
        });
    }
    let depth = DepthMap::new(width, height, log_depth.iter().map(|v| v.exp()).collect())?;
    Ok((
        depth,
        Se3Tangent::from_slice(tangent),
        ExplainabilityMask {
            levels: mask_logits.to_vec(),
        },
    ))
}

/// d(loss)/d(log-depth) = d(loss)/d(depth) * depth.
pub fn direct_field_depth_backprop(depth: &DepthMap, d_depth: &[f64]) -> Vec<f64> {
    depth.data().iter().zip(d_depth).map(|(d, g)| g * d).collect()
}

// ---------------------------------------------------------------------------
// Shared conv machinery (3x3 kernels, zero padding 1).
// ---------------------------------------------------------------------------

/// Channel-major planar tensor.
#[derive(Debug, Clone)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = (c * self.height + y) * self.width + x;
        self.data[i] = v;
    }

    #[inline]
    pub fn add(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = (c * self.height + y) * self.width + x;
        self.data[i] += v;
    }
}

fn conv_out_dim(input: usize, stride: usize) -> usize {
    (input + 2 - 3) / stride + 1
}

/// 3x3 convolution, zero padding 1. Weights are OIHW followed by one bias
/// per output channel.
fn conv2d(input: &Tensor3, weights: &[f64], out_ch: usize, stride: usize) -> Tensor3 {
    let in_ch = input.channels;
    let oh = conv_out_dim(input.height, stride);
    let ow = conv_out_dim(input.width, stride);
    let w_len = out_ch * in_ch * 9;
    debug_assert_eq!(weights.len(), w_len + out_ch);
    let bias = &weights[w_len..];
    let mut out = Tensor3::zeros(out_ch, oh, ow);
    for oc in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..in_ch {
                    for ky in 0..3 {
                        let iy = (stride * oy + ky) as isize - 1;
                        if iy < 0 || iy >= input.height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (stride * ox + kx) as isize - 1;
                            if ix < 0 || ix >= input.width as isize {
                                continue;
                            }
                            acc += weights[((oc * in_ch + ic) * 3 + ky) * 3 + kx]
                                * input.at(ic, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(oc, oy, ox, acc);
            }
        }
    }
    out
}

/// Backward pass of [`conv2d`]: gradients for weights, bias, and input.
fn conv2d_backward(
    input: &Tensor3,
    weights: &[f64],
    out_ch: usize,
    stride: usize,
    d_out: &Tensor3,
) -> (Vec<f64>, Tensor3) {
    let in_ch = input.channels;
    let w_len = out_ch * in_ch * 9;
    let mut d_weights = vec![0.0; w_len + out_ch];
    let mut d_input = Tensor3::zeros(in_ch, input.height, input.width);
    for oc in 0..out_ch {
        for oy in 0..d_out.height {
            for ox in 0..d_out.width {
                let g = d_out.at(oc, oy, ox);
                if g == 0.0 {
                    continue;
                }
                d_weights[w_len + oc] += g;
                for ic in 0..in_ch {
                    for ky in 0..3 {
                        let iy = (stride * oy + ky) as isize - 1;
                        if iy < 0 || iy >= input.height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (stride * ox + kx) as isize - 1;
                            if ix < 0 || ix >= input.width as isize {
                                continue;
                            }
                            let wi = ((oc * in_ch + ic) * 3 + ky) * 3 + kx;
                            d_weights[wi] += g * input.at(ic, iy as usize, ix as usize);
                            d_input.add(ic, iy as usize, ix as usize, g * weights[wi]);
                        }
                    }
                }
            }
        }
    }
    (d_weights, d_input)
}

fn elu_forward(t: &Tensor3) -> Tensor3 {
    Tensor3 {
        channels: t.channels,
        height: t.height,
        width: t.width,
        data: t.data.iter().map(|x| elu(*x)).collect(),
    }
}

fn elu_backward(pre: &Tensor3, d_out: &Tensor3) -> Tensor3 {
    Tensor3 {
        channels: pre.channels,
        height: pre.height,
        width: pre.width,
        data: pre
            .data
            .iter()
            .zip(&d_out.data)
            .map(|(x, g)| g * elu_prime(*x))
            .collect(),
    }
}

/// Normalize an intensity image to [-1, 1]: (x - 0.5) / 0.5.
fn normalized_luma_plane(img: &IntensityImage) -> Vec<f64> {
    img.luma().data().iter().map(|v| (v - 0.5) / 0.5).collect()
}

// ---------------------------------------------------------------------------
// Toy depth net.
// ---------------------------------------------------------------------------

/// Three 3x3 stride-1 conv layers (4 -> 8 -> 8 -> 1) with ELU activations;
/// the output head is `depth_scale * (ELU(x) + 1 + EPS_POS)`, strictly
/// positive for any finite weights.
///
/// The 4 input channels are normalized luma, value-scaled sparse depth,
/// the sparse validity plane, and a constant bias plane.
#[derive(Debug, Clone)]
pub struct ToyDepthNet {
    /// Multiplier applied to sparse depth values fed to the net
    /// (0.01 KITTI-style, 1/15 TUM-style).
    pub depth_input_scale: f64,
    /// Output scale mapping the unit activation to meters.
    pub depth_scale: f64,
}

const DEPTH_L1: usize = 8 * 4 * 9 + 8;
const DEPTH_L2: usize = 8 * 8 * 9 + 8;
const DEPTH_L3: usize = 8 * 9 + 1;

#[derive(Debug)]
pub struct DepthNetTrace {
    input: Tensor3,
    pre1: Tensor3,
    act1: Tensor3,
    pre2: Tensor3,
    act2: Tensor3,
    pre3: Tensor3,
}

impl Default for ToyDepthNet {
    fn default() -> Self {
        ToyDepthNet {
            depth_input_scale: 0.01,
            depth_scale: 1.0,
        }
    }
}

impl ToyDepthNet {
    pub fn n_params(&self) -> usize {
        DEPTH_L1 + DEPTH_L2 + DEPTH_L3
    }

    pub fn layer_spans(&self) -> [(usize, usize); 3] {
        [
            (0, DEPTH_L1),
            (DEPTH_L1, DEPTH_L1 + DEPTH_L2),
            (DEPTH_L1 + DEPTH_L2, DEPTH_L1 + DEPTH_L2 + DEPTH_L3),
        ]
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        init_conv_params(seed, &[(4, 8), (8, 8), (8, 1)])
    }

    fn build_input(&self, image: &IntensityImage, sparse: &SparseDepth) -> Tensor3 {
        let (w, h) = (image.width(), image.height());
        let mut input = Tensor3::zeros(4, h, w);
        let luma = normalized_luma_plane(image);
        input.data[..w * h].copy_from_slice(&luma);
        for y in 0..h {
            for x in 0..w {
                if let Some(d) = sparse.at(x, y) {
                    input.set(1, y, x, d * self.depth_input_scale);
                    input.set(2, y, x, 1.0);
                }
                input.set(3, y, x, 1.0);
            }
        }
        input
    }

    pub fn predict(
        &self,
        image: &IntensityImage,
        sparse: &SparseDepth,
        params: &[f64],
    ) -> Result<(DepthMap, DepthNetTrace)> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "depth net params",
                left: format!("{}", params.len()),
                right: format!("{}", self.n_params()),
            });
        }
        if image.width() != sparse.width() || image.height() != sparse.height() {
            return Err(Error::DimensionMismatch {
                context: "depth net inputs",
                left: format!("{}x{}", image.width(), image.height()),
                right: format!("{}x{}", sparse.width(), sparse.height()),
            });
        }
        let [(a0, a1), (b0, b1), (c0, c1)] = self.layer_spans();
        let input = self.build_input(image, sparse);
        let pre1 = conv2d(&input, &params[a0..a1], 8, 1);
        let act1 = elu_forward(&pre1);
        let pre2 = conv2d(&act1, &params[b0..b1], 8, 1);
        let act2 = elu_forward(&pre2);
        let pre3 = conv2d(&act2, &params[c0..c1], 1, 1);
        let depth_data: Vec<f64> = pre3
            .data
            .iter()
            .map(|x| self.depth_scale * (elu(*x) + 1.0 + EPS_POS))
            .collect();
        let depth = DepthMap::new(image.width(), image.height(), depth_data)?;
        Ok((
            depth,
            DepthNetTrace {
                input,
                pre1,
                act1,
                pre2,
                act2,
                pre3,
            },
        ))
    }

    /// Gradient of a scalar loss with respect to the weights, given
    /// d(loss)/d(depth value) per pixel.
    pub fn backprop(&self, trace: &DepthNetTrace, params: &[f64], d_depth: &[f64]) -> Vec<f64> {
        let [(a0, a1), (b0, b1), (c0, c1)] = self.layer_spans();
        let d_pre3 = Tensor3 {
            channels: 1,
            height: trace.pre3.height,
            width: trace.pre3.width,
            data: trace
                .pre3
                .data
                .iter()
                .zip(d_depth)
                .map(|(x, g)| g * self.depth_scale * elu_prime(*x))
                .collect(),
        };
        let (d_w3, d_act2) = conv2d_backward(&trace.act2, &params[c0..c1], 1, 1, &d_pre3);
        let d_pre2 = elu_backward(&trace.pre2, &d_act2);
        let (d_w2, d_act1) = conv2d_backward(&trace.act1, &params[b0..b1], 8, 1, &d_pre2);
        let d_pre1 = elu_backward(&trace.pre1, &d_act1);
        let (d_w1, _) = conv2d_backward(&trace.input, &params[a0..a1], 8, 1, &d_pre1);

        let mut out = vec![0.0; self.n_params()];
        out[a0..a1].copy_from_slice(&d_w1);
        out[b0..b1].copy_from_slice(&d_w2);
        out[c0..c1].copy_from_slice(&d_w3);
        out
    }
}

// ---------------------------------------------------------------------------
// Toy pose net with its mask branch.
// ---------------------------------------------------------------------------

/// Two stride-2 encoder convs shared by a pose head (stride-2 conv to 6
/// channels, global average, scaled by 0.01) and a mask head (stride-1 conv
/// to one logit channel per pyramid level, nearest-resized to each level).
#[derive(Debug, Clone)]
pub struct ToyPoseNet {
    pub n_mask_levels: usize,
}

const POSE_ENC1: usize = 8 * 2 * 9 + 8;
const POSE_ENC2: usize = 8 * 8 * 9 + 8;
const POSE_HEAD: usize = 6 * 8 * 9 + 6;

#[derive(Debug)]
pub struct PoseNetTrace {
    input: Tensor3,
    pre1: Tensor3,
    act1: Tensor3,
    pre2: Tensor3,
    act2: Tensor3,
    pose_pre: Tensor3,
    mask_pre: Tensor3,
    level_dims: Vec<(usize, usize)>,
}

impl ToyPoseNet {
    pub fn new(n_mask_levels: usize) -> Self {
        ToyPoseNet { n_mask_levels }
    }

    fn mask_head_len(&self) -> usize {
        self.n_mask_levels * 8 * 9 + self.n_mask_levels
    }

    pub fn n_params(&self) -> usize {
        POSE_ENC1 + POSE_ENC2 + POSE_HEAD + self.mask_head_len()
    }

    /// (enc1, enc2, pose_head, mask_head) parameter spans.
    pub fn layer_spans(&self) -> [(usize, usize); 4] {
        let e1 = POSE_ENC1;
        let e2 = e1 + POSE_ENC2;
        let ph = e2 + POSE_HEAD;
        [(0, e1), (e1, e2), (e2, ph), (ph, ph + self.mask_head_len())]
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        init_conv_params(
            seed,
            &[(2, 8), (8, 8), (8, 6), (8, self.n_mask_levels)],
        )
    }

    /// Pyramid level dims: floor-halved from the full resolution.
    fn pyramid_dims(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.n_mask_levels);
        let (mut w, mut h) = (width, height);
        for _ in 0..self.n_mask_levels {
            dims.push((w, h));
            w /= 2;
            h /= 2;
        }
        dims
    }

    pub fn predict(
        &self,
        i1: &IntensityImage,
        i2: &IntensityImage,
        params: &[f64],
    ) -> Result<(Se3Tangent, ExplainabilityMask, PoseNetTrace)> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "pose net params",
                left: format!("{}", params.len()),
                right: format!("{}", self.n_params()),
            });
        }
        if i1.width() != i2.width() || i1.height() != i2.height() {
            return Err(Error::DimensionMismatch {
                context: "pose net inputs",
                left: format!("{}x{}", i1.width(), i1.height()),
                right: format!("{}x{}", i2.width(), i2.height()),
            });
        }
        let (w, h) = (i1.width(), i1.height());
        let [(a0, a1), (b0, b1), (c0, c1), (m0, m1)] = self.layer_spans();

        let mut input = Tensor3::zeros(2, h, w);
        input.data[..w * h].copy_from_slice(&normalized_luma_plane(i1));
        input.data[w * h..].copy_from_slice(&normalized_luma_plane(i2));

        let pre1 = conv2d(&input, &params[a0..a1], 8, 2);
        let act1 = elu_forward(&pre1);
        let pre2 = conv2d(&act1, &params[b0..b1], 8, 2);
        let act2 = elu_forward(&pre2);

        let pose_pre = conv2d(&act2, &params[c0..c1], 6, 2);
        let n_spatial = (pose_pre.height * pose_pre.width) as f64;
        let mut tangent = [0.0; 6];
        for c in 0..6 {
            let mut acc = 0.0;
            for y in 0..pose_pre.height {
                for x in 0..pose_pre.width {
                    acc += pose_pre.at(c, y, x);
                }
            }
            tangent[c] = POSE_OUTPUT_SCALE * acc / n_spatial;
        }

        let mask_pre = conv2d(&act2, &params[m0..m1], self.n_mask_levels, 1);
        let level_dims = self.pyramid_dims(w, h);
        let levels = level_dims
            .iter()
            .enumerate()
            .map(|(s, (lw, lh))| MaskLogits {
                width: *lw,
                height: *lh,
                logits: nearest_resize(&mask_pre, s, *lw, *lh),
            })
            .collect();

        Ok((
            Se3Tangent::from_slice(&tangent),
            ExplainabilityMask { levels },
            PoseNetTrace {
                input,
                pre1,
                act1,
                pre2,
                act2,
                pose_pre,
                mask_pre,
                level_dims,
            },
        ))
    }

    /// Gradients of a scalar loss with respect to the weights, given the
    /// gradients at the tangent and at each mask logit map. Both heads feed
    /// the shared encoder.
    pub fn backprop(
        &self,
        trace: &PoseNetTrace,
        params: &[f64],
        d_tangent: &[f64; 6],
        d_mask_logits: &[Vec<f64>],
    ) -> Vec<f64> {
        let [(a0, a1), (b0, b1), (c0, c1), (m0, m1)] = self.layer_spans();

        let n_spatial = (trace.pose_pre.height * trace.pose_pre.width) as f64;
        let mut d_pose_pre = Tensor3::zeros(6, trace.pose_pre.height, trace.pose_pre.width);
        for c in 0..6 {
            let g = d_tangent[c] * POSE_OUTPUT_SCALE / n_spatial;
            for y in 0..trace.pose_pre.height {
                for x in 0..trace.pose_pre.width {
                    d_pose_pre.set(c, y, x, g);
                }
            }
        }
        let (d_w_pose, d_act2_pose) =
            conv2d_backward(&trace.act2, &params[c0..c1], 6, 2, &d_pose_pre);

        let mut d_mask_pre =
            Tensor3::zeros(self.n_mask_levels, trace.mask_pre.height, trace.mask_pre.width);
        for (s, ((lw, lh), d_level)) in trace.level_dims.iter().zip(d_mask_logits).enumerate() {
            nearest_resize_adjoint(&mut d_mask_pre, s, *lw, *lh, d_level);
        }
        let (d_w_mask, d_act2_mask) =
            conv2d_backward(&trace.act2, &params[m0..m1], self.n_mask_levels, 1, &d_mask_pre);

        let d_act2 = Tensor3 {
            channels: trace.act2.channels,
            height: trace.act2.height,
            width: trace.act2.width,
            data: d_act2_pose
                .data
                .iter()
                .zip(&d_act2_mask.data)
                .map(|(a, b)| a + b)
                .collect(),
        };
        let d_pre2 = elu_backward(&trace.pre2, &d_act2);
        let (d_w2, d_act1) = conv2d_backward(&trace.act1, &params[b0..b1], 8, 2, &d_pre2);
        let d_pre1 = elu_backward(&trace.pre1, &d_act1);
        let (d_w1, _) = conv2d_backward(&trace.input, &params[a0..a1], 8, 2, &d_pre1);

        let mut out = vec![0.0; self.n_params()];
        out[a0..a1].copy_from_slice(&d_w1);
        out[b0..b1].copy_from_slice(&d_w2);
        out[c0..c1].copy_from_slice(&d_w_pose);
        out[m0..m1].copy_from_slice(&d_w_mask);
        out
    }
}

/// Nearest-neighbor resize of one channel of `src` to `(out_w, out_h)`.
fn nearest_resize(src: &Tensor3, channel: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = (y * src.height / out_h).min(src.height - 1);
        for x in 0..out_w {
            let sx = (x * src.width / out_w).min(src.width - 1);
            out.push(src.at(channel, sy, sx));
        }
    }
    out
}

/// Scatter-add adjoint of [`nearest_resize`].
fn nearest_resize_adjoint(
    dst: &mut Tensor3,
    channel: usize,
    out_w: usize,
    out_h: usize,
    d_out: &[f64],
) {
    for y in 0..out_h {
        let sy = (y * dst.height / out_h).min(dst.height - 1);
        for x in 0..out_w {
            let sx = (x * dst.width / out_w).min(dst.width - 1);
            dst.add(channel, sy, sx, d_out[y * out_w + x]);
        }
    }
}

/// Seeded Gaussian initialization, scaled per layer by 1/2 sqrt(fan_in);
/// biases get a small random offset.
fn init_conv_params(seed: u64, layers: &[(usize, usize)]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (in_ch, out_ch) in layers {
        let scale = 0.5 / ((in_ch * 9) as f64).sqrt();
        for _ in 0..out_ch * in_ch * 9 {
            params.push(scale * normal_sample(&mut rng));
        }
        for _ in 0..*out_ch {
            params.push(0.02 * normal_sample(&mut rng));
        }
    }
    params
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}
