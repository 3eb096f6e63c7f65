//! Parameter/gradient bookkeeping, the Adam optimizer, finite-difference
//! gradient verification, and the joint depth + pose refinement loop.
//!
//! Gradients are propagated by hand-derived chain rule through the fixed
//! computation shape (predict -> warp -> sample -> residual -> reduce); the
//! graph is static per iteration, so explicit adjoints are simpler to verify
//! than a general tape.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_map, CameraIntrinsics, Se3Tangent, Se3Transform};
use crate::imaging::{build_pyramid, DepthMap, IntensityImage, Pyramid, SparseDepth};
use crate::losses::{
    mask_regularization_loss, masked_photometric_loss, photometric_residual_with_grad,
    smoothness_loss, supervised_loss, total_loss, IndicatorMode, LossBreakdown, LossWeights,
};
use crate::predictors::{
    direct_field_depth_backprop, ExplainabilityMask, MaskLogits, ToyDepthNet, ToyPoseNet,
};

// ---------------------------------------------------------------------------
// Parameter vectors.
// ---------------------------------------------------------------------------

/// Metadata of one named parameter block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub name: String,
    pub len: usize,
    /// Whether decoupled weight decay applies (predictor weights only).
    pub decay: bool,
    /// Frozen blocks are left untouched by the optimizer.
    pub frozen: bool,
}

impl BlockSpec {
    pub fn new(name: impl Into<String>, len: usize) -> Self {
        BlockSpec {
            name: name.into(),
            len,
            decay: false,
            frozen: false,
        }
    }

    pub fn with_decay(mut self, decay: bool) -> Self {
        self.decay = decay;
        self
    }

    pub fn with_frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }
}

/// Named parameter blocks with a stable layout and a flat vector view.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    specs: Vec<BlockSpec>,
    values: Vec<Vec<f64>>,
}

impl ParamVector {
    pub fn new(blocks: Vec<(BlockSpec, Vec<f64>)>) -> Result<Self> {
        let mut specs = Vec::with_capacity(blocks.len());
        let mut values = Vec::with_capacity(blocks.len());
        for (spec, vals) in blocks {
            if spec.len != vals.len() {
                return Err(Error::DimensionMismatch {
                    context: "parameter block",
                    left: format!("{} ({})", spec.name, spec.len),
                    right: format!("{}", vals.len()),
                });
            }
            if specs.iter().any(|s: &BlockSpec| s.name == spec.name) {
                return Err(Error::InvalidValue(format!(
                    "duplicate parameter block '{}'",
                    spec.name
                )));
            }
            specs.push(spec);
            values.push(vals);
        }
        Ok(ParamVector { specs, values })
    }

    pub fn specs(&self) -> &[BlockSpec] {
        &self.specs
    }

    pub fn n_blocks(&self) -> usize {
        self.specs.len()
    }

    pub fn total_len(&self) -> usize {
        self.specs.iter().map(|s| s.len).sum()
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.block_index(name).map(|i| self.values[i].as_slice())
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.block_index(name)?;
        Some(self.values[i].as_mut_slice())
    }

    pub fn block_at(&self, index: usize) -> &[f64] {
        &self.values[index]
    }

    pub fn block_at_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.values[index]
    }

    pub fn zeros_like(&self) -> ParamVector {
        ParamVector {
            specs: self.specs.clone(),
            values: self.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.specs == other.specs
    }

    /// Concatenated view in block order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for v in &self.values {
            out.extend_from_slice(v);
        }
        out
    }

    /// Rebuild from a flat vector with this vector's layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamVector> {
        if flat.len() != self.total_len() {
            return Err(Error::DimensionMismatch {
                context: "unflatten",
                left: format!("{}", flat.len()),
                right: format!("{}", self.total_len()),
            });
        }
        let mut values = Vec::with_capacity(self.specs.len());
        let mut off = 0;
        for spec in &self.specs {
            values.push(flat[off..off + spec.len].to_vec());
            off += spec.len;
        }
        Ok(ParamVector {
            specs: self.specs.clone(),
            values,
        })
    }

    /// Serialize as one JSON header line (block names, lengths, flags,
    /// total element count) followed by the flat values as little-endian
    /// f64.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        #[derive(serde::Serialize)]
        struct Header<'a> {
            blocks: Vec<BlockHeader<'a>>,
            total: usize,
        }
        #[derive(serde::Serialize)]
        struct BlockHeader<'a> {
            name: &'a str,
            len: usize,
            decay: bool,
            frozen: bool,
        }
        let header = Header {
            blocks: self
                .specs
                .iter()
                .map(|s| BlockHeader {
                    name: &s.name,
                    len: s.len,
                    decay: s.decay,
                    frozen: s.frozen,
                })
                .collect(),
            total: self.total_len(),
        };
        let mut out = serde_json::to_string(&header)?.into_bytes();
        out.push(b'\n');
        for v in self.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<ParamVector> {
        #[derive(serde::Deserialize)]
        struct Header {
            blocks: Vec<BlockHeader>,
            total: usize,
        }
        #[derive(serde::Deserialize)]
        struct BlockHeader {
            name: String,
            len: usize,
            decay: bool,
            frozen: bool,
        }
        let bytes = std::fs::read(path)?;
        let newline = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Parse {
                line: 1,
                detail: "missing parameter header line".into(),
            })?;
        let header: Header = serde_json::from_slice(&bytes[..newline])?;
        let body = &bytes[newline + 1..];
        if body.len() != header.total * 8 {
            return Err(Error::DimensionMismatch {
                context: "parameter payload",
                left: format!("{} bytes", body.len()),
                right: format!("{} values", header.total),
            });
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut blocks = Vec::with_capacity(header.blocks.len());
        let mut off = 0;
        for b in header.blocks {
            blocks.push((
                BlockSpec::new(b.name, b.len)
                    .with_decay(b.decay)
                    .with_frozen(b.frozen),
                flat[off..off + b.len].to_vec(),
            ));
            off += b.len;
        }
        ParamVector::new(blocks)
    }
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

/// Adam hyperparameters. Defaults: lr 1e-4, beta1 0.9, beta2 0.999,
/// weight decay 3e-4, epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 3e-4,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: step count plus first/second moment vectors with the
/// same block layout as the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamConfig,
    m: ParamVector,
    v: ParamVector,
}

impl OptimizerState {
    pub fn new(template: &ParamVector, config: AdamConfig) -> Self {
        OptimizerState {
            step: 0,
            config,
            m: template.zeros_like(),
            v: template.zeros_like(),
        }
    }
}

/// One Adam update with bias correction. Decoupled weight decay shrinks
/// decay-flagged blocks before the Adam delta; frozen blocks are skipped
/// entirely. Deterministic.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut ParamVector,
    grads: &ParamVector,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::DimensionMismatch {
            context: "adam step",
            left: "params".into(),
            right: "grads/state layout".into(),
        });
    }
    for (i, spec) in params.specs.iter().enumerate() {
        if grads.values[i].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: spec.name.clone(),
            });
        }
    }

    state.step += 1;
    let cfg = state.config;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);

    for i in 0..params.values.len() {
        let spec = &params.specs[i];
        if spec.frozen {
            continue;
        }
        let p = &mut params.values[i];
        let g = &grads.values[i];
        let m = &mut state.m.values[i];
        let v = &mut state.v.values[i];
        if spec.decay && cfg.weight_decay > 0.0 {
            for x in p.iter_mut() {
                *x -= cfg.lr * cfg.weight_decay * *x;
            }
        }
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite-difference verification.
// ---------------------------------------------------------------------------

/// A deterministic scalar loss over a parameter vector, with its analytic
/// gradient.
pub trait LossFunction {
    fn value(&self, params: &ParamVector) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
}

#[derive(Debug, Clone, Copy)]
pub struct FdCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Blocks larger than this get a seeded random coordinate subset.
    pub max_coords_per_block: usize,
    pub seed: u64,
}

impl Default for FdCheckOptions {
    fn default() -> Self {
        FdCheckOptions {
            step: 1e-6,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            max_coords_per_block: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdBlockReport {
    pub block: String,
    pub n_checked: usize,
    pub n_failed: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub blocks: Vec<FdBlockReport>,
    pub passed: bool,
}

impl FdReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<24} checked {:>5}  failed {:>4}  max rel err {:.3e}  {}\n",
                b.block,
                b.n_checked,
                b.n_failed,
                b.max_rel_error,
                if b.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Compare the analytic gradient against central finite differences,
/// coordinate by coordinate. Failures are reported, never thrown.
pub fn finite_difference_check(
    loss: &dyn LossFunction,
    params: &ParamVector,
    opts: &FdCheckOptions,
) -> Result<FdReport> {
    let (_, grad) = loss.value_and_grad(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut blocks = Vec::with_capacity(params.n_blocks());
    let mut all_passed = true;

    for (bi, spec) in params.specs().iter().enumerate() {
        let len = spec.len;
        let coords: Vec<usize> = if len <= opts.max_coords_per_block {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, opts.max_coords_per_block).into_vec()
        };
        let mut n_failed = 0;
        let mut max_rel = 0.0_f64;
        let mut work = params.clone();
        for &c in &coords {
            let base = params.values[bi][c];
            work.values[bi][c] = base + opts.step;
            let plus = loss.value(&work)?;
            work.values[bi][c] = base - opts.step;
            let minus = loss.value(&work)?;
            work.values[bi][c] = base;
            let fd = (plus - minus) / (2.0 * opts.step);
            let analytic = grad.values[bi][c];
            let err = (analytic - fd).abs();
            let scale = analytic.abs().max(fd.abs());
            if err > opts.rel_tol * scale + opts.abs_floor {
                n_failed += 1;
            }
            max_rel = max_rel.max(err / (scale + opts.abs_floor));
        }
        let passed = n_failed == 0;
        all_passed &= passed;
        blocks.push(FdBlockReport {
            block: spec.name.clone(),
            n_checked: coords.len(),
            n_failed,
            max_rel_error: max_rel,
            passed,
        });
    }
    Ok(FdReport {
        blocks,
        passed: all_passed,
    })
}

// ---------------------------------------------------------------------------
// Sequence objective (the full training loss over one short sequence).
// ---------------------------------------------------------------------------

/// Which predictor family provides depth, pose, and masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorChoice {
    /// Log-depth field per frame, tangent per pair, mask logits per scale.
    DirectField,
    /// Small convolutional depth and pose/mask networks.
    ToyCnn,
}

/// Immutable per-sequence inputs.
#[derive(Debug, Clone)]
pub struct SequenceInputs {
    pub images: Vec<IntensityImage>,
    /// Input sparse depth d_k (gates the photometric indicator and feeds
    /// the depth predictor).
    pub sparse: Vec<SparseDepth>,
    /// Semi-dense supervision for the supervised loss.
    pub supervision: Vec<SparseDepth>,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub levels: usize,
    pub indicator: IndicatorMode,
    pub predictor: PredictorChoice,
    /// Sparse-depth value scale fed to the toy depth net.
    pub depth_input_scale: f64,
    /// Output scale of the toy depth net.
    pub depth_scale: f64,
    /// Per-block freeze switches.
    pub optimize_depth: bool,
    pub optimize_pose: bool,
    pub optimize_masks: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weights: LossWeights::default(),
            levels: 4,
            indicator: IndicatorMode::ExcludeMeasured,
            predictor: PredictorChoice::DirectField,
            depth_input_scale: 0.01,
            depth_scale: 1.0,
            optimize_depth: true,
            optimize_pose: true,
            optimize_masks: true,
        }
    }
}

/// Starting values for the direct parameter field.
#[derive(Debug, Clone, Default)]
pub struct InitOverrides {
    /// Constant initial depth in meters (direct field). Defaults to 1.
    pub init_depth: Option<f64>,
    /// Full initial depth maps (direct field), overriding `init_depth`.
    pub depth_maps: Option<Vec<DepthMap>>,
    /// Initial per-pair tangents (direct field). Defaults to zero motion.
    pub tangents: Option<Vec<Se3Tangent>>,
    /// Constant initial mask logit (direct field). Defaults to 0 (mask 0.5).
    pub mask_logit: Option<f64>,
}

enum PredictorStack {
    Direct,
    ToyCnn {
        depth_net: ToyDepthNet,
        pose_net: ToyPoseNet,
    },
}

/// The total loss of the framework evaluated over one frame sequence:
/// supervised and smoothness terms averaged over frames, masked photometric
/// and mask regularization averaged over consecutive pairs.
pub struct SequenceObjective {
    inputs: SequenceInputs,
    cfg: ObjectiveConfig,
    stack: PredictorStack,
    luma: Vec<IntensityImage>,
    image_pyramids: Vec<Pyramid<IntensityImage>>,
    sparse_pyramids: Vec<Pyramid<SparseDepth>>,
    mask_dims: Vec<(usize, usize)>,
}

/// Everything the predictors produce for one evaluation.
pub struct Predictions {
    pub depths: Vec<DepthMap>,
    pub tangents: Vec<Se3Tangent>,
    pub masks: Vec<ExplainabilityMask>,
    traces: PredictionTraces,
}

enum PredictionTraces {
    Direct,
    ToyCnn {
        depth: Vec<crate::predictors::DepthNetTrace>,
        pose: Vec<crate::predictors::PoseNetTrace>,
    },
}

impl SequenceObjective {
    pub fn new(inputs: SequenceInputs, cfg: ObjectiveConfig) -> Result<Self> {
        let n = inputs.images.len();
        if n < 2 {
            return Err(Error::InvalidValue(format!(
                "sequence needs at least 2 frames, got {n}"
            )));
        }
        if inputs.sparse.len() != n || inputs.supervision.len() != n {
            return Err(Error::DimensionMismatch {
                context: "sequence inputs",
                left: format!("{n} images"),
                right: format!(
                    "{} sparse / {} supervision",
                    inputs.sparse.len(),
                    inputs.supervision.len()
                ),
            });
        }
        let (w, h) = (inputs.intrinsics.width, inputs.intrinsics.height);
        for img in &inputs.images {
            if img.width() != w || img.height() != h {
                return Err(Error::DimensionMismatch {
                    context: "sequence frame size",
                    left: format!("{}x{}", img.width(), img.height()),
                    right: format!("{w}x{h}"),
                });
            }
        }
        let luma: Vec<_> = inputs.images.iter().map(|i| i.luma()).collect();
        let image_pyramids = luma
            .iter()
            .map(|i| build_pyramid(i, cfg.levels))
            .collect::<Result<Vec<_>>>()?;
        let sparse_pyramids = inputs
            .sparse
            .iter()
            .map(|s| build_pyramid(s, cfg.levels))
            .collect::<Result<Vec<_>>>()?;
        let mut mask_dims = Vec::with_capacity(cfg.levels);
        let (mut lw, mut lh) = (w, h);
        for _ in 0..cfg.levels {
            mask_dims.push((lw, lh));
            lw /= 2;
            lh /= 2;
        }
        let stack = match cfg.predictor {
            PredictorChoice::DirectField => PredictorStack::Direct,
            PredictorChoice::ToyCnn => PredictorStack::ToyCnn {
                depth_net: ToyDepthNet {
                    depth_input_scale: cfg.depth_input_scale,
                    depth_scale: cfg.depth_scale,
                },
                pose_net: ToyPoseNet::new(cfg.levels),
            },
        };
        Ok(SequenceObjective {
            inputs,
            cfg,
            stack,
            luma,
            image_pyramids,
            sparse_pyramids,
            mask_dims,
        })
    }

    pub fn inputs(&self) -> &SequenceInputs {
        &self.inputs
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.cfg
    }

    pub fn n_frames(&self) -> usize {
        self.inputs.images.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.n_frames() - 1
    }

    /// Build the initial parameter vector with the stable block layout.
    pub fn initial_params(&self, init: &InitOverrides, seed: u64) -> Result<ParamVector> {
        let (w, h) = (self.inputs.intrinsics.width, self.inputs.intrinsics.height);
        let mut blocks = Vec::new();
        match &self.stack {
            PredictorStack::Direct => {
                for k in 0..self.n_frames() {
                    let values = if let Some(maps) = &init.depth_maps {
                        if maps.len() != self.n_frames() {
                            return Err(Error::DimensionMismatch {
                                context: "initial depth maps",
                                left: format!("{}", maps.len()),
                                right: format!("{}", self.n_frames()),
                            });
                        }
                        maps[k].data().iter().map(|d| d.ln()).collect()
                    } else {
                        vec![init.init_depth.unwrap_or(1.0).ln(); w * h]
                    };
                    blocks.push((
                        BlockSpec::new(format!("depth/{k}"), w * h)
                            .with_frozen(!self.cfg.optimize_depth),
                        values,
                    ));
                }
                for k in 0..self.n_pairs() {
                    let tangent = init
                        .tangents
                        .as_ref()
                        .map(|t| t[k])
                        .unwrap_or_else(Se3Tangent::zero);
                    blocks.push((
                        BlockSpec::new(format!("pose/{k}"), 6)
                            .with_frozen(!self.cfg.optimize_pose),
                        tangent.to_array().to_vec(),
                    ));
                    for (s, (lw, lh)) in self.mask_dims.iter().enumerate() {
                        blocks.push((
                            BlockSpec::new(format!("mask/{k}/s{s}"), lw * lh)
                                .with_frozen(!self.cfg.optimize_masks),
                            vec![init.mask_logit.unwrap_or(0.0); lw * lh],
                        ));
                    }
                }
            }
            PredictorStack::ToyCnn { depth_net, pose_net } => {
                let dp = depth_net.init_params(seed);
                let spans = depth_net.layer_spans();
                for (i, (a, b)) in spans.iter().enumerate() {
                    blocks.push((
                        BlockSpec::new(format!("depthnet/conv{}", i + 1), b - a)
                            .with_decay(true)
                            .with_frozen(!self.cfg.optimize_depth),
                        dp[*a..*b].to_vec(),
                    ));
                }
                let pp = pose_net.init_params(seed.wrapping_add(1));
                let spans = pose_net.layer_spans();
                let names = ["enc1", "enc2", "pose_head", "mask_head"];
                for (i, (a, b)) in spans.iter().enumerate() {
                    let frozen = match names[i] {
                        "pose_head" => !self.cfg.optimize_pose,
                        "mask_head" => !self.cfg.optimize_masks,
                        _ => !self.cfg.optimize_pose && !self.cfg.optimize_masks,
                    };
                    blocks.push((
                        BlockSpec::new(format!("posenet/{}", names[i]), b - a)
                            .with_decay(true)
                            .with_frozen(frozen),
                        pp[*a..*b].to_vec(),
                    ));
                }
            }
        }
        ParamVector::new(blocks)
    }

    /// Run the predictors for the current parameters.
    pub fn predict(&self, params: &ParamVector) -> Result<Predictions> {
        let (w, h) = (self.inputs.intrinsics.width, self.inputs.intrinsics.height);
        match &self.stack {
            PredictorStack::Direct => {
                let mut depths = Vec::with_capacity(self.n_frames());
                for k in 0..self.n_frames() {
                    let log_depth = params
                        .block(&format!("depth/{k}"))
                        .ok_or_else(|| Error::InvalidValue(format!("missing block depth/{k}")))?;
                    depths.push(DepthMap::new(
                        w,
                        h,
                        log_depth.iter().map(|v| v.exp()).collect(),
                    )?);
                }
                let mut tangents = Vec::with_capacity(self.n_pairs());
                let mut masks = Vec::with_capacity(self.n_pairs());
                for k in 0..self.n_pairs() {
                    let pose = params
                        .block(&format!("pose/{k}"))
                        .ok_or_else(|| Error::InvalidValue(format!("missing block pose/{k}")))?;
                    tangents.push(Se3Tangent::from_slice(pose));
                    let levels = self
                        .mask_dims
                        .iter()
                        .enumerate()
                        .map(|(s, (lw, lh))| {
                            params
                                .block(&format!("mask/{k}/s{s}"))
                                .map(|logits| MaskLogits {
                                    width: *lw,
                                    height: *lh,
                                    logits: logits.to_vec(),
                                })
                                .ok_or_else(|| {
                                    Error::InvalidValue(format!("missing block mask/{k}/s{s}"))
                                })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    masks.push(ExplainabilityMask { levels });
                }
                Ok(Predictions {
                    depths,
                    tangents,
                    masks,
                    traces: PredictionTraces::Direct,
                })
            }
            PredictorStack::ToyCnn { depth_net, pose_net } => {
                let depth_params = concat_blocks(params, &["depthnet/conv1", "depthnet/conv2", "depthnet/conv3"])?;
                let pose_params = concat_blocks(
                    params,
                    &["posenet/enc1", "posenet/enc2", "posenet/pose_head", "posenet/mask_head"],
                )?;
                let mut depths = Vec::with_capacity(self.n_frames());
                let mut depth_traces = Vec::with_capacity(self.n_frames());
                for k in 0..self.n_frames() {
                    let (d, t) =
                        depth_net.predict(&self.luma[k], &self.inputs.sparse[k], &depth_params)?;
                    depths.push(d);
                    depth_traces.push(t);
                }
                let mut tangents = Vec::with_capacity(self.n_pairs());
                let mut masks = Vec::with_capacity(self.n_pairs());
                let mut pose_traces = Vec::with_capacity(self.n_pairs());
                for k in 0..self.n_pairs() {
                    let (tangent, mask, trace) =
                        pose_net.predict(&self.luma[k], &self.luma[k + 1], &pose_params)?;
                    tangents.push(tangent);
                    masks.push(mask);
                    pose_traces.push(trace);
                }
                Ok(Predictions {
                    depths,
                    tangents,
                    masks,
                    traces: PredictionTraces::ToyCnn {
                        depth: depth_traces,
                        pose: pose_traces,
                    },
                })
            }
        }
    }

    /// Loss and gradient at `params`.
    pub fn evaluate(&self, params: &ParamVector) -> Result<(LossBreakdown, ParamVector)> {
        let preds = self.predict(params)?;
        let n = self.n_frames();
        let p = self.n_pairs();
        let (w, h) = (self.inputs.intrinsics.width, self.inputs.intrinsics.height);
        let inv_n = 1.0 / n as f64;
        let inv_p = 1.0 / p as f64;

        // Upstream gradients at the prediction level.
        let mut d_depths = vec![vec![0.0; w * h]; n];
        let mut d_tangents = vec![[0.0; 6]; p];
        let mut d_mask_values: Vec<Vec<Vec<f64>>> = Vec::with_capacity(p);

        // Per-frame terms.
        let mut sup_value = 0.0;
        let mut smo_value = 0.0;
        for k in 0..n {
            let (sv, sg) = supervised_loss(&preds.depths[k], &self.inputs.supervision[k])?;
            sup_value += sv * inv_n;
            let (mv, mg) = smoothness_loss(&preds.depths[k])?;
            smo_value += mv * inv_n;
            let alpha_n = self.cfg.weights.alpha * inv_n;
            let gamma_n = self.cfg.weights.gamma * inv_n;
            for (d, (a, b)) in d_depths[k].iter_mut().zip(sg.iter().zip(&mg)) {
                *d += alpha_n * a + gamma_n * b;
            }
        }

        // Per-pair photometric and mask terms.
        let depth_pyramids = preds
            .depths
            .iter()
            .map(|d| build_pyramid(d, self.cfg.levels))
            .collect::<Result<Vec<_>>>()?;
        let mut pho_value = 0.0;
        let mut reg_value = 0.0;
        let mut per_scale = vec![0.0; self.cfg.levels];
        let beta_p = self.cfg.weights.beta * inv_p;
        let theta_p = self.cfg.weights.theta * inv_p;
        for k in 0..p {
            let mask_values = preds.masks[k].values();
            let levels = (0..self.cfg.levels)
                .map(|s| {
                    photometric_residual_with_grad(
                        &self.image_pyramids[k],
                        &self.image_pyramids[k + 1],
                        &depth_pyramids[k],
                        &depth_pyramids[k + 1],
                        &self.sparse_pyramids[k],
                        &self.sparse_pyramids[k + 1],
                        &preds.tangents[k],
                        &self.inputs.intrinsics,
                        s,
                        self.cfg.indicator,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (pv, ps, grads) = masked_photometric_loss(&levels, &mask_values)?;
            pho_value += pv * inv_p;
            for (acc, v) in per_scale.iter_mut().zip(&ps) {
                *acc += v * inv_p;
            }
            let (rv, rg) = mask_regularization_loss(&mask_values)?;
            reg_value += rv * inv_p;

            for (d, g) in d_depths[k].iter_mut().zip(&grads.d_depth1) {
                *d += beta_p * g;
            }
            for (d, g) in d_depths[k + 1].iter_mut().zip(&grads.d_depth2) {
                *d += beta_p * g;
            }
            for i in 0..6 {
                d_tangents[k][i] = beta_p * grads.d_tangent[i];
            }
            let mut dm = Vec::with_capacity(self.cfg.levels);
            for s in 0..self.cfg.levels {
                dm.push(
                    grads.d_masks[s]
                        .iter()
                        .zip(&rg[s])
                        .map(|(a, b)| beta_p * a + theta_p * b)
                        .collect::<Vec<f64>>(),
                );
            }
            d_mask_values.push(dm);
        }

        let breakdown = total_loss(
            sup_value,
            pho_value,
            smo_value,
            reg_value,
            per_scale,
            &self.cfg.weights,
        );

        // Chain upstream gradients through the predictors into param space.
        let mut grads = params.zeros_like();
        match (&self.stack, &preds.traces) {
            (PredictorStack::Direct, PredictionTraces::Direct) => {
                for k in 0..n {
                    let g = direct_field_depth_backprop(&preds.depths[k], &d_depths[k]);
                    grads
                        .block_mut(&format!("depth/{k}"))
                        .unwrap()
                        .copy_from_slice(&g);
                }
                for k in 0..p {
                    grads
                        .block_mut(&format!("pose/{k}"))
                        .unwrap()
                        .copy_from_slice(&d_tangents[k]);
                    let d_logits = preds.masks[k].d_logits_from_d_values(&d_mask_values[k]);
                    for (s, dl) in d_logits.iter().enumerate() {
                        grads
                            .block_mut(&format!("mask/{k}/s{s}"))
                            .unwrap()
                            .copy_from_slice(dl);
                    }
                }
            }
            (
                PredictorStack::ToyCnn { depth_net, pose_net },
                PredictionTraces::ToyCnn { depth, pose },
            ) => {
                let depth_params = concat_blocks(params, &["depthnet/conv1", "depthnet/conv2", "depthnet/conv3"])?;
                let pose_params = concat_blocks(
                    params,
                    &["posenet/enc1", "posenet/enc2", "posenet/pose_head", "posenet/mask_head"],
                )?;
                let mut depth_grad = vec![0.0; depth_params.len()];
                for k in 0..n {
                    let g = depth_net.backprop(&depth[k], &depth_params, &d_depths[k]);
                    for (acc, v) in depth_grad.iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                scatter_blocks(
                    &mut grads,
                    &["depthnet/conv1", "depthnet/conv2", "depthnet/conv3"],
                    &depth_grad,
                )?;
                let mut pose_grad = vec![0.0; pose_params.len()];
                for k in 0..p {
                    let d_logits = preds.masks[k].d_logits_from_d_values(&d_mask_values[k]);
                    let g = pose_net.backprop(&pose[k], &pose_params, &d_tangents[k], &d_logits);
                    for (acc, v) in pose_grad.iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                scatter_blocks(
                    &mut grads,
                    &["posenet/enc1", "posenet/enc2", "posenet/pose_head", "posenet/mask_head"],
                    &pose_grad,
                )?;
            }
            _ => unreachable!("stack and traces always match"),
        }

        Ok((breakdown, grads))
    }
}

fn concat_blocks(params: &ParamVector, names: &[&str]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for name in names {
        let b = params
            .block(name)
            .ok_or_else(|| Error::InvalidValue(format!("missing block {name}")))?;
        out.extend_from_slice(b);
    }
    Ok(out)
}

fn scatter_blocks(grads: &mut ParamVector, names: &[&str], flat: &[f64]) -> Result<()> {
    let mut off = 0;
    for name in names {
        let b = grads
            .block_mut(name)
            .ok_or_else(|| Error::InvalidValue(format!("missing block {name}")))?;
        b.copy_from_slice(&flat[off..off + b.len()]);
        off += b.len();
    }
    Ok(())
}

impl LossFunction for SequenceObjective {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.evaluate(params)?.0.total)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let (breakdown, grads) = self.evaluate(params)?;
        Ok((breakdown.total, grads))
    }
}

// ---------------------------------------------------------------------------
// Joint refinement.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RefineOptions {
    pub objective: ObjectiveConfig,
    pub adam: AdamConfig,
    pub iters: usize,
    pub seed: u64,
    pub init: InitOverrides,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            objective: ObjectiveConfig::default(),
            adam: AdamConfig::default(),
            iters: 100,
            seed: 0,
            init: InitOverrides::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefinementResult {
    pub depths: Vec<DepthMap>,
    pub pair_tangents: Vec<Se3Tangent>,
    pub pair_transforms: Vec<Se3Transform>,
    /// Mask values per pair, per scale.
    pub masks: Vec<Vec<Vec<f64>>>,
    /// Loss before each iteration's step, plus one final entry.
    pub history: Vec<LossBreakdown>,
    pub diverged_at: Option<usize>,
    pub params: ParamVector,
}

impl RefinementResult {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Render the loss history as the CSV export format.
pub fn history_to_csv(history: &[LossBreakdown]) -> String {
    let mut out = String::from("iter,supervised,photometric,smoothness,mask_reg,total\n");
    for (i, b) in history.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, b.supervised, b.photometric_masked, b.smoothness, b.mask_reg, b.total
        ));
    }
    out
}

/// Run the optimization, recording history; divergence sets a flag instead
/// of failing so partial results survive.
pub fn run_refinement(inputs: SequenceInputs, opts: &RefineOptions) -> Result<RefinementResult> {
    if opts.iters == 0 {
        return Err(Error::InvalidValue("refinement needs at least 1 iteration".into()));
    }
    let objective = SequenceObjective::new(inputs, opts.objective.clone())?;
    let mut params = objective.initial_params(&opts.init, opts.seed)?;
    let mut state = OptimizerState::new(&params, opts.adam);
    let mut history = Vec::with_capacity(opts.iters + 1);
    let mut diverged_at = None;

    for iter in 0..opts.iters {
        let step_result = (|| -> Result<()> {
            let (breakdown, grads) = objective.evaluate(&params)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    iteration: iter,
                    detail: format!("total loss {}", breakdown.total),
                });
            }
            history.push(breakdown);
            adam_step(&mut state, &mut params, &grads)?;
            Ok(())
        })();
        match step_result {
            Ok(()) => {}
            Err(e) => {
                if iter == 0 {
                    // First-iteration failures are input errors, not
                    // optimization divergence.
                    return Err(e);
                }
                diverged_at = Some(iter);
                break;
            }
        }
    }
    if diverged_at.is_none() {
        let (final_breakdown, _) = objective.evaluate(&params)?;
        history.push(final_breakdown);
    }

    let preds = match objective.predict(&params) {
        Ok(p) => p,
        Err(_) if diverged_at.is_some() => {
            // Predictions at the diverged parameters may be invalid; return
            // what the history has.
            return Ok(RefinementResult {
                depths: Vec::new(),
                pair_tangents: Vec::new(),
                pair_transforms: Vec::new(),
                masks: Vec::new(),
                history,
                diverged_at,
                params,
            });
        }
        Err(e) => return Err(e),
    };
    let pair_transforms = preds.tangents.iter().map(exp_map).collect();
    let masks = preds.masks.iter().map(|m| m.values()).collect();
    Ok(RefinementResult {
        depths: preds.depths,
        pair_tangents: preds.tangents,
        pair_transforms,
        masks,
        history,
        diverged_at,
        params,
    })
}

/// [`run_refinement`] with the strict error contract: divergence is an
/// error carrying the iteration index.
pub fn joint_refine(inputs: SequenceInputs, opts: &RefineOptions) -> Result<RefinementResult> {
    let result = run_refinement(inputs, opts)?;
    if let Some(iteration) = result.diverged_at {
        return Err(Error::Diverged {
            iteration,
            detail: "non-finite loss or gradient".into(),
        });
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Gradient-check suite (shared by the CLI and the acceptance tests).
// ---------------------------------------------------------------------------

/// Smooth test image: a seeded mixture of low-frequency sinusoids.
pub fn gradcheck_image(seed: u64, width: usize, height: usize) -> IntensityImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c) = (
        rng.random::<f64>() * 6.0,
        rng.random::<f64>() * 6.0,
        rng.random::<f64>() * 6.0,
    );
    IntensityImage::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64 / width as f64, y as f64 / height as f64);
        0.5 + 0.22 * (a + 5.0 * xf + 2.0 * yf).sin()
            + 0.18 * (b + 3.0 * yf - 4.0 * xf).cos()
            + 0.05 * (c + 9.0 * xf + 7.0 * yf).sin()
    })
    .unwrap()
}

/// Depth field whose second differences are bounded away from zero: a
/// quadratic bowl dominates a weaker low-frequency ripple. This keeps the
/// L1 smoothness terms off their kinks, where central differences and the
/// subgradient legitimately disagree.
pub fn gradcheck_depth_field(seed: u64, width: usize, height: usize) -> DepthMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = 0.45 + 0.2 * rng.random::<f64>();
    let b = 0.4 + 0.2 * rng.random::<f64>();
    let c = 0.25 + 0.1 * rng.random::<f64>();
    let (cx0, cy0) = (
        0.2 + 0.3 * rng.random::<f64>(),
        0.2 + 0.3 * rng.random::<f64>(),
    );
    let amp = 0.08 + 0.04 * rng.random::<f64>();
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    let k = 1.28_f64;
    let (kx, ky) = (
        k * theta.cos() / width as f64,
        k * theta.sin() / height as f64,
    );
    DepthMap::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64 / width as f64, y as f64 / height as f64);
        2.0 + a * (xf - cx0) * (xf - cx0)
            + b * (yf - cy0) * (yf - cy0)
            + c * xf * yf
            + amp * (phase + kx * x as f64 + ky * y as f64).sin()
    })
    .unwrap()
}

/// Deterministic two-frame instance for gradient verification.
pub fn gradcheck_inputs(seed: u64, width: usize, height: usize) -> SequenceInputs {
    let gt0 = gradcheck_depth_field(seed ^ 0x11, width, height);
    let gt1 = gradcheck_depth_field(seed ^ 0x12, width, height);
    SequenceInputs {
        images: vec![
            gradcheck_image(seed ^ 0x01, width, height),
            gradcheck_image(seed ^ 0x02, width, height),
        ],
        sparse: vec![
            crate::sensorsim::corrupt_depth(
                &gt0,
                &crate::sensorsim::NoiseModel::new(0.05, 0.25, seed ^ 0x03).unwrap(),
            ),
            crate::sensorsim::corrupt_depth(
                &gt1,
                &crate::sensorsim::NoiseModel::new(0.05, 0.25, seed ^ 0x04).unwrap(),
            ),
        ],
        supervision: vec![
            crate::sensorsim::corrupt_depth(
                &gt0,
                &crate::sensorsim::NoiseModel::new(0.0, 0.5, seed ^ 0x05).unwrap(),
            ),
            crate::sensorsim::corrupt_depth(
                &gt1,
                &crate::sensorsim::NoiseModel::new(0.0, 0.5, seed ^ 0x06).unwrap(),
            ),
        ],
        intrinsics: CameraIntrinsics::new(
            1.3 * width as f64,
            1.25 * height as f64,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
        .unwrap(),
    }
}

fn gradcheck_init(seed: u64, width: usize, height: usize) -> InitOverrides {
    InitOverrides {
        depth_maps: Some(vec![
            gradcheck_depth_field(seed ^ 0x21, width, height),
            gradcheck_depth_field(seed ^ 0x22, width, height),
        ]),
        tangents: Some(vec![Se3Tangent::from_slice(&[
            0.002, -0.001, 0.0015, 0.01, -0.008, 0.006,
        ])]),
        mask_logit: Some(0.3),
        ..InitOverrides::default()
    }
}

/// Multiplies the analytic gradient by a constant: the planted defect used
/// to prove the checker catches wrong gradients.
struct ScaledGradient<'a> {
    inner: &'a dyn LossFunction,
    factor: f64,
}

impl LossFunction for ScaledGradient<'_> {
    fn value(&self, params: &ParamVector) -> Result<f64> {
        self.inner.value(params)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let (v, mut g) = self.inner.value_and_grad(params)?;
        for i in 0..g.n_blocks() {
            for x in g.block_at_mut(i) {
                *x *= self.factor;
            }
        }
        Ok((v, g))
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    /// (configuration name, per-block report).
    pub reports: Vec<(String, FdReport)>,
    pub passed: bool,
}

impl GradcheckOutcome {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, report) in &self.reports {
            out.push_str(&format!(
                "== {name} {}\n{}",
                if report.passed { "[ok]" } else { "[FAIL]" },
                report.render()
            ));
        }
        out.push_str(if self.passed {
            "gradcheck: all blocks passed\n"
        } else {
            "gradcheck: FAILURES above\n"
        });
        out
    }
}

/// Run the finite-difference verification over every loss term (isolated by
/// weight selection on the direct parameter field) and over both toy
/// predictor networks (through the full loss). `planted_bug` scales every
/// analytic gradient by 1.01 so the harness itself can be tested.
pub fn run_gradcheck(
    width: usize,
    height: usize,
    levels: usize,
    seed: u64,
    planted_bug: bool,
    fd: &FdCheckOptions,
) -> Result<GradcheckOutcome> {
    let weight_sets = [
        ("supervised(direct)", LossWeights::new(1.0, 0.0, 0.0, 0.0)?),
        ("photometric(direct)", LossWeights::new(0.0, 1.0, 0.0, 0.0)?),
        ("smoothness(direct)", LossWeights::new(0.0, 0.0, 1.0, 0.0)?),
        ("mask_reg(direct)", LossWeights::new(0.0, 0.0, 0.0, 1.0)?),
        ("total(direct)", LossWeights::default()),
    ];
    let mut reports = Vec::new();
    let mut passed = true;

    let mut check = |name: &str, objective: &SequenceObjective, params: &ParamVector| -> Result<()> {
        let report = if planted_bug {
            let bugged = ScaledGradient {
                inner: objective,
                factor: 1.01,
            };
            finite_difference_check(&bugged, params, fd)?
        } else {
            finite_difference_check(objective, params, fd)?
        };
        passed &= report.passed;
        reports.push((name.to_string(), report));
        Ok(())
    };

    for (name, weights) in weight_sets {
        let cfg = ObjectiveConfig {
            weights,
            levels,
            ..ObjectiveConfig::default()
        };
        let objective = SequenceObjective::new(gradcheck_inputs(seed, width, height), cfg)?;
        let params = objective.initial_params(&gradcheck_init(seed, width, height), seed)?;
        check(name, &objective, &params)?;
    }

    let cfg = ObjectiveConfig {
        levels,
        predictor: PredictorChoice::ToyCnn,
        ..ObjectiveConfig::default()
    };
    let objective = SequenceObjective::new(gradcheck_inputs(seed, width, height), cfg)?;
    let params = objective.initial_params(&InitOverrides::default(), seed)?;
    check("total(toycnn)", &objective, &params)?;

    Ok(GradcheckOutcome { reports, passed })
}
