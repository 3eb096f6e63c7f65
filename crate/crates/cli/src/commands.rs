//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};

use depthpose::dataio::{
    generate_synthetic, load_config, load_scene_spec, load_tum_sequence, read_depth_f32,
    read_trajectory, two_planes_preset, write_depth_f32, write_depth_png, write_trajectory,
    write_tum_layout, RunConfig, SequenceDataset,
};
use depthpose::diffcore::{
    history_to_csv, run_gradcheck, run_refinement, FdCheckOptions, PredictorChoice,
    RefineOptions, SequenceInputs,
};
use depthpose::evaluation::{
    avg_photometric_loss, compute_ate, compute_re, depth_metrics, Trajectory,
};
use depthpose::geometry::Se3Transform;
use depthpose::imaging::{DepthMap, SparseDepth};
use depthpose::losses::LossWeights;
use depthpose::sensorsim::{aggregate_supervision, NoiseModel};

use crate::manifest::RunManifest;

fn verbose() -> bool {
    match std::env::var("DEPTHPOSE_LOG").as_deref() {
        Ok("quiet") | Ok("off") => false,
        _ => true,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if verbose() {
            eprintln!($($arg)*);
        }
    };
}

fn load_config_or_default(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

pub fn simulate(
    scene_arg: &str,
    frames: usize,
    noise_f: f64,
    sample_rate: f64,
    seed: u64,
    out: &Path,
    config: Option<&Path>,
) -> Result<ExitCode> {
    let _ = load_config_or_default(config)?;
    let scene = if scene_arg == "two_planes" {
        if frames < 2 {
            bail!("a sequence needs at least 2 frames");
        }
        two_planes_preset(frames)
    } else {
        load_scene_spec(Path::new(scene_arg))
            .with_context(|| format!("loading scene file {scene_arg}"))?
            .to_scene()
    };
    let noise = NoiseModel::new(noise_f, sample_rate, seed)?;
    let dataset = generate_synthetic(&scene)?;
    std::fs::create_dir_all(out)?;
    write_tum_layout(out, &dataset, &noise)?;
    info!(
        "simulate: wrote {} frames ({}x{}) to {}",
        dataset.frames.len(),
        dataset.intrinsics.width,
        dataset.intrinsics.height,
        out.display()
    );

    let mut manifest = RunManifest::new(
        "simulate",
        seed,
        serde_json::json!({
            "scene": scene_arg,
            "frames": frames,
            "noise_f": noise_f,
            "sample_rate": sample_rate,
        }),
        &[],
    );
    for rel in ["rgb.txt", "depth.txt", "depth_gt.txt", "groundtruth.txt", "intrinsics.json"] {
        manifest.record(out, rel)?;
    }
    for k in 0..dataset.frames.len() {
        manifest.record(out, &format!("rgb/{k:06}.png"))?;
        manifest.record(out, &format!("depth/{k:06}.png"))?;
        manifest.record(out, &format!("depth_gt/{k:06}.png"))?;
        manifest.record(out, &format!("depth_gt/{k:06}.f32"))?;
    }
    manifest.write(out)?;
    Ok(ExitCode::SUCCESS)
}

pub struct RefineArgs {
    pub data: PathBuf,
    pub predictor: String,
    pub iters: usize,
    pub weights: Option<String>,
    pub out: PathBuf,
    pub seed: u64,
    pub levels: Option<usize>,
    pub lr: Option<f64>,
    pub init_depth: f64,
    pub aggregate: usize,
    pub config: Option<PathBuf>,
}

fn parse_weights(text: &str) -> Result<LossWeights> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| anyhow!("bad weight '{p}'")))
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        bail!("--weights expects four values alpha,beta,gamma,theta");
    }
    Ok(LossWeights::new(parts[0], parts[1], parts[2], parts[3])?)
}

/// Chain per-pair relative transforms into a camera-to-world trajectory
/// anchored at the identity.
fn chain_trajectory(
    timestamps: &[f64],
    pair_transforms: &[Se3Transform],
) -> Result<Trajectory> {
    let mut entries = Vec::with_capacity(timestamps.len());
    let mut pose = Se3Transform::identity();
    entries.push((timestamps[0], pose));
    for (k, t) in pair_transforms.iter().enumerate() {
        pose = pose.compose(&t.inverse());
        entries.push((timestamps[k + 1], pose));
    }
    Ok(Trajectory::new(entries)?)
}

fn build_supervision(dataset: &SequenceDataset, aggregate: usize) -> Result<Vec<SparseDepth>> {
    if aggregate == 0 {
        return Ok(dataset.frames.iter().map(|f| f.sparse.clone()).collect());
    }
    let poses: Vec<Se3Transform> = dataset
        .frames
        .iter()
        .map(|f| {
            f.gt_pose
                .ok_or_else(|| anyhow!("--aggregate needs ground-truth poses in the dataset"))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(dataset.frames.len());
    for k in 0..dataset.frames.len() {
        let lo = k.saturating_sub(aggregate);
        let hi = (k + aggregate + 1).min(dataset.frames.len());
        let frames: Vec<(SparseDepth, Se3Transform)> = (lo..hi)
            .map(|j| (dataset.frames[j].sparse.clone(), poses[j]))
            .collect();
        out.push(aggregate_supervision(&frames, k - lo, &dataset.intrinsics)?);
    }
    Ok(out)
}

pub fn refine(args: RefineArgs) -> Result<ExitCode> {
    if args.iters == 0 {
        bail!("--iters must be at least 1");
    }
    let cfg = load_config_or_default(args.config.as_deref())?;
    let predictor = match args.predictor.as_str() {
        "direct" => PredictorChoice::DirectField,
        "toycnn" => PredictorChoice::ToyCnn,
        other => bail!("unknown predictor '{other}' (use direct or toycnn)"),
    };
    let weights = match &args.weights {
        Some(text) => parse_weights(text)?,
        None => cfg.weights,
    };

    let dataset = load_tum_sequence(&args.data, cfg.max_assoc_offset_s)?;
    info!(
        "refine: {} frames from {}",
        dataset.frames.len(),
        args.data.display()
    );
    let supervision = build_supervision(&dataset, args.aggregate)?;
    let timestamps: Vec<f64> = dataset.frames.iter().map(|f| f.timestamp).collect();
    let inputs = SequenceInputs {
        images: dataset.frames.iter().map(|f| f.image.clone()).collect(),
        sparse: dataset.frames.iter().map(|f| f.sparse.clone()).collect(),
        supervision,
        intrinsics: dataset.intrinsics,
    };

    let mut opts = RefineOptions {
        iters: args.iters,
        seed: args.seed,
        ..RefineOptions::default()
    };
    opts.objective.weights = weights;
    opts.objective.levels = args.levels.unwrap_or(cfg.pyramid_levels);
    opts.objective.indicator = cfg.indicator;
    opts.objective.predictor = predictor;
    opts.objective.depth_input_scale = cfg.depth_input_scale;
    opts.objective.depth_scale = cfg.depth_scale;
    opts.adam = cfg.optimizer;
    if let Some(lr) = args.lr {
        opts.adam.lr = lr;
    }
    opts.init.init_depth = Some(args.init_depth);

    let result = run_refinement(inputs, &opts)?;

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("loss_history.csv"), history_to_csv(&result.history))?;

    let mut manifest = RunManifest::new(
        "refine",
        args.seed,
        serde_json::json!({
            "predictor": args.predictor,
            "iters": args.iters,
            "weights": [weights.alpha, weights.beta, weights.gamma, weights.theta],
            "levels": opts.objective.levels,
            "lr": opts.adam.lr,
            "init_depth": args.init_depth,
            "aggregate": args.aggregate,
        }),
        &[&args.data],
    );
    manifest.record(&args.out, "loss_history.csv")?;

    if let Some(iter) = result.diverged_at {
        manifest.write(&args.out)?;
        eprintln!("refine: diverged at iteration {iter}; partial history kept");
        return Ok(ExitCode::from(1));
    }

    std::fs::create_dir_all(args.out.join("depth_refined"))?;
    let mut index = String::new();
    for (k, depth) in result.depths.iter().enumerate() {
        let rel = format!("depth_refined/{k:06}.png");
        write_depth_png(&args.out.join(&rel), &SparseDepth::from_dense(depth))?;
        write_depth_f32(&args.out.join(&rel).with_extension("f32"), depth)?;
        index.push_str(&format!("{:.6} {rel}\n", timestamps[k]));
        manifest.record(&args.out, &rel)?;
        manifest.record(&args.out, &format!("depth_refined/{k:06}.f32"))?;
    }
    std::fs::write(args.out.join("depth_refined.txt"), index)?;
    manifest.record(&args.out, "depth_refined.txt")?;

    let traj = chain_trajectory(&timestamps, &result.pair_transforms)?;
    write_trajectory(&traj, &args.out.join("trajectory.txt"))?;
    manifest.record(&args.out, "trajectory.txt")?;

    result.params.save(&args.out.join("params.bin"))?;
    manifest.record(&args.out, "params.bin")?;
    manifest.write(&args.out)?;

    let first = &result.history[0];
    let last = result.history.last().unwrap();
    info!(
        "refine: total loss {} -> {} over {} iterations",
        first.total, last.total, args.iters
    );
    Ok(ExitCode::SUCCESS)
}

/// The exact metrics schema written by `evaluate`.
#[derive(Debug, serde::Serialize)]
struct MetricsJson {
    rmse_mm: f64,
    mae_mm: f64,
    irmse_1perkm: f64,
    imae_1perkm: f64,
    ate_m_mean: f64,
    ate_m_std: f64,
    re_mean: f64,
    re_std: f64,
    photometric: f64,
}

/// Read predicted depths: a refine output (depth_refined.txt) or a dataset
/// directory with ground truth (depth_gt.txt), f32 sidecars preferred.
fn read_predicted_depths(dir: &Path) -> Result<Vec<DepthMap>> {
    for index_name in ["depth_refined.txt", "depth_gt.txt"] {
        let index = dir.join(index_name);
        if !index.exists() {
            continue;
        }
        let mut depths = Vec::new();
        for line in std::fs::read_to_string(&index)?.lines() {
            let mut parts = line.split_whitespace();
            let (Some(_ts), Some(rel)) = (parts.next(), parts.next()) else {
                bail!("malformed index line in {}", index.display());
            };
            let f32_path = dir.join(rel).with_extension("f32");
            if f32_path.exists() {
                depths.push(read_depth_f32(&f32_path)?);
            } else {
                let sparse = depthpose::dataio::read_depth_png(&dir.join(rel))?;
                depths.push(DepthMap::new(
                    sparse.width(),
                    sparse.height(),
                    sparse.data().to_vec(),
                )?);
            }
        }
        if depths.is_empty() {
            bail!("{}: empty depth index", index.display());
        }
        return Ok(depths);
    }
    bail!(
        "{}: no depth_refined.txt or depth_gt.txt index found",
        dir.display()
    )
}

fn read_predicted_trajectory(dir: &Path) -> Result<Trajectory> {
    for name in ["trajectory.txt", "groundtruth.txt"] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(read_trajectory(&p)?);
        }
    }
    bail!("{}: no trajectory.txt or groundtruth.txt found", dir.display())
}

pub fn evaluate(pred: &Path, gt: &Path, out: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config_or_default(config)?;
    let gt_dataset = load_tum_sequence(gt, cfg.max_assoc_offset_s)?;
    let gt_depths: Vec<&DepthMap> = gt_dataset
        .frames
        .iter()
        .map(|f| {
            f.gt_depth
                .as_ref()
                .ok_or_else(|| anyhow!("{}: frames carry no ground-truth depth", gt.display()))
        })
        .collect::<Result<_>>()?;
    let gt_traj = gt_dataset.gt_trajectory()?;
    if gt_traj.len() < 2 {
        bail!("{}: frames carry no ground-truth poses", gt.display());
    }

    let pred_depths = read_predicted_depths(pred)?;
    if pred_depths.len() != gt_dataset.frames.len() {
        bail!(
            "prediction has {} depth frames, ground truth {}",
            pred_depths.len(),
            gt_dataset.frames.len()
        );
    }
    let est_traj = read_predicted_trajectory(pred)?;

    // Depth metrics pooled over every pixel of every frame: stack frames
    // vertically into one tall image pair.
    let w = gt_dataset.intrinsics.width;
    let h = gt_dataset.intrinsics.height;
    let mut pred_stack = Vec::with_capacity(w * h * pred_depths.len());
    let mut gt_stack = Vec::with_capacity(w * h * pred_depths.len());
    for (p, g) in pred_depths.iter().zip(&gt_depths) {
        pred_stack.extend_from_slice(p.data());
        gt_stack.extend_from_slice(g.data());
    }
    let tall_pred = DepthMap::new(w, h * pred_depths.len(), pred_stack)?;
    let tall_gt = SparseDepth::from_dense(&DepthMap::new(w, h * pred_depths.len(), gt_stack)?);
    let depth = depth_metrics(&tall_pred, &tall_gt)?;

    let (ate_mean, ate_std) = compute_ate(&est_traj, &gt_traj, cfg.max_assoc_offset_s)?;
    let (re_mean, re_std) = compute_re(&est_traj, &gt_traj, cfg.max_assoc_offset_s)?;

    let images: Vec<_> = gt_dataset.frames.iter().map(|f| f.image.clone()).collect();
    let est_poses: Vec<Se3Transform> = est_traj.poses().copied().collect();
    if est_poses.len() != images.len() {
        bail!(
            "estimated trajectory has {} poses for {} frames",
            est_poses.len(),
            images.len()
        );
    }
    let photometric = avg_photometric_loss(
        &images,
        &pred_depths,
        &est_poses,
        &gt_dataset.intrinsics,
        cfg.pyramid_levels,
    )?;

    let metrics = MetricsJson {
        rmse_mm: depth.rmse_mm,
        mae_mm: depth.mae_mm,
        irmse_1perkm: depth.irmse_1perkm,
        imae_1perkm: depth.imae_1perkm,
        ate_m_mean: ate_mean,
        ate_m_std: ate_std,
        re_mean,
        re_std,
        photometric,
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, serde_json::to_string_pretty(&metrics)?)?;
    info!(
        "evaluate: rmse {:.2} mm, ate {:.4} m, photometric {:.5}",
        metrics.rmse_mm, metrics.ate_m_mean, metrics.photometric
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(size: &str, levels: usize, seed: u64, planted_bug: bool) -> Result<ExitCode> {
    let (w, h) = size
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| anyhow!("--size expects WIDTHxHEIGHT, got '{size}'"))?;
    if w < (1 << (levels - 1)) || h < (1 << (levels - 1)) {
        bail!("{w}x{h} is too small for {levels} pyramid levels");
    }
    let outcome = run_gradcheck(w, h, levels, seed, planted_bug, &FdCheckOptions::default())?;
    print!("{}", outcome.render());
    Ok(if outcome.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
