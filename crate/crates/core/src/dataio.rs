//! Dataset ingestion (TUM RGB-D layout), trajectory file I/O, synthetic
//! analytic-scene generation, run configuration, and the PNG / raw-float
//! depth codecs.
//!
//! The synthetic generator is the independent oracle of the geometry and
//! warping code: depth comes from closed-form ray-plane intersection and
//! intensity from a smooth procedural texture over world positions, with no
//! use of the warping machinery anywhere.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, PredictorChoice};
use crate::error::{Error, Result};
use crate::evaluation::Trajectory;
use crate::geometry::{exp_map, CameraIntrinsics, Se3Tangent, Se3Transform};
use crate::imaging::{DepthMap, IntensityImage, SparseDepth};
use crate::losses::{IndicatorMode, LossWeights};
use crate::sensorsim::NoiseModel;

/// TUM depth PNGs store 16-bit values at 5000 units per meter.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;

// ---------------------------------------------------------------------------
// Run configuration.
// ---------------------------------------------------------------------------

/// JSON-loadable experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub intrinsics: Option<CameraIntrinsics>,
    pub noise: NoiseModel,
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub pyramid_levels: usize,
    /// Value scale applied to sparse depth fed to learned predictors
    /// (0.01 KITTI-style, 1/15 TUM-style).
    pub depth_input_scale: f64,
    /// Output scale of the toy depth net.
    pub depth_scale: f64,
    pub predictor: PredictorChoice,
    pub indicator: IndicatorMode,
    pub max_assoc_offset_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            intrinsics: None,
            noise: NoiseModel {
                f: 0.5,
                sample_rate: 0.07,
                seed: 0,
            },
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            pyramid_levels: 4,
            depth_input_scale: 0.01,
            depth_scale: 1.0,
            predictor: PredictorChoice::DirectField,
            indicator: IndicatorMode::ExcludeMeasured,
            max_assoc_offset_s: crate::evaluation::DEFAULT_MAX_ASSOC_OFFSET_S,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// PNG and raw-float codecs.
// ---------------------------------------------------------------------------

/// Write a depth map as 16-bit grayscale PNG, `TUM_DEPTH_SCALE` units per
/// meter; invalid pixels encode as 0.
pub fn write_depth_png(path: &Path, data: &SparseDepth) -> Result<()> {
    let (w, h) = (data.width(), data.height());
    let mut bytes = Vec::with_capacity(w * h * 2);
    for (d, valid) in data.data().iter().zip(data.valid()) {
        let raw = if *valid {
            (d * TUM_DEPTH_SCALE).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        };
        bytes.extend_from_slice(&raw.to_be_bytes());
    }
    write_png_gray16(path, w, h, &bytes)
}

/// Read a 16-bit grayscale depth PNG; zero pixels are invalid.
pub fn read_depth_png(path: &Path) -> Result<SparseDepth> {
    let (w, h, raw) = read_png_gray16(path)?;
    let mut out = SparseDepth::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = raw[y * w + x];
            if v > 0 {
                out.set(x, y, v as f64 / TUM_DEPTH_SCALE);
            }
        }
    }
    Ok(out)
}

fn write_png_gray16(path: &Path, width: usize, height: usize, be_bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(be_bytes)?;
    Ok(())
}

fn read_png_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Load(format!(
            "{}: expected 16-bit grayscale depth png",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let raw: Vec<u16> = buf[..w * h * 2]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, raw))
}

/// Write an intensity image: 16-bit grayscale for 1 channel, 8-bit RGB for
/// 3 channels.
pub fn write_intensity_png(path: &Path, img: &IntensityImage) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    if img.channels() == 1 {
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Sixteen);
        let mut writer = encoder.write_header()?;
        let mut bytes = Vec::with_capacity(w * h * 2);
        for v in img.data() {
            bytes.extend_from_slice(&(((v * 65535.0).round()) as u16).to_be_bytes());
        }
        writer.write_image_data(&bytes)?;
    } else {
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        let bytes: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        writer.write_image_data(&bytes)?;
    }
    Ok(())
}

/// Read an intensity PNG (8/16-bit, grayscale/RGB/RGBA) into [0, 1] values.
pub fn read_intensity_png(path: &Path) -> Result<IntensityImage> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let to_f = |v: u8| v as f64 / 255.0;
    let to_f16 = |hi: u8, lo: u8| u16::from_be_bytes([hi, lo]) as f64 / 65535.0;
    let data: Vec<f64> = match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale, png::BitDepth::Eight) => {
            buf[..w * h].iter().map(|v| to_f(*v)).collect()
        }
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| to_f16(c[0], c[1]))
            .collect(),
        (png::ColorType::Rgb, png::BitDepth::Eight) => {
            buf[..w * h * 3].iter().map(|v| to_f(*v)).collect()
        }
        (png::ColorType::Rgba, png::BitDepth::Eight) => buf[..w * h * 4]
            .chunks_exact(4)
            .flat_map(|c| [to_f(c[0]), to_f(c[1]), to_f(c[2])])
            .collect(),
        (ct, bd) => {
            return Err(Error::Load(format!(
                "{}: unsupported png format {ct:?}/{bd:?}",
                path.display()
            )))
        }
    };
    let channels = if matches!(info.color_type, png::ColorType::Grayscale) {
        1
    } else {
        3
    };
    IntensityImage::new(w, h, channels, data)
}

/// Lossless 32-bit float sidecar: `width u32 LE, height u32 LE, then
/// width*height f32 LE values`.
pub fn write_depth_f32(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(depth.width() as u32).to_le_bytes())?;
    out.write_all(&(depth.height() as u32).to_le_bytes())?;
    for v in depth.data() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_depth_f32(path: &Path) -> Result<DepthMap> {
    let mut file = BufReader::new(File::open(path)?);
    let mut head = [0u8; 8];
    file.read_exact(&mut head)?;
    let w = u32::from_le_bytes(head[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; w * h * 4];
    file.read_exact(&mut bytes)?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DepthMap::new(w, h, data)
}

// ---------------------------------------------------------------------------
// Trajectory files (TUM format).
// ---------------------------------------------------------------------------

fn pose_to_quat(t: &Se3Transform) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(t.rotation))
}

/// One pose per line: `timestamp tx ty tz qx qy qz qw`.
pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (ts, pose) in traj.entries() {
        let q = pose_to_quat(pose);
        let t = pose.translation;
        writeln!(
            out,
            "{:.9} {} {} {} {} {} {} {}",
            ts, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let file = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = trimmed
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    detail: format!("bad number '{f}'"),
                })
            })
            .collect::<Result<_>>()?;
        if fields.len() != 8 {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let q = UnitQuaternion::new_normalize(Quaternion::new(
            fields[7], fields[4], fields[5], fields[6],
        ));
        entries.push((
            fields[0],
            Se3Transform {
                rotation: *q.to_rotation_matrix().matrix(),
                translation: Vector3::new(fields[1], fields[2], fields[3]),
            },
        ));
    }
    Trajectory::new(entries)
}

// ---------------------------------------------------------------------------
// Sequence datasets.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FrameData {
    pub timestamp: f64,
    pub image: IntensityImage,
    pub sparse: SparseDepth,
    pub gt_depth: Option<DepthMap>,
    /// Camera-to-world pose.
    pub gt_pose: Option<Se3Transform>,
}

#[derive(Debug, Clone)]
pub struct SequenceDataset {
    pub frames: Vec<FrameData>,
    pub intrinsics: CameraIntrinsics,
}

impl SequenceDataset {
    pub fn new(frames: Vec<FrameData>, intrinsics: CameraIntrinsics) -> Result<Self> {
        for w in frames.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::InvalidValue(
                    "dataset timestamps must be strictly increasing".into(),
                ));
            }
        }
        for f in &frames {
            if f.image.width() != intrinsics.width || f.image.height() != intrinsics.height {
                return Err(Error::DimensionMismatch {
                    context: "dataset frame",
                    left: format!("{}x{}", f.image.width(), f.image.height()),
                    right: format!("{}x{}", intrinsics.width, intrinsics.height),
                });
            }
        }
        Ok(SequenceDataset { frames, intrinsics })
    }

    /// Ground-truth trajectory of the frames carrying a pose.
    pub fn gt_trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(
            self.frames
                .iter()
                .filter_map(|f| f.gt_pose.map(|p| (f.timestamp, p)))
                .collect(),
        )
    }
}

/// Default intrinsics of the freiburg2 sequences, used when the dataset
/// directory carries no `intrinsics.json`.
fn tum_fr2_intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 520.9,
        fy: 521.0,
        cx: 325.1,
        cy: 249.7,
        width,
        height,
    }
}

fn read_index_file(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let file = BufReader::new(File::open(path).map_err(|e| {
        Error::Load(format!("cannot open index {}: {e}", path.display()))
    })?);
    let mut entries = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let (Some(ts), Some(name)) = (parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                detail: "expected 'timestamp filename'".into(),
            });
        };
        let ts: f64 = ts.parse().map_err(|_| Error::Parse {
            line: i + 1,
            detail: format!("bad timestamp '{ts}'"),
        })?;
        entries.push((ts, PathBuf::from(name)));
    }
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(entries)
}

fn nearest_by_timestamp<T>(items: &[(f64, T)], ts: f64, max_offset: f64) -> Option<&(f64, T)> {
    items
        .iter()
        .min_by(|a, b| (a.0 - ts).abs().partial_cmp(&(b.0 - ts).abs()).unwrap())
        .filter(|(t, _)| (t - ts).abs() <= max_offset)
}

/// Load a TUM-layout directory: `rgb.txt`, `depth.txt`, optional
/// `groundtruth.txt` and `depth_gt.txt`, with images referenced relative to
/// the directory. Depth PNGs decode at 1/5000 m per unit, zero meaning
/// invalid. RGB frames without a depth match inside `max_assoc_offset`
/// seconds are dropped.
pub fn load_tum_sequence(dir: &Path, max_assoc_offset: f64) -> Result<SequenceDataset> {
    let rgb_index = read_index_file(&dir.join("rgb.txt"))?;
    let depth_index = read_index_file(&dir.join("depth.txt"))?;
    if rgb_index.is_empty() || depth_index.is_empty() {
        return Err(Error::Load(format!(
            "{}: empty rgb or depth index",
            dir.display()
        )));
    }
    let gt_depth_index = {
        let p = dir.join("depth_gt.txt");
        if p.exists() {
            read_index_file(&p)?
        } else {
            Vec::new()
        }
    };
    let gt_traj = {
        let p = dir.join("groundtruth.txt");
        if p.exists() {
            Some(read_trajectory(&p)?)
        } else {
            None
        }
    };
    let gt_poses: Vec<(f64, Se3Transform)> = gt_traj
        .map(|t| t.entries().to_vec())
        .unwrap_or_default();

    let mut frames = Vec::new();
    let mut last_ts = f64::NEG_INFINITY;
    for (ts, rgb_rel) in &rgb_index {
        let Some((_, depth_rel)) = nearest_by_timestamp(&depth_index, *ts, max_assoc_offset)
        else {
            continue;
        };
        if *ts <= last_ts {
            continue;
        }
        let image = read_intensity_png(&dir.join(rgb_rel))?;
        let sparse = read_depth_png(&dir.join(depth_rel))?;
        let gt_depth = match nearest_by_timestamp(&gt_depth_index, *ts, max_assoc_offset) {
            Some((_, rel)) => {
                let f32_path = dir.join(rel).with_extension("f32");
                if f32_path.exists() {
                    Some(read_depth_f32(&f32_path)?)
                } else {
                    // Densify from the 16-bit PNG; ground-truth files are
                    // fully valid by construction.
                    let sd = read_depth_png(&dir.join(rel))?;
                    let data: Vec<f64> = sd.data().to_vec();
                    Some(DepthMap::new(sd.width(), sd.height(), data)?)
                }
            }
            None => None,
        };
        let gt_pose = nearest_by_timestamp(&gt_poses, *ts, max_assoc_offset).map(|(_, p)| *p);
        last_ts = *ts;
        frames.push(FrameData {
            timestamp: *ts,
            image,
            sparse,
            gt_depth,
            gt_pose,
        });
    }
    if frames.is_empty() {
        return Err(Error::Load(format!(
            "{}: no rgb/depth associations within {max_assoc_offset} s",
            dir.display()
        )));
    }

    let intrinsics = {
        let p = dir.join("intrinsics.json");
        if p.exists() {
            let text = std::fs::read_to_string(&p)?;
            serde_json::from_str(&text)?
        } else {
            tum_fr2_intrinsics(frames[0].image.width(), frames[0].image.height())
        }
    };
    SequenceDataset::new(frames, intrinsics)
}

// ---------------------------------------------------------------------------
// Synthetic analytic scenes.
// ---------------------------------------------------------------------------

/// Plane `normal . X = offset` in world coordinates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenePlane {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub planes: Vec<ScenePlane>,
    pub texture_seed: u64,
    /// Camera-to-world pose per frame.
    pub path: Vec<Se3Transform>,
    pub timestamps: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
}

/// Serializable scene description: frame poses as exp-map tangents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub planes: Vec<ScenePlane>,
    pub texture_seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<SceneFrameSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFrameSpec {
    pub timestamp: f64,
    /// [rx, ry, rz, tx, ty, tz] tangent of the camera-to-world pose.
    pub tangent: [f64; 6],
}

impl SceneSpec {
    pub fn to_scene(&self) -> SyntheticScene {
        SyntheticScene {
            planes: self.planes.clone(),
            texture_seed: self.texture_seed,
            path: self
                .frames
                .iter()
                .map(|f| exp_map(&Se3Tangent::from_slice(&f.tangent)))
                .collect(),
            timestamps: self.frames.iter().map(|f| f.timestamp).collect(),
            intrinsics: self.intrinsics,
        }
    }
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Smooth procedural texture: three sinusoids of incommensurate spatial
/// frequencies over world position. Nonconstant gradients everywhere, no
/// photometric degeneracy, values strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct ProceduralTexture {
    waves: [(Vector3<f64>, f64, f64); 3],
}

impl ProceduralTexture {
    pub fn new(seed: u64) -> Self {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dir = |rng: &mut rand_chacha::ChaCha8Rng, mag: f64| {
            let v = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            v.normalize() * mag
        };
        let wave = |rng: &mut rand_chacha::ChaCha8Rng, mag: f64, amp: f64| {
            let d = dir(rng, mag);
            (d, amp, rng.random::<f64>() * std::f64::consts::TAU)
        };
        let waves = [
            wave(&mut rng, 3.6, 0.18),
            wave(&mut rng, 4.4, 0.14),
            wave(&mut rng, 5.1, 0.10),
        ];
        ProceduralTexture { waves }
    }

    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        let mut v = 0.5;
        for (k, amp, phase) in &self.waves {
            v += amp * (k.dot(x) + phase).sin();
        }
        v
    }
}

impl SyntheticScene {
    /// Closed-form depth along the ray through continuous pixel `u` of
    /// frame `frame`: the nearest positive ray-plane intersection.
    pub fn depth_at(&self, frame: usize, u: &Vector2<f64>) -> Result<f64> {
        let pose = &self.path[frame];
        let dir_w = pose.rotation * self.intrinsics.ray_direction(u);
        let origin = pose.translation;
        let mut best: Option<f64> = None;
        for plane in &self.planes {
            let n = Vector3::new(plane.normal[0], plane.normal[1], plane.normal[2]);
            let denom = n.dot(&dir_w);
            if denom.abs() < 1e-12 {
                continue;
            }
            let lambda = (plane.offset - n.dot(&origin)) / denom;
            if lambda > 1e-9 && best.is_none_or(|b| lambda < b) {
                best = Some(lambda);
            }
        }
        best.ok_or(Error::SceneCoverage {
            u: u.x.round() as usize,
            v: u.y.round() as usize,
        })
    }

    /// World-space intersection point of the pixel ray.
    pub fn hit_point(&self, frame: usize, u: &Vector2<f64>) -> Result<Vector3<f64>> {
        let lambda = self.depth_at(frame, u)?;
        let pose = &self.path[frame];
        Ok(pose.translation + lambda * (pose.rotation * self.intrinsics.ray_direction(u)))
    }
}

/// Render the scene: per frame, depth by ray casting and intensity from the
/// procedural texture at the 3D hit point (view-consistent by
/// construction). The returned dataset carries full ground truth; `sparse`
/// holds the dense ground truth, ready for sensor corruption.
pub fn generate_synthetic(scene: &SyntheticScene) -> Result<SequenceDataset> {
    if scene.path.len() != scene.timestamps.len() {
        return Err(Error::DimensionMismatch {
            context: "scene path",
            left: format!("{}", scene.path.len()),
            right: format!("{}", scene.timestamps.len()),
        });
    }
    let tex = ProceduralTexture::new(scene.texture_seed);
    let (w, h) = (scene.intrinsics.width, scene.intrinsics.height);
    let mut frames = Vec::with_capacity(scene.path.len());
    for (k, pose) in scene.path.iter().enumerate() {
        let mut depth_data = Vec::with_capacity(w * h);
        let mut image_data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let u = Vector2::new(x as f64, y as f64);
                let d = scene.depth_at(k, &u)?;
                depth_data.push(d);
                let hit =
                    pose.translation + d * (pose.rotation * scene.intrinsics.ray_direction(&u));
                image_data.push(tex.value(&hit).clamp(0.0, 1.0));
            }
        }
        let gt_depth = DepthMap::new(w, h, depth_data)?;
        frames.push(FrameData {
            timestamp: scene.timestamps[k],
            image: IntensityImage::new(w, h, 1, image_data)?,
            sparse: SparseDepth::from_dense(&gt_depth),
            gt_depth: Some(gt_depth),
            gt_pose: Some(*pose),
        });
    }
    SequenceDataset::new(frames, scene.intrinsics)
}

/// The default desk-scale scene: a fronto-parallel background plane and a
/// slanted plane meeting inside the view (continuous depth, discontinuous
/// gradient), observed along a short translating, slightly rotating path.
pub fn two_planes_preset(n_frames: usize) -> SyntheticScene {
    let intrinsics = CameraIntrinsics {
        fx: 70.0,
        fy: 70.0,
        cx: 31.5,
        cy: 31.5,
        width: 64,
        height: 64,
    };
    let slant = Vector3::new(-0.28, -0.17, 1.0).normalize();
    let planes = vec![
        ScenePlane {
            normal: [0.0, 0.0, 1.0],
            offset: 2.6,
        },
        ScenePlane {
            // Chosen so the slanted plane is nearer over roughly the
            // right-bottom half of the start view.
            normal: [slant.x, slant.y, slant.z],
            offset: 2.35,
        },
    ];
    let mut path = Vec::with_capacity(n_frames);
    let mut timestamps = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let kf = k as f64;
        let tangent = Se3Tangent::new(
            Vector3::new(0.004, -0.006, 0.003) * kf,
            Vector3::new(0.055, 0.02, 0.025) * kf,
        );
        path.push(exp_map(&tangent));
        timestamps.push(kf / 30.0);
    }
    SyntheticScene {
        planes,
        texture_seed: 17,
        path,
        timestamps,
        intrinsics,
    }
}

/// Write a rendered + corrupted dataset as a TUM-layout directory:
/// `rgb/`, `depth/` (corrupted sparse), `depth_gt/` (dense truth with f32
/// sidecars), the index files, `groundtruth.txt`, and `intrinsics.json`.
pub fn write_tum_layout(
    dir: &Path,
    dataset: &SequenceDataset,
    noise: &NoiseModel,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    std::fs::create_dir_all(dir.join("depth_gt"))?;

    let mut rgb_index = String::new();
    let mut depth_index = String::new();
    let mut gt_index = String::new();
    for (k, frame) in dataset.frames.iter().enumerate() {
        let ts = frame.timestamp;
        let rgb_rel = format!("rgb/{k:06}.png");
        let depth_rel = format!("depth/{k:06}.png");
        let gt_rel = format!("depth_gt/{k:06}.png");
        write_intensity_png(&dir.join(&rgb_rel), &frame.image)?;

        let gt_depth = frame
            .gt_depth
            .as_ref()
            .ok_or_else(|| Error::InvalidValue("synthetic frame without ground truth".into()))?;
        let corrupted = crate::sensorsim::corrupt_depth(
            gt_depth,
            &NoiseModel {
                f: noise.f,
                sample_rate: noise.sample_rate,
                seed: noise.seed.wrapping_add(k as u64),
            },
        );
        write_depth_png(&dir.join(&depth_rel), &corrupted)?;
        write_depth_png(&dir.join(&gt_rel), &SparseDepth::from_dense(gt_depth))?;
        write_depth_f32(&dir.join(&gt_rel).with_extension("f32"), gt_depth)?;

        rgb_index.push_str(&format!("{ts:.6} {rgb_rel}\n"));
        depth_index.push_str(&format!("{ts:.6} {depth_rel}\n"));
        gt_index.push_str(&format!("{ts:.6} {gt_rel}\n"));
    }
    std::fs::write(dir.join("rgb.txt"), rgb_index)?;
    std::fs::write(dir.join("depth.txt"), depth_index)?;
    std::fs::write(dir.join("depth_gt.txt"), gt_index)?;

    let traj = dataset.gt_trajectory()?;
    write_trajectory(&traj, &dir.join("groundtruth.txt"))?;
    std::fs::write(
        dir.join("intrinsics.json"),
        serde_json::to_string_pretty(&dataset.intrinsics)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "depthpose_{tag}_{}_{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn depth_png_round_trip() {
        let dir = temp_dir("png");
        let mut sparse = SparseDepth::empty(6, 4);
        sparse.set(1, 1, 1.0);
        sparse.set(3, 2, 2.5);
        let path = dir.join("d.png");
        write_depth_png(&path, &sparse).unwrap();
        let back = read_depth_png(&path).unwrap();
        assert_eq!(back.valid_count(), 2);
        assert_relative_eq!(back.at(1, 1).unwrap(), 1.0, epsilon = 1e-4);
        assert_relative_eq!(back.at(3, 2).unwrap(), 2.5, epsilon = 1e-4);
        assert!(back.at(0, 0).is_none());
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn f32_sidecar_round_trip() {
        let dir = temp_dir("f32");
        let depth = DepthMap::from_fn(5, 3, |x, y| 1.0 + 0.37 * (x + 2 * y) as f64).unwrap();
        let path = dir.join("d.f32");
        write_depth_f32(&path, &depth).unwrap();
        let back = read_depth_f32(&path).unwrap();
        assert_eq!((back.width(), back.height()), (5, 3));
        for (a, b) in depth.data().iter().zip(back.data()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-6);
        }
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn identity_pose_trajectory_line_format() {
        let dir = temp_dir("traj");
        let traj = Trajectory::new(vec![(0.0, Se3Transform::identity())]).unwrap();
        let path = dir.join("t.txt");
        write_trajectory(&traj, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim(), "0.000000000 0 0 0 0 0 0 1");
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn trajectory_round_trip_of_random_poses() {
        let dir = temp_dir("traj_rt");
        let mut rng = ChaCha8Rng::seed_from_u64(120);
        let mut entries = Vec::new();
        for i in 0..100 {
            let tangent = Se3Tangent::new(
                nalgebra::Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ) * 2.0,
                nalgebra::Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ) * 4.0,
            );
            entries.push((i as f64 * 0.1, exp_map(&tangent)));
        }
        let traj = Trajectory::new(entries).unwrap();
        let path = dir.join("t.txt");
        write_trajectory(&traj, &path).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for ((t0, p0), (t1, p1)) in traj.entries().iter().zip(back.entries()) {
            assert_relative_eq!(t0, t1, epsilon = 1e-9);
            assert!((p0.translation - p1.translation).norm() < 1e-8);
            let rel = p0.inverse().compose(p1);
            assert!(rel.rotation_angle() < 1e-8);
        }
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn malformed_trajectory_line_reports_line_number() {
        let dir = temp_dir("traj_bad");
        let path = dir.join("t.txt");
        std::fs::write(&path, "# comment\n0.0 1 2 3 0 0 0 1\n0.1 1 2 3 0 0 0\n").unwrap();
        match read_trajectory(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn groundtruth_identity_quaternion_parses_to_identity_rotation() {
        let dir = temp_dir("traj_id");
        let path = dir.join("t.txt");
        std::fs::write(&path, "0.0 1 2 3 0 0 0 1\n").unwrap();
        let traj = read_trajectory(&path).unwrap();
        let (_, pose) = traj.entries()[0];
        assert!((pose.translation - nalgebra::Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        assert!(pose.rotation_angle() < 1e-12);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn minimal_tum_fixture_loads_with_depth_scale() {
        let dir = temp_dir("tum_min");
        std::fs::create_dir_all(dir.join("rgb")).unwrap();
        std::fs::create_dir_all(dir.join("depth")).unwrap();
        let img = IntensityImage::constant(8, 6, 1, 0.25).unwrap();
        // Constant 5000 raw units = 1 meter.
        let depth = SparseDepth::from_dense(&DepthMap::constant(8, 6, 1.0).unwrap());
        for k in 0..2 {
            write_intensity_png(&dir.join(format!("rgb/{k}.png")), &img).unwrap();
            write_depth_png(&dir.join(format!("depth/{k}.png")), &depth).unwrap();
        }
        std::fs::write(dir.join("rgb.txt"), "0.00 rgb/0.png\n0.10 rgb/1.png\n").unwrap();
        std::fs::write(dir.join("depth.txt"), "0.005 depth/0.png\n0.102 depth/1.png\n").unwrap();
        std::fs::write(dir.join("groundtruth.txt"), "0.0 1 2 3 0 0 0 1\n0.1 1 2 3.1 0 0 0 1\n")
            .unwrap();

        let ds = load_tum_sequence(&dir, 0.02).unwrap();
        assert_eq!(ds.frames.len(), 2);
        for frame in &ds.frames {
            assert_eq!(frame.sparse.valid_count(), 48);
            for v in frame.sparse.data() {
                assert_relative_eq!(*v, 1.0, epsilon = 1e-6);
            }
        }
        let pose = ds.frames[0].gt_pose.unwrap();
        assert!((pose.translation - nalgebra::Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn rgb_frames_without_depth_match_are_dropped() {
        let dir = temp_dir("tum_drop");
        std::fs::create_dir_all(dir.join("rgb")).unwrap();
        std::fs::create_dir_all(dir.join("depth")).unwrap();
        let img = IntensityImage::constant(4, 4, 1, 0.5).unwrap();
        let depth = SparseDepth::from_dense(&DepthMap::constant(4, 4, 2.0).unwrap());
        for k in 0..3 {
            write_intensity_png(&dir.join(format!("rgb/{k}.png")), &img).unwrap();
        }
        write_depth_png(&dir.join("depth/0.png"), &depth).unwrap();
        write_depth_png(&dir.join("depth/2.png"), &depth).unwrap();
        std::fs::write(
            dir.join("rgb.txt"),
            "0.0 rgb/0.png\n0.5 rgb/1.png\n1.0 rgb/2.png\n",
        )
        .unwrap();
        std::fs::write(dir.join("depth.txt"), "0.001 depth/0.png\n1.002 depth/2.png\n").unwrap();
        let ds = load_tum_sequence(&dir, 0.02).unwrap();
        assert_eq!(ds.frames.len(), 2);
        assert_eq!(ds.frames[0].timestamp, 0.0);
        assert_eq!(ds.frames[1].timestamp, 1.0);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn missing_index_is_a_load_error() {
        let dir = temp_dir("tum_missing");
        assert!(matches!(
            load_tum_sequence(&dir, 0.02),
            Err(Error::Load(_))
        ));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn fronto_parallel_plane_renders_constant_depth() {
        let scene = SyntheticScene {
            planes: vec![ScenePlane {
                normal: [0.0, 0.0, 1.0],
                offset: 2.0,
            }],
            texture_seed: 5,
            path: vec![Se3Transform::identity()],
            timestamps: vec![0.0],
            intrinsics: CameraIntrinsics::new(30.0, 30.0, 7.5, 7.5, 16, 16).unwrap(),
        };
        let ds = generate_synthetic(&scene).unwrap();
        let gt = ds.frames[0].gt_depth.as_ref().unwrap();
        for d in gt.data() {
            assert_relative_eq!(*d, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn stereo_disparity_matches_closed_form() {
        // Two frames with pure x-translation baseline b over a plane at
        // depth d: the principal-point pixel reprojects with disparity
        // fx * b / d.
        let (b, d, fx) = (0.2, 2.0, 30.0);
        let k = CameraIntrinsics::new(fx, 30.0, 7.5, 7.5, 16, 16).unwrap();
        let scene = SyntheticScene {
            planes: vec![ScenePlane {
                normal: [0.0, 0.0, 1.0],
                offset: d,
            }],
            texture_seed: 6,
            path: vec![
                Se3Transform::identity(),
                exp_map(&Se3Tangent::new(
                    nalgebra::Vector3::zeros(),
                    nalgebra::Vector3::new(b, 0.0, 0.0),
                )),
            ],
            timestamps: vec![0.0, 0.1],
            intrinsics: k,
        };
        let ds = generate_synthetic(&scene).unwrap();
        let t_0_to_1 = ds.frames[1].gt_pose.unwrap().inverse();
        let u = Vector2::new(7.5, 7.5);
        let depth0 = ds.frames[0].gt_depth.as_ref().unwrap().at(7, 7);
        let (pix, valid) = crate::geometry::warp_pixel(&k, &t_0_to_1, depth0, &u);
        assert!(valid);
        assert_relative_eq!((pix - u).norm(), fx * b / d, epsilon = 1e-9);
    }

    #[test]
    fn texture_is_view_consistent() {
        let scene = two_planes_preset(3);
        let tex = ProceduralTexture::new(scene.texture_seed);
        // The same 3D point seen from two frames gets the same intensity
        // by construction; spot-check through the hit-point machinery.
        let u = Vector2::new(20.0, 33.0);
        let hit = scene.hit_point(0, &u).unwrap();
        // Reproject into frame 2 and evaluate the texture there.
        let v = tex.value(&hit);
        assert!((0.0..=1.0).contains(&v));
        let pose2 = &scene.path[2];
        let in_cam2 = pose2.inverse().transform_point(&hit);
        let pix2 = crate::geometry::project(&scene.intrinsics, &in_cam2).unwrap();
        let hit2 = scene.hit_point(2, &pix2).unwrap();
        assert!((hit - hit2).norm() < 1e-9);
        assert_relative_eq!(tex.value(&hit2), v, epsilon = 1e-12);
    }

    #[test]
    fn synthetic_depth_satisfies_epipolar_identity() {
        let scene = two_planes_preset(4);
        let ds = generate_synthetic(&scene).unwrap();
        let k = &scene.intrinsics;
        for pair in 0..3 {
            let p0 = ds.frames[pair].gt_pose.unwrap();
            let p1 = ds.frames[pair + 1].gt_pose.unwrap();
            let t_0_to_1 = p1.inverse().compose(&p0);
            for (x, y) in [(5, 7), (31, 31), (50, 12), (20, 55)] {
                let u = Vector2::new(x as f64, y as f64);
                let d = ds.frames[pair].gt_depth.as_ref().unwrap().at(x, y);
                let q = t_0_to_1.transform_point(&(k.ray_direction(&u) * d));
                assert!(q.z > 0.0);
                let pix = crate::geometry::project(k, &q).unwrap();
                let d2 = scene.depth_at(pair + 1, &pix).unwrap();
                assert!(
                    (q.z - d2).abs() < 1e-9,
                    "pair {pair} pixel ({x},{y}): {} vs {d2}",
                    q.z
                );
            }
        }
    }

    #[test]
    fn two_planes_preset_covers_view_and_has_both_planes() {
        let scene = two_planes_preset(5);
        let ds = generate_synthetic(&scene).unwrap();
        // Count pixels on each plane in frame 0 by matching the two
        // candidate analytic depths.
        let mut near = 0;
        let mut far = 0;
        let gt = ds.frames[0].gt_depth.as_ref().unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let u = Vector2::new(x as f64, y as f64);
                let dir = scene.intrinsics.ray_direction(&u);
                let d_bg = 2.6 / dir.z;
                if (gt.at(x, y) - d_bg).abs() < 1e-9 {
                    far += 1;
                } else {
                    near += 1;
                }
            }
        }
        assert!(near > 400, "slanted plane covers {near} pixels");
        assert!(far > 400, "background plane covers {far} pixels");
    }

    #[test]
    fn tum_layout_round_trips_through_loader() {
        let dir = temp_dir("layout");
        let scene = two_planes_preset(3);
        let ds = generate_synthetic(&scene).unwrap();
        let noise = NoiseModel::new(0.0, 1.0, 9).unwrap();
        write_tum_layout(&dir, &ds, &noise).unwrap();
        let back = load_tum_sequence(&dir, 0.02).unwrap();
        assert_eq!(back.frames.len(), 3);
        assert_eq!(back.intrinsics, scene.intrinsics);
        // Noiseless dense corruption: loaded sparse equals ground truth up
        // to png quantization.
        for (orig, loaded) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(loaded.sparse.valid_count(), 64 * 64);
            let gt = orig.gt_depth.as_ref().unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    assert_relative_eq!(
                        loaded.sparse.at(x, y).unwrap(),
                        gt.at(x, y),
                        epsilon = 2e-4
                    );
                }
            }
            // The f32 sidecar carries the ground truth losslessly.
            let gt_loaded = loaded.gt_depth.as_ref().unwrap();
            for (a, b) in gt.data().iter().zip(gt_loaded.data()) {
                assert_relative_eq!(*a, *b, epsilon = 1e-6);
            }
            assert!(loaded.gt_pose.is_some());
        }
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn config_round_trips_and_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.weights.alpha, 1.0);
        assert_eq!(cfg.optimizer.lr, 1e-4);
        assert_eq!(cfg.pyramid_levels, 4);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.noise.sample_rate, 0.07);
        // Partial configs pick up defaults.
        let partial: RunConfig = serde_json::from_str(r#"{"pyramid_levels": 2}"#).unwrap();
        assert_eq!(partial.pyramid_levels, 2);
        assert_eq!(partial.depth_input_scale, 0.01);
    }
}
