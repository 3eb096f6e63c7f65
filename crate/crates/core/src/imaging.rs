//! Image containers, bilinear sampling with derivatives, multi-scale
//! pyramids, second-order spatial gradients, and full-image inverse warping.
//!
//! Out-of-bounds lookups are masked out rather than clamped: clamping would
//! bias the photometric loss at image borders.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::{warp_pixel, CameraIntrinsics, Se3Transform};

/// Grayscale or RGB image with values in [0, 1], row-major,
/// channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidValue(format!(
                "intensity images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                context: "intensity image buffer",
                left: format!("{}", data.len()),
                right: format!("{width}x{height}x{channels}"),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidValue(
                "intensity values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(IntensityImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        IntensityImage::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Build a grayscale image from a per-pixel function.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        IntensityImage::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn value(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Grayscale view: luma = 0.299 R + 0.587 G + 0.114 B.
    pub fn luma(&self) -> IntensityImage {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks_exact(3) {
            data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
        }
        IntensityImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    fn cell(&self, u: &Vector2<f64>) -> Option<(usize, usize, usize, usize, f64, f64)> {
        let wmax = (self.width - 1) as f64;
        let hmax = (self.height - 1) as f64;
        if !(u.x >= 0.0 && u.x <= wmax && u.y >= 0.0 && u.y <= hmax) {
            return None;
        }
        let x0 = (u.x.floor() as usize).min(self.width - 1);
        let y0 = (u.y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        Some((x0, y0, x1, y1, u.x - x0 as f64, u.y - y0 as f64))
    }

    /// Bilinear interpolation of the four surrounding pixels, with the
    /// derivative of each channel value with respect to the sample position.
    pub fn bilinear_sample(&self, u: &Vector2<f64>) -> BilinearSample {
        let mut out = BilinearSample {
            values: [0.0; 3],
            grads: [Vector2::zeros(); 3],
            channels: self.channels,
            valid: false,
        };
        let Some((x0, y0, x1, y1, fx, fy)) = self.cell(u) else {
            return out;
        };
        for c in 0..self.channels {
            let v00 = self.value(x0, y0, c);
            let v10 = self.value(x1, y0, c);
            let v01 = self.value(x0, y1, c);
            let v11 = self.value(x1, y1, c);
            out.values[c] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10)
                + fy * ((1.0 - fx) * v01 + fx * v11);
            out.grads[c] = Vector2::new(
                (1.0 - fy) * (v10 - v00) + fy * (v11 - v01),
                (1.0 - fx) * (v01 - v00) + fx * (v11 - v10),
            );
        }
        out.valid = true;
        out
    }

    /// Single-channel fast path used by the photometric residual.
    pub fn sample_scalar(&self, u: &Vector2<f64>) -> Option<(f64, Vector2<f64>)> {
        debug_assert_eq!(self.channels, 1);
        let (x0, y0, x1, y1, fx, fy) = self.cell(u)?;
        let v00 = self.data[y0 * self.width + x0];
        let v10 = self.data[y0 * self.width + x1];
        let v01 = self.data[y1 * self.width + x0];
        let v11 = self.data[y1 * self.width + x1];
        let value =
            (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11);
        let grad = Vector2::new(
            (1.0 - fy) * (v10 - v00) + fy * (v11 - v01),
            (1.0 - fx) * (v01 - v00) + fx * (v11 - v10),
        );
        Some((value, grad))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BilinearSample {
    pub values: [f64; 3],
    pub grads: [Vector2<f64>; 3],
    pub channels: usize,
    pub valid: bool,
}

/// Dense depth map: strictly positive, finite meters per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "depth map buffer",
                left: format!("{}", data.len()),
                right: format!("{width}x{height}"),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidValue(
                "depth values must be finite and positive".into(),
            ));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        DepthMap::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        DepthMap::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Sparse depth: per-pixel value plus validity mask. Values are only
/// meaningful (and only required positive) where the mask is set.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    width: usize,
    height: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl SparseDepth {
    pub fn new(width: usize, height: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if data.len() != width * height || valid.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "sparse depth buffers",
                left: format!("{} / {}", data.len(), valid.len()),
                right: format!("{width}x{height}"),
            });
        }
        for (d, v) in data.iter().zip(&valid) {
            if *v && (!d.is_finite() || *d <= 0.0) {
                return Err(Error::InvalidValue(
                    "valid sparse depth entries must be finite and positive".into(),
                ));
            }
        }
        Ok(SparseDepth {
            width,
            height,
            data,
            valid,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        SparseDepth {
            width,
            height,
            data: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Fully-valid sparse depth carrying a dense map's values.
    pub fn from_dense(depth: &DepthMap) -> Self {
        SparseDepth {
            width: depth.width(),
            height: depth.height(),
            data: depth.data().to_vec(),
            valid: vec![true; depth.width() * depth.height()],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.data[i])
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let i = y * self.width + x;
        self.data[i] = value;
        self.valid[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// One 2x2 floor-halving reduction step.
pub trait Downsample: Sized + Clone {
    fn downsample_half(&self) -> Result<Self>;
    fn dims(&self) -> (usize, usize);
}

impl Downsample for IntensityImage {
    fn downsample_half(&self) -> Result<Self> {
        let (w, h) = (self.width / 2, self.height / 2);
        if w == 0 || h == 0 {
            return Err(Error::ImageTooSmall {
                context: "intensity downsample",
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let sum = self.value(2 * x, 2 * y, c)
                        + self.value(2 * x + 1, 2 * y, c)
                        + self.value(2 * x, 2 * y + 1, c)
                        + self.value(2 * x + 1, 2 * y + 1, c);
                    data.push(sum * 0.25);
                }
            }
        }
        IntensityImage::new(w, h, self.channels, data)
    }

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl Downsample for DepthMap {
    fn downsample_half(&self) -> Result<Self> {
        let (w, h) = (self.width / 2, self.height / 2);
        if w == 0 || h == 0 {
            return Err(Error::ImageTooSmall {
                context: "depth downsample",
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let sum = self.at(2 * x, 2 * y)
                    + self.at(2 * x + 1, 2 * y)
                    + self.at(2 * x, 2 * y + 1)
                    + self.at(2 * x + 1, 2 * y + 1);
                data.push(sum * 0.25);
            }
        }
        DepthMap::new(w, h, data)
    }

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl Downsample for SparseDepth {
    /// Average of the valid children; valid when any child is.
    fn downsample_half(&self) -> Result<Self> {
        let (w, h) = (self.width / 2, self.height / 2);
        if w == 0 || h == 0 {
            return Err(Error::ImageTooSmall {
                context: "sparse depth downsample",
                width: self.width,
                height: self.height,
            });
        }
        let mut out = SparseDepth::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    if let Some(d) = self.at(2 * x + dx, 2 * y + dy) {
                        sum += d;
                        n += 1;
                    }
                }
                if n > 0 {
                    out.set(x, y, sum / n as f64);
                }
            }
        }
        Ok(out)
    }

    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Multi-scale stack; level 0 is full resolution, each level floor-halved.
#[derive(Debug, Clone)]
pub struct Pyramid<T> {
    pub levels: Vec<T>,
}

impl<T> Pyramid<T> {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, s: usize) -> &T {
        &self.levels[s]
    }
}

/// Build an `n_levels` pyramid by repeated 2x2 box averaging.
pub fn build_pyramid<T: Downsample>(base: &T, n_levels: usize) -> Result<Pyramid<T>> {
    if n_levels == 0 {
        return Err(Error::InvalidValue("pyramid needs at least one level".into()));
    }
    let (w, h) = base.dims();
    let min_dim = 1usize << (n_levels - 1);
    if w < min_dim || h < min_dim {
        return Err(Error::ImageTooSmall {
            context: "pyramid base",
            width: w,
            height: h,
        });
    }
    let mut levels = Vec::with_capacity(n_levels);
    levels.push(base.clone());
    for _ in 1..n_levels {
        let next = levels.last().unwrap().downsample_half()?;
        levels.push(next);
    }
    Ok(Pyramid { levels })
}

/// Central second differences of a depth map. Boundary pixels are zero.
#[derive(Debug, Clone)]
pub struct SecondOrderGradients {
    pub width: usize,
    pub height: usize,
    pub dxx: Vec<f64>,
    pub dyy: Vec<f64>,
    pub dxy: Vec<f64>,
}

pub fn second_order_gradients(d: &DepthMap) -> Result<SecondOrderGradients> {
    let (w, h) = (d.width(), d.height());
    if w < 3 || h < 3 {
        return Err(Error::ImageTooSmall {
            context: "second-order gradients",
            width: w,
            height: h,
        });
    }
    let mut out = SecondOrderGradients {
        width: w,
        height: h,
        dxx: vec![0.0; w * h],
        dyy: vec![0.0; w * h],
        dxy: vec![0.0; w * h],
    };
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            out.dxx[i] = d.at(x + 1, y) - 2.0 * d.at(x, y) + d.at(x - 1, y);
            out.dyy[i] = d.at(x, y + 1) - 2.0 * d.at(x, y) + d.at(x, y - 1);
            out.dxy[i] = 0.25
                * (d.at(x + 1, y + 1) - d.at(x + 1, y - 1) - d.at(x - 1, y + 1)
                    + d.at(x - 1, y - 1));
        }
    }
    Ok(out)
}

/// Synthesize the source view on the target pixel grid: for every target
/// pixel, reproject with the target depth through `t_tgt_to_src` and sample
/// the source image. Pixels whose warp or sample is invalid are masked out
/// and set to zero.
pub fn inverse_warp(
    src: &IntensityImage,
    depth_tgt: &DepthMap,
    t_tgt_to_src: &Se3Transform,
    k: &CameraIntrinsics,
) -> Result<(IntensityImage, Vec<bool>)> {
    let (w, h) = (depth_tgt.width(), depth_tgt.height());
    if w != k.width || h != k.height || src.width() != k.width || src.height() != k.height {
        return Err(Error::DimensionMismatch {
            context: "inverse warp",
            left: format!("{}x{} / {}x{}", w, h, src.width(), src.height()),
            right: format!("{}x{}", k.width, k.height),
        });
    }
    let channels = src.channels();
    let mut data = vec![0.0; w * h * channels];
    let mut validity = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let u = Vector2::new(x as f64, y as f64);
            let (pix, warp_ok) = warp_pixel(k, t_tgt_to_src, depth_tgt.at(x, y), &u);
            if !warp_ok {
                continue;
            }
            let sample = src.bilinear_sample(&pix);
            if !sample.valid {
                continue;
            }
            let i = (y * w + x) * channels;
            data[i..i + channels].copy_from_slice(&sample.values[..channels]);
            validity[y * w + x] = true;
        }
    }
    Ok((IntensityImage::new(w, h, channels, data)?, validity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Se3Tangent;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> IntensityImage {
        IntensityImage::new(w, h, 1, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn sample_at_lattice_points_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let img = random_image(&mut rng, 7, 5);
        for y in 0..5 {
            for x in 0..7 {
                let s = img.bilinear_sample(&Vector2::new(x as f64, y as f64));
                assert!(s.valid);
                assert_eq!(s.values[0], img.value(x, y, 0));
            }
        }
    }

    #[test]
    fn sample_midpoint_interpolates_linearly() {
        let img = IntensityImage::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let s = img.bilinear_sample(&Vector2::new(0.5, 0.0));
        assert!(s.valid);
        assert_relative_eq!(s.values[0], 0.5);
    }

    #[test]
    fn sample_outside_domain_is_invalid() {
        let img = IntensityImage::constant(4, 4, 1, 0.5).unwrap();
        assert!(!img.bilinear_sample(&Vector2::new(-0.001, 1.0)).valid);
        assert!(!img.bilinear_sample(&Vector2::new(3.001, 1.0)).valid);
        assert!(img.bilinear_sample(&Vector2::new(3.0, 3.0)).valid);
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = random_image(&mut rng, 16, 16);
        let h = 1e-7;
        let mut checked = 0;
        while checked < 100 {
            // Stay away from lattice lines where the gradient jumps.
            let u = Vector2::new(
                0.5 + rng.random::<f64>() * 14.0,
                0.5 + rng.random::<f64>() * 14.0,
            );
            if (u.x.fract()).min(1.0 - u.x.fract()) < 1e-3
                || (u.y.fract()).min(1.0 - u.y.fract()) < 1e-3
            {
                continue;
            }
            let s = img.bilinear_sample(&u);
            let fx = (img.bilinear_sample(&Vector2::new(u.x + h, u.y)).values[0]
                - img.bilinear_sample(&Vector2::new(u.x - h, u.y)).values[0])
                / (2.0 * h);
            let fy = (img.bilinear_sample(&Vector2::new(u.x, u.y + h)).values[0]
                - img.bilinear_sample(&Vector2::new(u.x, u.y - h)).values[0])
                / (2.0 * h);
            assert!((s.grads[0].x - fx).abs() < 1e-6);
            assert!((s.grads[0].y - fy).abs() < 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn sample_is_linear_along_grid_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = random_image(&mut rng, 8, 8);
        for _ in 0..50 {
            let y = rng.random_range(0..8) as f64;
            let x = rng.random::<f64>() * 7.0;
            let x0 = x.floor();
            let f = x - x0;
            let a = img.bilinear_sample(&Vector2::new(x0, y)).values[0];
            let b = img.bilinear_sample(&Vector2::new((x0 + 1.0).min(7.0), y)).values[0];
            let s = img.bilinear_sample(&Vector2::new(x, y)).values[0];
            assert_relative_eq!(s, (1.0 - f) * a + f * b, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_pyramid_stays_constant() {
        let img = IntensityImage::constant(16, 16, 1, 0.37).unwrap();
        let pyr = build_pyramid(&img, 4).unwrap();
        for level in &pyr.levels {
            for v in level.data() {
                assert_relative_eq!(*v, 0.37, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn two_by_two_box_average() {
        let img = IntensityImage::new(2, 2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let pyr = build_pyramid(&img, 2).unwrap();
        assert_eq!(pyr.level(1).dims(), (1, 1));
        assert_relative_eq!(pyr.level(1).data()[0], 0.5);
    }

    #[test]
    fn pyramid_dimension_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let img = random_image(&mut rng, 16, 16);
        let pyr = build_pyramid(&img, 4).unwrap();
        let dims: Vec<_> = pyr.levels.iter().map(|l| l.dims()).collect();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn pyramid_rejects_too_small_base() {
        let img = IntensityImage::constant(4, 4, 1, 0.5).unwrap();
        assert!(matches!(
            build_pyramid(&img, 4),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn sparse_pyramid_averages_valid_and_ors_masks() {
        let mut sd = SparseDepth::empty(4, 4);
        sd.set(0, 0, 2.0);
        sd.set(1, 1, 4.0);
        sd.set(2, 0, 1.0);
        let pyr = build_pyramid(&sd, 2).unwrap();
        let half = pyr.level(1);
        assert_eq!(half.at(0, 0), Some(3.0));
        assert_eq!(half.at(1, 0), Some(1.0));
        assert_eq!(half.at(0, 1), None);
    }

    #[test]
    fn linear_ramp_has_zero_second_gradients() {
        let d = DepthMap::from_fn(9, 7, |x, y| 1.0 + 0.25 * x as f64 + 0.5 * y as f64).unwrap();
        let g = second_order_gradients(&d).unwrap();
        for i in 0..9 * 7 {
            assert!(g.dxx[i].abs() < 1e-12);
            assert!(g.dyy[i].abs() < 1e-12);
            assert!(g.dxy[i].abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_has_constant_dxx() {
        let d = DepthMap::from_fn(7, 7, |x, _| 1.0 + (x as f64) * (x as f64)).unwrap();
        let g = second_order_gradients(&d).unwrap();
        for y in 1..6 {
            for x in 1..6 {
                assert_relative_eq!(g.dxx[y * 7 + x], 2.0, epsilon = 1e-12);
                assert!(g.dyy[y * 7 + x].abs() < 1e-12);
                assert!(g.dxy[y * 7 + x].abs() < 1e-12);
            }
        }
        // Boundary contributes zero.
        assert_eq!(g.dxx[0], 0.0);
        assert_eq!(g.dxx[6], 0.0);
    }

    #[test]
    fn second_gradients_match_explicit_stencil_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let d = DepthMap::from_fn(11, 9, |_, _| 1.0 + rng.random::<f64>()).unwrap();
        let g = second_order_gradients(&d).unwrap();
        for y in 1..8 {
            for x in 1..10 {
                let i = y * 11 + x;
                let dxx = d.at(x + 1, y) + d.at(x - 1, y) - 2.0 * d.at(x, y);
                let dyy = d.at(x, y + 1) + d.at(x, y - 1) - 2.0 * d.at(x, y);
                let dxy = (d.at(x + 1, y + 1) + d.at(x - 1, y - 1)
                    - d.at(x + 1, y - 1)
                    - d.at(x - 1, y + 1))
                    / 4.0;
                assert_relative_eq!(g.dxx[i], dxx, epsilon = 1e-14);
                assert_relative_eq!(g.dyy[i], dyy, epsilon = 1e-14);
                assert_relative_eq!(g.dxy[i], dxy, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn second_gradients_reject_tiny_maps() {
        let d = DepthMap::constant(2, 5, 1.0).unwrap();
        assert!(matches!(
            second_order_gradients(&d),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn identity_inverse_warp_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let img = random_image(&mut rng, 24, 18);
        let depth = DepthMap::from_fn(24, 18, |x, y| 1.0 + 0.01 * (x + y) as f64).unwrap();
        let k = CameraIntrinsics::new(30.0, 30.0, 11.5, 8.5, 24, 18).unwrap();
        let (warped, valid) = inverse_warp(&img, &depth, &Se3Transform::identity(), &k).unwrap();
        assert!(valid.iter().all(|v| *v));
        assert_eq!(warped.data(), img.data());
    }

    #[test]
    fn large_translation_masks_most_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let img = random_image(&mut rng, 16, 16);
        let depth = DepthMap::constant(16, 16, 2.0).unwrap();
        let k = CameraIntrinsics::new(20.0, 20.0, 7.5, 7.5, 16, 16).unwrap();
        let t = Se3Transform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(5.0, 0.0, 0.0),
        };
        let (_, valid) = inverse_warp(&img, &depth, &t, &k).unwrap();
        let n_valid = valid.iter().filter(|v| **v).count();
        assert!(n_valid < 16 * 16 / 10);
    }

    #[test]
    fn plane_warp_matches_analytic_re_render() {
        // Analytic oracle: both views render a textured fronto-parallel
        // plane by ray casting (no warping code involved); inverse_warp of
        // the second view with the true depth and pose must reproduce the
        // first view up to bilinear interpolation error.
        let k = CameraIntrinsics::new(50.0, 50.0, 15.5, 15.5, 32, 32).unwrap();
        let plane_z = 2.0;
        let tex = |x: f64, y: f64| {
            0.5 + 0.3 * (1.3 * x + 0.7 * y).sin() + 0.15 * (2.1 * x - 1.1 * y).cos()
        };
        let render = |cam_to_world: &Se3Transform| {
            IntensityImage::from_fn(32, 32, |px, py| {
                let dir_cam = k.ray_direction(&Vector2::new(px as f64, py as f64));
                let dir_w = cam_to_world.rotation * dir_cam;
                let origin = cam_to_world.translation;
                let lambda = (plane_z - origin.z) / dir_w.z;
                let hit = origin + lambda * dir_w;
                tex(hit.x, hit.y)
            })
            .unwrap()
        };

        let pose1 = Se3Transform::identity();
        let pose2 = crate::geometry::exp_map(&Se3Tangent::new(
            Vector3::new(0.0, 0.004, 0.002),
            Vector3::new(0.08, 0.03, 0.04),
        ));
        let i1 = render(&pose1);
        let i2 = render(&pose2);
        let d1 = DepthMap::constant(32, 32, plane_z).unwrap();
        let t_1_to_2 = pose2.inverse().compose(&pose1);

        let (warped, valid) = inverse_warp(&i2, &d1, &t_1_to_2, &k).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..32 {
            for x in 0..32 {
                if valid[y * 32 + x] {
                    sum += (warped.value(x, y, 0) - i1.value(x, y, 0)).abs();
                    n += 1;
                }
            }
        }
        assert!(n > 32 * 32 / 2, "too few valid pixels: {n}");
        let mean_abs = sum / n as f64;
        assert!(mean_abs < 1e-3, "mean abs residual {mean_abs}");
    }

    #[test]
    fn luma_weights() {
        let img = IntensityImage::new(1, 1, 3, vec![1.0, 0.5, 0.25]).unwrap();
        let l = img.luma();
        assert_relative_eq!(l.value(0, 0, 0), 0.299 + 0.587 * 0.5 + 0.114 * 0.25);
    }

    #[test]
    fn constructors_validate() {
        assert!(IntensityImage::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(IntensityImage::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(DepthMap::new(2, 2, vec![1.0, 2.0, 0.0, 1.0]).is_err());
        assert!(SparseDepth::new(1, 2, vec![1.0, -1.0], vec![true, true]).is_err());
        assert!(SparseDepth::new(1, 2, vec![1.0, -1.0], vec![true, false]).is_ok());
    }
}
