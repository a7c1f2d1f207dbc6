//! Image metrics, attention depth maps, LE perturbation and PNG output.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageEncoder, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::diffcore::{write_atomic, Checkpoint, CheckpointError};
use crate::model::{argmax, AbleModel, ModelError, RayOutput, LE_BANK};
use crate::sampling::{generate_rays, Camera};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    Dimension(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmall(usize, usize),
    #[error("invalid image buffer: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("checkpoint has no `{LE_BANK}` tensor")]
    MissingLeBank,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Row-major sRGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl ImageBuffer {
    /// Values are clamped into `[0, 1]`; NaN is rejected.
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self, EvalError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(EvalError::Invalid(format!("{width}x{height} with {} pixels", pixels.len())));
        }
        if pixels.iter().flatten().any(|v| v.is_nan()) {
            return Err(EvalError::Invalid("NaN pixel".into()));
        }
        let pixels = pixels.into_iter().map(|p| p.map(|v| v.clamp(0.0, 1.0))).collect();
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Result<Self, EvalError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.pixels[row * self.width + col]
    }

    fn channel(&self, k: usize) -> Vec<f64> {
        self.pixels.iter().map(|p| p[k]).collect()
    }

    fn same_size(&self, other: &Self) -> Result<(), EvalError> {
        if self.width != other.width || self.height != other.height {
            return Err(EvalError::Dimension(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Box-filter downscale by an integer factor.
    pub fn downscale(&self, factor: usize) -> Result<Self, EvalError> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(EvalError::Invalid(format!(
                "{}x{} is not divisible by downscale factor {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let area = (factor * factor) as f64;
        let pixels = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                let mut acc = [0.0; 3];
                for dr in 0..factor {
                    for dc in 0..factor {
                        let p = self.get(r * factor + dr, c * factor + dc);
                        (0..3).for_each(|k| acc[k] += p[k]);
                    }
                }
                acc.map(|v| v / area)
            })
            .collect();
        Self::new(w, h, pixels)
    }
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, EvalError> {
    a.same_size(b)?;
    let sum: f64 = a.pixels.iter().zip(&b.pixels).flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).powi(2))).sum();
    Ok(sum / (3 * a.pixels.len()) as f64)
}

/// `-10 log10(mse)`, or [`PSNR_CAP`] for identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, EvalError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = k.iter().enumerate().map(|(i, kv)| kv * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = k.iter().enumerate().map(|(i, kv)| kv * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, EvalError> {
    a.same_size(b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall(w, h));
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..3 {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&prod(&x, &x), w, h, &k);
        let syy = filter_valid(&prod(&y, &y), w, h, &k);
        let sxy = filter_valid(&prod(&x, &y), w, h, &k);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// Renders every pixel of a view; chunks of `chunk` rays run in parallel.
pub fn render_view<T: crate::diffcore::Real>(
    model: &AbleModel<T>,
    camera: &Camera,
    near: f64,
    far: f64,
    chunk: usize,
) -> Result<(ImageBuffer, Vec<RayOutput>), EvalError> {
    use rayon::prelude::*;
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<(usize, usize)> = (0..w * h).map(|i| (i / w, i % w)).collect();
    let rays = generate_rays(camera, &pixels).map_err(ModelError::from)?;
    let parts: Vec<Vec<RayOutput>> =
        rays.par_chunks(chunk.max(1)).map(|c| model.render_rays(c, near, far, c.len())).collect::<Result<_, _>>()?;
    let outputs: Vec<RayOutput> = parts.into_iter().flatten().collect();
    let img = ImageBuffer::new(w, h, outputs.iter().map(|o| o.rgb_fine).collect())?;
    Ok((img, outputs))
}

/// Mean over pixels of the squared RGB distance.
pub fn mean_l2(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, EvalError> {
    Ok(3.0 * mse(a, b)?)
}

/// Depth per pixel from the most attended fine frustum, plus a grayscale
/// image with `near` black and `far` white.
pub fn depth_map(outputs: &[RayOutput], width: usize, height: usize, near: f64, far: f64) -> Result<(ImageBuffer, Vec<f64>), EvalError> {
    if outputs.len() != width * height {
        return Err(EvalError::Invalid(format!("{} renders for a {width}x{height} image", outputs.len())));
    }
    let depth: Vec<f64> = outputs.iter().map(|o| o.depth).collect();
    let img = ImageBuffer::new(width, height, depth.iter().map(|&d| [(d - near) / (far - near); 3]).collect())?;
    Ok((img, depth))
}

/// Depth of the argmax frustum midpoint along a ray with direction norm `dir_norm`.
pub fn argmax_depth(attn: &[f64], intervals: &[crate::sampling::TInterval], dir_norm: f64) -> f64 {
    intervals[argmax(attn)].mid() * dir_norm
}

/// Raw depths as CSV, one image row per line.
pub fn write_depth_csv(depth: &[f64], width: usize, path: &Path) -> Result<(), EvalError> {
    let mut s = String::new();
    for row in depth.chunks(width) {
        let line: Vec<String> = row.iter().map(|d| format!("{d}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    Gaussian { sigma: f64 },
    Zero,
}

/// Copy of `ckpt` with only the LE bank corrupted.
pub fn perturb_le(ckpt: &Checkpoint, mode: Perturbation, seed: u64) -> Result<Checkpoint, EvalError> {
    let mut out = ckpt.clone();
    let bank = out.get_mut(LE_BANK).ok_or(EvalError::MissingLeBank)?;
    match mode {
        Perturbation::Zero => bank.data_mut().iter_mut().for_each(|v| *v = 0.0),
        Perturbation::Gaussian { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(EvalError::Invalid(format!("noise sigma {sigma}")));
            }
            if sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(0.0, sigma).expect("checked sigma");
                for v in bank.data_mut() {
                    *v += dist.sample(&mut rng) as f32;
                }
            }
        }
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// PNG bytes (8-bit RGB).
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>, EvalError> {
    let raw: Vec<u8> = img.pixels.iter().flat_map(|p| p.map(quantize)).collect();
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut bytes))
        .write_image(&raw, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| EvalError::Invalid(e.to_string()))?;
    Ok(bytes)
}

pub fn write_png(img: &ImageBuffer, path: &Path) -> Result<(), EvalError> {
    write_atomic(path, &encode_png(img)?)?;
    Ok(())
}

/// Reads a PNG, compositing any alpha channel onto white.
pub fn read_png(path: &Path) -> Result<ImageBuffer, EvalError> {
    let io = |msg: String| EvalError::Io { path: path.to_path_buf(), msg };
    let img = image::open(path).map_err(|e| io(e.to_string()))?.into_rgba32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img
        .pixels()
        .map(|p| {
            let a = p[3] as f64;
            [0, 1, 2].map(|k| a * p[k] as f64 + (1.0 - a))
        })
        .collect();
    ImageBuffer::new(w, h, pixels)
}

/// 8-bit image, used for tests of the PNG path.
pub fn to_rgb8(img: &ImageBuffer) -> RgbImage {
    let raw: Vec<u8> = img.pixels.iter().flat_map(|p| p.map(quantize)).collect();
    RgbImage::from_raw(img.width as u32, img.height as u32, raw).expect("buffer matches dimensions")
}
