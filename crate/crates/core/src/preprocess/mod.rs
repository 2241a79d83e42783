//! Fundus image preprocessing: margin removal, Graham luminosity
//! normalization, bilinear resizing and train-time augmentation.
//!
//! Every operation is a pure function of its inputs (and of the RNG state for
//! [`augment`]). Edges are handled by clamp-to-edge replication throughout.

mod image;
pub mod io;

pub use self::image::Image;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(
        "no pixel exceeds the ROI luminance threshold {threshold:.4}; image is all background"
    )]
    AllBackground { threshold: f64 },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Half-open pixel rectangle: `x0..x1` by `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn full(img: &Image) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: img.width(),
            y1: img.height(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Channel-mean luminance above which a pixel belongs to the retina.
    pub roi_threshold: f64,
    pub graham_alpha: f64,
    pub graham_beta: f64,
    pub graham_bias: f64,
    /// Blur sigma as a fraction of the ROI radius.
    pub sigma_ratio: f64,
    pub target_size: usize,
    pub clamp_output: bool,
    /// Apply Graham normalization in [`pipeline`]; off for ablations.
    pub graham: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            roi_threshold: 7.0 / 255.0,
            graham_alpha: 4.0,
            graham_beta: -4.0,
            graham_bias: 128.0 / 255.0,
            sigma_ratio: 1.0 / 30.0,
            target_size: 64,
            clamp_output: true,
            graham: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.sigma_ratio > 0.0) {
            return Err(PreprocessError::Config(format!(
                "sigma_ratio must be positive, got {}",
                self.sigma_ratio
            )));
        }
        if self.target_size < 16 {
            return Err(PreprocessError::Config(format!(
                "target_size must be at least 16, got {}",
                self.target_size
            )));
        }
        if !(0.0..=1.0).contains(&self.roi_threshold) {
            return Err(PreprocessError::Config(format!(
                "roi_threshold must lie in [0, 1], got {}",
                self.roi_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_shift_frac: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_shift_frac: 0.05,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(PreprocessError::Config(format!(
                "flip_prob must lie in [0, 1], got {}",
                self.flip_prob
            )));
        }
        if !(0.0..=0.25).contains(&self.max_shift_frac) {
            return Err(PreprocessError::Config(format!(
                "max_shift_frac must lie in [0, 0.25], got {}",
                self.max_shift_frac
            )));
        }
        Ok(())
    }
}

/// Tight bounding box of pixels brighter than `cfg.roi_threshold`, and the
/// image restricted to it.
pub fn crop_roi(img: &Image, cfg: &PreprocessConfig) -> Result<(Image, BBox), PreprocessError> {
    let (w, h) = (img.width(), img.height());
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if img.luminance(y, x) > cfg.roi_threshold {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x1 == 0 {
        return Err(PreprocessError::AllBackground {
            threshold: cfg.roi_threshold,
        });
    }
    let bbox = BBox { x0, y0, x1, y1 };
    Ok((img.crop(&bbox), bbox))
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders. A non-positive or
/// non-finite `sigma` leaves the image unchanged.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.pixels();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = clampi(x as isize + t as isize - r, w);
                    acc += kv * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = clampi(y as isize + t as isize - r, h);
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Image::from_raw_unchecked(h, w, c, out)
}

/// Graham's luminosity normalization:
/// `alpha * img + beta * blur(img, sigma) + bias`, clamped to `[0, 1]`.
///
/// `sigma = sigma_ratio * max(H, W) / 2`, i.e. proportional to the radius of
/// an ROI-cropped fundus.
pub fn graham_normalize(img: &Image, cfg: &PreprocessConfig) -> Image {
    let radius = img.height().max(img.width()) as f64 / 2.0;
    let blurred = gaussian_blur(img, radius * cfg.sigma_ratio);
    let px = img
        .pixels()
        .iter()
        .zip(blurred.pixels())
        .map(|(&v, &b)| {
            let o = cfg.graham_alpha * v + cfg.graham_beta * b + cfg.graham_bias;
            if cfg.clamp_output {
                o.clamp(0.0, 1.0)
            } else {
                o
            }
        })
        .collect();
    Image::from_raw_unchecked(img.height(), img.width(), img.channels(), px)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // exact when a == b
    a + t * (b - a)
}

/// Bilinear resize to `target x target` using pixel-centre alignment.
pub fn resize(img: &Image, target: usize) -> Image {
    assert!(target >= 1, "resize target must be positive");
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if h == target && w == target {
        return img.clone();
    }
    let src = img.pixels();
    let axis = |dst: usize, n: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n as f64 / target as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(target * target * c);
    for y in 0..target {
        let (y0, y1, fy) = axis(y, h);
        for x in 0..target {
            let (x0, x1, fx) = axis(x, w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = lerp(p(y0, x0), p(y0, x1), fx);
                let bot = lerp(p(y1, x0), p(y1, x1), fx);
                out.push(lerp(top, bot, fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::from_raw_unchecked(target, target, c, out)
}

/// Random horizontal mirror followed by an integer translation with edge
/// replication. Exactly three values are drawn from `rng` per call.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Image {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let max_dx = (cfg.max_shift_frac * img.width() as f64).floor() as i64;
    let max_dy = (cfg.max_shift_frac * img.height() as f64).floor() as i64;
    let dx = rng.random_range(-max_dx..=max_dx);
    let dy = rng.random_range(-max_dy..=max_dy);
    let mut out = if flip {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    if dx != 0 || dy != 0 {
        out = out.shift(dx, dy);
    }
    out
}

/// Canonical pipeline: crop ROI, Graham normalization (if enabled), resize.
pub fn pipeline(img: &Image, cfg: &PreprocessConfig) -> Result<Image, PreprocessError> {
    cfg.validate()?;
    let (roi, _) = crop_roi(img, cfg)?;
    let norm = if cfg.graham {
        graham_normalize(&roi, cfg)
    } else {
        roi
    };
    Ok(resize(&norm, cfg.target_size))
}
