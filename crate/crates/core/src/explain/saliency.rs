//! Occlusion sensitivity maps.

use serde::{Deserialize, Serialize};

use crate::models::{Classifier, ModelError};
use crate::preprocess::io::encode_png;
use crate::preprocess::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub stride: usize,
    pub target: usize,
    /// Probability of `target` on the unoccluded image.
    pub base_prob: f64,
    /// Row-major `rows x cols`; cell `(i, j)` covers pixels
    /// `[i*stride, i*stride+patch) x [j*stride, j*stride+patch)`.
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Cell with the largest value (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = k;
            }
        }
        (best / self.cols, best % self.cols)
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` of a cell, end exclusive.
    pub fn cell_rect(&self, i: usize, j: usize) -> (usize, usize, usize, usize) {
        let (y0, x0) = (i * self.stride, j * self.stride);
        (x0, y0, x0 + self.patch, y0 + self.patch)
    }
}

pub const DEFAULT_PATCH: usize = 8;
pub const DEFAULT_STRIDE: usize = 4;
/// Mid-gray, the Graham-normalized background level.
pub const DEFAULT_BASELINE: f64 = 0.5;

/// Cells per side for an `s`-pixel image.
pub fn grid_dim(s: usize, patch: usize, stride: usize) -> usize {
    (s - patch) / stride + 1
}

/// `cell(i, j) = p(image) - p(image with the patch set to baseline)` for
/// class `target`. Occluded copies are evaluated in batches.
pub fn occlusion_saliency(
    model: &Classifier,
    image: &Image,
    target: usize,
    patch: usize,
    stride: usize,
    baseline: f64,
) -> Result<SaliencyMap, ModelError> {
    let (h, w) = (image.height(), image.width());
    if patch == 0 || patch > h.min(w) || stride == 0 {
        return Err(ModelError::Config(format!(
            "occlusion needs 1 <= patch <= {} and stride >= 1, got patch {patch}, stride {stride}",
            h.min(w)
        )));
    }
    if target >= crate::datasets::NUM_CLASSES {
        return Err(ModelError::Config(format!(
            "target class {target} out of range"
        )));
    }
    let (rows, cols) = (grid_dim(h, patch, stride), grid_dim(w, patch, stride));
    let c = image.channels();
    let base = image.to_chw();
    let plane = h * w;
    let probs_of = |batch: Vec<f64>, n: usize| -> Result<Vec<f64>, ModelError> {
        let t = crate::tensor::Tensor::new(vec![n, c, h, w], batch)?;
        let p = model.forward_classify(&t)?;
        Ok((0..n)
            .map(|k| p.data()[k * crate::datasets::NUM_CLASSES + target])
            .collect())
    };
    let base_prob = probs_of(base.clone(), 1)?[0];
    let cells: Vec<(usize, usize)> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .collect();
    let mut values = Vec::with_capacity(cells.len());
    for chunk in cells.chunks(32) {
        let mut batch = Vec::with_capacity(chunk.len() * base.len());
        for &(i, j) in chunk {
            let mut img = base.clone();
            for ch in 0..c {
                for y in i * stride..i * stride + patch {
                    let row = ch * plane + y * w;
                    img[row + j * stride..row + j * stride + patch].fill(baseline);
                }
            }
            batch.extend_from_slice(&img);
        }
        for p in probs_of(batch, chunk.len())? {
            values.push(base_prob - p);
        }
    }
    Ok(SaliencyMap {
        rows,
        cols,
        patch,
        stride,
        target,
        base_prob,
        values,
    })
}

/// Per-pixel importance: mean of the cells covering the pixel (0 where none).
pub fn saliency_pixels(map: &SaliencyMap, h: usize, w: usize) -> Vec<f64> {
    let mut sum = vec![0.0; h * w];
    let mut cnt = vec![0u32; h * w];
    for i in 0..map.rows {
        for j in 0..map.cols {
            let (x0, y0, x1, y1) = map.cell_rect(i, j);
            let v = map.get(i, j);
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    sum[y * w + x] += v;
                    cnt[y * w + x] += 1;
                }
            }
        }
    }
    sum.iter()
        .zip(&cnt)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect()
}

/// Heatmap overlay: positive importance tints the grayscale image red,
/// scaled by the largest positive cell.
pub fn saliency_overlay(map: &SaliencyMap, image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    let px = saliency_pixels(map, h, w);
    let peak = px.iter().cloned().fold(0.0f64, f64::max);
    let gray = image.to_gray();
    Image::from_fn(h, w, 3, |y, x, ch| {
        let a = if peak > 0.0 {
            0.7 * (px[y * w + x].max(0.0) / peak)
        } else {
            0.0
        };
        let g = gray.get(y, x, 0);
        let tint = if ch == 0 { 1.0 } else { 0.0 };
        (1.0 - a) * g + a * tint
    })
}

pub fn saliency_png(map: &SaliencyMap, image: &Image) -> Vec<u8> {
    encode_png(&saliency_overlay(map, image))
}
