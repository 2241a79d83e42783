use super::{BBox, PreprocessError};
use crate::tensor::Tensor;

/// H x W x C pixel grid, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn from_raw(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, PreprocessError> {
        if height == 0 || width == 0 {
            return Err(PreprocessError::InvalidImage(format!(
                "empty image {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(PreprocessError::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(PreprocessError::InvalidImage(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(PreprocessError::InvalidImage(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Internal constructor for operations whose outputs are in range by
    /// construction (or deliberately unclamped).
    pub(crate) fn from_raw_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(pixels.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }

    /// Builds an image from `f(y, x, c)`, clamping into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        let base = (y * self.width + x) * self.channels;
        self.pixels[base..base + self.channels].iter().sum::<f64>() / self.channels as f64
    }

    pub fn crop(&self, b: &BBox) -> Image {
        assert!(b.x0 < b.x1 && b.x1 <= self.width && b.y0 < b.y1 && b.y1 <= self.height);
        let c = self.channels;
        let mut px = Vec::with_capacity(b.width() * b.height() * c);
        for y in b.y0..b.y1 {
            let row = (y * self.width + b.x0) * c;
            px.extend_from_slice(&self.pixels[row..row + b.width() * c]);
        }
        Self::from_raw_unchecked(b.height(), b.width(), c, px)
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// Translates content by (`dx`, `dy`) pixels, replicating edge pixels
    /// into the uncovered border.
    pub fn shift(&self, dx: i64, dy: i64) -> Image {
        let (w, h) = (self.width as i64, self.height as i64);
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            let sx = (x as i64 - dx).clamp(0, w - 1) as usize;
            let sy = (y as i64 - dy).clamp(0, h - 1) as usize;
            self.get(sy, sx, c)
        })
    }

    /// Channel-mean grayscale copy.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, 1, |y, x, _| self.luminance(y, x))
    }

    /// Planar CHW copy of the pixels.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch];
                }
            }
        }
        out
    }

    /// Reassembles an image from one CHW sample, clamping into `[0, 1]`.
    pub fn from_chw(channels: usize, height: usize, width: usize, chw: &[f64]) -> Image {
        Image::from_fn(height, width, channels, |y, x, c| {
            chw[(c * height + y) * width + x]
        })
    }

    /// Stacks images into an N x C x H x W tensor. All images must agree in
    /// shape.
    pub fn batch(images: &[&Image]) -> Result<Tensor, PreprocessError> {
        let first = images
            .first()
            .ok_or_else(|| PreprocessError::InvalidImage("empty batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if (img.height, img.width, img.channels) != (h, w, c) {
                return Err(PreprocessError::InvalidImage(format!(
                    "batch mixes {h}x{w}x{c} with {}x{}x{}",
                    img.height, img.width, img.channels
                )));
            }
            data.extend(img.to_chw());
        }
        Tensor::new(vec![images.len(), c, h, w], data)
            .map_err(|e| PreprocessError::InvalidImage(e.to_string()))
    }

    /// Quantizes to 8 bits per sample (round to nearest).
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(
        height: usize,
        width: usize,
        channels: usize,
        bytes: &[u8],
    ) -> Result<Self, PreprocessError> {
        Self::from_raw(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(Image::from_raw(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::from_raw(1, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(Image::from_raw(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn chw_roundtrip() {
        let img = Image::from_fn(3, 4, 3, |y, x, c| (y * 12 + x * 3 + c) as f64 / 36.0);
        let back = Image::from_chw(3, 3, 4, &img.to_chw());
        assert_eq!(back, img);
    }

    #[test]
    fn shift_replicates_edges() {
        let img = Image::from_raw(1, 3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(img.shift(1, 0).pixels(), &[0.1, 0.1, 0.2]);
        assert_eq!(img.shift(-1, 0).pixels(), &[0.2, 0.3, 0.3]);
    }
}
