//! Model-facing image handling. Everything here is deterministic, so
//! recomputing from the stored original always yields identical bytes.

use std::path::Path;

use ocuscreen::explain::RetrievalIndex;
use ocuscreen::models::{load_model, Classifier, WNet};
use ocuscreen::preprocess::io::encode_png;
use ocuscreen::preprocess::{self, Image, PreprocessConfig, PreprocessError};
use ocuscreen::training::{dice, segmentation_pair, threshold_mask};
use sha2::{Digest, Sha256};

use crate::ServiceError;

/// Content address of a model or index file.
pub fn content_version(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_version(path: &Path) -> std::io::Result<String> {
    Ok(content_version(&std::fs::read(path)?))
}

pub struct Loaded<T> {
    pub model: T,
    pub version: String,
}

pub fn load_classifier(path: &Path) -> Result<Loaded<Classifier>, ServiceError> {
    let model = load_model(path)?.into_classifier()?;
    Ok(Loaded {
        model,
        version: file_version(path)?,
    })
}

pub fn load_segmenter(path: &Path) -> Result<Loaded<WNet>, ServiceError> {
    let model = load_model(path)?.into_wnet()?;
    Ok(Loaded {
        model,
        version: file_version(path)?,
    })
}

pub fn load_index(path: &Path) -> Result<Loaded<RetrievalIndex>, ServiceError> {
    Ok(Loaded {
        model: RetrievalIndex::load(path)?,
        version: file_version(path)?,
    })
}

/// Replicates gray to RGB or averages RGB to gray as the model requires.
pub fn with_channels(img: &Image, c: usize) -> Image {
    match (img.channels(), c) {
        (a, b) if a == b => img.clone(),
        (_, 1) => img.to_gray(),
        (1, c) => Image::from_fn(img.height(), img.width(), c, |y, x, _| img.get(y, x, 0)),
        (_, c) => {
            let g = img.to_gray();
            Image::from_fn(img.height(), img.width(), c, |y, x, _| g.get(y, x, 0))
        }
    }
}

pub fn preprocess_config(target_size: usize, graham: bool) -> PreprocessConfig {
    PreprocessConfig {
        target_size,
        graham,
        ..PreprocessConfig::default()
    }
}

/// Crop + Graham for the enhanced view (no resize).
pub fn enhanced(img: &Image) -> Result<Image, PreprocessError> {
    let cfg = PreprocessConfig::default();
    let (roi, _) = preprocess::crop_roi(img, &cfg)?;
    Ok(preprocess::graham_normalize(&roi, &cfg))
}

/// The classifier's view of an image.
pub fn classifier_input(m: &Classifier, img: &Image, graham: bool) -> Result<Image, PreprocessError> {
    let c = m.config();
    preprocess::pipeline(
        &with_channels(img, c.input_channels),
        &preprocess_config(c.input_size, graham),
    )
}

pub fn predict(m: &Classifier, img: &Image, graham: bool) -> Result<[f64; 8], ServiceError> {
    let x = classifier_input(m, img, graham)?;
    let p = m.forward_classify(&Image::batch(&[&x])?)?;
    let mut out = [0.0; 8];
    out.copy_from_slice(p.data());
    Ok(out)
}

pub fn embed(m: &Classifier, img: &Image, graham: bool) -> Result<Vec<f64>, ServiceError> {
    let x = classifier_input(m, img, graham)?;
    Ok(m.extract_embedding(&Image::batch(&[&x])?)?.data().to_vec())
}

pub struct SegmentOutput {
    pub mask_png: Vec<u8>,
    pub overlay_png: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub dice_vs_truth: Option<f64>,
}

/// map_b thresholded at 0.5, and the mask blended in red over the cropped,
/// resized original.
pub fn segment(
    m: &WNet,
    img: &Image,
    truth: Option<&Image>,
    graham: bool,
) -> Result<SegmentOutput, ServiceError> {
    let s = m.config().unet.input_size;
    let cfg = preprocess_config(s, graham);
    let (roi, bbox) = preprocess::crop_roi(img, &cfg)?;
    let (input, truth) = match truth {
        Some(t) => {
            let (i, t) = segmentation_pair(img, t, &cfg)?;
            (i, Some(t))
        }
        None => {
            let norm = if graham {
                preprocess::graham_normalize(&roi, &cfg)
            } else {
                roi.clone()
            };
            (preprocess::resize(&norm, s).to_gray(), None)
        }
    };
    let (_, map_b) = m.wnet_forward(&Image::batch(&[&input])?)?;
    let mask = threshold_mask(map_b.data(), 0.5);
    let dice_vs_truth = match &truth {
        Some(t) => Some(dice(&mask, t.pixels())?),
        None => None,
    };
    let mask_img = Image::from_raw(s, s, 1, mask.clone())?;
    let base = preprocess::resize(&with_channels(&img.crop(&bbox), 3), s);
    let overlay = Image::from_fn(s, s, 3, |y, x, ch| {
        let a = 0.5 * mask[y * s + x];
        let tint = if ch == 0 { 1.0 } else { 0.0 };
        (1.0 - a) * base.get(y, x, ch) + a * tint
    });
    Ok(SegmentOutput {
        mask_png: encode_png(&mask_img),
        overlay_png: encode_png(&overlay),
        width: s,
        height: s,
        dice_vs_truth,
    })
}
