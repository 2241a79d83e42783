//! Retrieval, hybrid SVM and occlusion saliency on top of a trained classifier.

mod retrieval;
mod saliency;
mod svm;

pub use retrieval::{build_index, IndexError, Metric, Neighbor, RetrievalIndex, INDEX_VERSION};
pub use saliency::{
    grid_dim, occlusion_saliency, saliency_overlay, saliency_pixels, saliency_png, SaliencyMap,
    DEFAULT_BASELINE, DEFAULT_PATCH, DEFAULT_STRIDE,
};
pub use svm::{fit_svm, ClassSvm, SvmError, SvmModel, SvmParams, SvmPrediction};

use crate::models::{Classifier, ModelError};
use crate::preprocess::Image;

/// Embeds images in batches of 16; one row per image.
pub fn embed_images(model: &Classifier, images: &[&Image]) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let batch = Image::batch(chunk).map_err(|e| ModelError::Config(e.to_string()))?;
        let e = model.extract_embedding(&batch)?;
        let d = e.shape()[1];
        out.extend(e.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}
