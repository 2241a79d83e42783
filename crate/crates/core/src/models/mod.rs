//! Classifier, U-Net and W-Net behind one [`Network`] interface.

mod classifier;
mod layers;
mod unet;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointError};
use crate::tensor::{ParamStore, Tensor, TensorError};

pub use classifier::{BackboneConfig, Classifier, ClassifierOutputs, Variant};
pub use unet::{UNet, UNetConfig, WNet, WNetConfig, WNetOutputs};

const FORMAT_TAG: &str = "ocuscreen-model/1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape mismatch: expected {expected}, found {found:?}")]
    InputShape { expected: String, found: Vec<usize> },
    #[error("block index {index} out of range (model has {blocks} blocks)")]
    BlockIndex { index: usize, blocks: usize },
    #[error("checkpoint mismatch: expected {expected}, found {found}")]
    Mismatch { expected: String, found: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    UNet,
    WNet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Classifier => "classifier",
            ModelKind::UNet => "unet",
            ModelKind::WNet => "wnet",
        }
    }
}

/// Everything needed to rebuild a model's structure (weights aside).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Classifier { config: BackboneConfig, seed: u64 },
    UNet { config: UNetConfig, seed: u64 },
    WNet { config: WNetConfig, seed: u64 },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Classifier { .. } => ModelKind::Classifier,
            ModelSpec::UNet { .. } => ModelKind::UNet,
            ModelSpec::WNet { .. } => ModelKind::WNet,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelSpec::Classifier { seed, .. }
            | ModelSpec::UNet { seed, .. }
            | ModelSpec::WNet { seed, .. } => *seed,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Classifier { config, .. } => config.param_count(),
            ModelSpec::UNet { config, .. } => config.param_count(),
            ModelSpec::WNet { config, .. } => config.param_count(),
        }
    }
}

/// Uniform model interface.
pub trait Network {
    fn kind(&self) -> ModelKind;
    fn spec(&self) -> ModelSpec;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn num_blocks(&self) -> usize;

    /// Primary output: class probabilities for classifiers, the final
    /// probability map for segmenters.
    fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError>;

    #[doc(hidden)]
    fn on_freeze(&mut self, _frozen: &[usize]) {}

    /// Freezes exactly `frozen` (all other blocks and heads become trainable).
    fn set_trainable(&mut self, frozen: &[usize]) -> Result<(), ModelError> {
        let blocks = self.num_blocks();
        if let Some(&index) = frozen.iter().find(|&&b| b >= blocks) {
            return Err(ModelError::BlockIndex { index, blocks });
        }
        self.params_mut().freeze_blocks(frozen);
        self.on_freeze(frozen);
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.params().count()
    }

    fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_model(self, path)
    }
}

/// A model of any kind, as returned by [`load_model`].
#[derive(Debug, Clone)]
pub enum AnyModel {
    Classifier(Classifier),
    UNet(UNet),
    WNet(WNet),
}

impl AnyModel {
    pub fn as_network(&self) -> &dyn Network {
        match self {
            AnyModel::Classifier(m) => m,
            AnyModel::UNet(m) => m,
            AnyModel::WNet(m) => m,
        }
    }

    pub fn as_network_mut(&mut self) -> &mut dyn Network {
        match self {
            AnyModel::Classifier(m) => m,
            AnyModel::UNet(m) => m,
            AnyModel::WNet(m) => m,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.as_network().kind()
    }

    pub fn into_classifier(self) -> Result<Classifier, ModelError> {
        match self {
            AnyModel::Classifier(m) => Ok(m),
            other => Err(kind_mismatch(ModelKind::Classifier, other.kind())),
        }
    }

    pub fn into_unet(self) -> Result<UNet, ModelError> {
        match self {
            AnyModel::UNet(m) => Ok(m),
            other => Err(kind_mismatch(ModelKind::UNet, other.kind())),
        }
    }

    pub fn into_wnet(self) -> Result<WNet, ModelError> {
        match self {
            AnyModel::WNet(m) => Ok(m),
            other => Err(kind_mismatch(ModelKind::WNet, other.kind())),
        }
    }
}

fn kind_mismatch(expected: ModelKind, found: ModelKind) -> ModelError {
    ModelError::Mismatch {
        expected: format!("model kind {}", expected.as_str()),
        found: format!("model kind {}", found.as_str()),
    }
}

pub fn build_model(spec: &ModelSpec) -> Result<AnyModel, ModelError> {
    Ok(match spec.clone() {
        ModelSpec::Classifier { config, seed } => {
            AnyModel::Classifier(Classifier::new(config, seed)?)
        }
        ModelSpec::UNet { config, seed } => AnyModel::UNet(UNet::new(config, seed)?),
        ModelSpec::WNet { config, seed } => AnyModel::WNet(WNet::new(config, seed)?),
    })
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    model: ModelSpec,
    param_count: usize,
}

pub fn save_model<N: Network + ?Sized>(model: &N, path: &Path) -> Result<(), ModelError> {
    let meta = Meta {
        format: FORMAT_TAG.to_string(),
        model: model.spec(),
        param_count: model.param_count(),
    };
    let meta = serde_json::to_string(&meta).expect("model spec serializes");
    let store = model.params();
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(
        &mut w,
        &meta,
        store
            .iter()
            .map(|p| (p.name.as_str(), &p.tensor))
            .collect::<Vec<_>>()
            .into_iter(),
    )?;
    w.flush()?;
    Ok(())
}

/// Rebuilds the model from the embedded spec, then copies the stored weights
/// over. Any structural difference is reported as a mismatch.
pub fn load_model(path: &Path) -> Result<AnyModel, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let (meta, tensors) = read_checkpoint(&mut r)?;
    let meta: Meta = serde_json::from_str(&meta)
        .map_err(|e| CheckpointError::Corrupt(format!("model metadata: {e}")))?;
    if meta.format != FORMAT_TAG {
        return Err(ModelError::Mismatch {
            expected: FORMAT_TAG.into(),
            found: meta.format,
        });
    }
    let mut model = build_model(&meta.model)?;
    let store = model.as_network_mut().params_mut();
    if tensors.len() != store.len() {
        return Err(ModelError::Mismatch {
            expected: format!("{} parameter tensors", store.len()),
            found: format!("{} parameter tensors", tensors.len()),
        });
    }
    for (i, (name, t)) in tensors.into_iter().enumerate() {
        let p = store.get_mut(i);
        if p.name != name || p.tensor.shape() != t.shape() {
            return Err(ModelError::Mismatch {
                expected: format!("{} {:?}", p.name, p.tensor.shape()),
                found: format!("{name} {:?}", t.shape()),
            });
        }
        let rg = p.tensor.requires_grad();
        p.tensor = t.with_requires_grad(rg);
    }
    Ok(model)
}

/// Human-readable summary recorded next to a checkpoint.
pub fn model_card<N: Network + ?Sized>(model: &N) -> String {
    let spec = model.spec();
    let config = match &spec {
        ModelSpec::Classifier { config, .. } => serde_json::to_string_pretty(config),
        ModelSpec::UNet { config, .. } => serde_json::to_string_pretty(config),
        ModelSpec::WNet { config, .. } => serde_json::to_string_pretty(config),
    }
    .expect("config serializes");
    format!(
        "model: {}\nseed: {}\nparameters: {}\nblocks: {}\nchecksum: {:016x}\nconfig:\n{}\n",
        spec.kind().as_str(),
        spec.seed(),
        model.param_count(),
        model.num_blocks(),
        model.params().checksum(),
        config
    )
}

/// Path of the model card for a checkpoint: `<path>.card.txt`.
pub fn card_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".card.txt");
    PathBuf::from(s)
}

/// Saves the checkpoint and writes its model card alongside.
pub fn save_with_card<N: Network + ?Sized>(model: &N, path: &Path) -> Result<(), ModelError> {
    save_model(model, path)?;
    std::fs::write(card_path(path), model_card(model))?;
    Ok(())
}
