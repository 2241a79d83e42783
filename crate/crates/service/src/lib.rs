//! HTTP API over the screening models.
//!
//! Cases live on disk (see [`store`]); models and the retrieval index are
//! loaded once at startup and shared read-only between requests. Model and
//! index versions are the SHA-256 of their files.

mod api;
pub mod infer;
pub mod store;

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use ocuscreen::explain::{IndexError, RetrievalIndex};
use ocuscreen::models::{Classifier, ModelError, WNet};
use ocuscreen::preprocess::PreprocessError;
use ocuscreen::training::MetricError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use api::router;
pub use infer::{content_version, file_version, Loaded};
pub use store::{CaseResource, CaseStatus, CaseStore, DecisionRecord, Prediction, Segmentation};

/// Published schema of every request and response body.
pub const OPENAPI: &str = include_str!("../../../docs/openapi.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    /// Classifier checkpoint; predict, similar and saliency answer 503 without it.
    pub model: Option<PathBuf>,
    /// W-Net checkpoint; segment answers 503 without it.
    pub segmenter: Option<PathBuf>,
    /// Retrieval index file. Loaded when present; `POST /index` writes here.
    /// Defaults to `<data_dir>/index.bin`.
    pub index: Option<PathBuf>,
    /// Must match how the loaded models were trained.
    pub graham: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("ocuscreen-data"),
            model: None,
            segmenter: None,
            index: None,
            graham: true,
        }
    }
}

impl ServiceConfig {
    pub fn index_path(&self) -> PathBuf {
        self.index
            .clone()
            .unwrap_or_else(|| self.data_dir.join("index.bin"))
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub struct AppState {
    pub config: ServiceConfig,
    pub store: CaseStore,
    pub classifier: Option<Arc<Loaded<Classifier>>>,
    pub segmenter: Option<Arc<Loaded<WNet>>>,
    index: RwLock<Option<Arc<Loaded<RetrievalIndex>>>>,
    /// Serializes index rebuilds.
    index_build: tokio::sync::Mutex<()>,
}

impl AppState {
    /// Opens the data directory and loads whatever models are configured.
    /// A configured path that fails to load is an error; a missing index
    /// file is not (the index can be built later).
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let store = CaseStore::open(&config.data_dir)?;
        let classifier = match &config.model {
            Some(p) => Some(Arc::new(infer::load_classifier(p)?)),
            None => None,
        };
        let segmenter = match &config.segmenter {
            Some(p) => Some(Arc::new(infer::load_segmenter(p)?)),
            None => None,
        };
        let ip = config.index_path();
        let index = if ip.is_file() {
            Some(Arc::new(infer::load_index(&ip)?))
        } else {
            None
        };
        tracing::info!(
            data_dir = %config.data_dir.display(),
            classifier = classifier.as_ref().map(|m| m.version.as_str()),
            segmenter = segmenter.as_ref().map(|m| m.version.as_str()),
            index = index.as_ref().map(|m| m.version.as_str()),
            "service state loaded"
        );
        Ok(Self {
            config,
            store,
            classifier,
            segmenter,
            index: RwLock::new(index),
            index_build: tokio::sync::Mutex::new(()),
        })
    }

    pub fn index(&self) -> Option<Arc<Loaded<RetrievalIndex>>> {
        self.index.read().expect("index lock poisoned").clone()
    }

    fn set_index(&self, idx: Loaded<RetrievalIndex>) {
        *self.index.write().expect("index lock poisoned") = Some(Arc::new(idx));
    }

    pub fn index_path(&self) -> PathBuf {
        self.config.index_path()
    }
}

/// Binds `config.listen` and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let listen = config.listen.clone();
    let state = Arc::new(AppState::open(config)?);
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

/// Convenience for tests and the CLI: state from a data dir and optional
/// checkpoints, default everything else.
pub fn open_state(
    data_dir: &Path,
    model: Option<&Path>,
    segmenter: Option<&Path>,
) -> Result<Arc<AppState>, ServiceError> {
    Ok(Arc::new(AppState::open(ServiceConfig {
        data_dir: data_dir.to_path_buf(),
        model: model.map(Path::to_path_buf),
        segmenter: segmenter.map(Path::to_path_buf),
        ..ServiceConfig::default()
    })?))
}
