//! Directory-per-case persistence.
//!
//! ```text
//! <data_dir>/cases/<case_id>/case.json       descriptor
//!                           /original.png
//!                           /enhanced.png
//!                           /preprocessed.png
//!                           /truth_mask.png    optional, from upload
//!                           /mask.png          after segmentation
//!                           /overlay.png
//! ```
//!
//! A case directory is assembled under a temporary name and renamed into
//! place, so readers never see a half-written case. Descriptor updates go
//! through write-to-temp + rename as well.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use ocuscreen::datasets::{Eye, LabelVector, NUM_CLASSES};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    New,
    Reviewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUris {
    pub original: String,
    pub enhanced: String,
    pub preprocessed: String,
    pub mask: Option<String>,
    pub overlay: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; NUM_CLASSES],
    pub labels_over_threshold: [bool; NUM_CLASSES],
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub mask_uri: String,
    pub overlay_uri: String,
    pub width: usize,
    pub height: usize,
    /// Only when the case was uploaded with a ground-truth vessel mask.
    pub dice_vs_truth: Option<f64>,
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub clinician_id: String,
    pub labels: LabelVector,
    pub agrees_with_model: bool,
    pub note: String,
    /// Unix milliseconds, set by the server.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResource {
    pub case_id: String,
    pub eye: Eye,
    pub status: CaseStatus,
    /// Unix milliseconds.
    pub created_at: u64,
    pub images: ImageUris,
    /// Confirmed diagnosis supplied at upload, if any.
    pub labels: Option<LabelVector>,
    pub has_truth_mask: bool,
    pub prediction: Option<Prediction>,
    pub segmentation: Option<Segmentation>,
    pub decision: Option<DecisionRecord>,
}

impl CaseResource {
    /// Labels usable as retrieval ground truth: the clinician's decision,
    /// else the labels given at upload.
    pub fn confirmed_labels(&self) -> Option<LabelVector> {
        self.decision.as_ref().map(|d| d.labels).or(self.labels)
    }
}

pub fn uri(case_id: &str, file: &str) -> String {
    format!("/cases/{case_id}/{file}")
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Files of a new case, written together.
pub struct NewCase<'a> {
    pub eye: Eye,
    pub labels: Option<LabelVector>,
    pub original: &'a [u8],
    pub enhanced: &'a [u8],
    pub preprocessed: &'a [u8],
    pub truth_mask: Option<&'a [u8]>,
}

#[derive(Debug, Clone)]
pub struct CaseStore {
    root: PathBuf,
    locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

const DESCRIPTOR: &str = "case.json";

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl CaseStore {
    pub fn open(data_dir: &Path) -> io::Result<Self> {
        let root = data_dir.join("cases");
        fs::create_dir_all(&root)?;
        // leftovers of interrupted uploads
        for e in fs::read_dir(&root)? {
            let e = e?;
            if e.file_name().to_string_lossy().starts_with(".tmp-") {
                fs::remove_dir_all(e.path())?;
            }
        }
        Ok(Self {
            root,
            locks: Arc::default(),
        })
    }

    /// Mutations of one case are serialized through this lock.
    pub fn lock(&self, case_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut m = self.locks.lock().expect("lock table poisoned");
        Arc::clone(m.entry(case_id.to_string()).or_default())
    }

    pub fn dir(&self, case_id: &str) -> Option<PathBuf> {
        if !valid_id(case_id) {
            return None;
        }
        let d = self.root.join(case_id);
        d.join(DESCRIPTOR).is_file().then_some(d)
    }

    pub fn create(&self, new: NewCase<'_>) -> io::Result<CaseResource> {
        let case_id = uuid::Uuid::new_v4().to_string();
        let tmp = self.root.join(format!(".tmp-{case_id}"));
        fs::create_dir(&tmp)?;
        fs::write(tmp.join("original.png"), new.original)?;
        fs::write(tmp.join("enhanced.png"), new.enhanced)?;
        fs::write(tmp.join("preprocessed.png"), new.preprocessed)?;
        if let Some(m) = new.truth_mask {
            fs::write(tmp.join("truth_mask.png"), m)?;
        }
        let case = CaseResource {
            images: ImageUris {
                original: uri(&case_id, "original"),
                enhanced: uri(&case_id, "enhanced"),
                preprocessed: uri(&case_id, "preprocessed"),
                mask: None,
                overlay: None,
            },
            case_id,
            eye: new.eye,
            status: CaseStatus::New,
            created_at: now_millis(),
            labels: new.labels,
            has_truth_mask: new.truth_mask.is_some(),
            prediction: None,
            segmentation: None,
            decision: None,
        };
        write_json(&tmp.join(DESCRIPTOR), &case)?;
        fs::rename(&tmp, self.root.join(&case.case_id))?;
        Ok(case)
    }

    pub fn get(&self, case_id: &str) -> io::Result<Option<CaseResource>> {
        let Some(d) = self.dir(case_id) else {
            return Ok(None);
        };
        let bytes = fs::read(d.join(DESCRIPTOR))?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// Caller must hold the case lock.
    pub fn put(&self, case: &CaseResource) -> io::Result<()> {
        let d = self
            .dir(&case.case_id)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, case.case_id.clone()))?;
        write_json(&d.join(DESCRIPTOR), case)
    }

    pub fn read_file(&self, case_id: &str, file: &str) -> io::Result<Option<Vec<u8>>> {
        let Some(d) = self.dir(case_id) else {
            return Ok(None);
        };
        match fs::read(d.join(file)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Caller must hold the case lock.
    pub fn write_file(&self, case_id: &str, file: &str, bytes: &[u8]) -> io::Result<()> {
        let d = self
            .dir(case_id)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, case_id.to_string()))?;
        let tmp = d.join(format!(".{file}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, d.join(file))
    }

    /// Every stored case, oldest first (ties by id).
    pub fn list(&self) -> io::Result<Vec<CaseResource>> {
        let mut out = Vec::new();
        for e in fs::read_dir(&self.root)? {
            let name = e?.file_name();
            if let Some(c) = self.get(&name.to_string_lossy())? {
                out.push(c);
            }
        }
        out.sort_by(|a, b| (a.created_at, &a.case_id).cmp(&(b.created_at, &b.case_id)));
        Ok(out)
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(v).expect("descriptor serializes"))?;
    fs::rename(tmp, path)
}
