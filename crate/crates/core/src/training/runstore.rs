//! Append-only run log: one JSON object per line under `<root>/<run_id>.log`.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean per-image Dice, segmentation runs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed { epoch: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Model kind being trained (`classifier`, `wnet`, ...).
    pub model: String,
    pub config: serde_json::Value,
    pub started_at: u64,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub status: RunStatus,
    pub checkpoint: Option<String>,
    pub ended_at: Option<u64>,
}

impl RunRecord {
    pub fn new(
        run_id: impl Into<String>,
        model: impl Into<String>,
        config: serde_json::Value,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            model: model.into(),
            config,
            started_at: unix_time(),
            epochs: Vec::new(),
            best_epoch: None,
            stopped_early: false,
            status: RunStatus::Running,
            checkpoint: None,
            ended_at: None,
        }
    }

    pub fn best(&self) -> Option<&EpochMetrics> {
        let b = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum RunEvent {
    RunStart {
        run_id: String,
        model: String,
        config: serde_json::Value,
        started_at: u64,
    },
    Epoch {
        run_id: String,
        metrics: EpochMetrics,
    },
    RunEnd {
        run_id: String,
        best_epoch: Option<usize>,
        stopped_early: bool,
        status: RunStatus,
        checkpoint: Option<String>,
        ended_at: u64,
    },
}

impl RunEvent {
    pub fn run_id(&self) -> &str {
        match self {
            RunEvent::RunStart { run_id, .. }
            | RunEvent::Epoch { run_id, .. }
            | RunEvent::RunEnd { run_id, .. } => run_id,
        }
    }

    pub fn start(r: &RunRecord) -> Self {
        RunEvent::RunStart {
            run_id: r.run_id.clone(),
            model: r.model.clone(),
            config: r.config.clone(),
            started_at: r.started_at,
        }
    }

    pub fn end(r: &RunRecord) -> Self {
        RunEvent::RunEnd {
            run_id: r.run_id.clone(),
            best_epoch: r.best_epoch,
            stopped_early: r.stopped_early,
            status: r.status.clone(),
            checkpoint: r.checkpoint.clone(),
            ended_at: r.ended_at.unwrap_or_else(unix_time),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunStoreError {
    #[error("run store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("run log {path} line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("run {0} not found")]
    NotFound(String),
    #[error("run {run_id}: {reason}")]
    Sequence { run_id: String, reason: String },
}

pub fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Directory of per-run logs.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RunStoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log_path(&self, run_id: &str) -> PathBuf {
        self.root.join(format!("{run_id}.log"))
    }

    /// Appends one event as a single `write` on an `O_APPEND` handle, so
    /// concurrent writers never split a record.
    pub fn log_run(&self, event: &RunEvent) -> Result<(), RunStoreError> {
        let id = event.run_id();
        if !valid_run_id(id) {
            return Err(RunStoreError::Sequence {
                run_id: id.to_string(),
                reason: "run ids may only contain [A-Za-z0-9._-]".into(),
            });
        }
        let mut line = serde_json::to_vec(event).expect("events serialize");
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path(id))?;
        f.write_all(&line)?;
        f.sync_data()?;
        Ok(())
    }

    pub fn read_events(&self, run_id: &str) -> Result<Vec<RunEvent>, RunStoreError> {
        let path = self.log_path(run_id);
        let f = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(RunStoreError::NotFound(run_id.into()))
            }
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: RunEvent = serde_json::from_str(&line).map_err(|e| RunStoreError::Parse {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if ev.run_id() == run_id {
                out.push(ev);
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, run_id: &str) -> Result<RunRecord, RunStoreError> {
        reconstruct(run_id, &self.read_events(run_id)?)
    }

    /// Run ids with a log in the store, sorted.
    pub fn list_runs(&self) -> Result<Vec<String>, RunStoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "log") {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}

/// Rebuilds a run from its events (other runs' events are ignored).
pub fn reconstruct(run_id: &str, events: &[RunEvent]) -> Result<RunRecord, RunStoreError> {
    let seq = |reason: &str| RunStoreError::Sequence {
        run_id: run_id.to_string(),
        reason: reason.to_string(),
    };
    let mut rec: Option<RunRecord> = None;
    for ev in events.iter().filter(|e| e.run_id() == run_id) {
        match ev {
            RunEvent::RunStart {
                model,
                config,
                started_at,
                ..
            } => {
                if rec.is_some() {
                    return Err(seq("duplicate run-start"));
                }
                let mut r = RunRecord::new(run_id, model.clone(), config.clone());
                r.started_at = *started_at;
                rec = Some(r);
            }
            RunEvent::Epoch { metrics, .. } => {
                let r = rec.as_mut().ok_or_else(|| seq("epoch before run-start"))?;
                if r.status != RunStatus::Running {
                    return Err(seq("epoch after run-end"));
                }
                r.epochs.push(*metrics);
            }
            RunEvent::RunEnd {
                best_epoch,
                stopped_early,
                status,
                checkpoint,
                ended_at,
                ..
            } => {
                let r = rec
                    .as_mut()
                    .ok_or_else(|| seq("run-end before run-start"))?;
                r.best_epoch = *best_epoch;
                r.stopped_early = *stopped_early;
                r.status = status.clone();
                r.checkpoint = checkpoint.clone();
                r.ended_at = Some(*ended_at);
            }
        }
    }
    rec.ok_or_else(|| RunStoreError::NotFound(run_id.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(loss: f64) -> SplitMetrics {
        SplitMetrics {
            loss,
            accuracy: 0.9,
            auc: 0.8,
            precision: 0.5,
            recall: 0.25,
            dice: None,
        }
    }

    #[test]
    fn three_epochs_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path().join("runs")).unwrap();
        let mut rec = RunRecord::new("r1", "classifier", serde_json::json!({"lr": 0.001}));
        store.log_run(&RunEvent::start(&rec)).unwrap();
        for e in 1..=3 {
            let m = EpochMetrics {
                epoch: e,
                train: split(1.0 / e as f64),
                val: split(2.0 / e as f64),
            };
            rec.epochs.push(m);
            store
                .log_run(&RunEvent::Epoch {
                    run_id: "r1".into(),
                    metrics: m,
                })
                .unwrap();
        }
        rec.best_epoch = Some(3);
        rec.status = RunStatus::Completed;
        rec.ended_at = Some(unix_time());
        store.log_run(&RunEvent::end(&rec)).unwrap();
        let back = store.reconstruct("r1").unwrap();
        assert_eq!(back, rec);
        assert_eq!(store.reconstruct("r1").unwrap(), back);
        assert_eq!(store.list_runs().unwrap(), vec!["r1".to_string()]);
    }

    #[test]
    fn bad_sequences_rejected() {
        let ev = RunEvent::Epoch {
            run_id: "x".into(),
            metrics: EpochMetrics {
                epoch: 1,
                train: split(1.0),
                val: split(1.0),
            },
        };
        assert!(matches!(
            reconstruct("x", &[ev]),
            Err(RunStoreError::Sequence { .. })
        ));
        assert!(matches!(
            reconstruct("y", &[]),
            Err(RunStoreError::NotFound(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let rec = RunRecord::new("../evil", "m", serde_json::Value::Null);
        assert!(store.log_run(&RunEvent::start(&rec)).is_err());
    }
}
