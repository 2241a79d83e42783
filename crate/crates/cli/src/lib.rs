//! `ocuscreen` command line.
//!
//! Exit codes: 0 success, 1 domain error (structured message), 2 usage
//! error. Every invocation prints its effective configuration first and
//! leaves a record in the run store.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ocuscreen::training::{RunEvent, RunRecord, RunStatus, RunStore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

/// Domain failures from the library crates.
macro_rules! domain_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Domain(e.to_string())
            }
        }
    )*};
}
domain_from!(
    std::io::Error,
    ocuscreen::datasets::DatasetError,
    ocuscreen::preprocess::PreprocessError,
    ocuscreen::models::ModelError,
    ocuscreen::training::TrainError,
    ocuscreen::training::RunStoreError,
    ocuscreen::explain::IndexError,
    ocuscreen_service::ServiceError
);

#[derive(Debug, Parser)]
#[command(
    name = "ocuscreen",
    version,
    about = "Retinal fundus screening: synthetic data, training, evaluation, retrieval and serving"
)]
pub struct Cli {
    /// Machine-readable output: one JSON object per line.
    #[arg(long, global = true)]
    pub json: bool,
    /// TOML config file (flags and environment take precedence).
    #[arg(long, global = true, env = "OCUSCREEN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Run store directory [default: runs].
    #[arg(long, global = true, env = "OCUSCREEN_RUNS")]
    pub runs: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fundus dataset (images, vessel masks, manifest).
    Synth(SynthArgs),
    /// Crop, Graham-normalize and resize an image or a dataset directory.
    Preprocess(PreprocessArgs),
    /// Train a classifier or a W-Net on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the train/val split of a dataset.
    Eval(EvalArgs),
    /// Segment vessels in one image with a W-Net checkpoint.
    Segment(SegmentArgs),
    /// Build a retrieval index and/or query it.
    Retrieve(RetrieveArgs),
    /// Occlusion saliency map for one image.
    Saliency(SaliencyArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Markdown metric tables for stored runs.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Preprocess(_) => "preprocess",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Segment(_) => "segment",
            Command::Retrieve(_) => "retrieve",
            Command::Saliency(_) => "saliency",
            Command::Serve(_) => "serve",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Number of cases.
    #[arg(long, env = "OCUSCREEN_COUNT")]
    pub count: Option<usize>,
    #[arg(long, env = "OCUSCREEN_SEED")]
    pub seed: Option<u64>,
    /// Output directory (manifest.csv, images/, masks/).
    #[arg(long, env = "OCUSCREEN_OUT")]
    pub out: Option<PathBuf>,
    /// Image side in pixels [default: 64].
    #[arg(long, env = "OCUSCREEN_SIZE")]
    pub size: Option<usize>,
    /// Classes cycled through, as codes [default: N,D,G,C].
    #[arg(long, env = "OCUSCREEN_CLASSES")]
    pub classes: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct PreprocessArgs {
    /// An image file, or a dataset directory with manifest.csv.
    #[arg(long, env = "OCUSCREEN_INPUT")]
    pub input: Option<PathBuf>,
    #[arg(long, env = "OCUSCREEN_OUT")]
    pub out: Option<PathBuf>,
    /// Output side in pixels [default: 64].
    #[arg(long, env = "OCUSCREEN_SIZE")]
    pub size: Option<usize>,
    /// Skip Graham normalization.
    #[arg(long, env = "OCUSCREEN_NO_GRAHAM", num_args = 0..=1, default_missing_value = "true")]
    pub no_graham: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory with manifest.csv, images/ and (for wnet) masks/.
    #[arg(long, env = "OCUSCREEN_DATASET")]
    pub dataset: Option<PathBuf>,
    /// classifier or wnet [default: classifier].
    #[arg(long, env = "OCUSCREEN_MODEL")]
    pub model: Option<String>,
    /// Backbone: plain, residual or separable [default: separable].
    #[arg(long, env = "OCUSCREEN_VARIANT")]
    pub variant: Option<String>,
    /// Maximum epochs [default: 20].
    #[arg(long, env = "OCUSCREEN_EPOCHS")]
    pub epochs: Option<usize>,
    /// Batch size [default: 4].
    #[arg(long, env = "OCUSCREEN_BATCH")]
    pub batch: Option<usize>,
    /// Early-stopping patience [default: 3].
    #[arg(long, env = "OCUSCREEN_PATIENCE")]
    pub patience: Option<usize>,
    /// Adam learning rate [default: 0.002].
    #[arg(long, env = "OCUSCREEN_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "OCUSCREEN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "OCUSCREEN_NO_GRAHAM", num_args = 0..=1, default_missing_value = "true")]
    pub no_graham: Option<bool>,
    #[arg(long, env = "OCUSCREEN_NO_AUGMENT", num_args = 0..=1, default_missing_value = "true")]
    pub no_augment: Option<bool>,
    /// Backbone blocks to freeze, e.g. 0,1.
    #[arg(long, env = "OCUSCREEN_FREEZE")]
    pub freeze: Option<String>,
    /// Pretrain the backbone on vessel density first (needs masks/).
    #[arg(long, env = "OCUSCREEN_PRETRAIN", num_args = 0..=1, default_missing_value = "true")]
    pub pretrain: Option<bool>,
    #[arg(long, env = "OCUSCREEN_PRETRAIN_EPOCHS")]
    pub pretrain_epochs: Option<usize>,
    /// Validation share of the stratified split [default: 0.2].
    #[arg(long, env = "OCUSCREEN_VAL_FRACTION")]
    pub val_fraction: Option<f64>,
    /// Input side after preprocessing [default: 64].
    #[arg(long, env = "OCUSCREEN_IMAGE_SIZE")]
    pub image_size: Option<usize>,
    /// Classifier block widths [default: 16,32,64,128].
    #[arg(long, env = "OCUSCREEN_CHANNELS")]
    pub channels: Option<String>,
    /// W-Net U-Net depth [default: 3].
    #[arg(long, env = "OCUSCREEN_DEPTH")]
    pub depth: Option<usize>,
    /// W-Net first-level width [default: 8].
    #[arg(long, env = "OCUSCREEN_BASE_CHANNELS")]
    pub base_channels: Option<usize>,
    /// Oversample training classes up to this many cases.
    #[arg(long, env = "OCUSCREEN_OVERSAMPLE")]
    pub oversample: Option<usize>,
    /// Checkpoint path for the best weights [default: <runs>/<run id>.ckpt].
    #[arg(long, env = "OCUSCREEN_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "OCUSCREEN_RUN_ID")]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long, env = "OCUSCREEN_DATASET")]
    pub dataset: Option<PathBuf>,
    #[arg(long, env = "OCUSCREEN_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Must match training to evaluate on the same split [default: 0.2].
    #[arg(long, env = "OCUSCREEN_VAL_FRACTION")]
    pub val_fraction: Option<f64>,
    #[arg(long, env = "OCUSCREEN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "OCUSCREEN_NO_GRAHAM", num_args = 0..=1, default_missing_value = "true")]
    pub no_graham: Option<bool>,
    #[arg(long, env = "OCUSCREEN_RUN_ID")]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SegmentArgs {
    /// W-Net checkpoint.
    #[arg(long, env = "OCUSCREEN_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "OCUSCREEN_INPUT")]
    pub input: Option<PathBuf>,
    /// Ground-truth vessel mask; enables the Dice score.
    #[arg(long, env = "OCUSCREEN_MASK")]
    pub mask: Option<PathBuf>,
    /// Output directory for mask.png and overlay.png.
    #[arg(long, env = "OCUSCREEN_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "OCUSCREEN_NO_GRAHAM", num_args = 0..=1, default_missing_value = "true")]
    pub no_graham: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct RetrieveArgs {
    /// Classifier checkpoint whose embeddings are indexed.
    #[arg(long, env = "OCUSCREEN_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Index file, written when --dataset is given.
    #[arg(long, env = "OCUSCREEN_INDEX")]
    pub index: Option<PathBuf>,
    /// Build the index from this dataset directory.
    #[arg(long, env = "OCUSCREEN_DATASET")]
    pub dataset: Option<PathBuf>,
    /// Image to look up.
    #[arg(long, env = "OCUSCREEN_QUERY")]
    pub query: Option<PathBuf>,
    /// Neighbours returned [default: 5].
    #[arg(short, long, env = "OCUSCREEN_K")]
    pub k: Option<usize>,
    /// euclidean or cosine [default: euclidean].
    #[arg(long, env = "OCUSCREEN_METRIC")]
    pub metric: Option<String>,
    #[arg(long, env = "OCUSCREEN_NO_GRAHAM", num_args = 0..=1, default_missing_value = "true")]
    pub no_graham: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SaliencyArgs {
    #[arg(long, env = "OCUSCREEN_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "OCUSCREEN_INPUT")]
    pub input: Option<PathBuf>,
    /// Target class as code, name or slot index [default: most probable].
    #[arg(long, env = "OCUSCREEN_CLASS")]
    pub class: Option<String>,
    /// Occluder side [default: 8].
    #[arg(long, env = "OCUSCREEN_PATCH")]
    pub patch: Option<usize>,
    /// Occluder step [default: 4].
    #[arg(long, env = "OCUSCREEN_STRIDE")]
    pub stride: Option<usize>,
    /// Occluder fill value [default: 0.5].
    #[arg(long, env = "OCUSCREEN_BASELINE")]
    pub baseline: Option<f64>,
    /// Overlay PNG to write.
    #[arg(long, env = "OCUSCREEN_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "OCUSCREEN_NO_GRAHAM", num_args = 0..=1, default_missing_value = "true")]
    pub no_graham: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    /// Listen address [default: 127.0.0.1:8080].
    #[arg(long, env = "OCUSCREEN_LISTEN")]
    pub listen: Option<String>,
    /// Case storage [default: ocuscreen-data].
    #[arg(long, env = "OCUSCREEN_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Classifier checkpoint.
    #[arg(long, env = "OCUSCREEN_MODEL")]
    pub model: Option<PathBuf>,
    /// W-Net checkpoint.
    #[arg(long, env = "OCUSCREEN_SEGMENTER")]
    pub segmenter: Option<PathBuf>,
    /// Retrieval index [default: <data-dir>/index.bin].
    #[arg(long, env = "OCUSCREEN_INDEX")]
    pub index: Option<PathBuf>,
    #[arg(long, env = "OCUSCREEN_NO_GRAHAM", num_args = 0..=1, default_missing_value = "true")]
    pub no_graham: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Run id; repeat for several rows. Rows are labelled by model variant.
    #[arg(long = "run", env = "OCUSCREEN_RUN", value_delimiter = ',')]
    pub run: Option<Vec<String>>,
    /// Also write the report here.
    #[arg(long, env = "OCUSCREEN_OUT")]
    pub out: Option<PathBuf>,
}

/// Human text or JSON lines.
pub struct Out<'a> {
    pub json: bool,
    w: &'a mut dyn Write,
}

impl Out<'_> {
    /// `data` must be an object; it is printed with `event` added in JSON
    /// mode, `human` otherwise.
    pub fn emit(&mut self, event: &str, human: impl std::fmt::Display, data: Value) {
        let r = if self.json {
            let mut obj = match data {
                Value::Object(m) => m,
                other => {
                    let mut m = serde_json::Map::new();
                    m.insert("value".into(), other);
                    m
                }
            };
            obj.insert("event".into(), Value::String(event.into()));
            writeln!(self.w, "{}", Value::Object(obj))
        } else {
            writeln!(self.w, "{human}")
        };
        r.expect("stdout closed");
    }
}

/// Context shared by the subcommands.
pub struct Ctx<'a> {
    pub out: Out<'a>,
    pub file: Option<toml::Table>,
    pub store: RunStore,
    pub run_id: String,
    /// Resolved options of the running subcommand.
    pub effective: Value,
}

fn fresh_run_id(cmd: &str) -> String {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    format!("{cmd}-{nanos:x}")
}

/// Parses `argv` (program name first) and runs the subcommand, writing
/// results to `stdout`. Errors go to stderr in text mode and to `stdout` as
/// an `error` event in JSON mode. Returns the process exit code.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                // --help / --version
                let _ = write!(stdout, "{e}");
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    let json_mode = cli.json;
    let mut out = Out {
        json: json_mode,
        w: stdout,
    };
    match run(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match e {
                CliError::Usage(_) => "usage",
                CliError::Domain(_) => "domain",
            };
            if json_mode {
                out.emit(
                    "error",
                    "",
                    json!({ "kind": kind, "code": e.exit_code(), "message": e.to_string() }),
                );
            } else {
                eprintln!("error: {e}");
                if let CliError::Usage(_) = e {
                    eprintln!("\nFor more information, try '--help'.");
                }
            }
            e.exit_code()
        }
    }
}

fn run(cli: Cli, out: &mut Out<'_>) -> Result<(), CliError> {
    let file = cli.config.as_deref().map(config::read_file).transpose()?;
    let runs = match (&cli.runs, file.as_ref().and_then(|f| f.get("runs"))) {
        (Some(p), _) => p.clone(),
        (None, Some(toml::Value::String(s))) => PathBuf::from(s),
        (None, Some(_)) => return Err(CliError::Usage("config: runs must be a string".into())),
        (None, None) => PathBuf::from("runs"),
    };
    let store = RunStore::open(&runs)?;
    let cmd_name = cli.command.name();
    let run_id = match &cli.command {
        Command::Train(a) if a.run_id.is_some() => a.run_id.clone().unwrap(),
        Command::Eval(a) if a.run_id.is_some() => a.run_id.clone().unwrap(),
        _ => fresh_run_id(cmd_name),
    };
    let mut ctx = Ctx {
        out: Out {
            json: out.json,
            w: &mut *out.w,
        },
        file,
        store,
        run_id,
        effective: Value::Null,
    };
    let result = commands::run(&mut ctx, cli.command, &runs);
    // Commands that did not write their own record get a summary one.
    if !ctx.store.log_path(&ctx.run_id).exists() {
        let mut rec = RunRecord::new(ctx.run_id.clone(), cmd_name, ctx.effective.clone());
        ctx.store.log_run(&RunEvent::start(&rec))?;
        rec.status = match &result {
            Ok(_) => RunStatus::Completed,
            Err(e) => RunStatus::Failed {
                epoch: 0,
                reason: e.to_string(),
            },
        };
        rec.ended_at = Some(ocuscreen::training::unix_time());
        ctx.store.log_run(&RunEvent::end(&rec))?;
    }
    if result.is_ok() {
        ctx.out.emit(
            "run",
            format!("run {} recorded in {}", ctx.run_id, runs.display()),
            json!({ "run_id": ctx.run_id, "runs": runs }),
        );
    }
    result
}
