//! Training loops, evaluation metrics and experiment tracking.

mod early_stop;
pub mod metrics;
mod report;
mod runstore;

use std::cell::RefCell;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Dataset;
use crate::models::{save_with_card, Classifier, ModelError, Network, WNet};
use crate::preprocess::{self, augment, AugmentConfig, Image, PreprocessConfig, PreprocessError};
use crate::tensor::{Graph, Optimizer, OptimizerKind, ParamStore, Tensor, TensorError, Var};

pub use early_stop::{simulate as simulate_early_stopping, EarlyStopping, StopDecision};
pub use metrics::{
    binary_accuracy, dice, micro_auc, precision_recall, threshold_mask, MetricError,
    PrecisionRecall,
};
pub use report::markdown_report;
pub use runstore::{
    reconstruct, unix_time, EpochMetrics, RunEvent, RunRecord, RunStatus, RunStore, RunStoreError,
    SplitMetrics,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("case {case_id}: {source}")]
    Sample {
        case_id: String,
        #[source]
        source: PreprocessError,
    },
    #[error("case {0} has no vessel mask")]
    MissingMask(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Store(#[from] RunStoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub seed: u64,
    pub use_graham: bool,
    pub use_augment: bool,
    pub freeze_blocks: Vec<usize>,
    pub pretrain_backbone: bool,
    pub pretrain_epochs: usize,
    pub augment: AugmentConfig,
    pub image_size: usize,
    /// Where the best weights are written at the end of the run.
    pub checkpoint: Option<PathBuf>,
    pub run_id: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            max_epochs: 20,
            patience: 3,
            optimizer: OptimizerKind::Adam,
            lr: 2e-3,
            seed: 0,
            use_graham: true,
            use_augment: true,
            freeze_blocks: Vec::new(),
            pretrain_backbone: false,
            pretrain_epochs: 4,
            augment: AugmentConfig::default(),
            image_size: 64,
            checkpoint: None,
            run_id: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            ));
        }
        self.augment
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            graham: self.use_graham,
            target_size: self.image_size,
            ..PreprocessConfig::default()
        }
    }

    fn run_id(&self, kind: &str) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            let nanos = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0);
            format!("{kind}-s{}-{:x}", self.seed, nanos)
        })
    }
}

/// One preprocessed training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub case_id: String,
    pub input: Image,
    /// Flattened target: 8 label slots, or mask pixels.
    pub target: Vec<f64>,
    /// Present for segmentation samples; kept so augmentation can move it
    /// together with the input.
    pub mask: Option<Image>,
}

/// Crop + Graham (optional) + resize, labels as 0/1 floats.
pub fn classification_samples(
    ds: &Dataset,
    pre: &PreprocessConfig,
) -> Result<Vec<Sample>, TrainError> {
    ds.records()
        .iter()
        .map(|r| {
            let wrap = |source| TrainError::Sample {
                case_id: r.case_id.clone(),
                source,
            };
            let img = r.image.load().map_err(wrap)?;
            let input = preprocess::pipeline(&img, pre).map_err(wrap)?;
            Ok(Sample {
                case_id: r.case_id.clone(),
                input,
                target: r.labels.to_f64().to_vec(),
                mask: None,
            })
        })
        .collect()
}

/// Preprocesses a fundus image and its vessel mask identically: the mask is
/// cropped to the image's ROI, resized, and re-binarized at 0.5. The image
/// becomes single-channel.
pub fn segmentation_pair(
    img: &Image,
    mask: &Image,
    pre: &PreprocessConfig,
) -> Result<(Image, Image), PreprocessError> {
    pre.validate()?;
    let (roi, bbox) = preprocess::crop_roi(img, pre)?;
    let norm = if pre.graham {
        preprocess::graham_normalize(&roi, pre)
    } else {
        roi
    };
    let input = preprocess::resize(&norm, pre.target_size).to_gray();
    let m = preprocess::resize(&mask.to_gray().crop(&bbox), pre.target_size);
    let m = Image::from_fn(m.height(), m.width(), 1, |y, x, _| {
        if m.get(y, x, 0) >= 0.5 {
            1.0
        } else {
            0.0
        }
    });
    Ok((input, m))
}

pub fn segmentation_samples(
    ds: &Dataset,
    pre: &PreprocessConfig,
) -> Result<Vec<Sample>, TrainError> {
    ds.records()
        .iter()
        .map(|r| {
            let wrap = |source| TrainError::Sample {
                case_id: r.case_id.clone(),
                source,
            };
            let src = r
                .vessel_mask
                .as_ref()
                .ok_or_else(|| TrainError::MissingMask(r.case_id.clone()))?;
            let img = r.image.load().map_err(wrap)?;
            let mask = src.load().map_err(wrap)?;
            let (input, mask) = segmentation_pair(&img, &mask, pre).map_err(wrap)?;
            Ok(Sample {
                case_id: r.case_id.clone(),
                target: mask.pixels().to_vec(),
                input,
                mask: Some(mask),
            })
        })
        .collect()
}

/// Drives the epoch loop: early stopping on validation loss, logging each
/// epoch before the next starts, and best-weight bookkeeping via
/// `on_improve`. `finish` runs after the loop and before `run-end` is logged.
pub fn drive_epochs(
    record: &mut RunRecord,
    max_epochs: usize,
    patience: usize,
    store: Option<&RunStore>,
    mut epoch: impl FnMut(usize) -> Result<EpochMetrics, TrainError>,
    mut on_improve: impl FnMut(usize),
    finish: impl FnOnce(&mut RunRecord) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    let log = |ev: &RunEvent| -> Result<(), TrainError> {
        if let Some(s) = store {
            s.log_run(ev)?;
        }
        Ok(())
    };
    log(&RunEvent::start(record))?;
    let mut es = EarlyStopping::new(patience);
    record.status = RunStatus::Completed;
    for e in 1..=max_epochs {
        let m = epoch(e)?;
        if !(m.train.loss.is_finite() && m.val.loss.is_finite()) {
            record.status = RunStatus::Failed {
                epoch: e,
                reason: format!(
                    "non-finite loss (train {}, val {})",
                    m.train.loss, m.val.loss
                ),
            };
            tracing::error!(run = %record.run_id, epoch = e, "aborting run on non-finite loss");
            break;
        }
        log(&RunEvent::Epoch {
            run_id: record.run_id.clone(),
            metrics: m,
        })?;
        record.epochs.push(m);
        let d = es.observe(m.val.loss);
        tracing::info!(
            run = %record.run_id, epoch = e, train_loss = m.train.loss, val_loss = m.val.loss,
            val_auc = m.val.auc, improved = d.improved, "epoch"
        );
        if d.improved {
            on_improve(e);
        }
        if d.stop && e < max_epochs {
            record.stopped_early = true;
            break;
        }
    }
    record.best_epoch = es.best_epoch();
    finish(record)?;
    record.ended_at = Some(unix_time());
    log(&RunEvent::end(record))
}

/// Split metrics from pooled predictions. An undefined AUC (single-class
/// targets) is reported as 0.5, the chance level.
pub fn split_metrics(
    loss: f64,
    probs: &[f64],
    targets: &[f64],
    dice_per: Option<usize>,
) -> Result<SplitMetrics, TrainError> {
    let auc = match micro_auc(probs, targets) {
        Ok(a) => a,
        Err(MetricError::Undefined { .. }) => 0.5,
        Err(e) => return Err(e.into()),
    };
    let pr = precision_recall(probs, targets, 0.5)?;
    let dice = match dice_per {
        Some(n) if n > 0 => Some(mean_dice(probs, targets, n)?),
        _ => None,
    };
    Ok(SplitMetrics {
        loss,
        accuracy: binary_accuracy(probs, targets, 0.5)?,
        auc,
        precision: pr.precision,
        recall: pr.recall,
        dice,
    })
}

/// Mean per-item Dice of `probs > 0.5` against `targets`, items of `n` pixels.
pub fn mean_dice(probs: &[f64], targets: &[f64], n: usize) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0;
    for (p, t) in probs.chunks(n).zip(targets.chunks(n)) {
        total += dice(&threshold_mask(p, 0.5), t)?;
        count += 1;
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Forward closure: builds the loss and the probability output for a batch.
type ForwardFn<'a, M> =
    dyn Fn(&M, &mut Graph, &[Var], Var, &[f64]) -> Result<(Var, Var), ModelError> + 'a;

struct Pooled {
    loss_sum: f64,
    count: usize,
    probs: Vec<f64>,
    targets: Vec<f64>,
}

impl Pooled {
    fn new() -> Self {
        Self {
            loss_sum: 0.0,
            count: 0,
            probs: Vec::new(),
            targets: Vec::new(),
        }
    }

    fn push(&mut self, loss: f64, n: usize, probs: &[f64], targets: &[f64]) {
        self.loss_sum += loss * n as f64;
        self.count += n;
        self.probs.extend_from_slice(probs);
        self.targets.extend_from_slice(targets);
    }

    fn metrics(&self, dice_per: Option<usize>) -> Result<SplitMetrics, TrainError> {
        split_metrics(
            self.loss_sum / self.count.max(1) as f64,
            &self.probs,
            &self.targets,
            dice_per,
        )
    }
}

fn batch_tensor(items: &[&Image]) -> Result<Tensor, TrainError> {
    Image::batch(items).map_err(|source| TrainError::Sample {
        case_id: String::from("<batch>"),
        source,
    })
}

/// Loss-weighted evaluation over `samples` without gradient tracking.
fn evaluate_pooled<M: Network>(
    model: &M,
    samples: &[Sample],
    forward: &ForwardFn<M>,
) -> Result<Pooled, TrainError> {
    let mut pooled = Pooled::new();
    for chunk in samples.chunks(8) {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.input).collect();
        let x = g.input(batch_tensor(&imgs)?);
        let targets: Vec<f64> = chunk
            .iter()
            .flat_map(|s| s.target.iter().copied())
            .collect();
        let (loss, probs) = forward(model, &mut g, &p, x, &targets)?;
        pooled.push(
            g.value(loss).data()[0],
            chunk.len(),
            g.value(probs).data(),
            &targets,
        );
    }
    Ok(pooled)
}

fn apply_augment(s: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> (Image, Vec<f64>) {
    match &s.mask {
        Some(mask) => {
            let mut twin = rng.clone();
            let img = augment(&s.input, cfg, rng);
            let m = augment(mask, cfg, &mut twin);
            let t = m.pixels().to_vec();
            (img, t)
        }
        None => (augment(&s.input, cfg, rng), s.target.clone()),
    }
}

/// Generic supervised loop shared by the classifier and the W-Net.
#[allow(clippy::too_many_arguments)]
fn fit<M: Network>(
    model: &mut M,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    store: Option<&RunStore>,
    mut record: RunRecord,
    forward: &ForwardFn<M>,
    dice_per: Option<usize>,
) -> Result<RunRecord, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let best: RefCell<Option<Vec<Tensor>>> = RefCell::new(None);
    let shared = RefCell::new(model);

    drive_epochs(
        &mut record,
        cfg.max_epochs,
        cfg.patience,
        store,
        |epoch| {
            let mut guard = shared.borrow_mut();
            let model: &mut M = &mut guard;
            order.shuffle(&mut rng);
            let mut pooled = Pooled::new();
            for idx in order.chunks(cfg.batch_size) {
                let (imgs, targets): (Vec<Image>, Vec<Vec<f64>>) = idx
                    .iter()
                    .map(|&i| {
                        let s = &train[i];
                        if cfg.use_augment {
                            apply_augment(s, &cfg.augment, &mut rng)
                        } else {
                            (s.input.clone(), s.target.clone())
                        }
                    })
                    .unzip();
                let targets: Vec<f64> = targets.concat();
                let refs: Vec<&Image> = imgs.iter().collect();
                let mut g = Graph::new();
                let p = model.params().bind(&mut g, true);
                let x = g.input(batch_tensor(&refs)?);
                let (loss, probs) = forward(model, &mut g, &p, x, &targets)?;
                let lv = g.value(loss).data()[0];
                pooled.push(lv, idx.len(), g.value(probs).data(), &targets);
                if !lv.is_finite() {
                    break;
                }
                let grads = g.backward(loss)?;
                model.params_mut().accumulate(&grads, &p)?;
                opt.step(model.params_mut())?;
            }
            let train_m = pooled.metrics(dice_per)?;
            let val_m = evaluate_pooled(&*model, val, forward)?.metrics(dice_per)?;
            Ok(EpochMetrics {
                epoch,
                train: train_m,
                val: val_m,
            })
        },
        |_| *best.borrow_mut() = Some(shared.borrow().params().snapshot()),
        |rec| {
            let mut guard = shared.borrow_mut();
            let model: &mut M = &mut guard;
            if let Some(snap) = best.borrow().as_ref() {
                model.params_mut().restore(snap);
            }
            if let Some(path) = &cfg.checkpoint {
                save_with_card(model, path)?;
                rec.checkpoint = Some(path.display().to_string());
            }
            Ok(())
        },
    )?;
    Ok(record)
}

fn classifier_forward(
    m: &Classifier,
    g: &mut Graph,
    p: &[Var],
    x: Var,
    t: &[f64],
) -> Result<(Var, Var), ModelError> {
    let out = m.forward_graph(g, p, x)?;
    let loss = g.bce_with_logits(out.logits, t)?;
    Ok((loss, out.probs))
}

fn wnet_forward(
    m: &WNet,
    g: &mut Graph,
    p: &[Var],
    x: Var,
    t: &[f64],
) -> Result<(Var, Var), ModelError> {
    let out = m.forward_graph(g, p, x)?;
    let loss = m.loss_graph(g, &out, t)?;
    Ok((loss, out.map_b))
}

fn config_json(cfg: &TrainConfig, model: &serde_json::Value) -> serde_json::Value {
    serde_json::json!({ "train": cfg, "model": model })
}

/// Trains a classifier with mean BCE over the 8 label slots. With
/// `pretrain_backbone` set, the backbone is first fitted to vessel density
/// (see [`pretrain_backbone`]); `freeze_blocks` is applied before the main
/// loop. Best-epoch weights are left in `model`.
pub fn train_classifier(
    model: &mut Classifier,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    store: Option<&RunStore>,
    densities: Option<&[f64]>,
) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    if cfg.pretrain_backbone {
        let d = densities.ok_or_else(|| {
            TrainError::Config("pretrain_backbone needs per-sample vessel densities".into())
        })?;
        pretrain_backbone(model, train, d, cfg.pretrain_epochs, cfg.lr, cfg.seed)?;
    }
    model.set_trainable(&cfg.freeze_blocks)?;
    let spec = serde_json::to_value(model.spec()).expect("spec serializes");
    let record = RunRecord::new(
        cfg.run_id("classifier"),
        "classifier",
        config_json(cfg, &spec),
    );
    fit(
        model,
        train,
        val,
        cfg,
        store,
        record,
        &classifier_forward,
        None,
    )
}

/// Trains a W-Net with deep supervision on both stages.
pub fn train_wnet(
    model: &mut WNet,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    store: Option<&RunStore>,
) -> Result<RunRecord, TrainError> {
    cfg.validate()?;
    model.set_trainable(&cfg.freeze_blocks)?;
    let per = train.first().map(|s| s.target.len());
    let spec = serde_json::to_value(model.spec()).expect("spec serializes");
    let record = RunRecord::new(cfg.run_id("wnet"), "wnet", config_json(cfg, &spec));
    fit(model, train, val, cfg, store, record, &wnet_forward, per)
}

/// Classifier metrics over `samples` with the model as-is.
pub fn evaluate_classifier(
    model: &Classifier,
    samples: &[Sample],
) -> Result<SplitMetrics, TrainError> {
    evaluate_pooled(model, samples, &classifier_forward)?.metrics(None)
}

/// W-Net metrics over `samples` as logged per epoch: pooled pixel metrics
/// of map_b and mean per-image Dice.
pub fn evaluate_wnet_metrics(model: &WNet, samples: &[Sample]) -> Result<SplitMetrics, TrainError> {
    let per = samples.first().map(|s| s.target.len());
    evaluate_pooled(model, samples, &wnet_forward)?.metrics(per)
}

/// Mean per-image Dice of `(map_a, map_b)` thresholded at 0.5.
pub fn evaluate_wnet(model: &WNet, samples: &[Sample]) -> Result<(f64, f64), TrainError> {
    let (mut da, mut db) = (0.0, 0.0);
    for chunk in samples.chunks(8) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.input).collect();
        let (a, b) = model.wnet_forward(&batch_tensor(&imgs)?)?;
        let n = chunk[0].target.len();
        for (k, s) in chunk.iter().enumerate() {
            da += dice(
                &threshold_mask(&a.data()[k * n..(k + 1) * n], 0.5),
                &s.target,
            )?;
            db += dice(
                &threshold_mask(&b.data()[k * n..(k + 1) * n], 0.5),
                &s.target,
            )?;
        }
    }
    let m = samples.len().max(1) as f64;
    Ok((da / m, db / m))
}

/// Auxiliary pretraining for the transfer-learning ablation: the backbone
/// plus a throwaway dense head regress each sample's vessel density
/// (min-max scaled to [0, 1], soft BCE targets). The classifier head is left
/// untouched.
pub fn pretrain_backbone(
    model: &mut Classifier,
    samples: &[Sample],
    densities: &[f64],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>, TrainError> {
    if samples.len() != densities.len() {
        return Err(TrainError::Config(format!(
            "{} samples but {} densities",
            samples.len(),
            densities.len()
        )));
    }
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset("pretraining"));
    }
    let (lo, hi) = densities
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &d| {
            (l.min(d), h.max(d))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let targets: Vec<f64> = densities.iter().map(|d| (d - lo) / span).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6574);
    let mut aux = ParamStore::new();
    let d = model.embedding_dim();
    aux.kaiming("aux.weight", &[1, d], d, None, &mut rng);
    aux.zeros("aux.bias", &[1], None);
    let (hw, hb) = model.head_params();
    model.params_mut().set_all_trainable(true);
    for i in [hw, hb] {
        model
            .params_mut()
            .get_mut(i)
            .tensor
            .set_requires_grad(false);
    }
    let mut opt = Optimizer::adam(lr);
    let mut opt_aux = Optimizer::adam(lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(4) {
            let imgs: Vec<&Image> = idx.iter().map(|&i| &samples[i].input).collect();
            let t: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            let mut g = Graph::new();
            let p = model.params().bind(&mut g, true);
            let pa = aux.bind(&mut g, true);
            let x = g.input(batch_tensor(&imgs)?);
            let e = model.embedding_graph(&mut g, &p, x)?;
            let z = g.dense(e, pa[0], pa[1])?;
            let loss = g.bce_with_logits(z, &t)?;
            total += g.value(loss).data()[0] * idx.len() as f64;
            let grads = g.backward(loss)?;
            model.params_mut().accumulate(&grads, &p)?;
            aux.accumulate(&grads, &pa)?;
            opt.step(model.params_mut())?;
            opt_aux.step(&mut aux)?;
        }
        losses.push(total / samples.len() as f64);
    }
    model.params_mut().set_all_trainable(true);
    Ok(losses)
}
