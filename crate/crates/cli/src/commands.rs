use std::path::Path;

use ocuscreen::datasets::synth::{generate_synthetic_case, SynthSpec};
use ocuscreen::datasets::{
    attach_masks, load_manifest, oversample_minority, split, write_manifest, CaseRecord, Dataset,
    Disease, ImageSource, NUM_CLASSES,
};
use ocuscreen::explain::{occlusion_saliency, saliency_png, Metric, RetrievalIndex};
use ocuscreen::models::{
    load_model, AnyModel, BackboneConfig, Classifier, UNetConfig,
    Variant, WNet, WNetConfig,
};
use ocuscreen::preprocess::io::{encode_png, load_image, save_image};
use ocuscreen::preprocess::{pipeline, PreprocessConfig};
use ocuscreen::training::{
    classification_samples, evaluate_classifier, evaluate_wnet_metrics, markdown_report,
    segmentation_pair, segmentation_samples, train_classifier, train_wnet, unix_time,
    EpochMetrics, RunEvent, RunRecord, RunStatus, Sample, SplitMetrics, TrainConfig,
};
use ocuscreen_service::infer;
use ocuscreen_service::ServiceConfig;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::layer;
use crate::{
    Command, Ctx, CliError, EvalArgs, PreprocessArgs, ReportArgs, RetrieveArgs, SaliencyArgs,
    SegmentArgs, ServeArgs, SynthArgs, TrainArgs,
};

pub fn run(ctx: &mut Ctx<'_>, cmd: Command, runs: &Path) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(ctx, a),
        Command::Preprocess(a) => preprocess(ctx, a),
        Command::Train(a) => train(ctx, a, runs),
        Command::Eval(a) => eval(ctx, a),
        Command::Segment(a) => segment(ctx, a),
        Command::Retrieve(a) => retrieve(ctx, a),
        Command::Saliency(a) => saliency(ctx, a),
        Command::Serve(a) => serve(ctx, a),
        Command::Report(a) => report(ctx, a),
    }
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone()
        .ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

/// Resolves the layered options and prints them.
fn effective<T: Serialize + serde::de::DeserializeOwned>(
    ctx: &mut Ctx<'_>,
    section: &str,
    defaults: Value,
    flags: &T,
) -> Result<T, CliError> {
    let a = layer(section, defaults, ctx.file.as_ref(), flags)?;
    let v = serde_json::to_value(&a).expect("options serialize");
    ctx.effective = v.clone();
    ctx.out.emit(
        "config",
        format!(
            "{section} configuration:\n{}",
            serde_json::to_string_pretty(&v).expect("json")
        ),
        json!({ "command": section, "config": v }),
    );
    Ok(a)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::Usage(format!("{what}: cannot parse {t:?}")))
        })
        .collect()
}

fn parse_class(s: &str) -> Result<Disease, CliError> {
    if let Ok(i) = s.trim().parse::<usize>() {
        return Disease::ALL
            .get(i)
            .copied()
            .ok_or_else(|| CliError::Usage(format!("class index {i} out of range 0..{NUM_CLASSES}")));
    }
    Disease::parse(s).ok_or_else(|| CliError::Usage(format!("unknown class {s:?}")))
}

fn load_ckpt(p: &Path) -> Result<AnyModel, CliError> {
    load_model(p).map_err(|e| CliError::Domain(format!("checkpoint {}: {e}", p.display())))
}

/// `<dir>/manifest.csv` with images under `<dir>/images` and, when present,
/// masks under `<dir>/masks`.
pub fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    let ds = load_manifest(&dir.join("manifest.csv"), &dir.join("images"))
        .map_err(|e| CliError::Domain(format!("dataset {}: {e}", dir.display())))?;
    let masks = dir.join("masks");
    Ok(if masks.is_dir() {
        attach_masks(ds, &masks)
    } else {
        ds
    })
}

fn synth(ctx: &mut Ctx<'_>, a: SynthArgs) -> Result<(), CliError> {
    let a = effective(
        ctx,
        "synth",
        json!({ "count": 40, "seed": 0, "size": 64, "classes": "N,D,G,C" }),
        &a,
    )?;
    let out = required(&a.out, "out")?;
    let (count, seed, size) = (a.count.unwrap(), a.seed.unwrap(), a.size.unwrap());
    let classes = a
        .classes
        .as_deref()
        .unwrap()
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(parse_class)
        .collect::<Result<Vec<_>, _>>()?;
    if classes.is_empty() {
        return Err(CliError::Usage("--classes is empty".into()));
    }
    if size < 16 {
        return Err(CliError::Usage(format!("--size must be >= 16, got {size}")));
    }
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let class = classes[i % classes.len()];
        let case_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let case = generate_synthetic_case(&SynthSpec::for_class(class, case_seed, size));
        let id = format!("syn{seed}-{i:05}");
        let file = format!("{id}.png");
        std::fs::write(out.join("images").join(&file), encode_png(&case.image))?;
        std::fs::write(out.join("masks").join(&file), encode_png(&case.vessel_mask))?;
        records.push(case.to_record(id));
    }
    write_manifest(&out.join("manifest.csv"), &records, |r| format!("{}.png", r.case_id))?;
    let ds = Dataset::new(records)?;
    ctx.out.emit(
        "synth",
        format!("wrote {count} cases to {}", out.display()),
        json!({ "count": count, "out": out, "class_counts": ds.class_counts() }),
    );
    Ok(())
}

fn preprocess(ctx: &mut Ctx<'_>, a: PreprocessArgs) -> Result<(), CliError> {
    let a = effective(ctx, "preprocess", json!({ "size": 64, "no_graham": false }), &a)?;
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let cfg = PreprocessConfig {
        target_size: a.size.unwrap(),
        graham: !a.no_graham.unwrap(),
        ..PreprocessConfig::default()
    };
    cfg.validate()?;
    if input.is_dir() {
        let ds = load_dataset(&input)?;
        std::fs::create_dir_all(out.join("images"))?;
        let mut files = Vec::new();
        for r in ds.records() {
            let name = match &r.image {
                ImageSource::File(p) => p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("{}.png", r.case_id)),
                ImageSource::Inline(_) => format!("{}.png", r.case_id),
            };
            let img = pipeline(&r.image.load()?, &cfg)?;
            save_image(&img, &out.join("images").join(&name))?;
            files.push(name);
        }
        let by_id: std::collections::HashMap<&str, &str> = ds
            .records()
            .iter()
            .zip(&files)
            .map(|(r, f)| (r.case_id.as_str(), f.as_str()))
            .collect();
        write_manifest(&out.join("manifest.csv"), ds.records(), |r| {
            by_id[r.case_id.as_str()].to_string()
        })?;
        ctx.out.emit(
            "preprocess",
            format!("preprocessed {} images into {}", ds.len(), out.display()),
            json!({ "count": ds.len(), "out": out }),
        );
    } else {
        let img = pipeline(&load_image(&input)?, &cfg)?;
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        save_image(&img, &out)?;
        ctx.out.emit(
            "preprocess",
            format!("wrote {}", out.display()),
            json!({ "count": 1, "out": out, "width": img.width(), "height": img.height() }),
        );
    }
    Ok(())
}

fn split_metrics_line(m: &SplitMetrics) -> String {
    let mut s = format!(
        "loss {:.4} acc {:.4} auc {:.4} prec {:.4} rec {:.4}",
        m.loss, m.accuracy, m.auc, m.precision, m.recall
    );
    if let Some(d) = m.dice {
        s.push_str(&format!(" dice {d:.4}"));
    }
    s
}

fn emit_epochs(ctx: &mut Ctx<'_>, epochs: &[EpochMetrics]) {
    for e in epochs {
        ctx.out.emit(
            "epoch",
            format!(
                "epoch {:>3}  train {}\n           val   {}",
                e.epoch,
                split_metrics_line(&e.train),
                split_metrics_line(&e.val)
            ),
            json!({ "metrics": e }),
        );
    }
}

/// Vessel fraction of each sample's preprocessed mask.
fn densities(records: &[CaseRecord], pre: &PreprocessConfig) -> Result<Vec<f64>, CliError> {
    records
        .iter()
        .map(|r| {
            let src = r.vessel_mask.as_ref().ok_or_else(|| {
                CliError::Domain(format!(
                    "--pretrain needs vessel masks; case {} has none",
                    r.case_id
                ))
            })?;
            let (_, m) = segmentation_pair(&r.image.load()?, &src.load()?, pre)?;
            Ok(m.pixels().iter().sum::<f64>() / m.pixels().len() as f64)
        })
        .collect()
}

fn train(ctx: &mut Ctx<'_>, a: TrainArgs, runs: &Path) -> Result<(), CliError> {
    let d = TrainConfig::default();
    let a = effective(
        ctx,
        "train",
        json!({
            "model": "classifier",
            "variant": "separable",
            "epochs": d.max_epochs,
            "batch": d.batch_size,
            "patience": d.patience,
            "lr": d.lr,
            "seed": d.seed,
            "no_graham": false,
            "no_augment": false,
            "freeze": "",
            "pretrain": false,
            "pretrain_epochs": d.pretrain_epochs,
            "val_fraction": 0.2,
            "image_size": d.image_size,
            "channels": "16,32,64,128",
            "depth": 3,
            "base_channels": 8,
            "run_id": ctx.run_id,
        }),
        &a,
    )?;
    let dataset = required(&a.dataset, "dataset")?;
    let run_id = a.run_id.clone().unwrap();
    ctx.run_id = run_id.clone();
    let checkpoint = a
        .out
        .clone()
        .unwrap_or_else(|| runs.join(format!("{run_id}.ckpt")));
    let cfg = TrainConfig {
        batch_size: a.batch.unwrap(),
        max_epochs: a.epochs.unwrap(),
        patience: a.patience.unwrap(),
        lr: a.lr.unwrap(),
        seed: a.seed.unwrap(),
        use_graham: !a.no_graham.unwrap(),
        use_augment: !a.no_augment.unwrap(),
        freeze_blocks: parse_list(a.freeze.as_deref().unwrap(), "--freeze")?,
        pretrain_backbone: a.pretrain.unwrap(),
        pretrain_epochs: a.pretrain_epochs.unwrap(),
        image_size: a.image_size.unwrap(),
        checkpoint: Some(checkpoint),
        run_id: Some(run_id),
        ..d
    };
    cfg.validate()?;
    let ds = load_dataset(&dataset)?;
    let (train_ds, val_ds) = split(&ds, a.val_fraction.unwrap(), cfg.seed)?;
    let train_ds = match a.oversample {
        Some(n) => oversample_minority(&train_ds, n, cfg.seed),
        None => train_ds,
    };
    let pre = cfg.preprocess();
    let store = Some(&ctx.store);
    let rec = match a.model.as_deref().unwrap() {
        "classifier" => {
            let variant = Variant::parse(a.variant.as_deref().unwrap()).ok_or_else(|| {
                CliError::Usage(format!("unknown variant {:?}", a.variant.as_deref().unwrap()))
            })?;
            let bb = BackboneConfig {
                channels: parse_list(a.channels.as_deref().unwrap(), "--channels")?,
                input_size: cfg.image_size,
                ..BackboneConfig::with_variant(variant)
            };
            let mut m = Classifier::new(bb, cfg.seed)?;
            let tr = classification_samples(&train_ds, &pre)?;
            let va = classification_samples(&val_ds, &pre)?;
            let dens = if cfg.pretrain_backbone {
                Some(densities(train_ds.records(), &pre)?)
            } else {
                None
            };
            train_classifier(&mut m, &tr, &va, &cfg, store, dens.as_deref())?
        }
        "wnet" => {
            let wc = WNetConfig {
                unet: UNetConfig {
                    depth: a.depth.unwrap(),
                    base_channels: a.base_channels.unwrap(),
                    input_size: cfg.image_size,
                    ..UNetConfig::default()
                },
                ..WNetConfig::default()
            };
            let mut m = WNet::new(wc, cfg.seed)?;
            let tr = segmentation_samples(&train_ds, &pre)?;
            let va = segmentation_samples(&val_ds, &pre)?;
            train_wnet(&mut m, &tr, &va, &cfg, store)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "--model must be classifier or wnet, got {other:?}"
            )))
        }
    };
    emit_epochs(ctx, &rec.epochs);
    let summary = json!({
        "run_id": rec.run_id,
        "status": rec.status,
        "best_epoch": rec.best_epoch,
        "stopped_early": rec.stopped_early,
        "checkpoint": rec.checkpoint,
    });
    match &rec.status {
        RunStatus::Failed { epoch, reason } => Err(CliError::Domain(format!(
            "training failed at epoch {epoch}: {reason}"
        ))),
        _ => {
            ctx.out.emit(
                "train",
                format!(
                    "best epoch {} of {}{}; weights in {}",
                    rec.best_epoch.map_or("-".into(), |b| b.to_string()),
                    rec.epochs.len(),
                    if rec.stopped_early { " (stopped early)" } else { "" },
                    rec.checkpoint.as_deref().unwrap_or("-")
                ),
                summary,
            );
            Ok(())
        }
    }
}

fn eval(ctx: &mut Ctx<'_>, a: EvalArgs) -> Result<(), CliError> {
    let a = effective(
        ctx,
        "eval",
        json!({ "val_fraction": 0.2, "seed": 0, "no_graham": false, "run_id": ctx.run_id }),
        &a,
    )?;
    let dataset = required(&a.dataset, "dataset")?;
    let ckpt = required(&a.checkpoint, "checkpoint")?;
    ctx.run_id = a.run_id.clone().unwrap();
    let model = load_ckpt(&ckpt)?;
    let ds = load_dataset(&dataset)?;
    let (train_ds, val_ds) = split(&ds, a.val_fraction.unwrap(), a.seed.unwrap())?;
    let graham = !a.no_graham.unwrap();
    let spec = serde_json::to_value(model.as_network().spec()).expect("spec serializes");
    let (train, val) = match model {
        AnyModel::Classifier(m) => {
            let pre = infer::preprocess_config(m.config().input_size, graham);
            let s = |d: &Dataset| -> Result<Vec<Sample>, CliError> {
                Ok(classification_samples(d, &pre)?)
            };
            (
                evaluate_classifier(&m, &s(&train_ds)?)?,
                evaluate_classifier(&m, &s(&val_ds)?)?,
            )
        }
        AnyModel::WNet(m) => {
            let pre = infer::preprocess_config(m.config().unet.input_size, graham);
            let s = |d: &Dataset| -> Result<Vec<Sample>, CliError> {
                Ok(segmentation_samples(d, &pre)?)
            };
            (
                evaluate_wnet_metrics(&m, &s(&train_ds)?)?,
                evaluate_wnet_metrics(&m, &s(&val_ds)?)?,
            )
        }
        other => {
            return Err(CliError::Domain(format!(
                "cannot evaluate a {} checkpoint",
                other.kind().as_str()
            )))
        }
    };
    let kind = spec["kind"].as_str().unwrap_or("model").to_string();
    let mut rec = RunRecord::new(
        ctx.run_id.clone(),
        kind,
        json!({ "eval": ctx.effective, "model": spec }),
    );
    ctx.store.log_run(&RunEvent::start(&rec))?;
    let metrics = EpochMetrics {
        epoch: 1,
        train,
        val,
    };
    ctx.store.log_run(&RunEvent::Epoch {
        run_id: rec.run_id.clone(),
        metrics,
    })?;
    rec.epochs.push(metrics);
    rec.best_epoch = Some(1);
    rec.status = RunStatus::Completed;
    rec.checkpoint = Some(ckpt.display().to_string());
    rec.ended_at = Some(unix_time());
    ctx.store.log_run(&RunEvent::end(&rec))?;
    ctx.out.emit(
        "eval",
        format!(
            "train {}\nval   {}",
            split_metrics_line(&train),
            split_metrics_line(&val)
        ),
        json!({ "train": train, "val": val }),
    );
    Ok(())
}

fn segment(ctx: &mut Ctx<'_>, a: SegmentArgs) -> Result<(), CliError> {
    let a = effective(ctx, "segment", json!({ "no_graham": false }), &a)?;
    let ckpt = required(&a.checkpoint, "checkpoint")?;
    let input = required(&a.input, "input")?;
    let out = required(&a.out, "out")?;
    let m = load_ckpt(&ckpt)?.into_wnet()?;
    let img = load_image(&input)?;
    let truth = a.mask.as_deref().map(load_image).transpose()?;
    let s = infer::segment(&m, &img, truth.as_ref(), !a.no_graham.unwrap())?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("mask.png"), &s.mask_png)?;
    std::fs::write(out.join("overlay.png"), &s.overlay_png)?;
    ctx.out.emit(
        "segment",
        format!(
            "wrote mask.png and overlay.png ({}x{}) to {}{}",
            s.width,
            s.height,
            out.display(),
            s.dice_vs_truth
                .map_or(String::new(), |d| format!("; dice vs truth {d:.4}"))
        ),
        json!({ "out": out, "width": s.width, "height": s.height, "dice_vs_truth": s.dice_vs_truth }),
    );
    Ok(())
}

fn retrieve(ctx: &mut Ctx<'_>, a: RetrieveArgs) -> Result<(), CliError> {
    let a = effective(
        ctx,
        "retrieve",
        json!({ "k": 5, "metric": "euclidean", "no_graham": false }),
        &a,
    )?;
    let ckpt = required(&a.checkpoint, "checkpoint")?;
    let index_path = required(&a.index, "index")?;
    if a.dataset.is_none() && a.query.is_none() {
        return Err(CliError::Usage(
            "retrieve needs --dataset (build), --query (search) or both".into(),
        ));
    }
    let graham = !a.no_graham.unwrap();
    let m = load_ckpt(&ckpt)?.into_classifier()?;
    let version = infer::file_version(&ckpt)?;
    let index = if let Some(dir) = &a.dataset {
        let metric = Metric::parse(a.metric.as_deref().unwrap()).ok_or_else(|| {
            CliError::Usage(format!("unknown metric {:?}", a.metric.as_deref().unwrap()))
        })?;
        let ds = load_dataset(dir)?;
        let mut embs = Vec::with_capacity(ds.len());
        for r in ds.records() {
            embs.push(infer::embed(&m, &r.image.load()?, graham)?);
        }
        let ids: Vec<String> = ds.records().iter().map(|r| r.case_id.clone()).collect();
        let labels: Vec<_> = ds.records().iter().map(|r| r.labels).collect();
        let idx = RetrievalIndex::build(&embs, &ids, &labels, metric, version.clone())?;
        if let Some(parent) = index_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        idx.save(&index_path)?;
        ctx.out.emit(
            "index",
            format!(
                "indexed {} cases ({}-d) into {}",
                idx.len(),
                idx.dim(),
                index_path.display()
            ),
            json!({ "size": idx.len(), "dim": idx.dim(), "index": index_path }),
        );
        idx
    } else {
        RetrievalIndex::load(&index_path)?
    };
    if let Some(q) = &a.query {
        if index.model_version() != version {
            return Err(CliError::Domain(format!(
                "index {} was built with a different checkpoint than {}",
                index_path.display(),
                ckpt.display()
            )));
        }
        let e = infer::embed(&m, &load_image(q)?, graham)?;
        let hits = index.knn_query(&e, a.k.unwrap(), None)?;
        for (rank, n) in hits.iter().enumerate() {
            let labels: String = n.labels.positives().map(|d| d.code()).collect();
            ctx.out.emit(
                "neighbor",
                format!("{:>3}. {}  distance {:.6}  labels {}", rank + 1, n.case_id, n.distance, labels),
                json!({ "rank": rank + 1, "case_id": n.case_id, "distance": n.distance, "labels": n.labels }),
            );
        }
    }
    Ok(())
}

fn saliency(ctx: &mut Ctx<'_>, a: SaliencyArgs) -> Result<(), CliError> {
    use ocuscreen::explain::{DEFAULT_BASELINE, DEFAULT_PATCH, DEFAULT_STRIDE};
    let a = effective(
        ctx,
        "saliency",
        json!({
            "patch": DEFAULT_PATCH,
            "stride": DEFAULT_STRIDE,
            "baseline": DEFAULT_BASELINE,
            "no_graham": false,
        }),
        &a,
    )?;
    let ckpt = required(&a.checkpoint, "checkpoint")?;
    let input = required(&a.input, "input")?;
    let graham = !a.no_graham.unwrap();
    let m = load_ckpt(&ckpt)?.into_classifier()?;
    let raw = load_image(&input)?;
    let target = match &a.class {
        Some(c) => parse_class(c)?.index(),
        None => {
            let p = infer::predict(&m, &raw, graham)?;
            (0..NUM_CLASSES).fold(0, |b, i| if p[i] > p[b] { i } else { b })
        }
    };
    let img = infer::classifier_input(&m, &raw, graham)?;
    let map = occlusion_saliency(
        &m,
        &img,
        target,
        a.patch.unwrap(),
        a.stride.unwrap(),
        a.baseline.unwrap(),
    )?;
    let (i, j) = map.argmax();
    let (x0, y0, x1, y1) = map.cell_rect(i, j);
    if let Some(out) = &a.out {
        std::fs::write(out, saliency_png(&map, &img))?;
    }
    ctx.out.emit(
        "saliency",
        format!(
            "class {} (p = {:.4}); most important region x {x0}..{x1}, y {y0}..{y1}{}",
            Disease::ALL[target].name(),
            map.base_prob,
            a.out
                .as_ref()
                .map_or(String::new(), |o| format!("; overlay in {}", o.display()))
        ),
        json!({
            "class": Disease::ALL[target].code().to_string(),
            "base_prob": map.base_prob,
            "peak_rect": [x0, y0, x1, y1],
            "map": map,
            "out": a.out,
        }),
    );
    Ok(())
}

fn serve(ctx: &mut Ctx<'_>, a: ServeArgs) -> Result<(), CliError> {
    let d = ServiceConfig::default();
    let a = effective(
        ctx,
        "serve",
        json!({ "listen": d.listen, "data_dir": d.data_dir, "no_graham": false }),
        &a,
    )?;
    let cfg = ServiceConfig {
        listen: a.listen.unwrap(),
        data_dir: a.data_dir.unwrap(),
        model: a.model,
        segmenter: a.segmenter,
        index: a.index,
        graham: !a.no_graham.unwrap(),
    };
    let mut rec = RunRecord::new(ctx.run_id.clone(), "serve", ctx.effective.clone());
    ctx.store.log_run(&RunEvent::start(&rec))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    let result = rt.block_on(ocuscreen_service::serve(cfg));
    rec.status = match &result {
        Ok(()) => RunStatus::Completed,
        Err(e) => RunStatus::Failed {
            epoch: 0,
            reason: e.to_string(),
        },
    };
    rec.ended_at = Some(unix_time());
    ctx.store.log_run(&RunEvent::end(&rec))?;
    Ok(result?)
}

/// Row label: the backbone variant for classifiers, the model kind
/// otherwise.
fn row_label(r: &RunRecord) -> String {
    r.config
        .pointer("/model/config/variant")
        .and_then(Value::as_str)
        .unwrap_or(&r.model)
        .to_string()
}

fn report(ctx: &mut Ctx<'_>, a: ReportArgs) -> Result<(), CliError> {
    let a = effective(ctx, "report", json!({}), &a)?;
    let ids = match &a.run {
        Some(ids) if !ids.is_empty() => ids.clone(),
        _ => ctx.store.list_runs()?,
    };
    let mut recs = Vec::new();
    for id in &ids {
        let r = ctx.store.reconstruct(id)?;
        // Without an explicit list, only runs that produced metrics.
        if a.run.is_some() || !r.epochs.is_empty() {
            recs.push(r);
        }
    }
    let labels: Vec<String> = recs
        .iter()
        .map(|r| {
            let l = row_label(r);
            if recs.iter().filter(|o| row_label(o) == l).count() > 1 {
                format!("{l} ({})", r.run_id)
            } else {
                l
            }
        })
        .collect();
    let rows: Vec<(&str, &RunRecord)> = labels.iter().map(String::as_str).zip(&recs).collect();
    let md = markdown_report(&rows);
    if let Some(out) = &a.out {
        std::fs::write(out, &md)?;
    }
    let best: Vec<Value> = recs
        .iter()
        .zip(&labels)
        .map(|(r, l)| json!({ "run_id": r.run_id, "label": l, "best": r.best() }))
        .collect();
    ctx.out
        .emit("report", md.trim_end(), json!({ "markdown": md, "runs": best }));
    Ok(())
}
