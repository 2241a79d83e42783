//! The API conformance suite. Shared by the `conformance` test target and
//! the acceptance runner; every case builds its own temporary state.
#![allow(dead_code)]

use std::future::Future;
use std::pin::Pin;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::common::*;
use ocuscreen::datasets::Disease;
use ocuscreen::explain::embed_images;
use ocuscreen::models::load_model;
use ocuscreen::preprocess::io::{decode_png, encode_png};
use ocuscreen::preprocess::{crop_roi, graham_normalize, pipeline, Image, PreprocessConfig};
use ocuscreen::training::threshold_mask;
use ocuscreen_service::{open_state, AppState, ServiceConfig};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Every file under the data dir with its contents.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(d: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Full sort by (euclidean distance, insertion order), self removed.
fn linear_scan(data: &[Vec<f64>], ids: &[String], q: usize, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(f64, usize)> = (0..data.len())
        .filter(|&i| i != q)
        .map(|i| (data[i].iter().zip(&data[q]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d, i)| (ids[i].clone(), d)).collect()
}

fn decision_body(labels: [i64; 8]) -> Value {
    json!({ "clinician_id": "dr-a", "labels": labels, "agrees_with_model": false, "note": "checked" })
}

pub async fn upload_validation_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(open_state(dir.path(), None, None).unwrap());
    let (png, _) = fundus_png(Disease::Cataract, 1);

    let r = c.upload(&[("image", &png), ("eye", b"right")]).await.expect(201);
    let case = r.json();
    assert_eq!(case["status"], "new");
    assert_eq!(case["eye"], "right");
    assert_eq!(case["prediction"], Value::Null);
    let id = case["case_id"].as_str().unwrap();
    assert_eq!(c.get(&format!("/cases/{id}")).await.expect(200).json(), case);
    // every advertised image URI resolves
    for k in ["original", "enhanced", "preprocessed"] {
        let uri = case["images"][k].as_str().unwrap();
        c.get(uri).await.expect(200);
    }
    assert_eq!(c.get(&format!("/cases/{id}/original")).await.body, png);
    c.get(&format!("/cases/{id}/mask")).await.expect(404);

    // duplicate upload -> distinct id
    let id2 = c.create(&png, &[]).await;
    assert_ne!(id, id2);

    let black = encode_png(&Image::from_fn(40, 40, 3, |_, _, _| 0.0));
    c.upload(&[("image", &black)]).await.expect(422);
    c.upload(&[("image", b"not a png")]).await.expect(400);
    c.upload(&[("eye", b"left")]).await.expect(400);
    c.upload(&[("image", &png), ("eye", b"middle")]).await.expect(400);
    c.upload(&[("image", &png), ("labels", b"N,C")]).await.expect(422);
    c.upload(&[("image", &png), ("labels", b"0,0,0,0,0,0,0,0")]).await.expect(422);
    let (_, small_mask) = {
        let f = fundus(Disease::Normal, 3, 32);
        ((), encode_png(&f.vessel_mask))
    };
    c.upload(&[("image", &png), ("vessel_mask", &small_mask)]).await.expect(400);
    let r = c.upload(&[("image", &png), ("labels", b"D,H")]).await.expect(201);
    assert_eq!(r.json()["labels"], json!([0, 1, 0, 0, 0, 1, 0, 0]));
    c.get("/cases/nope").await.expect(404);
    c.get("/cases/..%2F..%2Fetc").await.expect(404);
    // failed uploads leave nothing behind
    assert_eq!(c.get("/cases").await.expect(200).json().as_array().unwrap().len(), 3);
}

pub async fn enhanced_view_is_graham_of_the_roi() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(open_state(dir.path(), None, None).unwrap());
    let gray = encode_png(&Image::from_fn(48, 40, 3, |_, _, _| 0.3));
    let id = c.create(&gray, &[]).await;
    let r = c.get(&format!("/cases/{id}/enhanced")).await.expect(200);
    let img = decode_png(&r.body).unwrap();
    assert!(img.to_u8().iter().all(|&v| v == 128));
    assert_eq!(c.get(&format!("/cases/{id}/enhanced")).await.body, r.body);
    assert_eq!(encode_png(&img), r.body, "decode then re-encode is stable");

    let f = fundus(Disease::Diabetes, 9, 64);
    let id = c.create(&encode_png(&f.image), &[]).await;
    let cfg = PreprocessConfig::default();
    let src = decode_png(&encode_png(&f.image)).unwrap();
    let want = encode_png(&graham_normalize(&crop_roi(&src, &cfg).unwrap().0, &cfg));
    assert_eq!(c.get(&format!("/cases/{id}/enhanced")).await.body, want);
}

pub async fn predict_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (png, _) = fundus_png(Disease::Glaucoma, 2);
    let id = {
        let c = Client::new(open_state(dir.path(), None, None).unwrap());
        let id = c.create(&png, &[]).await;
        c.post(&format!("/cases/{id}/predict")).await.expect(503);
        id
    };
    let ckpt = classifier_ckpt(dir.path(), "zero.ckpt", 4, true);
    let c = Client::new(open_state(dir.path(), Some(&ckpt), None).unwrap());
    c.post("/cases/missing/predict").await.expect(404);
    let r = c.post(&format!("/cases/{id}/predict")).await.expect(200);
    let p = r.json();
    assert!(p["probs"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.5)));
    assert!(p["labels_over_threshold"].as_array().unwrap().iter().all(|v| v == false));
    assert_eq!(p["model_version"], sha(&ckpt));
    let again = c.post(&format!("/cases/{id}/predict")).await.expect(200);
    assert_eq!(again.body, r.body);
    assert_eq!(c.get(&format!("/cases/{id}")).await.json()["prediction"], p);

    // a different model version recomputes
    let other = classifier_ckpt(dir.path(), "other.ckpt", 5, false);
    let c2 = Client::new(open_state(dir.path(), Some(&other), None).unwrap());
    let q = c2.post(&format!("/cases/{id}/predict")).await.expect(200).json();
    assert_eq!(q["model_version"], sha(&other));
    let m = load_model(&other).unwrap().into_classifier().unwrap();
    let x = pipeline(&decode_png(&png).unwrap(), &PreprocessConfig { target_size: 16, ..Default::default() }).unwrap();
    let want = m.forward_classify(&Image::batch(&[&x]).unwrap()).unwrap();
    let got: Vec<f64> = q["probs"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(got, want.data());
    let h = c2.get("/health").await.expect(200).json();
    assert_eq!(h["classifier"], sha(&other));
    assert_eq!(h["segmenter"], Value::Null);
}

pub async fn similar_cases_follow_the_linear_scan() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = classifier_ckpt(dir.path(), "m.ckpt", 11, false);
    let c = Client::new(open_state(dir.path(), Some(&ckpt), None).unwrap());
    let (dup, _) = fundus_png(Disease::Cataract, 40);
    let query = c.create(&dup, &[]).await;
    c.get(&format!("/cases/{query}/similar?k=1")).await.expect(409);
    c.get("/index").await.expect(409);
    c.post("/index").await.expect(422);

    let mut pngs = vec![(c.create(&dup, &[("labels", b"C")]).await, dup.clone())];
    for (i, d) in [Disease::Normal, Disease::Diabetes, Disease::Glaucoma, Disease::Cataract].iter().cycle().take(11).enumerate() {
        let (p, _) = fundus_png(*d, 100 + i as u64);
        let code = d.code().to_string();
        pngs.push((c.create(&p, &[("labels", code.as_bytes())]).await, p));
    }
    let info = c.post("/index").await.expect(201).json();
    assert_eq!(info["size"], 12);
    assert_eq!(info["model_version"], sha(&ckpt));
    assert_eq!(c.get("/index").await.expect(200).json(), info);

    let best = c.get(&format!("/cases/{query}/similar?k=1")).await.expect(200).json();
    assert_eq!(best[0]["case_id"], pngs[0].0.as_str());
    assert_eq!(best[0]["distance"], 0.0);
    assert_eq!(best[0]["labels"], json!([0, 0, 0, 1, 0, 0, 0, 0]));

    // oracle: embeddings computed directly, then a full sort
    let m = load_model(&ckpt).unwrap().into_classifier().unwrap();
    let pre = PreprocessConfig { target_size: 16, ..Default::default() };
    let inputs: Vec<Image> = pngs.iter().map(|(_, p)| pipeline(&decode_png(p).unwrap(), &pre).unwrap()).collect();
    let emb = embed_images(&m, &inputs.iter().collect::<Vec<_>>()).unwrap();
    let ids: Vec<String> = pngs.iter().map(|(id, _)| id.clone()).collect();
    for (qi, k) in [(3usize, 1usize), (5, 5), (7, 11)] {
        let want = linear_scan(&emb, &ids, qi, k);
        let got = c.get(&format!("/cases/{}/similar?k={k}", ids[qi])).await.expect(200).json();
        let got: Vec<(String, f64)> = got
            .as_array()
            .unwrap()
            .iter()
            .map(|n| (n["case_id"].as_str().unwrap().to_string(), n["distance"].as_f64().unwrap()))
            .collect();
        assert_eq!(got.len(), k);
        for ((gi, gd), (wi, wd)) in got.iter().zip(&want) {
            assert_eq!(gi, wi);
            assert!((gd - wd).abs() < 1e-12);
        }
    }
    // K equal to the self-excluded index size lists everything, sorted
    let all = c.get(&format!("/cases/{}/similar?k=11", ids[2])).await.expect(200).json();
    let d: Vec<f64> = all.as_array().unwrap().iter().map(|n| n["distance"].as_f64().unwrap()).collect();
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    assert!(all.as_array().unwrap().iter().all(|n| n["case_id"] != ids[2].as_str()));
    assert!(all[0]["thumbnail_uri"].as_str().unwrap().ends_with("/preprocessed"));

    c.get(&format!("/cases/{}/similar?k=12", ids[2])).await.expect(422);
    c.get(&format!("/cases/{query}/similar?k=13")).await.expect(422);
    c.get(&format!("/cases/{query}/similar?k=0")).await.expect(422);
    c.get(&format!("/cases/{query}/similar?k=abc")).await.expect(422);
    c.get("/cases/missing/similar?k=1").await.expect(404);

    // the index survives a restart but is tied to its model
    let other = classifier_ckpt(dir.path(), "other.ckpt", 12, false);
    let c2 = Client::new(open_state(dir.path(), Some(&other), None).unwrap());
    assert_eq!(c2.get("/index").await.expect(200).json(), info);
    c2.get(&format!("/cases/{query}/similar?k=1")).await.expect(409);
    let c3 = Client::new(open_state(dir.path(), None, None).unwrap());
    c3.get(&format!("/cases/{query}/similar?k=1")).await.expect(503);
}

pub async fn segmentation_contract() {
    let dir = tempfile::tempdir().unwrap();
    let f = fundus(Disease::Normal, 77, 64);
    let (png, mask) = (encode_png(&f.image), encode_png(&f.vessel_mask));
    let (with_truth, plain) = {
        let c = Client::new(open_state(dir.path(), None, None).unwrap());
        let a = c.create(&png, &[("vessel_mask", &mask)]).await;
        let b = c.create(&png, &[]).await;
        c.post(&format!("/cases/{a}/segment")).await.expect(503);
        (a, b)
    };
    let w = wnet_ckpt(dir.path(), 3);
    let c = Client::new(open_state(dir.path(), None, Some(&w)).unwrap());
    c.post("/cases/missing/segment").await.expect(404);
    let s = c.post(&format!("/cases/{with_truth}/segment")).await.expect(200).json();
    assert_eq!((s["width"].as_u64(), s["height"].as_u64()), (Some(16), Some(16)));
    assert_eq!(s["model_version"], sha(&w));
    let dice = s["dice_vs_truth"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));
    let m1 = c.get(s["mask_uri"].as_str().unwrap()).await.expect(200).body;
    let decoded = decode_png(&m1).unwrap();
    assert_eq!((decoded.height(), decoded.width(), decoded.channels()), (16, 16, 1));
    assert!(decoded.to_u8().iter().all(|&v| v == 0 || v == 255));
    c.get(s["overlay_uri"].as_str().unwrap()).await.expect(200);

    // mask equals map_b > 0.5 computed directly
    let net = load_model(&w).unwrap().into_wnet().unwrap();
    let pre = PreprocessConfig { target_size: 16, ..Default::default() };
    let (input, truth) = ocuscreen::training::segmentation_pair(&decode_png(&png).unwrap(), &decode_png(&mask).unwrap(), &pre).unwrap();
    let (_, map_b) = net.wnet_forward(&Image::batch(&[&input]).unwrap()).unwrap();
    let want = threshold_mask(map_b.data(), 0.5);
    assert_eq!(decoded.pixels(), want.as_slice());
    let inter: f64 = want.iter().zip(truth.pixels()).map(|(a, b)| a * b).sum();
    let denom: f64 = want.iter().sum::<f64>() + truth.pixels().iter().sum::<f64>();
    let want_dice = if denom == 0.0 { 1.0 } else { 2.0 * inter / denom };
    assert!((dice - want_dice).abs() < 1e-12);

    let again = c.post(&format!("/cases/{with_truth}/segment")).await.expect(200).json();
    assert_eq!(again, s);
    assert_eq!(c.get(s["mask_uri"].as_str().unwrap()).await.body, m1);
    let case = c.get(&format!("/cases/{with_truth}")).await.json();
    assert_eq!(case["segmentation"], s);
    assert_eq!(case["images"]["mask"], s["mask_uri"]);

    let p = c.post(&format!("/cases/{plain}/segment")).await.expect(200).json();
    assert_eq!(p["dice_vs_truth"], Value::Null);
    assert_eq!(c.get(p["mask_uri"].as_str().unwrap()).await.body, m1, "same image, same mask");
}

pub async fn decisions_are_immutable() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(open_state(dir.path(), None, None).unwrap());
    let (png, _) = fundus_png(Disease::Diabetes, 5);
    let id = c.create(&png, &[]).await;
    let uri = format!("/cases/{id}/decision");
    c.post_json("/cases/missing/decision", &decision_body([0, 1, 0, 0, 0, 0, 0, 0])).await.expect(404);
    c.post_json(&uri, &decision_body([1, 0, 0, 1, 0, 0, 0, 0])).await.expect(422);
    c.post_json(&uri, &decision_body([0; 8])).await.expect(422);
    c.post_json(&uri, &json!({ "clinician_id": "", "labels": [0, 1, 0, 0, 0, 0, 0, 0], "agrees_with_model": true })).await.expect(422);
    c.post_json(&uri, &json!({ "clinician_id": "x", "labels": [0, 1, 0, 0, 0, 0, 0], "agrees_with_model": true })).await.expect(422);
    c.post_raw_json(&uri, "{not json").await.expect(400);
    assert_eq!(c.get(&format!("/cases/{id}")).await.json()["status"], "new");

    let r = c.post_json(&uri, &decision_body([0, 1, 0, 0, 0, 1, 0, 0])).await.expect(200).json();
    assert_eq!(r["status"], "reviewed");
    assert_eq!(r["decision"]["labels"], json!([0, 1, 0, 0, 0, 1, 0, 0]));
    assert_eq!(r["decision"]["clinician_id"], "dr-a");
    c.post_json(&uri, &decision_body([1, 0, 0, 0, 0, 0, 0, 0])).await.expect(409);
    assert_eq!(c.get(&format!("/cases/{id}")).await.json(), r);
}

pub async fn concurrent_decisions_admit_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let c = Arc::new(Client::new(open_state(dir.path(), None, None).unwrap()));
    let (png, _) = fundus_png(Disease::Normal, 6);
    let id = c.create(&png, &[]).await;
    let tasks: Vec<_> = (0..16)
        .map(|i| {
            let c = Arc::clone(&c);
            let uri = format!("/cases/{id}/decision");
            tokio::spawn(async move {
                let mut labels = [0i64; 8];
                labels[1 + i % 7] = 1;
                c.post_json(&uri, &decision_body(labels)).await.status.as_u16()
            })
        })
        .collect();
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.unwrap());
    }
    assert_eq!(codes.iter().filter(|&&s| s == 200).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|&&s| s == 409).count(), 15);

    let uploads: Vec<_> = (0..8)
        .map(|_| {
            let c = Arc::clone(&c);
            let png = png.clone();
            tokio::spawn(async move { c.create(&png, &[]).await })
        })
        .collect();
    let mut ids = std::collections::HashSet::new();
    for t in uploads {
        assert!(ids.insert(t.await.unwrap()));
    }
    assert_eq!(c.get("/cases").await.json().as_array().unwrap().len(), 9);
}

pub async fn gets_have_no_side_effects_and_state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = classifier_ckpt(dir.path(), "m.ckpt", 21, false);
    let w = wnet_ckpt(dir.path(), 1);
    let data = dir.path().join("data");
    let state = || open_state(&data, Some(&ckpt), Some(&w)).unwrap();
    let c = Client::new(state());
    let mut ids = Vec::new();
    for (i, d) in [Disease::Normal, Disease::Cataract, Disease::Glaucoma].into_iter().enumerate() {
        let f = fundus(d, 300 + i as u64, 64);
        let code = d.code().to_string();
        ids.push(c.create(&encode_png(&f.image), &[("vessel_mask", &encode_png(&f.vessel_mask)), ("labels", code.as_bytes())]).await);
    }
    c.post(&format!("/cases/{}/predict", ids[0])).await.expect(200);
    c.post(&format!("/cases/{}/segment", ids[1])).await.expect(200);
    c.post_json(&format!("/cases/{}/decision", ids[2]), &decision_body([0, 0, 1, 0, 0, 0, 0, 0])).await.expect(200);
    c.post("/index").await.expect(201);

    let before = snapshot(&data);
    let list = c.get("/cases").await.expect(200).json();
    let mut reads = Vec::new();
    for id in &ids {
        for suffix in ["", "/original", "/enhanced", "/preprocessed", "/mask", "/overlay", "/similar?k=2", "/saliency?class=C"] {
            let r = c.get(&format!("/cases/{id}{suffix}")).await;
            reads.push((suffix, r.status, r.body));
        }
    }
    c.get("/health").await.expect(200);
    c.get("/index").await.expect(200);
    assert_eq!(snapshot(&data), before, "GET requests changed stored state");

    drop(c);
    let c = Client::new(state());
    assert_eq!(c.get("/cases").await.json(), list);
    let mut i = 0;
    for id in &ids {
        for suffix in ["", "/original", "/enhanced", "/preprocessed", "/mask", "/overlay", "/similar?k=2", "/saliency?class=C"] {
            let r = c.get(&format!("/cases/{id}{suffix}")).await;
            assert_eq!((reads[i].0, reads[i].1, &reads[i].2), (suffix, r.status, &r.body));
            i += 1;
        }
    }
    c.post_json(&format!("/cases/{}/decision", ids[2]), &decision_body([1, 0, 0, 0, 0, 0, 0, 0])).await.expect(409);
}

pub async fn saliency_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (png, _) = fundus_png(Disease::Cataract, 8);
    let id = {
        let c = Client::new(open_state(dir.path(), None, None).unwrap());
        let id = c.create(&png, &[]).await;
        c.get(&format!("/cases/{id}/saliency")).await.expect(503);
        id
    };
    let ckpt = classifier_ckpt(dir.path(), "m.ckpt", 2, false);
    let c = Client::new(open_state(dir.path(), Some(&ckpt), None).unwrap());
    let r = c.get(&format!("/cases/{id}/saliency?class=3&patch=4&stride=2")).await.expect(200);
    let img = decode_png(&r.body).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (16, 16, 3));
    c.get(&format!("/cases/{id}/saliency")).await.expect(200);
    c.get(&format!("/cases/{id}/saliency?class=Z")).await.expect(422);
    c.get(&format!("/cases/{id}/saliency?patch=40")).await.expect(422);
    c.get(&format!("/cases/{id}/saliency?stride=x")).await.expect(422);
    c.get("/cases/missing/saliency").await.expect(404);
}

pub async fn service_refuses_unloadable_models() {
    let dir = tempfile::tempdir().unwrap();
    let w = wnet_ckpt(dir.path(), 0);
    // a W-Net checkpoint given as the classifier
    assert!(open_state(dir.path(), Some(&w), None).is_err());
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"junk").unwrap();
    assert!(open_state(dir.path(), None, Some(&bogus)).is_err());
    let cfg = ServiceConfig { data_dir: dir.path().into(), index: Some(bogus), ..Default::default() };
    assert!(AppState::open(cfg).is_err());
}

pub async fn published_schema_is_served() {
    let dir = tempfile::tempdir().unwrap();
    let c = Client::new(open_state(dir.path(), None, None).unwrap());
    let doc = c.get("/openapi.json").await.expect(200).json();
    assert_eq!(&doc, c.doc());
    assert_eq!(doc["openapi"], "3.1.0");
    let bad = json!({ "case_id": "x", "distance": -1.0, "labels": [1, 1, 0, 0, 0, 0, 0, 0], "thumbnail_uri": null });
    let r = std::panic::catch_unwind(|| validate(&doc, &json!({ "$ref": "#/components/schemas/SimilarCase" }), &bad, "negative"));
    assert!(r.is_err(), "schema must reject a negative distance");
}


pub type Case = (&'static str, fn() -> Pin<Box<dyn Future<Output = ()> + Send>>);

pub const CASES: &[Case] = &[
    ("upload_validation_and_read_back", || Box::pin(upload_validation_and_read_back())),
    ("enhanced_view_is_graham_of_the_roi", || Box::pin(enhanced_view_is_graham_of_the_roi())),
    ("predict_contract", || Box::pin(predict_contract())),
    ("similar_cases_follow_the_linear_scan", || Box::pin(similar_cases_follow_the_linear_scan())),
    ("segmentation_contract", || Box::pin(segmentation_contract())),
    ("decisions_are_immutable", || Box::pin(decisions_are_immutable())),
    ("concurrent_decisions_admit_exactly_one", || Box::pin(concurrent_decisions_admit_exactly_one())),
    ("gets_have_no_side_effects_and_state_survives_restart", || Box::pin(gets_have_no_side_effects_and_state_survives_restart())),
    ("saliency_endpoint", || Box::pin(saliency_endpoint())),
    ("service_refuses_unloadable_models", || Box::pin(service_refuses_unloadable_models())),
    ("published_schema_is_served", || Box::pin(published_schema_is_served())),
];
