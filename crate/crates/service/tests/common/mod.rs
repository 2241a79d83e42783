//! In-process client for the router. Every response is checked against
//! docs/openapi.json: the status must be documented for the route, and JSON
//! bodies must validate against the documented schema.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ocuscreen::datasets::synth::{generate_synthetic_case, SynthSpec, SyntheticCase};
use ocuscreen::datasets::Disease;
use ocuscreen::models::{save_model, BackboneConfig, Classifier, UNetConfig, Variant, WNet, WNetConfig};
use ocuscreen::preprocess::io::encode_png;
use ocuscreen_service::{router, AppState};
use serde_json::Value;
use tower::ServiceExt;

pub struct Resp {
    pub status: StatusCode,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Resp {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("body is not JSON ({e}): {}", String::from_utf8_lossy(&self.body)))
    }

    #[track_caller]
    pub fn expect(self, status: u16) -> Self {
        assert_eq!(
            self.status.as_u16(),
            status,
            "body: {}",
            String::from_utf8_lossy(&self.body)
        );
        self
    }
}

pub struct Client {
    app: Router,
    doc: Value,
}

/// `/cases/<anything>/x` -> `/cases/{id}/x`; query dropped.
fn template(uri: &str) -> String {
    let path = uri.split('?').next().unwrap();
    let mut segs: Vec<&str> = path.split('/').collect();
    if segs.len() >= 3 && segs[1] == "cases" {
        segs[2] = "{id}";
    }
    segs.join("/")
}

fn resolve<'a>(doc: &'a Value, v: &'a Value) -> &'a Value {
    match v.get("$ref").and_then(Value::as_str) {
        Some(r) => doc
            .pointer(r.trim_start_matches('#'))
            .unwrap_or_else(|| panic!("dangling $ref {r}")),
        None => v,
    }
}

pub fn validate(doc: &Value, schema: &Value, instance: &Value, what: &str) {
    let mut root = doc.clone();
    root["allOf"] = Value::Array(vec![schema.clone()]);
    let v = jsonschema::validator_for(&root).expect("schema compiles");
    let errors: Vec<String> = v.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{what} violates schema: {errors:?}\n{instance:#}");
}

impl Client {
    pub fn new(state: Arc<AppState>) -> Self {
        Self {
            app: router(state),
            doc: serde_json::from_str(ocuscreen_service::OPENAPI).expect("openapi.json parses"),
        }
    }

    pub fn doc(&self) -> &Value {
        &self.doc
    }

    pub async fn send(&self, req: Request<Body>) -> Resp {
        let method = req.method().as_str().to_ascii_lowercase();
        let uri = req.uri().to_string();
        let res = self.app.clone().oneshot(req).await.expect("infallible");
        let status = res.status();
        let content_type = res
            .headers()
            .get("content-type")
            .map(|v| v.to_str().unwrap().to_string())
            .unwrap_or_default();
        let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        let resp = Resp {
            status,
            content_type,
            body,
        };
        self.conform(&method, &uri, &resp);
        resp
    }

    fn conform(&self, method: &str, uri: &str, resp: &Resp) {
        let t = template(uri);
        let op = self
            .doc
            .pointer(&format!("/paths/{}/{method}", t.replace('~', "~0").replace('/', "~1")))
            .unwrap_or_else(|| panic!("{method} {t} is not documented"));
        let code = resp.status.as_str();
        let documented = op["responses"]
            .get(code)
            .unwrap_or_else(|| panic!("{method} {t} answered undocumented status {code}: {}", String::from_utf8_lossy(&resp.body)));
        let documented = resolve(&self.doc, documented);
        let content = &documented["content"];
        if let Some(media) = content.get("application/json") {
            assert!(resp.content_type.starts_with("application/json"), "{method} {t}: content-type {}", resp.content_type);
            if let Some(schema) = media.get("schema") {
                validate(&self.doc, schema, &resp.json(), &format!("{method} {t} {code}"));
            }
        } else if content.get("image/png").is_some() {
            assert_eq!(resp.content_type, "image/png", "{method} {t}");
        }
    }

    pub async fn get(&self, uri: &str) -> Resp {
        self.send(Request::get(uri).body(Body::empty()).unwrap()).await
    }

    pub async fn post(&self, uri: &str) -> Resp {
        self.send(Request::post(uri).body(Body::empty()).unwrap()).await
    }

    pub async fn post_json(&self, uri: &str, body: &Value) -> Resp {
        self.send(
            Request::post(uri)
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .unwrap(),
        )
        .await
    }

    pub async fn post_raw_json(&self, uri: &str, body: &str) -> Resp {
        self.send(
            Request::post(uri)
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .unwrap(),
        )
        .await
    }

    /// Multipart POST /cases with the given named parts.
    pub async fn upload(&self, parts: &[(&str, &[u8])]) -> Resp {
        const B: &str = "ocuscreen-test-boundary";
        let mut body = Vec::new();
        for (name, bytes) in parts {
            body.extend_from_slice(
                format!("--{B}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\nContent-Type: application/octet-stream\r\n\r\n").as_bytes(),
            );
            body.extend_from_slice(bytes);
            body.extend_from_slice(b"\r\n");
        }
        body.extend_from_slice(format!("--{B}--\r\n").as_bytes());
        self.send(
            Request::post("/cases")
                .header("content-type", format!("multipart/form-data; boundary={B}"))
                .body(Body::from(body))
                .unwrap(),
        )
        .await
    }

    /// Uploads a PNG; returns the new case id.
    pub async fn create(&self, png: &[u8], extra: &[(&str, &[u8])]) -> String {
        let mut parts = vec![("image", png), ("eye", b"left".as_slice())];
        parts.extend_from_slice(extra);
        let r = self.upload(&parts).await.expect(201);
        r.json()["case_id"].as_str().unwrap().to_string()
    }
}

pub fn fundus(class: Disease, seed: u64, size: usize) -> SyntheticCase {
    generate_synthetic_case(&SynthSpec::for_class(class, seed, size))
}

pub fn fundus_png(class: Disease, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let c = fundus(class, seed, 64);
    (encode_png(&c.image), encode_png(&c.vessel_mask))
}

pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        channels: vec![4, 8],
        input_size: 16,
        ..BackboneConfig::with_variant(Variant::Separable)
    }
}

pub fn classifier_ckpt(dir: &Path, name: &str, seed: u64, zero_head: bool) -> PathBuf {
    let mut m = Classifier::new(small_backbone(), seed).unwrap();
    if zero_head {
        m.zero_head();
    }
    let p = dir.join(name);
    save_model(&m, &p).unwrap();
    p
}

pub fn small_wnet() -> WNetConfig {
    WNetConfig {
        unet: UNetConfig {
            depth: 2,
            base_channels: 4,
            input_size: 16,
            ..UNetConfig::default()
        },
        ..WNetConfig::default()
    }
}

pub fn wnet_ckpt(dir: &Path, seed: u64) -> PathBuf {
    let m = WNet::new(small_wnet(), seed).unwrap();
    let p = dir.join("wnet.ckpt");
    save_model(&m, &p).unwrap();
    p
}
