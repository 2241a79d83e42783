use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ocuscreen::datasets::{Disease, Eye, LabelVector, NUM_CLASSES};
use ocuscreen::explain::{
    occlusion_saliency, saliency_png, IndexError, RetrievalIndex, DEFAULT_BASELINE, DEFAULT_PATCH,
    DEFAULT_STRIDE,
};
use ocuscreen::models::ModelError;
use ocuscreen::preprocess::io::{decode_png, encode_png};
use ocuscreen::preprocess::{Image, PreprocessError};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::infer;
use crate::store::{self, CaseResource, CaseStatus, DecisionRecord, NewCase, Prediction, Segmentation};
use crate::{AppState, Loaded, ServiceError};

type St = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/openapi.json", get(openapi))
        .route("/index", get(index_info).post(build_index))
        .route("/cases", get(list_cases).post(create_case))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/original", get(|s: St, p| file(s, p, "original.png")))
        .route("/cases/{id}/enhanced", get(|s: St, p| file(s, p, "enhanced.png")))
        .route("/cases/{id}/preprocessed", get(|s: St, p| file(s, p, "preprocessed.png")))
        .route("/cases/{id}/mask", get(|s: St, p| file(s, p, "mask.png")))
        .route("/cases/{id}/overlay", get(|s: St, p| file(s, p, "overlay.png")))
        .route("/cases/{id}/predict", post(predict))
        .route("/cases/{id}/similar", get(similar))
        .route("/cases/{id}/segment", post(segment))
        .route("/cases/{id}/saliency", get(saliency))
        .route("/cases/{id}/decision", post(decision))
        .layer(DefaultBodyLimit::max(32 << 20))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, m)
    }
    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no case {id}"))
    }
    fn conflict(m: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, m)
    }
    fn unprocessable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, m)
    }
    fn unavailable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, m)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = self.status.canonical_reason().unwrap_or("error");
        (
            self.status,
            Json(json!({ "error": code, "message": self.message })),
        )
            .into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::Preprocess(PreprocessError::Decode(_)) => StatusCode::BAD_REQUEST,
            ServiceError::Preprocess(PreprocessError::AllBackground { .. })
            | ServiceError::Index(IndexError::Capacity { .. } | IndexError::ZeroK)
            | ServiceError::Model(ModelError::Config(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        Self::new(status, e.to_string())
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::from(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl From<MultipartRejection> for ApiError {
    fn from(r: MultipartRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs CPU-bound work off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn load_case(st: &AppState, id: &str) -> ApiResult<CaseResource> {
    st.store.get(id)?.ok_or_else(|| ApiError::not_found(id))
}

fn load_original(st: &AppState, id: &str) -> ApiResult<Image> {
    let bytes = st
        .store
        .read_file(id, "original.png")?
        .ok_or_else(|| ApiError::not_found(id))?;
    Ok(decode_png(&bytes).map_err(ServiceError::from)?)
}

fn need_classifier(st: &AppState) -> ApiResult<Arc<Loaded<ocuscreen::models::Classifier>>> {
    st.classifier
        .clone()
        .ok_or_else(|| ApiError::unavailable("no classifier model loaded"))
}

#[derive(Serialize)]
struct IndexInfo {
    version: String,
    size: usize,
    dim: usize,
    model_version: String,
}

fn index_summary(idx: &Loaded<RetrievalIndex>) -> IndexInfo {
    IndexInfo {
        version: idx.version.clone(),
        size: idx.model.len(),
        dim: idx.model.dim(),
        model_version: idx.model.model_version().to_string(),
    }
}

async fn health(State(st): St) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "classifier": st.classifier.as_ref().map(|m| &m.version),
        "segmenter": st.segmenter.as_ref().map(|m| &m.version),
        "index": st.index().map(|i| index_summary(&i)),
    }))
}

async fn openapi() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], crate::OPENAPI).into_response()
}

async fn list_cases(State(st): St) -> ApiResult<Json<Vec<CaseResource>>> {
    Ok(Json(st.store.list()?))
}

async fn get_case(State(st): St, Path(id): Path<String>) -> ApiResult<Json<CaseResource>> {
    Ok(Json(load_case(&st, &id)?))
}

async fn file(State(st): St, Path(id): Path<String>, name: &'static str) -> ApiResult<Response> {
    load_case(&st, &id)?;
    let bytes = st.store.read_file(&id, name)?.ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, format!("case {id} has no {name}"))
    })?;
    Ok(png(bytes))
}

/// Accepts `0,1,0,...` (eight slots, N D G C A H M O) or disease codes such
/// as `D,H`.
fn parse_labels(s: &str) -> Result<LabelVector, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    if parts.len() == NUM_CLASSES && parts.iter().all(|p| p.parse::<i64>().is_ok()) {
        let ints: Vec<i64> = parts.iter().map(|p| p.parse().unwrap()).collect();
        return LabelVector::from_ints(&ints).map_err(|e| e.to_string());
    }
    let ds = parts
        .iter()
        .map(|p| Disease::parse(p).ok_or_else(|| format!("unknown label {p:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    LabelVector::from_diseases(&ds).map_err(|e| e.to_string())
}

async fn create_case(
    State(st): St,
    mp: Result<Multipart, MultipartRejection>,
) -> ApiResult<(StatusCode, Json<CaseResource>)> {
    let mut mp = mp?;
    let (mut image, mut eye, mut mask, mut labels) = (None, Eye::Unknown, None, None);
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        match name.as_str() {
            "image" => image = Some(bytes),
            "vessel_mask" => mask = Some(bytes),
            "eye" => {
                let s = String::from_utf8_lossy(&bytes);
                eye = Eye::parse(&s).ok_or_else(|| {
                    ApiError::bad_request(format!("eye must be left, right or unknown, got {s:?}"))
                })?;
            }
            "labels" => {
                labels = Some(
                    parse_labels(&String::from_utf8_lossy(&bytes))
                        .map_err(ApiError::unprocessable)?,
                )
            }
            other => return Err(ApiError::bad_request(format!("unexpected part {other:?}"))),
        }
    }
    let image = image.ok_or_else(|| ApiError::bad_request("missing image part"))?;
    let st2 = Arc::clone(&st);
    let case = blocking(move || {
        let img = decode_png(&image).map_err(ServiceError::from)?;
        let truth = match &mask {
            Some(m) => {
                let t = decode_png(m).map_err(ServiceError::from)?;
                if (t.height(), t.width()) != (img.height(), img.width()) {
                    return Err(ApiError::bad_request(format!(
                        "vessel_mask is {}x{}, image is {}x{}",
                        t.width(),
                        t.height(),
                        img.width(),
                        img.height()
                    )));
                }
                Some(encode_png(&t))
            }
            None => None,
        };
        let enhanced = infer::enhanced(&img).map_err(ServiceError::from)?;
        let size = st2.classifier.as_ref().map_or(64, |c| c.model.config().input_size);
        let pre = ocuscreen::preprocess::pipeline(&img, &infer::preprocess_config(size, st2.config.graham))
            .map_err(ServiceError::from)?;
        let case = st2.store.create(NewCase {
            eye,
            labels,
            original: &encode_png(&img),
            enhanced: &encode_png(&enhanced),
            preprocessed: &encode_png(&pre),
            truth_mask: truth.as_deref(),
        })?;
        Ok(case)
    })
    .await?;
    tracing::info!(case_id = %case.case_id, "case created");
    Ok((StatusCode::CREATED, Json(case)))
}

async fn predict(State(st): St, Path(id): Path<String>) -> ApiResult<Json<Prediction>> {
    load_case(&st, &id)?;
    let cls = need_classifier(&st)?;
    let lock = st.store.lock(&id);
    let _g = lock.lock().await;
    let mut case = load_case(&st, &id)?;
    if let Some(p) = &case.prediction {
        if p.model_version == cls.version {
            return Ok(Json(p.clone()));
        }
    }
    let st2 = Arc::clone(&st);
    let id2 = id.clone();
    let probs = blocking(move || {
        let img = load_original(&st2, &id2)?;
        Ok(infer::predict(&cls.model, &img, st2.config.graham)?)
    })
    .await?;
    let p = Prediction {
        probs,
        labels_over_threshold: probs.map(|p| p > 0.5),
        model_version: st.classifier.as_ref().expect("checked").version.clone(),
    };
    case.prediction = Some(p.clone());
    st.store.put(&case)?;
    Ok(Json(p))
}

#[derive(Deserialize)]
struct SimilarQuery {
    k: Option<String>,
}

#[derive(Serialize)]
struct SimilarItem {
    case_id: String,
    distance: f64,
    labels: LabelVector,
    thumbnail_uri: Option<String>,
}

async fn similar(
    State(st): St,
    Path(id): Path<String>,
    Query(q): Query<SimilarQuery>,
) -> ApiResult<Json<Vec<SimilarItem>>> {
    load_case(&st, &id)?;
    let k: usize = match q.k.as_deref() {
        None => 5,
        Some(s) => s
            .parse()
            .map_err(|_| ApiError::unprocessable(format!("k must be a positive integer, got {s:?}")))?,
    };
    let idx = st
        .index()
        .ok_or_else(|| ApiError::conflict("retrieval index not built"))?;
    let cls = need_classifier(&st)?;
    let built_with = idx.model.model_version();
    if !built_with.is_empty() && built_with != cls.version {
        return Err(ApiError::conflict(format!(
            "index was built with model {built_with}, loaded model is {}",
            cls.version
        )));
    }
    let st2 = Arc::clone(&st);
    let hits = blocking(move || {
        let img = load_original(&st2, &id)?;
        let q = infer::embed(&cls.model, &img, st2.config.graham)?;
        Ok(idx
            .model
            .knn_query(&q, k, Some(&id))
            .map_err(ServiceError::from)?)
    })
    .await?;
    Ok(Json(
        hits.into_iter()
            .map(|n| SimilarItem {
                thumbnail_uri: st
                    .store
                    .dir(&n.case_id)
                    .map(|_| store::uri(&n.case_id, "preprocessed")),
                case_id: n.case_id,
                distance: n.distance,
                labels: n.labels,
            })
            .collect(),
    ))
}

async fn segment(State(st): St, Path(id): Path<String>) -> ApiResult<Json<Segmentation>> {
    load_case(&st, &id)?;
    let seg = st
        .segmenter
        .clone()
        .ok_or_else(|| ApiError::unavailable("no segmentation model loaded"))?;
    let lock = st.store.lock(&id);
    let _g = lock.lock().await;
    let mut case = load_case(&st, &id)?;
    let st2 = Arc::clone(&st);
    let id2 = id.clone();
    let version = seg.version.clone();
    let out = blocking(move || {
        let img = load_original(&st2, &id2)?;
        let truth = match st2.store.read_file(&id2, "truth_mask.png")? {
            Some(b) => Some(decode_png(&b).map_err(ServiceError::from)?),
            None => None,
        };
        Ok(infer::segment(&seg.model, &img, truth.as_ref(), st2.config.graham)?)
    })
    .await?;
    st.store.write_file(&id, "mask.png", &out.mask_png)?;
    st.store.write_file(&id, "overlay.png", &out.overlay_png)?;
    let s = Segmentation {
        mask_uri: store::uri(&id, "mask"),
        overlay_uri: store::uri(&id, "overlay"),
        width: out.width,
        height: out.height,
        dice_vs_truth: out.dice_vs_truth,
        model_version: version,
    };
    case.images.mask = Some(s.mask_uri.clone());
    case.images.overlay = Some(s.overlay_uri.clone());
    case.segmentation = Some(s.clone());
    st.store.put(&case)?;
    Ok(Json(s))
}

#[derive(Deserialize)]
struct SaliencyQuery {
    class: Option<String>,
    patch: Option<String>,
    stride: Option<String>,
}

fn size_param(name: &str, v: Option<&str>, default: usize) -> ApiResult<usize> {
    match v {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| {
            ApiError::unprocessable(format!("{name} must be a non-negative integer, got {s:?}"))
        }),
    }
}

/// PNG overlay of occlusion saliency for one class (default: the most
/// probable one) on the classifier's input image.
async fn saliency(
    State(st): St,
    Path(id): Path<String>,
    Query(q): Query<SaliencyQuery>,
) -> ApiResult<Response> {
    load_case(&st, &id)?;
    let cls = need_classifier(&st)?;
    let patch = size_param("patch", q.patch.as_deref(), DEFAULT_PATCH)?;
    let stride = size_param("stride", q.stride.as_deref(), DEFAULT_STRIDE)?;
    let target = match q.class.as_deref() {
        None => None,
        Some(s) => Some(match s.parse::<usize>() {
            Ok(i) if i < NUM_CLASSES => i,
            _ => Disease::parse(s)
                .map(Disease::index)
                .ok_or_else(|| ApiError::unprocessable(format!("unknown class {s:?}")))?,
        }),
    };
    let st2 = Arc::clone(&st);
    let (bytes, target) = blocking(move || {
        let img = load_original(&st2, &id)?;
        let x = infer::classifier_input(&cls.model, &img, st2.config.graham)
            .map_err(ServiceError::from)?;
        let target = match target {
            Some(t) => t,
            None => {
                let p = infer::predict(&cls.model, &img, st2.config.graham)?;
                (0..NUM_CLASSES)
                    .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
                    .expect("eight classes")
            }
        };
        let map = occlusion_saliency(
            &cls.model,
            &x,
            target,
            patch,
            stride,
            DEFAULT_BASELINE,
        )
        .map_err(ServiceError::from)?;
        Ok((saliency_png(&map, &x), target))
    })
    .await?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (
                header::HeaderName::from_static("x-saliency-class"),
                Disease::ALL[target].name().to_string(),
            ),
        ],
        bytes,
    )
        .into_response())
}

#[derive(Deserialize)]
struct DecisionRequest {
    clinician_id: String,
    labels: Vec<i64>,
    agrees_with_model: bool,
    #[serde(default)]
    note: String,
}

async fn decision(
    State(st): St,
    Path(id): Path<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<Json<CaseResource>> {
    load_case(&st, &id)?;
    let Json(req) = body?;
    let lock = st.store.lock(&id);
    let _g = lock.lock().await;
    let mut case = load_case(&st, &id)?;
    if case.decision.is_some() {
        return Err(ApiError::conflict(format!(
            "case {id} is already reviewed; decisions are immutable"
        )));
    }
    if req.clinician_id.trim().is_empty() {
        return Err(ApiError::unprocessable("clinician_id must not be empty"));
    }
    let labels = LabelVector::from_ints(&req.labels).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    case.decision = Some(DecisionRecord {
        clinician_id: req.clinician_id,
        labels,
        agrees_with_model: req.agrees_with_model,
        note: req.note,
        timestamp: store::now_millis(),
    });
    case.status = CaseStatus::Reviewed;
    st.store.put(&case)?;
    tracing::info!(case_id = %id, "decision recorded");
    Ok(Json(case))
}

async fn index_info(State(st): St) -> ApiResult<Json<IndexInfo>> {
    let idx = st
        .index()
        .ok_or_else(|| ApiError::conflict("retrieval index not built"))?;
    Ok(Json(index_summary(&idx)))
}

/// Rebuilds the index from every stored case with confirmed labels (a
/// decision, or labels given at upload) and writes it to the index path.
async fn build_index(State(st): St) -> ApiResult<(StatusCode, Json<IndexInfo>)> {
    let cls = need_classifier(&st)?;
    let _g = st.index_build.lock().await;
    let st2 = Arc::clone(&st);
    let info = blocking(move || {
        let cases: Vec<(String, LabelVector)> = st2
            .store
            .list()?
            .into_iter()
            .filter_map(|c| c.confirmed_labels().map(|l| (c.case_id, l)))
            .collect();
        if cases.is_empty() {
            return Err(ApiError::unprocessable(
                "no stored case has confirmed labels to index",
            ));
        }
        let mut embs = Vec::with_capacity(cases.len());
        for (id, _) in &cases {
            let img = load_original(&st2, id)?;
            embs.push(infer::embed(&cls.model, &img, st2.config.graham)?);
        }
        let (ids, labels): (Vec<String>, Vec<LabelVector>) = cases.into_iter().unzip();
        let idx = RetrievalIndex::build(
            &embs,
            &ids,
            &labels,
            ocuscreen::explain::Metric::Euclidean,
            cls.version.clone(),
        )
        .map_err(ServiceError::from)?;
        let path = st2.index_path();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        idx.save(&path).map_err(ServiceError::from)?;
        let loaded = infer::load_index(&path)?;
        let info = index_summary(&loaded);
        st2.set_index(loaded);
        Ok(info)
    })
    .await?;
    tracing::info!(version = %info.version, size = info.size, "index rebuilt");
    Ok((StatusCode::CREATED, Json(info)))
}
