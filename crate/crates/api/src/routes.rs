//! Router and handlers.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use leafscan_core::detector::Detection;
use leafscan_core::image::decode_ppm;
use leafscan_core::kb::{CropEntry, DiseaseEntry, KnowledgeBase, Resolution};
use leafscan_core::model::Model;
use leafscan_core::pipeline::{diagnose, DetectOptions, Diagnosis, LabelProbability};
use serde::Serialize;
use serde_json::Value;

use crate::error::ApiError;
use crate::requests::{validate_new_request, FieldErrors, RequestKind, ServiceRequest};
use crate::store::RequestStore;

pub const DEFAULT_K: usize = 3;

/// Everything a handler can see. Model and KB are immutable; the request
/// store has a single writer behind the mutex.
pub struct AppState {
    pub model: Model,
    pub model_crc: u32,
    pub kb: KnowledgeBase,
    pub store: Mutex<RequestStore>,
    pub detect: DetectOptions,
    pub max_body_bytes: usize,
}

impl AppState {
    pub fn model_version(&self) -> String {
        format!("{:08x}", self.model_crc)
    }

    fn store(&self) -> MutexGuard<'_, RequestStore> {
        // A panic while holding the lock cannot leave a half-applied record:
        // memory is only updated after the append succeeds.
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub type SharedState = Arc<AppState>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/api/diagnose", post(handle_diagnose))
        .route("/api/kb/crops", get(kb_crops))
        .route("/api/kb/diseases", get(kb_search))
        .route("/api/kb/diseases/{id}", get(kb_disease))
        .route("/api/requests", post(create_request).get(list_requests))
        .route("/api/requests/{id}", get(get_request))
        .route("/api/requests/{id}/close", post(close_request))
        .fallback(|| async { ApiError::not_found("no such route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this route")
        })
        .with_state(state)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    model_version: String,
    kb_version: i64,
}

async fn health(State(s): State<SharedState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        model_version: s.model_version(),
        kb_version: s.kb.version(),
    })
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DiseaseVerdict {
    Mapped { label: String, entry: DiseaseEntry },
    Healthy { label: String },
    Unmapped { label: String },
}

#[derive(Debug, Serialize)]
pub struct DiagnosisResponse {
    pub detections: Vec<Detection>,
    pub top_k: Vec<LabelProbability>,
    pub disease: DiseaseVerdict,
    pub model_version: String,
}

impl DiseaseVerdict {
    pub fn resolve(kb: &KnowledgeBase, label: &str) -> Self {
        let label = label.to_string();
        match kb.resolve_label(&label) {
            Resolution::Disease(entry) => Self::Mapped {
                entry: entry.clone(),
                label,
            },
            Resolution::Healthy => Self::Healthy { label },
            Resolution::Unmapped => Self::Unmapped { label },
        }
    }
}

impl DiagnosisResponse {
    /// Joins a pipeline result with the KB entry for its top label.
    pub fn new(diagnosis: Diagnosis, kb: &KnowledgeBase, model_crc: u32) -> Self {
        let disease = DiseaseVerdict::resolve(kb, &diagnosis.best().label);
        Self {
            detections: diagnosis.detections,
            top_k: diagnosis.top_k,
            disease,
            model_version: format!("{model_crc:08x}"),
        }
    }
}

fn parse_k(query: &BTreeMap<String, String>, classes: usize) -> Result<usize, ApiError> {
    let k = match query.get("k") {
        None => DEFAULT_K.min(classes),
        Some(raw) => raw
            .parse::<usize>()
            .map_err(|_| ApiError::bad_request("invalid_k", format!("k must be an integer in [1, {classes}]")))?,
    };
    if k == 0 || k > classes {
        return Err(ApiError::bad_request("invalid_k", format!("k = {k} is outside [1, {classes}]")));
    }
    Ok(k)
}

async fn read_limited(headers: &HeaderMap, body: Body, limit: usize) -> Result<Bytes, ApiError> {
    let too_large = || {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("body exceeds {limit} bytes"),
        )
    };
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > limit as u64) {
        return Err(too_large());
    }
    to_bytes(body, limit).await.map_err(|_| too_large())
}

async fn handle_diagnose(
    State(s): State<SharedState>,
    Query(query): Query<BTreeMap<String, String>>,
    headers: HeaderMap,
    body: Body,
) -> Result<Json<DiagnosisResponse>, ApiError> {
    let bytes = read_limited(&headers, body, s.max_body_bytes).await?;
    let k = parse_k(&query, s.model.labels().len())?;
    let image = decode_ppm(&bytes).map_err(|e| ApiError::bad_request("bad_image", e.to_string()))?;
    let state = Arc::clone(&s);
    let diagnosis = tokio::task::spawn_blocking(move || diagnose(&state.model, &image, k, &state.detect))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(DiagnosisResponse::new(diagnosis, &s.kb, s.model_crc)))
}

async fn kb_crops(State(s): State<SharedState>) -> Json<Vec<CropEntry>> {
    Json(s.kb.crops().to_vec())
}

async fn kb_search(
    State(s): State<SharedState>,
    Query(query): Query<BTreeMap<String, String>>,
) -> Json<Vec<DiseaseEntry>> {
    let q = query.get("query").map(String::as_str).unwrap_or("");
    Json(s.kb.search(q).into_iter().cloned().collect())
}

async fn kb_disease(State(s): State<SharedState>, Path(id): Path<String>) -> Result<Json<DiseaseEntry>, ApiError> {
    s.kb
        .disease(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("disease '{id}' not found")))
}

fn parse_id(raw: &str) -> Result<u64, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::not_found(format!("request '{raw}' not found")))
}

async fn create_request(State(s): State<SharedState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let value: Value = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request("invalid_json", format!("body is not valid JSON: {e}")))?;
    let payload = validate_new_request(&value).map_err(ApiError::validation)?;
    let record = s.store().create(payload)?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn list_requests(
    State(s): State<SharedState>,
    Query(query): Query<BTreeMap<String, String>>,
) -> Result<Json<Vec<ServiceRequest>>, ApiError> {
    let kind = match query.get("kind").map(String::as_str) {
        None | Some("") => None,
        Some(raw) => Some(RequestKind::parse(raw).ok_or_else(|| {
            let mut fields = FieldErrors::new();
            fields.insert(
                "kind".into(),
                "must be one of expert_contact, product_order, loan_application".into(),
            );
            ApiError::validation(fields)
        })?),
    };
    Ok(Json(s.store().list(kind).into_iter().cloned().collect()))
}

async fn get_request(State(s): State<SharedState>, Path(id): Path<String>) -> Result<Json<ServiceRequest>, ApiError> {
    let id = parse_id(&id)?;
    s.store()
        .get(id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("request {id} not found")))
}

async fn close_request(State(s): State<SharedState>, Path(id): Path<String>) -> Result<Json<ServiceRequest>, ApiError> {
    let id = parse_id(&id)?;
    Ok(Json(s.store().close(id)?))
}
