use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hitlseg::data::{concept_id, modality_id, GrayImage, ATTRIBUTES, CONCEPTS, MODALITIES};
use hitlseg::model::{Polarity, PromptPoint};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::session::Session;
use crate::AppState;

pub(crate) fn routes(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/samples", get(list_samples))
        .route("/api/sample/{id}/image", get(sample_image))
        .route("/api/predict", post(predict))
        .route("/api/session/{id}/refine", post(refine))
        .route("/api/session/{id}/reset", post(reset))
        .with_state(state)
}

struct ApiError(StatusCode, Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn bad_request(code: &str, detail: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, json!({ "error": code, "detail": detail.into() }))
}

fn internal(e: hitlseg::Error) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal", "detail": e.to_string() }))
}

fn unknown_session() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, json!({ "error": "unknown_session" }))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub id: String,
    pub concept: String,
    pub modality: String,
    pub attribute: String,
    pub group: String,
}

async fn list_samples(State(state): State<Arc<AppState>>) -> Json<Vec<SampleInfo>> {
    Json(
        state
            .samples
            .samples
            .iter()
            .map(|s| SampleInfo {
                id: s.id.clone(),
                concept: CONCEPTS[s.concept_id].to_string(),
                modality: MODALITIES[s.modality_id].to_string(),
                attribute: ATTRIBUTES[s.attribute_id].to_string(),
                group: state.groups.get(&s.concept_id).map(|g| g.name()).unwrap_or("tail").to_string(),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub w: usize,
    pub h: usize,
    pub gray_b64: String,
}

async fn sample_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ImagePayload>, ApiError> {
    let s = state
        .samples
        .get(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, json!({ "error": "unknown_sample" })))?;
    Ok(Json(ImagePayload { w: s.image.width, h: s.image.height, gray_b64: B64.encode(&s.image.pixels) }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPayload {
    pub x: i64,
    pub y: i64,
    pub polarity: Polarity,
}

fn to_points(raw: &[PointPayload], (h, w): (usize, usize)) -> Result<Vec<PromptPoint>, ApiError> {
    raw.iter()
        .map(|p| {
            if p.x < 0 || p.y < 0 || p.x as usize >= w || p.y as usize >= h {
                return Err(ApiError(
                    StatusCode::BAD_REQUEST,
                    json!({ "error": "invalid_point", "x": p.x, "y": p.y, "detail": format!("point ({}, {}) outside {w}×{h} image", p.x, p.y) }),
                ));
            }
            Ok(PromptPoint { x: p.x as usize, y: p.y as usize, polarity: p.polarity })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    #[serde(default)]
    pub sample_id: Option<String>,
    #[serde(default)]
    pub image: Option<ImagePayload>,
    /// Defaults to the sample's concept; required for uploaded images.
    #[serde(default)]
    pub concept: Option<String>,
    #[serde(default)]
    pub modality: Option<String>,
    /// Defaults to one positive point at the image centre.
    #[serde(default)]
    pub points: Option<Vec<PointPayload>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub session_id: String,
    pub mask_b64: String,
    pub u_vl: f64,
    pub fg_pixels: usize,
    pub w: usize,
    pub h: usize,
    pub point_count: usize,
}

fn respond(s: &Session) -> Json<PredictResponse> {
    Json(PredictResponse {
        session_id: s.id.clone(),
        mask_b64: B64.encode(s.mask.pack_bits()),
        u_vl: s.u_vl,
        fg_pixels: s.mask.count(),
        w: s.mask.width,
        h: s.mask.height,
        point_count: s.points.len(),
    })
}

fn lookup(state: &AppState, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
    state.purge_expired();
    let table = state.sessions.lock().expect("session table poisoned");
    table.get(id).cloned().ok_or_else(unknown_session)
}

async fn predict(State(state): State<Arc<AppState>>, Json(req): Json<PredictRequest>) -> Result<Json<PredictResponse>, ApiError> {
    let (image, default_concept, default_modality) = match (&req.sample_id, &req.image) {
        (Some(id), _) => {
            let s = state
                .samples
                .get(id)
                .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, json!({ "error": "unknown_sample" })))?;
            (s.image.clone(), Some(s.concept_id), s.modality_id)
        }
        (None, Some(img)) => {
            let pixels = B64.decode(&img.gray_b64).map_err(|e| bad_request("malformed_image", e.to_string()))?;
            if img.w < 16 || img.h < 16 || img.w % 4 != 0 || img.h % 4 != 0 || pixels.len() != img.w * img.h {
                return Err(bad_request(
                    "malformed_image",
                    format!("{} bytes for {}×{}; sides must be multiples of 4, at least 16", pixels.len(), img.w, img.h),
                ));
            }
            (GrayImage::new(img.h, img.w, pixels).map_err(|e| bad_request("malformed_image", e.to_string()))?, None, 0)
        }
        (None, None) => return Err(bad_request("missing_image", "request needs `sample_id` or `image`")),
    };
    let concept = match &req.concept {
        Some(name) => concept_id(name).ok_or_else(|| bad_request("unknown_concept", name.clone()))?,
        None => default_concept.ok_or_else(|| bad_request("unknown_concept", "uploaded images need a concept"))?,
    };
    let modality = match &req.modality {
        Some(name) => modality_id(name).ok_or_else(|| bad_request("unknown_modality", name.clone()))?,
        None => default_modality,
    };
    let size = (image.height, image.width);
    let points = match &req.points {
        Some(p) if !p.is_empty() => to_points(p, size)?,
        _ => vec![PromptPoint::positive(image.width / 2, image.height / 2)],
    };
    let id = {
        let mut n = state.next_session.lock().expect("counter poisoned");
        *n += 1;
        format!("s{:06}-{:08x}", *n, state.fingerprint)
    };
    let now = Instant::now();
    let mut session = Session {
        id: id.clone(),
        image,
        concept_id: concept,
        modality_id: modality,
        initial_points: points.clone(),
        points,
        mask: hitlseg::data::Mask::zeros(0, 0),
        u_vl: 0.0,
        created: now,
        updated: now,
    };
    session.recompute(&state.params).map_err(internal)?;
    let body = respond(&session);
    state.purge_expired();
    state.sessions.lock().expect("session table poisoned").insert(id, Arc::new(Mutex::new(session)));
    Ok(body)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    #[serde(default)]
    pub points: Vec<PointPayload>,
}

async fn refine(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<RefineRequest>,
) -> Result<Json<PredictResponse>, ApiError> {
    let handle = lookup(&state, &id)?;
    let mut s = handle.lock().expect("session poisoned");
    let pts = to_points(&req.points, (s.image.height, s.image.width))?;
    if pts.is_empty() {
        s.updated = Instant::now();
        return Ok(respond(&s));
    }
    s.points.extend(pts);
    s.recompute(&state.params).map_err(internal)?;
    Ok(respond(&s))
}

async fn reset(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<PredictResponse>, ApiError> {
    let handle = lookup(&state, &id)?;
    let mut s = handle.lock().expect("session poisoned");
    s.points = s.initial_points.clone();
    s.recompute(&state.params).map_err(internal)?;
    Ok(respond(&s))
}
