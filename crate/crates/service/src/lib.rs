//! HTTP render service: upload a session bundle once, then request
//! re-renders from any novel camera.
//!
//! Routes:
//! - `POST /sessions` multipart upload of bundle files, answers `201 {"id"}`
//! - `GET /sessions/{id}/render?yaw&pitch&roll&tz&mode` PNG with
//!   `X-Visible-Fraction` and `X-Render-Millis` headers
//! - `GET /sessions/{id}/meta` camera, resolution, available modes, limits

// `!(x > y)` comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderName, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use serde::Serialize;
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use persview::io::bundle::MANIFEST_NAME;
use persview::io::{load_bundle_from, png, SessionBundle};
use persview::pipeline::{render_view, PipelineError, PipelineParams, Prebuilt, RenderMode};
use persview::view::{DistanceChange, ViewDelta, MAX_ANGLE_DEG};

pub use crate::error::ApiError;

pub const VISIBLE_FRACTION_HEADER: &str = "x-visible-fraction";
pub const RENDER_MILLIS_HEADER: &str = "x-render-millis";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Sessions kept in memory; the least recently used one is dropped.
    pub max_sessions: usize,
    /// Encoded renders kept per service.
    pub render_cache: usize,
    pub params: PipelineParams,
    /// Allowed CORS origins; empty allows any.
    pub allowed_origins: Vec<String>,
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_sessions: 16,
            render_cache: 64,
            params: PipelineParams::default(),
            allowed_origins: Vec::new(),
            max_upload_bytes: 256 << 20,
        }
    }
}

pub struct Session {
    pub id: String,
    pub bundle: SessionBundle,
    pub prebuilt: Prebuilt,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RenderKey {
    session: String,
    yaw: u64,
    pitch: u64,
    roll: u64,
    distance: String,
    mode: RenderMode,
}

struct Rendered {
    png: Bytes,
    visible_fraction: f64,
}

pub struct AppState {
    config: ServiceConfig,
    sessions: Mutex<LruCache<String, Arc<Session>>>,
    renders: Mutex<LruCache<RenderKey, Arc<Rendered>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let cap = |n: usize| NonZeroUsize::new(n.max(1)).expect("positive");
        Arc::new(Self {
            sessions: Mutex::new(LruCache::new(cap(config.max_sessions))),
            renders: Mutex::new(LruCache::new(cap(config.render_cache))),
            config,
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .lock()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`")))
    }

    /// Largest accepted yaw or pitch: beyond the culling threshold a
    /// surface facing the original camera is culled entirely.
    pub fn max_tilt_deg(&self) -> f64 {
        self.config.params.cull_deg.min(MAX_ANGLE_DEG)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let origins = if state.config.allowed_origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(state.config.allowed_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    let cors = CorsLayer::new()
        .allow_origin(origins)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([
            HeaderName::from_static(VISIBLE_FRACTION_HEADER),
            HeaderName::from_static(RENDER_MILLIS_HEADER),
        ]);
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id/render", get(render))
        .route("/sessions/:id/meta", get(meta))
        .layer(DefaultBodyLimit::max(state.config.max_upload_bytes))
        .layer(cors)
        .with_state(state)
}

/// Last path segment, so directory uploads that send `dir/file.png` match
/// the manifest's plain names.
fn member_name(raw: &str) -> &str {
    raw.rsplit(['/', '\\']).next().unwrap_or(raw)
}

async fn create_session(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> Result<Response, ApiError> {
    let mut files: HashMap<String, Vec<u8>> = HashMap::new();
    while let Some(field) = multipart.next_field().await.map_err(ApiError::upload)? {
        let name = field.file_name().or(field.name()).map(|n| member_name(n).to_string());
        let Some(name) = name.filter(|n| !n.is_empty()) else {
            return Err(ApiError::bad_request("bad_upload", None, "every part needs a file name"));
        };
        let bytes = field.bytes().await.map_err(ApiError::upload)?;
        files.insert(name, bytes.to_vec());
    }
    let state2 = state.clone();
    let session = tokio::task::spawn_blocking(move || -> Result<Session, ApiError> {
        let manifest = files.get(MANIFEST_NAME).ok_or_else(|| ApiError::bundle(persview::io::BundleError::MissingManifest))?;
        let bundle = load_bundle_from(manifest, |name| files.get(name).cloned()).map_err(ApiError::bundle)?;
        let prebuilt = Prebuilt::new(&bundle, &state2.config.params.bilateral).map_err(|e| {
            let member = if matches!(e, PipelineError::Camera(_)) { "camera" } else { "depth" };
            ApiError::bad_request("invalid_bundle", Some(member), e)
        })?;
        Ok(Session {
            id: uuid::Uuid::new_v4().simple().to_string(),
            bundle,
            prebuilt,
        })
    })
    .await
    .map_err(ApiError::internal)??;
    let id = session.id.clone();
    state.sessions.lock().expect("session lock").put(id.clone(), Arc::new(session));
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

fn parse_angle(query: &HashMap<String, String>, name: &'static str, limit: f64) -> Result<f64, ApiError> {
    let Some(raw) = query.get(name) else { return Ok(0.0) };
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| ApiError::unprocessable(name, format!("{name} must be a number, got `{raw}`")))?;
    if !(v.abs() <= limit) {
        return Err(ApiError::unprocessable(name, format!("{name} = {v} is outside [-{limit}, {limit}]")));
    }
    Ok(v)
}

fn parse_view(query: &HashMap<String, String>, max_tilt: f64) -> Result<(ViewDelta, RenderMode), ApiError> {
    let distance = match query.get("tz") {
        None => DistanceChange::Keep,
        Some(raw) => raw.parse().map_err(|e: String| ApiError::unprocessable("tz", e))?,
    };
    let mode = match query.get("mode") {
        None => RenderMode::Warped,
        Some(raw) => raw.parse().map_err(|e: String| ApiError::unprocessable("mode", e))?,
    };
    let delta = ViewDelta {
        yaw_deg: parse_angle(query, "yaw", max_tilt)?,
        pitch_deg: parse_angle(query, "pitch", max_tilt)?,
        roll_deg: parse_angle(query, "roll", MAX_ANGLE_DEG)?,
        distance,
    };
    delta.validate().map_err(|e| ApiError::unprocessable("tz", e))?;
    Ok((delta, mode))
}

async fn render(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let start = Instant::now();
    let session = state.session(&id)?;
    let (delta, mode) = parse_view(&query, state.max_tilt_deg())?;
    if mode.needs_generated() && session.bundle.generated.is_none() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "missing_generated",
            format!("mode `{mode}` needs the `generated` member, which this session lacks"),
        )
        .with_member("generated"));
    }
    let key = RenderKey {
        session: id,
        yaw: delta.yaw_deg.to_bits(),
        pitch: delta.pitch_deg.to_bits(),
        roll: delta.roll_deg.to_bits(),
        distance: format!("{:?}", delta.distance),
        mode,
    };
    let cached = state.renders.lock().expect("render lock").get(&key).cloned();
    let rendered = match cached {
        Some(r) => r,
        None => {
            let params = state.config.params;
            let r = tokio::task::spawn_blocking(move || -> Result<Rendered, ApiError> {
                let s = &session;
                let view = render_view(&s.bundle, &s.prebuilt, &delta, &params, mode == RenderMode::Blended).map_err(ApiError::pipeline)?;
                let img = view.image(mode, &s.bundle).map_err(ApiError::pipeline)?;
                let png = png::encode_rgb(&img).map_err(ApiError::internal)?;
                Ok(Rendered {
                    png: Bytes::from(png),
                    visible_fraction: view.visible_fraction,
                })
            })
            .await
            .map_err(ApiError::internal)??;
            let r = Arc::new(r);
            state.renders.lock().expect("render lock").put(key, r.clone());
            r
        }
    };
    let millis = start.elapsed().as_millis().to_string();
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (HeaderName::from_static(VISIBLE_FRACTION_HEADER), format!("{:.4}", rendered.visible_fraction)),
            (HeaderName::from_static(RENDER_MILLIS_HEADER), millis),
        ],
        rendered.png.clone(),
    )
        .into_response())
}

#[derive(Serialize)]
struct Limits {
    yaw_deg: f64,
    pitch_deg: f64,
    roll_deg: f64,
}

async fn meta(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = state.session(&id)?;
    let modes: Vec<&str> = RenderMode::ALL
        .into_iter()
        .filter(|m| !m.needs_generated() || s.bundle.generated.is_some())
        .map(RenderMode::name)
        .collect();
    let (w, h) = s.bundle.dims();
    let tilt = state.max_tilt_deg();
    Ok(Json(json!({
        "id": s.id,
        "camera": s.bundle.camera,
        "resolution": { "width": w, "height": h },
        "modes": modes,
        "has_matte": s.bundle.matte.is_some(),
        "pivot": [s.prebuilt.pivot.x, s.prebuilt.pivot.y, s.prebuilt.pivot.z],
        "reparam": s.prebuilt.reparam,
        "limits": Limits { yaw_deg: tilt, pitch_deg: tilt, roll_deg: MAX_ANGLE_DEG },
    }))
    .into_response())
}
