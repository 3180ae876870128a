//! HTTP frame service: lists scenes and renders frames on demand at any
//! continuous detail level.
//!
//! Endpoints: `GET /health`, `GET /scenes`, `POST /render`. All responses
//! carry permissive CORS headers for a locally served viewer.

pub mod api;
pub mod catalog;
pub mod error;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use clod_core::render;
use tower_http::cors::CorsLayer;

pub use api::{CameraSpec, FrameResponse, Health, Intrinsics, ModeSpec, RenderRequest, DEFAULT_MAX_PIXELS};
pub use catalog::{Catalog, SceneError, SceneInfo, SceneList};
pub use error::{ApiError, StartupError};

pub const DEFAULT_PORT: u16 = 7878;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub scenes_dir: PathBuf,
    pub max_pixels: usize,
}

#[derive(Clone, Debug)]
pub struct AppState {
    catalog: Arc<Catalog>,
    max_pixels: usize,
}

impl AppState {
    pub fn new(catalog: Catalog, max_pixels: usize) -> Self {
        Self {
            catalog: Arc::new(catalog),
            max_pixels,
        }
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, StartupError> {
        Ok(Self::new(Catalog::load(&cfg.scenes_dir)?, cfg.max_pixels))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenes", get(scenes))
        .route("/render", post(render_frame))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<(), StartupError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| StartupError::Bind {
            addr: addr.to_string(),
            source,
        })?;
    axum::serve(listener, router(state)).await.map_err(StartupError::Serve)
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn scenes(State(state): State<AppState>) -> Json<SceneList> {
    Json(state.catalog.list().clone())
}

/// Renders one frame; JSON with a base64 PNG, or the PNG itself with stats
/// in `x-clod-*` headers when the client accepts `image/png`.
async fn render_frame(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::InvalidRequest(format!("bad request body: {e}")))?;
    let scene = state
        .catalog
        .get(&req.scene)
        .ok_or_else(|| ApiError::UnknownScene(req.scene.clone()))?;
    let (camera, mode) = req.resolve(state.max_pixels, scene.len())?;
    let (png, art, ms) = tokio::task::spawn_blocking(move || {
        let t = Instant::now();
        let art = render(&scene, &camera, &mode).map_err(|e| ApiError::RenderFailed(e.to_string()))?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        let png = art
            .image
            .encode_png()
            .map_err(|e| ApiError::RenderFailed(e.to_string()))?;
        Ok::<_, ApiError>((png, art, ms))
    })
    .await
    .map_err(|e| ApiError::RenderFailed(e.to_string()))??;

    let wants_png = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("image/png"));
    if wants_png {
        let mut resp = Response::new(Body::from(png));
        let h = resp.headers_mut();
        h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
        for (name, value) in [
            ("x-clod-rendered-count", art.rendered_count.to_string()),
            ("x-clod-total", art.total.to_string()),
            ("x-clod-eta", art.rendered_ratio.to_string()),
            ("x-clod-render-ms", format!("{ms:.3}")),
        ] {
            h.insert(name, HeaderValue::from_str(&value).expect("numeric header"));
        }
        return Ok(resp);
    }
    Ok(Json(FrameResponse {
        image_png: base64::engine::general_purpose::STANDARD.encode(png),
        width: req.width,
        height: req.height,
        rendered_count: art.rendered_count,
        n_total: art.total,
        eta_actual: art.rendered_ratio,
        render_ms: ms,
        request: req,
    })
    .into_response())
}
