//! HTTP facade over estimate and render.
//!
//! | route            | body                                   | response                 |
//! |------------------|----------------------------------------|--------------------------|
//! | `GET /`          |                                        | demo page                |
//! | `GET /health`    |                                        | status and model version |
//! | `POST /estimate` | `image`, `geometry`, `target`          | parameters, crop, version|
//! | `POST /render`   | `image`, `geometry`, `params`, `target`, `user_intensity` | PNG   |
//!
//! Bodies are either JSON (images as base64 PNG, geometry and params as
//! nested objects) or multipart with one part per field (images as raw PNG,
//! geometry and params as JSON text).

use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use makeup_core::encoder::estimate_with_crop;
use makeup_core::renderer::render_image;
use makeup_core::{Error as CoreError, FaceGeometry, GraphicsParams, ImageBuffer, RegressorModel, RenderOptions, Target};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower::limit::ConcurrencyLimitLayer;

/// Largest accepted image, in pixels.
pub const MAX_PIXELS: usize = 4096 * 4096;
/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 160 * 1024 * 1024;

const INDEX_HTML: &str = include_str!("index.html");

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: String,
    pub port: u16,
    pub max_inflight: usize,
}

struct AppState {
    model: RegressorModel,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn too_large(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::ParamOutOfRange { .. }
            | CoreError::NormalizedOutOfRange { .. }
            | CoreError::InvalidGeometry(_)
            | CoreError::NoRegion
            | CoreError::DimensionMismatch { .. }
            | CoreError::InvalidArgument(_)
            | CoreError::Image(_)
            | CoreError::Json(_) => ApiError::bad_request(e.to_string()),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBody {
    image: String,
    geometry: FaceGeometry,
    #[serde(default)]
    target: Option<Target>,
    #[serde(default)]
    params: Option<GraphicsParams>,
    #[serde(default)]
    user_intensity: Option<f64>,
}

/// Fields shared by both request kinds, decoded and validated.
struct Fields {
    image: ImageBuffer,
    geometry: FaceGeometry,
    target: Target,
    params: Option<GraphicsParams>,
    user_intensity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateResponse {
    pub params: GraphicsParams,
    /// The crop the model saw, base64 PNG.
    pub crop_png: String,
    pub model_version: String,
}

fn decode_image(bytes: &[u8]) -> ApiResult<ImageBuffer> {
    let (w, h) = ImageBuffer::png_dimensions(bytes).map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
    if w.saturating_mul(h) > MAX_PIXELS {
        return Err(ApiError::too_large(format!("image is {w}x{h}; at most {MAX_PIXELS} pixels accepted")));
    }
    ImageBuffer::decode_png(bytes).map_err(|e| ApiError::bad_request(format!("image: {e}")))
}

fn is_multipart(req: &Request) -> bool {
    req.headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"))
}

fn body_error(status: StatusCode, text: String) -> ApiError {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::too_large(text)
    } else {
        ApiError::bad_request(text)
    }
}

async fn read_fields(req: Request) -> ApiResult<Fields> {
    let (image, geometry, target, params, user_intensity) = if is_multipart(&req) {
        let mut mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| body_error(e.status(), e.body_text()))?;
        let (mut image, mut geometry, mut target, mut params, mut intensity) = (None, None, None, None, None);
        while let Some(field) = mp.next_field().await.map_err(|e| body_error(e.status(), e.body_text()))? {
            let name = field.name().unwrap_or_default().to_string();
            let data = field.bytes().await.map_err(|e| body_error(e.status(), e.body_text()))?;
            let text = || std::str::from_utf8(&data).map_err(|_| ApiError::bad_request(format!("{name}: not UTF-8")));
            match name.as_str() {
                "image" => image = Some(data.to_vec()),
                "geometry" => {
                    geometry = Some(serde_json::from_str(text()?).map_err(|e| ApiError::bad_request(format!("geometry: {e}")))?)
                }
                "params" => {
                    params = Some(serde_json::from_str(text()?).map_err(|e| ApiError::bad_request(format!("params: {e}")))?)
                }
                "target" => target = Some(text()?.trim().parse().map_err(|e: CoreError| ApiError::bad_request(e.to_string()))?),
                "user_intensity" => {
                    intensity = Some(
                        text()?
                            .trim()
                            .parse::<f64>()
                            .map_err(|e| ApiError::bad_request(format!("user_intensity: {e}")))?,
                    )
                }
                other => return Err(ApiError::bad_request(format!("unknown field `{other}`"))),
            }
        }
        (
            image.ok_or_else(|| ApiError::bad_request("missing field `image`"))?,
            geometry.ok_or_else(|| ApiError::bad_request("missing field `geometry`"))?,
            target,
            params,
            intensity,
        )
    } else {
        let bytes = Bytes::from_request(req, &())
            .await
            .map_err(|e| body_error(e.status(), e.body_text()))?;
        let body: JsonBody = serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request(format!("body: {e}")))?;
        let image = B64
            .decode(body.image.as_bytes())
            .map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
        (image, body.geometry, body.target, body.params, body.user_intensity)
    };
    let image = decode_image(&image)?;
    geometry.check_matches(&image)?;
    Ok(Fields {
        image,
        geometry,
        target: target.unwrap_or(Target::Lips),
        params,
        user_intensity: user_intensity.unwrap_or(1.0),
    })
}

/// Runs CPU-bound work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_version": state.model.tag(),
        "service_version": env!("CARGO_PKG_VERSION"),
    }))
}

async fn estimate(State(state): State<Arc<AppState>>, req: Request) -> ApiResult<Json<EstimateResponse>> {
    let f = read_fields(req).await?;
    if f.params.is_some() || f.user_intensity != 1.0 {
        return Err(ApiError::bad_request("estimate takes only image, geometry and target"));
    }
    blocking(move || {
        let (params, crop) = estimate_with_crop(&state.model, &f.image, &f.geometry, f.target)?;
        Ok(Json(EstimateResponse {
            params,
            crop_png: B64.encode(crop.encode_png()?),
            model_version: state.model.tag().to_string(),
        }))
    })
    .await
}

async fn render(req: Request) -> ApiResult<Response> {
    let f = read_fields(req).await?;
    let params = f.params.ok_or_else(|| ApiError::bad_request("missing field `params`"))?;
    let png = blocking(move || {
        let opts = RenderOptions {
            user_intensity: f.user_intensity,
            ..RenderOptions::new(f.target)
        };
        Ok(render_image(&f.image, &f.geometry, &params, &opts)?.encode_png()?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], Body::from(png)).into_response())
}

async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let start = Instant::now();
    let resp = next.run(req).await;
    log::info!(
        "method={method} path={path} status={} ms={:.2}",
        resp.status().as_u16(),
        start.elapsed().as_secs_f64() * 1e3
    );
    resp
}

async fn fallback() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        message: "no such route".into(),
    }
}

/// The service's routes, ready to be served or driven directly in tests.
pub fn router(model: RegressorModel, max_inflight: usize) -> Router {
    let state = Arc::new(AppState { model });
    Router::new()
        .route("/", get(index))
        .route("/health", get(health))
        .route("/estimate", post(estimate))
        .route("/render", post(render))
        .fallback(fallback)
        .with_state(state)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(ConcurrencyLimitLayer::new(max_inflight.max(1)))
        .layer(middleware::from_fn(log_request))
}

pub async fn serve(model: RegressorModel, config: ServeConfig) -> anyhow::Result<()> {
    let addr = format!("{}:{}", config.bind, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!(
        "listening on {} with model {} (max {} in flight)",
        listener.local_addr()?,
        model.tag(),
        config.max_inflight
    );
    axum::serve(listener, router(model, config.max_inflight))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
