//! HTTP layer: JSON endpoints over a shared [`ReviewState`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use circlefuse::fusion::{ColorMap, FusedDetection};
use circlefuse::geojson_io::export_with_ids;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::RwLock;

use crate::state::{EditError, EditOp, Filter, ItemView, ReviewState, Status};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self { status, error: error.into(), field: None }
    }

    fn field(field: &str, error: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, error: error.into(), field: Some(field.to_string()) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<EditError> for ApiError {
    fn from(e: EditError) -> Self {
        let status = match e {
            EditError::NotFound(_) => StatusCode::NOT_FOUND,
            EditError::Invalid(_) => StatusCode::BAD_REQUEST,
            EditError::Conflict { .. } => StatusCode::CONFLICT,
        };
        Self::new(status, e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct BackgroundImage {
    pub bytes: Bytes,
    pub content_type: &'static str,
}

impl BackgroundImage {
    /// Reads a PNG or JPEG file, identified by its magic bytes.
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        let content_type = if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            "image/png"
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            "image/jpeg"
        } else {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: not a PNG or JPEG image", path.display()),
            ));
        };
        Ok(Self { bytes: bytes.into(), content_type })
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub slide_id: String,
    /// Level-0 dimensions; derived from the detections' extent when unset.
    pub width: Option<u64>,
    pub height: Option<u64>,
    pub image: Option<BackgroundImage>,
    /// Level-0 pixels per background-image pixel.
    pub downsample: f64,
    /// Export target; the edit log is written next to it as `<stem>.edits.json`.
    pub export_geojson: PathBuf,
    pub token: Option<String>,
    pub colors: ColorMap,
}

impl ServiceConfig {
    pub fn new(slide_id: impl Into<String>, export_geojson: impl Into<PathBuf>) -> Self {
        Self {
            slide_id: slide_id.into(),
            width: None,
            height: None,
            image: None,
            downsample: 1.0,
            export_geojson: export_geojson.into(),
            token: None,
            colors: ColorMap::default(),
        }
    }

    pub fn edit_log_path(&self) -> PathBuf {
        self.export_geojson.with_extension("edits.json")
    }
}

pub struct App {
    cfg: ServiceConfig,
    state: RwLock<ReviewState>,
    /// Serializes exports so two requests never interleave file writes.
    export_lock: tokio::sync::Mutex<()>,
}

impl App {
    pub fn new(cfg: ServiceConfig, fused: Vec<FusedDetection>) -> Arc<Self> {
        let state = ReviewState::new(fused, cfg.colors.clone());
        Arc::new(Self { cfg, state: RwLock::new(state), export_lock: tokio::sync::Mutex::new(()) })
    }

    pub async fn snapshot(&self) -> ReviewState {
        self.state.read().await.clone()
    }

    pub async fn apply(&self, op: EditOp) -> Result<ItemView, EditError> {
        self.state.write().await.apply(op)
    }

    /// Writes the current state as GeoJSON plus the edit log.
    pub async fn export(&self, include_rejected: bool) -> Result<ExportResult, ApiError> {
        let _guard = self.export_lock.lock().await;
        let (doc, log, features) = {
            let state = self.state.read().await;
            let items = state.exportable(include_rejected);
            let doc = export_with_ids(items.iter().map(|it| (Some(it.id.as_str()), &it.fused)), &self.cfg.slide_id);
            (doc, state.edit_log(), items.len())
        };
        let geojson = self.cfg.export_geojson.clone();
        let edit_log = self.cfg.edit_log_path();
        let io = |p: &Path, e: std::io::Error| {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", p.display()))
        };
        if let Some(dir) = geojson.parent().filter(|d| !d.as_os_str().is_empty()) {
            tokio::fs::create_dir_all(dir).await.map_err(|e| io(dir, e))?;
        }
        write_atomic(&geojson, serde_json::to_vec_pretty(&doc).expect("geojson serializes"))
            .await
            .map_err(|e| io(&geojson, e))?;
        write_atomic(&edit_log, serde_json::to_vec_pretty(&log).expect("edit log serializes"))
            .await
            .map_err(|e| io(&edit_log, e))?;
        Ok(ExportResult { geojson, edit_log, features, include_rejected })
    }

    fn dimensions(&self, state: &ReviewState) -> (u64, u64) {
        let extent = |f: fn(&FusedDetection) -> f64| {
            state.items().iter().map(|it| f(&it.fused)).fold(0.0f64, f64::max).ceil() as u64
        };
        (
            self.cfg.width.unwrap_or_else(|| extent(|f| f.circle.cx + f.circle.r)),
            self.cfg.height.unwrap_or_else(|| extent(|f| f.circle.cy + f.circle.r)),
        )
    }
}

async fn write_atomic(path: &Path, bytes: Vec<u8>) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    tokio::fs::write(&tmp, bytes).await?;
    tokio::fs::rename(&tmp, path).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportResult {
    pub geojson: PathBuf,
    pub edit_log: PathBuf,
    pub features: usize,
    pub include_rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideResponse {
    pub slide_id: String,
    pub width: u64,
    pub height: u64,
    pub counts: std::collections::BTreeMap<String, usize>,
    pub total: usize,
    pub image_available: bool,
    pub downsample: f64,
    pub edits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsResponse {
    pub count: usize,
    pub detections: Vec<ItemView>,
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/api/slide", get(slide))
        .route("/api/detections", get(detections))
        .route("/api/detections/{id}", get(detection))
        .route("/api/edits", post(edits))
        .route("/api/export", post(export))
        .route("/api/image", get(image))
        .route_layer(middleware::from_fn_with_state(app.clone(), auth))
        .with_state(app)
}

async fn auth(State(app): State<Arc<App>>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &app.cfg.token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn slide(State(app): State<Arc<App>>) -> Json<SlideResponse> {
    let state = app.state.read().await;
    let (width, height) = app.dimensions(&state);
    let counts = state.category_counts();
    Json(SlideResponse {
        slide_id: app.cfg.slide_id.clone(),
        width,
        height,
        total: counts.values().sum(),
        counts,
        image_available: app.cfg.image.is_some(),
        downsample: app.cfg.downsample,
        edits: state.log().len(),
    })
}

fn parse_filter(q: &HashMap<String, String>) -> Result<Filter, ApiError> {
    fn num<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>, ApiError> {
        match q.get(key).map(|s| s.trim()) {
            None | Some("") => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| ApiError::field(key, format!("`{key}` is not a valid number: `{s}`"))),
        }
    }
    let min_score: Option<f64> = num(q, "min_score")?;
    if let Some(s) = min_score {
        if !s.is_finite() {
            return Err(ApiError::field("min_score", "`min_score` must be finite"));
        }
    }
    let status = match q.get("status").map(|s| s.trim()) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<Status>().map_err(|e| ApiError::field("status", e))?),
    };
    Ok(Filter { min_count: num(q, "min_count")?, max_count: num(q, "max_count")?, min_score, status })
}

async fn detections(
    State(app): State<Arc<App>>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<DetectionsResponse>, ApiError> {
    let filter = parse_filter(&q)?;
    let state = app.state.read().await;
    let detections: Vec<ItemView> = state.filtered(&filter).into_iter().map(ItemView::from).collect();
    Ok(Json(DetectionsResponse { count: detections.len(), detections }))
}

async fn detection(State(app): State<Arc<App>>, UrlPath(id): UrlPath<String>) -> Result<Json<ItemView>, ApiError> {
    let state = app.state.read().await;
    state
        .get(&id)
        .map(|it| Json(ItemView::from(it)))
        .ok_or_else(|| EditError::NotFound(id).into())
}

async fn edits(State(app): State<Arc<App>>, body: Bytes) -> Result<Json<ItemView>, ApiError> {
    let op: EditOp = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid edit op: {e}")))?;
    Ok(Json(app.apply(op).await?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExportRequest {
    include_rejected: bool,
}

async fn export(State(app): State<Arc<App>>, body: Bytes) -> Result<Json<ExportResult>, ApiError> {
    let req: ExportRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ExportRequest::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid export request: {e}")))?
    };
    Ok(Json(app.export(req.include_rejected).await?))
}

async fn image(State(app): State<Arc<App>>) -> Response {
    match &app.cfg.image {
        Some(img) => ([(header::CONTENT_TYPE, img.content_type)], img.bytes.clone()).into_response(),
        None => ApiError::new(StatusCode::NOT_FOUND, "no background image configured").into_response(),
    }
}

/// Serves until `shutdown` resolves, then exports the reviewed state.
pub async fn serve(
    app: Arc<App>,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<ExportResult> {
    axum::serve(listener, router(app.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    app.export(false)
        .await
        .map_err(|e| std::io::Error::other(e.error))
}
