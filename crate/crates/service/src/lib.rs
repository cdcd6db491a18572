//! HTTP backend for the model explorer.
//!
//! Endpoints:
//!
//! | method | path                   | purpose                                    |
//! |--------|------------------------|--------------------------------------------|
//! | GET    | `/api/health`          | liveness and catalog size                  |
//! | GET    | `/api/models`          | catalog entries, one per valid checkpoint  |
//! | GET    | `/api/models/invalid`  | checkpoint files that failed to load       |
//! | POST   | `/api/images`          | raw or multipart upload, content-addressed |
//! | POST   | `/api/lens`            | synchronous activation grid                |
//! | POST   | `/api/filters`         | queue a filter-synthesis job               |
//! | GET    | `/api/jobs/{id}`       | job record                                 |
//! | GET    | `/api/artifacts/{id}`  | PNG or CSV bytes                           |
//!
//! Anything else is served from the static directory when one is configured.

pub mod catalog;
pub mod error;
pub mod jobs;
pub mod store;

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use http_body_util::{BodyExt, LengthLimitError, Limited};
use nanolens::viz::extract_activations;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub use catalog::{Catalog, CatalogDiagnostic, LayerRow, ModelCatalogEntry};
pub use error::{ApiError, ApiResult, ErrorBody};
pub use jobs::{FilterRequest, JobArtifacts, JobKind, JobQueue, JobRecord, JobState};
pub use store::{ArtifactKind, ArtifactStore, ImageStore};

pub const DEFAULT_MAX_UPLOAD: usize = 32 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub ckpt_dir: PathBuf,
    /// Artifacts and uploaded originals live under this directory.
    pub data_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub workers: usize,
    pub max_upload_bytes: usize,
}

impl ServiceConfig {
    pub fn new(ckpt_dir: impl Into<PathBuf>, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            ckpt_dir: ckpt_dir.into(),
            data_dir: data_dir.into(),
            static_dir: None,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
        }
    }
}

pub struct AppState {
    pub catalog: Catalog,
    pub images: ImageStore,
    pub artifacts: ArtifactStore,
    pub jobs: JobQueue,
    pub max_upload_bytes: usize,
}

impl AppState {
    /// Load the catalog and open the on-disk stores. Fails when the
    /// checkpoint directory cannot be read.
    pub fn open(cfg: &ServiceConfig) -> std::io::Result<Self> {
        let catalog = Catalog::load(&cfg.ckpt_dir)?;
        let artifacts = ArtifactStore::open(cfg.data_dir.join("artifacts"))?;
        Ok(Self {
            catalog,
            images: ImageStore::open(cfg.data_dir.join("images"))?,
            jobs: JobQueue::new(cfg.workers, artifacts.clone()),
            artifacts,
            max_upload_bytes: cfg.max_upload_bytes,
        })
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared, static_dir: Option<PathBuf>) -> Router {
    // Multipart framing adds a little on top of the file itself.
    let body_limit = state.max_upload_bytes.saturating_add(64 * 1024);
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/models", get(models))
        .route("/api/models/invalid", get(invalid_models))
        .route("/api/images", post(upload_image))
        .route("/api/lens", post(lens))
        .route("/api/filters", post(submit_filters))
        .route("/api/jobs/{id}", get(job))
        .route("/api/artifacts/{id}", get(artifact))
        .route("/api/{*rest}", get(api_not_found).post(api_not_found))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn api_not_found(Path(rest): Path<String>) -> ApiError {
    ApiError::not_found("endpoint", &format!("/api/{rest}"))
}

async fn health(State(state): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "version": nanolens::VERSION,
        "models": state.catalog.models.len(),
        "invalid_models": state.catalog.invalid.len(),
    }))
}

async fn models(State(state): State<Shared>) -> Json<Vec<ModelCatalogEntry>> {
    Json(state.catalog.models.values().map(|m| m.entry.clone()).collect())
}

async fn invalid_models(State(state): State<Shared>) -> Json<Vec<CatalogDiagnostic>> {
    Json(state.catalog.invalid.clone())
}

#[derive(Serialize)]
struct UploadResponse {
    image_id: String,
    width: u32,
    height: u32,
}

fn too_large(limit: usize) -> ApiError {
    ApiError::new(
        StatusCode::PAYLOAD_TOO_LARGE,
        "payload_too_large",
        format!("upload exceeds the {limit}-byte limit"),
    )
    .with_details(json!({ "limit": limit }))
}

async fn read_upload(req: Request, limit: usize) -> ApiResult<Vec<u8>> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.starts_with("multipart/form-data"));
    if is_multipart {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        loop {
            let field = form.next_field().await.map_err(|e| match e.status() {
                StatusCode::PAYLOAD_TOO_LARGE => too_large(limit),
                _ => ApiError::bad_request(e.body_text()),
            })?;
            let Some(field) = field else {
                return Err(ApiError::bad_request("multipart body has no file field"));
            };
            if field.file_name().is_none() && field.name() != Some("file") {
                continue;
            }
            let bytes = field.bytes().await.map_err(|e| match e.status() {
                StatusCode::PAYLOAD_TOO_LARGE => too_large(limit),
                _ => ApiError::bad_request(e.body_text()),
            })?;
            if bytes.len() > limit {
                return Err(too_large(limit));
            }
            return Ok(bytes.to_vec());
        }
    }
    match Limited::new(req.into_body(), limit).collect().await {
        Ok(collected) => Ok(collected.to_bytes().to_vec()),
        Err(e) if e.downcast_ref::<LengthLimitError>().is_some() => Err(too_large(limit)),
        Err(e) => Err(ApiError::bad_request(format!("failed to read body: {e}"))),
    }
}

async fn upload_image(State(state): State<Shared>, req: Request) -> ApiResult<Response> {
    let bytes = read_upload(req, state.max_upload_bytes).await?;
    if bytes.is_empty() {
        return Err(ApiError::bad_request("empty upload"));
    }
    let images = state.images.clone();
    let stored = tokio::task::spawn_blocking(move || images.put(&bytes))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| match e {
            nanolens::Error::DecodeBytes(_) => {
                ApiError::bad_request(format!("upload is not a decodable image: {e}"))
            }
            other => ApiError::from(other),
        })?;
    let status = if stored.created {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    };
    let body = UploadResponse {
        image_id: stored.id,
        width: stored.width,
        height: stored.height,
    };
    Ok((status, Json(body)).into_response())
}

#[derive(Deserialize)]
struct LensRequest {
    model_id: String,
    image_id: String,
    depth: usize,
}

#[derive(Serialize)]
struct TileStats {
    index: usize,
    min: f64,
    max: f64,
    mean: f64,
    constant: bool,
}

#[derive(Serialize)]
struct LensResponse {
    model_id: String,
    image_id: String,
    depth: usize,
    /// Zero-based index of the layer whose output is shown.
    layer: usize,
    layer_kind: String,
    grid_artifact: String,
    csv_artifact: String,
    tile_width: usize,
    tile_height: usize,
    cols: usize,
    rows: usize,
    gutter: usize,
    tiles: Vec<TileStats>,
}

async fn lens(State(state): State<Shared>, Json(req): Json<LensRequest>) -> ApiResult<Json<LensResponse>> {
    let loaded = state
        .catalog
        .get(&req.model_id)
        .ok_or_else(|| ApiError::not_found("model", &req.model_id))?;
    let img = state
        .images
        .get(&req.image_id)
        .ok_or_else(|| ApiError::not_found("image", &req.image_id))?;
    let model = loaded.model.clone();
    let artifacts = state.artifacts.clone();
    let depth = req.depth;
    let (grid, png_id, csv_id) = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let [_, h, w] = model.input_shape;
        let x = nanolens::data::preprocess_image(&img, h.max(w));
        let grid = extract_activations(&model, depth, &x)?;
        let png = grid.png()?;
        let png_id = artifacts
            .put(&png, ArtifactKind::Png)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let csv_id = artifacts
            .put(grid.csv().as_bytes(), ArtifactKind::Csv)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        Ok((grid, png_id, csv_id))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let layer_kind = loaded.entry.layers[grid.layer].kind.clone();
    Ok(Json(LensResponse {
        model_id: req.model_id,
        image_id: req.image_id,
        depth,
        layer: grid.layer,
        layer_kind,
        grid_artifact: png_id,
        csv_artifact: csv_id,
        tile_width: grid.width,
        tile_height: grid.height,
        cols: grid.layout.cols,
        rows: grid.layout.rows,
        gutter: grid.layout.gutter,
        tiles: grid
            .stats
            .iter()
            .enumerate()
            .map(|(index, s)| TileStats {
                index,
                min: s.min,
                max: s.max,
                mean: s.mean,
                constant: s.is_constant(),
            })
            .collect(),
    }))
}

async fn submit_filters(
    State(state): State<Shared>,
    Json(req): Json<FilterRequest>,
) -> ApiResult<Response> {
    let loaded = state
        .catalog
        .get(&req.model_id)
        .ok_or_else(|| ApiError::not_found("model", &req.model_id))?;
    // Validate up front so bad requests fail fast instead of as failed jobs.
    let count = loaded.model.filter_count(req.layer)?;
    if let Some(f) = req.filter {
        if f >= count {
            return Err(nanolens::Error::FilterOutOfRange {
                layer: req.layer,
                filter: f,
                count,
            }
            .into());
        }
    }
    req.ascent.validate()?;
    let record = state.jobs.submit(req, loaded.model.clone());
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

async fn job(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    state
        .jobs
        .get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("job", &id))
}

async fn artifact(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let store = state.artifacts.clone();
    let lookup = id.clone();
    let found = tokio::task::spawn_blocking(move || store.get(&lookup))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let (kind, bytes) = found.ok_or_else(|| ApiError::not_found("artifact", &id))?;
    Ok(Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, kind.media_type())
        // Content-addressed bytes never change.
        .header(header::CACHE_CONTROL, "public, max-age=31536000, immutable")
        .body(Body::from(bytes))
        .expect("static headers are valid"))
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
