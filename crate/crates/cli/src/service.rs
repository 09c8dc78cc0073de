//! Classification HTTP service.
//!
//! `POST /classify` takes an image as the raw request body or as a multipart
//! form (first file field, optional `k` field); `k` may also be a query
//! parameter. `GET /classes` and `GET /health` describe the loaded model.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use anyhow::{bail, Context};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use plate_core::model::ModelError;
use plate_core::{Model, Prediction};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub weights: PathBuf,
    pub default_k: usize,
    pub max_upload_bytes: usize,
    pub timeout: Duration,
}

impl ServiceConfig {
    pub fn new(weights: impl Into<PathBuf>) -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            weights: weights.into(),
            default_k: 5,
            max_upload_bytes: 8 << 20,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.default_k == 0 {
            bail!("k must be at least 1");
        }
        if self.max_upload_bytes == 0 || self.timeout.is_zero() {
            bail!("upload limit and timeout must be positive");
        }
        Ok(())
    }
}

/// Weights plus the SHA-256 of the file they were read from.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub version: String,
}

impl LoadedModel {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Ok(Self {
            model: Model::from_bytes(bytes)?,
            version: hex::encode(Sha256::digest(bytes)),
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }

    pub fn classify(&self, bytes: &[u8], k: usize) -> Result<ClassifyResponse, ModelError> {
        let p = self.model.classify_bytes(bytes, k)?;
        Ok(ClassifyResponse::new(&p, &self.version))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label: String,
    pub probability: f32,
}

/// Body of a successful `POST /classify`; also what `classify --json` prints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub predictions: Vec<ScoredLabel>,
    pub latency_ms: f64,
    pub model_version: String,
}

impl ClassifyResponse {
    pub fn new(p: &Prediction, version: &str) -> Self {
        Self {
            predictions: p
                .ranked
                .iter()
                .map(|s| ScoredLabel {
                    label: s.label.clone(),
                    probability: s.probability,
                })
                .collect(),
            latency_ms: p.latency_ms,
            model_version: version.to_string(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<OnceLock<Arc<LoadedModel>>>,
    config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            model: Arc::new(OnceLock::new()),
            config: Arc::new(config),
        }
    }

    /// Makes `loaded` the served model. Only the first call succeeds.
    pub fn install(&self, loaded: LoadedModel) -> anyhow::Result<()> {
        let n = loaded.model.num_classes();
        if self.config.default_k > n {
            bail!("default k {} exceeds the model's {n} classes", self.config.default_k);
        }
        self.model.set(Arc::new(loaded)).map_err(|_| anyhow::anyhow!("a model is already loaded"))
    }

    pub fn loaded(&self) -> Option<Arc<LoadedModel>> {
        self.model.get().cloned()
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded yet")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/classify", post(classify))
        .route("/classes", get(classes))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .layer(tower_http::cors::CorsLayer::permissive())
        .with_state(state)
}

fn parse_k(raw: &str, num_classes: usize) -> Result<usize, ApiError> {
    match raw.trim().parse::<usize>() {
        Ok(k) if (1..=num_classes).contains(&k) => Ok(k),
        _ => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("k must be an integer in 1..={num_classes}, got `{raw}`"),
        )),
    }
}

async fn read_upload(state: &AppState, req: Request) -> Result<(Bytes, Option<String>), ApiError> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !multipart {
        let body = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        return Ok((body, None));
    }
    let mut form = Multipart::from_request(req, state)
        .await
        .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
    let mut image = None;
    let mut k = None;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::new(e.status(), e.body_text()))? {
        let is_k = field.name() == Some("k");
        let data = field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        if is_k {
            k = Some(String::from_utf8_lossy(&data).into_owned());
        } else if image.is_none() {
            image = Some(data);
        }
    }
    let image = image.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "multipart form has no image field"))?;
    Ok((image, k))
}

async fn classify(
    State(state): State<AppState>,
    Query(query): Query<BTreeMap<String, String>>,
    req: Request,
) -> Result<Json<ClassifyResponse>, ApiError> {
    let loaded = state.loaded().ok_or_else(ApiError::not_loaded)?;
    let n = loaded.model.num_classes();
    let mut k = match query.get("k") {
        Some(raw) => parse_k(raw, n)?,
        None => state.config.default_k,
    };
    let (bytes, form_k) = read_upload(&state, req).await?;
    if let Some(raw) = form_k {
        k = parse_k(&raw, n)?;
    }
    let work = tokio::task::spawn_blocking(move || loaded.classify(&bytes, k));
    let result = tokio::time::timeout(state.config.timeout, work)
        .await
        .map_err(|_| ApiError::new(StatusCode::GATEWAY_TIMEOUT, "classification timed out"))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match result {
        Ok(r) => Ok(Json(r)),
        Err(e @ (ModelError::Image(_) | ModelError::EmptyImage)) => {
            Err(ApiError::new(StatusCode::BAD_REQUEST, format!("undecodable image: {e}")))
        }
        Err(e @ ModelError::InvalidK { .. }) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub index: usize,
    pub label: String,
}

async fn classes(State(state): State<AppState>) -> Result<Json<Vec<ClassEntry>>, ApiError> {
    let loaded = state.loaded().ok_or_else(ApiError::not_loaded)?;
    let list = loaded
        .model
        .labels()
        .iter()
        .enumerate()
        .map(|(index, label)| ClassEntry {
            index,
            label: label.clone(),
        })
        .collect();
    Ok(Json(list))
}

async fn health(State(state): State<AppState>) -> Response {
    match state.loaded() {
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
        Some(m) => Json(json!({
            "status": "ok",
            "model_version": m.version,
            "num_classes": m.model.num_classes(),
            "input_resolution": m.model.spec().input_resolution,
        }))
        .into_response(),
    }
}

/// Binds, then loads the weights in the background; requests that arrive
/// before the load completes get 503.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    config.validate()?;
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .with_context(|| format!("binding {}", config.bind))?;
    log::info!("listening on {}", listener.local_addr()?);
    let state = AppState::new(config.clone());
    let loader = state.clone();
    let weights = config.weights.clone();
    let load = tokio::task::spawn_blocking(move || -> anyhow::Result<()> {
        loader.install(LoadedModel::load(&weights)?)?;
        log::info!("model {} loaded", weights.display());
        Ok(())
    });
    let server = axum::serve(listener, router(state)).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    let server = tokio::spawn(async move { server.await });
    load.await.context("loader panicked")??;
    server.await.context("server task panicked")?.context("server failed")
}
