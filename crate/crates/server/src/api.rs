//! JSON HTTP API.
//!
//! Request bodies are parsed by hand from raw bytes so that malformed JSON,
//! wrong types and unknown fields all surface as 400 with a message.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use sbc_core::catalog::read_catalog;
use sbc_core::engine::{self, Dataset, FinetuneParams, Judgement, SearchStats, SessionStore, DEFAULT_INITIAL_K};
use sbc_core::error::Error as CoreError;
use sbc_core::head::HeadParams;
use sbc_core::index::{KdTree, KnnMode};
use sbc_core::models::ModelKind;

use crate::config::{DatasetConfig, ServerConfig};

/// Schema version carried in every response body.
pub const API_VERSION: u32 = 1;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            CoreError::NotFound(_) => StatusCode::NOT_FOUND,
            CoreError::InvalidInput(_) | CoreError::DimensionMismatch { .. } | CoreError::NonFinite(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(status = %self.status, "{}", self.message);
        }
        let body = json!({ "version": API_VERSION, "error": { "status": self.status.as_u16(), "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// A served dataset plus where its relative image uris live.
#[derive(Debug)]
pub struct LoadedDataset {
    pub data: Dataset,
    pub image_root: PathBuf,
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<LoadedDataset, CoreError> {
    let catalog = read_catalog(&cfg.catalog)?;
    let tree = KdTree::read(&cfg.index, &catalog)?;
    let head = HeadParams::read(&cfg.head)?;
    let mut data = Dataset::new(cfg.name.clone(), catalog, tree, head)?;
    data.ann_leaves = cfg.ann_leaves.max(1);
    Ok(LoadedDataset { data, image_root: cfg.image_root() })
}

pub struct AppState {
    pub datasets: BTreeMap<String, Arc<LoadedDataset>>,
    pub sessions: SessionStore,
    pub sidecar_url: Option<String>,
    pub defaults: FinetuneParams,
    client: reqwest::Client,
}

impl AppState {
    pub fn new(datasets: Vec<LoadedDataset>, sidecar_url: Option<String>, defaults: FinetuneParams) -> Self {
        Self {
            datasets: datasets.into_iter().map(|d| (d.data.name.clone(), Arc::new(d))).collect(),
            sessions: SessionStore::new(),
            sidecar_url: sidecar_url.map(|u| u.trim_end_matches('/').to_string()),
            defaults,
            client: reqwest::Client::new(),
        }
    }

    /// Validates the config and loads every dataset it lists.
    pub fn from_config(cfg: &ServerConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let mut datasets = Vec::with_capacity(cfg.datasets.len());
        for d in &cfg.datasets {
            let loaded = load_dataset(d).map_err(|e| anyhow::anyhow!("dataset {}: {e}", d.name))?;
            tracing::info!(dataset = %d.name, rows = loaded.data.len(), "loaded dataset");
            datasets.push(loaded);
        }
        Ok(Self::new(datasets, cfg.sidecar_url.clone(), cfg.finetune_params()))
    }

    fn dataset(&self, name: &str) -> Result<Arc<LoadedDataset>, ApiError> {
        self.datasets.get(name).cloned().ok_or_else(|| ApiError::not_found(format!("unknown dataset {name:?}")))
    }
}

pub type SharedState = Arc<AppState>;

pub fn router(state: SharedState, cors_origins: &[String]) -> Router {
    let app = Router::new()
        .route("/datasets", get(list_datasets))
        .route("/search", post(search))
        .route("/finetune", post(finetune))
        .route("/image/{dataset}/{id}", get(image))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state);
    match cors_layer(cors_origins) {
        Some(layer) => app.layer(layer),
        None => app,
    }
}

fn cors_layer(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::from(Any)
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE]),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub n: usize,
    /// Code dimension d′.
    pub dim: usize,
    /// Query embedding dimension.
    pub input_dim: usize,
}

async fn list_datasets(State(state): State<SharedState>) -> Json<serde_json::Value> {
    let datasets: Vec<DatasetInfo> = state
        .datasets
        .values()
        .map(|d| DatasetInfo {
            name: d.data.name.clone(),
            n: d.data.len(),
            dim: d.data.catalog.dim(),
            input_dim: d.data.input_dim(),
        })
        .collect();
    Json(json!({ "version": API_VERSION, "datasets": datasets }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryBody {
    #[serde(default)]
    pub embedding: Option<Vec<f32>>,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub dataset: String,
    pub query: QueryBody,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Exhaustive kNN instead of the leaf-budgeted approximate search.
    #[serde(default)]
    pub exact: bool,
}

fn default_k() -> usize {
    DEFAULT_INITIAL_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub id: u64,
    pub uri: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStats {
    pub query_ms: f64,
    pub k: usize,
    pub n_results: usize,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub version: u32,
    pub results: Vec<ResultItem>,
    pub stats: InitialStats,
}

#[derive(Deserialize)]
struct SidecarReply {
    embedding: Vec<f32>,
}

async fn embed_text(state: &AppState, text: &str) -> Result<Vec<f32>, ApiError> {
    let Some(base) = &state.sidecar_url else {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "text queries need the embedding sidecar: set sidecar_url in the server config, \
             or send the query as {\"embedding\": [...]} instead",
        ));
    };
    let url = format!("{base}/embed_text");
    let reply = state.client.post(&url).json(&json!({ "text": text })).send().await.map_err(|e| {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, format!("embedding sidecar at {base} is unavailable: {e}"))
    })?;
    let status = reply.status();
    if !status.is_success() {
        let detail = reply.text().await.unwrap_or_default();
        let code = if status == reqwest::StatusCode::BAD_REQUEST { StatusCode::BAD_REQUEST } else { StatusCode::BAD_GATEWAY };
        return Err(ApiError::new(code, format!("embedding sidecar returned {status}: {detail}")));
    }
    let body: SidecarReply = reply
        .json()
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, format!("embedding sidecar sent an invalid reply: {e}")))?;
    Ok(body.embedding)
}

/// Initial-search score: 1 for an exact code match, falling with distance.
pub fn distance_score(distance: f32) -> f64 {
    1.0 / (1.0 + distance as f64)
}

async fn search(State(state): State<SharedState>, body: Bytes) -> Result<Json<SearchResponse>, ApiError> {
    let req: SearchRequest = parse_body(&body)?;
    let ds = state.dataset(&req.dataset)?;
    if req.k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let embedding = match (req.query.embedding, req.query.text) {
        (Some(e), None) => e,
        (None, Some(t)) => {
            if t.trim().is_empty() {
                return Err(ApiError::bad_request("query text is empty"));
            }
            embed_text(&state, &t).await?
        }
        _ => return Err(ApiError::bad_request("query must have exactly one of \"embedding\" or \"text\"")),
    };
    if embedding.len() != ds.data.input_dim() {
        return Err(ApiError::bad_request(format!(
            "query embedding has {} dimensions, dataset {} expects {}",
            embedding.len(),
            req.dataset,
            ds.data.input_dim()
        )));
    }
    let mode = if req.exact { KnnMode::Exact } else { KnnMode::Approximate { max_leaves: ds.data.ann_leaves } };
    let start = Instant::now();
    let neighbors = engine::initial_search(&ds.data, &embedding, req.k, mode)?;
    let results: Vec<ResultItem> = neighbors
        .iter()
        .map(|n| ResultItem { id: n.record.id, uri: n.record.uri.clone(), score: distance_score(n.distance) })
        .collect();
    let stats = InitialStats {
        query_ms: start.elapsed().as_secs_f64() * 1e3,
        k: req.k,
        n_results: results.len(),
        exact: req.exact,
    };
    Ok(Json(SearchResponse { version: API_VERSION, results, stats }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBody {
    pub id: u64,
    pub label: Judgement,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRequest {
    pub dataset: String,
    #[serde(default)]
    pub session_id: Option<String>,
    pub labels: Vec<LabelBody>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub negative_samples: Option<usize>,
    #[serde(default)]
    pub negative_weight: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub max_results: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneResponse {
    pub version: u32,
    pub session_id: String,
    pub results: Vec<ResultItem>,
    pub stats: SearchStats,
}

async fn finetune(State(state): State<SharedState>, body: Bytes) -> Result<Json<FinetuneResponse>, ApiError> {
    let req: FinetuneRequest = parse_body(&body)?;
    let ds = state.dataset(&req.dataset)?;
    let d = &state.defaults;
    let model_kind = match &req.model {
        None => d.model_kind,
        Some(m) => m.parse::<ModelKind>().map_err(|_| {
            let known: Vec<&str> = ModelKind::ALL.iter().map(|k| k.as_str()).collect();
            ApiError::bad_request(format!("unknown model {m:?}; expected one of {}", known.join(", ")))
        })?,
    };
    let params = FinetuneParams {
        model_kind,
        negative_samples: req.negative_samples.unwrap_or(d.negative_samples),
        negative_weight: req.negative_weight.unwrap_or(d.negative_weight),
        seed: req.seed.unwrap_or(d.seed),
        max_results: req.max_results.unwrap_or(d.max_results),
        hyper: d.hyper,
    };
    params.validate()?;
    let session = match &req.session_id {
        Some(id) => state.sessions.get(id).ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))?,
        None => state.sessions.create(&req.dataset),
    };
    let labels: Vec<(u64, Judgement)> = req.labels.iter().map(|l| (l.id, l.label)).collect();
    let (session_id, results, stats) = tokio::task::spawn_blocking(move || {
        let mut s = engine::lock_session(&session);
        if s.dataset != ds.data.name {
            return Err(ApiError::bad_request(format!(
                "session {} belongs to dataset {:?}, not {:?}",
                s.id, s.dataset, ds.data.name
            )));
        }
        s.apply_labels(&ds.data, &labels)?;
        let (results, stats) = engine::finetune(&ds.data, &mut s, &params)?;
        Ok((s.id.clone(), results, stats))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("fine-tune task failed: {e}")))??;
    let results = results.into_iter().map(|r| ResultItem { id: r.id, uri: r.uri, score: r.score }).collect();
    Ok(Json(FinetuneResponse { version: API_VERSION, session_id, results, stats }))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("svg") => "image/svg+xml",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

fn is_remote(uri: &str) -> bool {
    uri.starts_with("http://") || uri.starts_with("https://")
}

async fn image(State(state): State<SharedState>, UrlPath((dataset, id)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let ds = state.dataset(&dataset)?;
    let record = id
        .parse::<u64>()
        .ok()
        .and_then(|id| ds.data.row_of(id))
        .map(|row| ds.data.record(row))
        .ok_or_else(|| ApiError::not_found(format!("no record {id:?} in dataset {dataset:?}")))?;
    if is_remote(&record.uri) {
        return Ok((StatusCode::FOUND, [(header::LOCATION, record.uri.clone())]).into_response());
    }
    let local = Path::new(record.uri.strip_prefix("file://").unwrap_or(&record.uri));
    let path = if local.is_relative() { ds.image_root.join(local) } else { local.to_path_buf() };
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, content_type(&path))], Body::from(bytes)).into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ApiError::not_found(format!("image file for record {id} is missing")))
        }
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("cannot read image for record {id}: {e}"))),
    }
}

/// Binds, announces the bound address on stdout and serves until Ctrl-C.
pub async fn serve(cfg: ServerConfig) -> anyhow::Result<()> {
    let addr = cfg.listen_addr()?;
    let cfg2 = cfg.clone();
    let state = tokio::task::spawn_blocking(move || AppState::from_config(&cfg2)).await??;
    let app = router(Arc::new(state), &cfg.cors_origins);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    println!("listening on http://{bound}");
    tracing::info!(%bound, "serving");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
