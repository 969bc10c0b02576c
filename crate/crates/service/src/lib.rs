//! Read-only HTTP API over a completed run, consumed by the explorer UI.
//!
//! | route | |
//! |---|---|
//! | `GET /api/health` | run manifest hash |
//! | `GET /api/samples?offset&limit` | validation gallery page |
//! | `GET /api/samples/{id}/latent` | bits, posteriors, per-bit effects |
//! | `POST /api/samples/{id}/intervene` | factual / counterfactual renders |
//! | `GET /api/suggest/{id}` | greedy minimal mask, 204 when none |
//! | `GET /api/metrics` | `metrics.json` passthrough |

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use latent_lens::explainer::{image_png, panel_from_bits, BiasStatistics, PanelMask};
use latent_lens::intervention::{greedy_minimal_flip, InterventionMask, Strategy};
use latent_lens::pipeline::LoadedRun;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

pub const MAX_PAGE: usize = 256;
pub const DEFAULT_PAGE: usize = 32;
pub const CACHE_CAPACITY: usize = 256;
const RENDER_SCALE: u32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("run is still loading")]
    Loading,
    #[error("{0}")]
    BadRequest(String),
    #[error("no sample with id {0}")]
    NotFound(usize),
    #[error("{0}")]
    Unprocessable(String),
    #[error(transparent)]
    Core(#[from] latent_lens::Error),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::Loading => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Bounded cache of intervention responses keyed by (sample, mask), FIFO eviction.
#[derive(Debug, Default)]
struct RenderCache {
    map: HashMap<(usize, Vec<usize>), Arc<InterventionResponse>>,
    order: VecDeque<(usize, Vec<usize>)>,
}

impl RenderCache {
    fn get(&self, key: &(usize, Vec<usize>)) -> Option<Arc<InterventionResponse>> {
        self.map.get(key).cloned()
    }

    fn insert(&mut self, key: (usize, Vec<usize>), value: Arc<InterventionResponse>) {
        if self.map.insert(key.clone(), value).is_none() {
            self.order.push_back(key);
        }
        while self.order.len() > CACHE_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            }
        }
    }
}

/// Loaded models plus the render cache. Artifacts are never written.
#[derive(Debug)]
pub struct Session {
    run: LoadedRun,
    cache: Mutex<RenderCache>,
}

impl Session {
    pub fn open(dir: &Path) -> latent_lens::Result<Self> {
        Ok(Session {
            run: LoadedRun::open(dir)?,
            cache: Mutex::new(RenderCache::default()),
        })
    }

    pub fn run(&self) -> &LoadedRun {
        &self.run
    }

    fn check_id(&self, id: usize) -> ApiResult<()> {
        if id >= self.run.val.len() {
            return Err(ApiError::NotFound(id));
        }
        Ok(())
    }

    fn png(&self, flat: &[f64]) -> ApiResult<String> {
        Ok(STANDARD.encode(image_png(flat, self.run.image_shape(), RENDER_SCALE)?))
    }
}

/// Shared handle; empty until the run has loaded.
pub type AppState = Arc<OnceLock<Session>>;

fn session(state: &AppState) -> ApiResult<&Session> {
    state.get().ok_or(ApiError::Loading)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/samples", get(samples))
        .route("/api/samples/{id}/latent", get(latent))
        .route("/api/samples/{id}/intervene", post(intervene))
        .route("/api/suggest/{id}", get(suggest))
        .route("/api/metrics", get(metrics))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Router over an already loaded session.
pub fn router_for(session: Session) -> Router {
    let state: AppState = Arc::new(OnceLock::new());
    let _ = state.set(session);
    router(state)
}

/// Binds first, then loads the run in the background; requests made before
/// loading finishes receive 503.
pub async fn serve(run_dir: PathBuf, port: u16) -> std::io::Result<()> {
    let state: AppState = Arc::new(OnceLock::new());
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], port))).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let loading = state.clone();
    tokio::task::spawn_blocking(move || match Session::open(&run_dir) {
        Ok(s) => {
            log::info!("loaded run {}", run_dir.display());
            let _ = loading.set(s);
        }
        Err(e) => log::error!("failed to load {}: {e}", run_dir.display()),
    });
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let s = session(&state)?;
    Ok(Json(json!({
        "status": "ok",
        "manifest_hash": s.run.manifest_hash,
        "config_hash": s.run.manifest.config_hash,
    })))
}

#[derive(Debug, Deserialize)]
pub struct Page {
    offset: Option<String>,
    limit: Option<String>,
}

fn parse_param(value: Option<&str>, name: &str, default: usize) -> ApiResult<usize> {
    match value {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::BadRequest(format!("`{name}` must be a non-negative integer, got `{v}`"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleSummary {
    pub sample_id: usize,
    pub thumbnail: String,
    pub label: u8,
    pub confound: u8,
    pub p_original: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SamplePage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub samples: Vec<SampleSummary>,
}

async fn samples(State(state): State<AppState>, Query(page): Query<Page>) -> ApiResult<Json<SamplePage>> {
    let s = session(&state)?;
    let offset = parse_param(page.offset.as_deref(), "offset", 0)?;
    let limit = parse_param(page.limit.as_deref(), "limit", DEFAULT_PAGE)?;
    if limit > MAX_PAGE {
        return Err(ApiError::BadRequest(format!("`limit` must be at most {MAX_PAGE}")));
    }
    let total = s.run.val.len();
    let images = s.run.val.flat_images();
    let end = offset.saturating_add(limit).min(total);
    let mut out = Vec::new();
    for id in offset.min(total)..end {
        let row = images.row(id).to_vec();
        out.push(SampleSummary {
            sample_id: id,
            thumbnail: STANDARD.encode(image_png(&row, s.run.image_shape(), 1)?),
            label: s.run.val.labels[id],
            confound: s.run.val.confounds[id],
            p_original: s.run.records[id].p_original,
        });
    }
    Ok(Json(SamplePage {
        total,
        offset,
        limit,
        samples: out,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LatentView {
    pub sample_id: usize,
    pub bits: Vec<u8>,
    pub posterior_probs: Vec<f64>,
    pub per_bit_effect: Vec<f64>,
}

async fn latent(State(state): State<AppState>, UrlPath(id): UrlPath<usize>) -> ApiResult<Json<LatentView>> {
    let s = session(&state)?;
    s.check_id(id)?;
    let phi = s.run.phi(id)?;
    let code = s.run.dvae.encode_hard(phi.row(0))?;
    Ok(Json(LatentView {
        sample_id: id,
        bits: code.bits,
        posterior_probs: code.posterior_probs,
        per_bit_effect: s.run.metrics.per_bit_effect.clone(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub flip_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResponse {
    pub sample_id: usize,
    pub flip_indices: Vec<usize>,
    pub original: String,
    pub factual_render: String,
    pub counterfactual_render: String,
    pub p_original: f64,
    pub p_counterfactual: f64,
    pub prediction_changed: bool,
    pub bias_statistics: BiasStatistics,
}

fn intervene_with(s: &Session, id: usize, mask: &InterventionMask) -> ApiResult<InterventionResponse> {
    let image = s.run.val.flat_images();
    let bits = &s.run.records[id].original_bits;
    let panel = panel_from_bits(
        &s.run.generator,
        &s.run.dvae,
        &s.run.classifier,
        image.row(id),
        bits,
        &PanelMask::Explicit(mask.clone()),
    )?;
    Ok(InterventionResponse {
        sample_id: id,
        flip_indices: mask.flip_indices().to_vec(),
        original: s.png(&panel.original)?,
        factual_render: s.png(&panel.factual_render)?,
        counterfactual_render: s.png(&panel.counterfactual_render)?,
        p_original: panel.p_original,
        p_counterfactual: panel.p_counterfactual,
        prediction_changed: panel.prediction_changed,
        bias_statistics: panel.bias_statistics,
    })
}

async fn intervene(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<usize>,
    Json(req): Json<InterventionRequest>,
) -> ApiResult<Json<InterventionResponse>> {
    let s = session(&state)?;
    s.check_id(id)?;
    let mask = InterventionMask::new(req.flip_indices, Strategy::Manual)
        .map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    mask.check(s.run.dvae.n_bits())
        .map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let key = (id, mask.flip_indices().to_vec());
    if let Some(hit) = s.cache.lock().expect("cache lock").get(&key) {
        return Ok(Json((*hit).clone()));
    }
    let state2 = state.clone();
    let response = tokio::task::spawn_blocking(move || {
        let s = state2.get().expect("session loaded");
        intervene_with(s, id, &mask)
    })
    .await
    .map_err(|e| ApiError::BadRequest(format!("render task failed: {e}")))??;
    let response = Arc::new(response);
    s.cache.lock().expect("cache lock").insert(key, response.clone());
    Ok(Json((*response).clone()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Suggestion {
    pub sample_id: usize,
    pub flip_indices: Vec<usize>,
    pub p_original: f64,
    pub p_counterfactual: f64,
}

async fn suggest(State(state): State<AppState>, UrlPath(id): UrlPath<usize>) -> ApiResult<Response> {
    let s = session(&state)?;
    s.check_id(id)?;
    let bits = &s.run.records[id].original_bits;
    let n = s.run.dvae.n_bits();
    let Some(mask) = greedy_minimal_flip(&s.run.dvae, &s.run.classifier, bits, n)? else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let record = latent_lens::intervention::counterfactual(&s.run.dvae, &s.run.classifier, bits, &mask)?;
    Ok(Json(Suggestion {
        sample_id: id,
        flip_indices: mask.flip_indices().to_vec(),
        p_original: record.p_original,
        p_counterfactual: record.p_counterfactual,
    })
    .into_response())
}

async fn metrics(State(state): State<AppState>) -> ApiResult<Response> {
    let s = session(&state)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], s.run.metrics_text.clone()).into_response())
}
