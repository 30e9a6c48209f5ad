//! HTTP service for adjudicating ranked mislabel suspects.
//!
//! Reviewers page through the suspect set, fetch thumbnails and post
//! verdicts. Every verdict is appended to a JSON-lines log before it is
//! acknowledged, so a restarted service resumes exactly where it stopped.
//! Consensus and Precision@k are computed on demand from a snapshot of the
//! log.
//!
//! | Method | Path | Response |
//! |---|---|---|
//! | GET | `/api/suspects?offset&limit` | `{total, items}` |
//! | GET | `/api/samples/{id}/thumbnail` | PNG (or the original image file) |
//! | POST | `/api/adjudications` | `{accepted: true}` or 400 `{error}` |
//! | GET | `/api/progress?reviewer_id` | `{done, pending}` |
//! | GET | `/api/consensus` | `[ConsensusResult]` |
//! | GET | `/api/precision?k` | `{k, precision}` |
//! | GET | `/api/meta` | display condition, panel size, class names |

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use mislabel_core::eval::precision_at_k;
use mislabel_core::review::{consensus_partial, feature_thumbnail_png, AdjudicationLog};
use mislabel_core::{Adjudication, ConsensusResult, Dataset, SuspectSample, Verdict};

/// What reviewers see next to each image. Both the recorded label and the
/// pipeline's proposal are shown.
pub const UI_CONDITION: &str = "given_and_proposed";
pub const DEFAULT_PAGE: usize = 20;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Serve(std::io::Error),
    #[error(transparent)]
    Core(#[from] mislabel_core::Error),
}

#[derive(Debug, Clone)]
pub struct ReviewConfig {
    pub log_path: PathBuf,
    pub reviewers_required: usize,
    /// Base directory for relative `image_path` entries.
    pub image_root: Option<PathBuf>,
    /// Directory of static UI assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl ReviewConfig {
    pub fn new(log_path: impl Into<PathBuf>) -> Self {
        Self {
            log_path: log_path.into(),
            reviewers_required: 3,
            image_root: None,
            static_dir: None,
        }
    }
}

pub struct ReviewState {
    suspects: Vec<SuspectSample>,
    known: HashSet<String>,
    ds: Dataset,
    config: ReviewConfig,
    writer: Mutex<AdjudicationLog>,
    snapshot: RwLock<Arc<Vec<Adjudication>>>,
}

impl ReviewState {
    /// Opens (or creates) the adjudication log and replays it.
    pub fn open(
        suspects: Vec<SuspectSample>,
        ds: Dataset,
        config: ReviewConfig,
    ) -> Result<Self, ServiceError> {
        if config.reviewers_required == 0 {
            return Err(mislabel_core::Error::Config("reviewers_required must be >= 1".into()).into());
        }
        for s in &suspects {
            if ds.get(&s.sample_id).is_none() {
                return Err(mislabel_core::Error::Integrity(format!(
                    "suspect `{}` is not in the dataset",
                    s.sample_id
                ))
                .into());
            }
        }
        let log = AdjudicationLog::open(&config.log_path)?;
        let snapshot = Arc::new(log.entries().to_vec());
        Ok(Self {
            known: suspects.iter().map(|s| s.sample_id.clone()).collect(),
            suspects,
            ds,
            config,
            writer: Mutex::new(log),
            snapshot: RwLock::new(snapshot),
        })
    }

    pub fn suspects(&self) -> &[SuspectSample] {
        &self.suspects
    }

    /// Current log contents; later appends do not affect the returned value.
    pub fn adjudications(&self) -> Arc<Vec<Adjudication>> {
        self.snapshot.read().clone()
    }

    /// Validates and durably appends one adjudication.
    pub fn record(&self, adj: Adjudication) -> Result<(), String> {
        if !self.known.contains(&adj.sample_id) {
            return Err(format!("`{}` is not in the review set", adj.sample_id));
        }
        adj.validate(Some(self.ds.num_classes()))
            .map_err(|e| e.to_string())?;
        let mut log = self.writer.lock();
        log.append(adj).map_err(|e| e.to_string())?;
        *self.snapshot.write() = Arc::new(log.entries().to_vec());
        Ok(())
    }

    pub fn consensus(&self) -> Vec<ConsensusResult> {
        let log = self.adjudications();
        consensus_partial(&log, self.config.reviewers_required).0
    }

    /// Precision@k over the suspect ranking using consensus verdicts.
    pub fn precision(&self, k: usize) -> Result<f64, mislabel_core::Error> {
        let verdicts: HashMap<String, Verdict> = self
            .consensus()
            .into_iter()
            .map(|c| (c.sample_id, c.final_verdict))
            .collect();
        let ranked: Vec<String> = self.suspects.iter().map(|s| s.sample_id.clone()).collect();
        precision_at_k(&ranked, &verdicts, k)
    }

    /// `(done, pending)` for one reviewer over the suspect set.
    pub fn progress(&self, reviewer_id: &str) -> (usize, usize) {
        let log = self.adjudications();
        let done: HashSet<&str> = log
            .iter()
            .filter(|a| a.reviewer_id == reviewer_id)
            .map(|a| a.sample_id.as_str())
            .collect();
        (done.len(), self.suspects.len() - done.len())
    }

    fn thumbnail(&self, id: &str) -> Option<Response> {
        let record = self.ds.get(id)?;
        if let Some(p) = &record.image_path {
            let path = match &self.config.image_root {
                Some(root) if p.is_relative() => root.join(p),
                _ => p.clone(),
            };
            let bytes = std::fs::read(&path).ok()?;
            return Some(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response());
        }
        let png = feature_thumbnail_png(&record.features).ok()?;
        Some(([(header::CONTENT_TYPE, "image/png")], png).into_response())
    }
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn error(status: StatusCode, reason: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: reason.into() })).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SuspectPage {
    pub total: usize,
    pub items: Vec<SuspectSample>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdjudicationRequest {
    pub sample_id: String,
    pub reviewer_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub revised_label: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub pending: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrecisionBody {
    pub k: usize,
    pub precision: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Meta {
    pub ui_condition: String,
    pub reviewers_required: usize,
    pub total: usize,
    pub class_names: Vec<String>,
    pub version: String,
}

#[derive(Deserialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Deserialize)]
struct ReviewerQuery {
    reviewer_id: String,
}

#[derive(Deserialize)]
struct KQuery {
    k: usize,
}

type Shared = Arc<ReviewState>;

async fn suspects(State(st): State<Shared>, Query(q): Query<PageQuery>) -> Json<SuspectPage> {
    let offset = q.offset.unwrap_or(0).min(st.suspects.len());
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let items = st.suspects[offset..].iter().take(limit).cloned().collect();
    Json(SuspectPage {
        total: st.suspects.len(),
        items,
    })
}

async fn thumbnail(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Response {
    if !st.known.contains(&id) {
        return error(StatusCode::NOT_FOUND, format!("unknown sample `{id}`"));
    }
    match tokio::task::spawn_blocking(move || st.thumbnail(&id)).await {
        Ok(Some(r)) => r,
        _ => error(StatusCode::NOT_FOUND, "thumbnail unavailable"),
    }
}

async fn adjudicate(
    State(st): State<Shared>,
    body: Result<Json<AdjudicationRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(rej) => return error(StatusCode::BAD_REQUEST, rej.body_text()),
    };
    let adj = Adjudication {
        sample_id: req.sample_id,
        reviewer_id: req.reviewer_id,
        verdict: req.verdict,
        revised_label: req.revised_label,
        timestamp: now_ms(),
    };
    let result = tokio::task::spawn_blocking(move || st.record(adj)).await;
    match result {
        Ok(Ok(())) => Json(Accepted { accepted: true }).into_response(),
        Ok(Err(reason)) => error(StatusCode::BAD_REQUEST, reason),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn progress(State(st): State<Shared>, Query(q): Query<ReviewerQuery>) -> Json<Progress> {
    let (done, pending) = st.progress(&q.reviewer_id);
    Json(Progress { done, pending })
}

async fn consensus(State(st): State<Shared>) -> Json<Vec<ConsensusResult>> {
    Json(st.consensus())
}

async fn precision(State(st): State<Shared>, Query(q): Query<KQuery>) -> Response {
    match st.precision(q.k) {
        Ok(p) => Json(PrecisionBody { k: q.k, precision: p }).into_response(),
        Err(mislabel_core::Error::Coverage { ids }) => error(
            StatusCode::CONFLICT,
            format!("{} of the top {} suspects lack consensus", ids.len(), q.k),
        ),
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn meta(State(st): State<Shared>) -> Json<Meta> {
    Json(Meta {
        ui_condition: UI_CONDITION.into(),
        reviewers_required: st.config.reviewers_required,
        total: st.suspects.len(),
        class_names: st.ds.class_names().to_vec(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

pub fn router(state: Arc<ReviewState>) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/api/suspects", get(suspects))
        .route("/api/samples/{id}/thumbnail", get(thumbnail))
        .route("/api/adjudications", post(adjudicate))
        .route("/api/progress", get(progress))
        .route("/api/consensus", get(consensus))
        .route("/api/precision", get(precision))
        .route("/api/meta", get(meta))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { error(StatusCode::NOT_FOUND, "no such route") }),
    }
}

/// Binds `addr` and serves until `shutdown` resolves.
pub async fn serve(
    state: Arc<ReviewState>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })?;
    let local = listener.local_addr().unwrap_or(addr);
    tracing::info!(%local, suspects = state.suspects.len(), "review service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServiceError::Serve)
}
