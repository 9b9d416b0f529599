//! Review service: hands out review items to annotators, records their
//! judgments in an append-only log, and reports agreement.
//!
//! Annotators never see each other's judgments.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use focuschain::model::{image_mime, is_content_id, ImageRef, ImageStore};
use focuschain::quality::{effective_judgments, live_report, AgreementReport, Judgment};
use focuschain::question::SynthesisRecord;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tower_http::services::ServeDir;

pub const DEFAULT_RATERS: usize = 3;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("judgment log {path} line {line}: {message}")]
    CorruptLog {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate record id {0} in review set")]
    DuplicateRecord(String),
    #[error("at least two raters are required")]
    TooFewRaters,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct ReviewConfig {
    pub review_set: Vec<SynthesisRecord>,
    pub store: ImageStore,
    pub log_path: PathBuf,
    pub n_raters: usize,
    pub static_dir: Option<PathBuf>,
}

/// Shared state behind the router.
pub struct ReviewState {
    records: Vec<SynthesisRecord>,
    index: HashMap<String, usize>,
    images: HashMap<String, ImageRef>,
    store: ImageStore,
    n_raters: usize,
    log_path: PathBuf,
    judgments: RwLock<Vec<Judgment>>,
    writer: tokio::sync::Mutex<std::fs::File>,
    static_dir: Option<PathBuf>,
}

/// Reads a judgment log. A truncated final line is tolerated.
pub fn read_judgment_log(path: &Path) -> Result<Vec<Judgment>, ServiceError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Judgment>(line) {
            Ok(j) => out.push(j),
            Err(e) if n + 1 == lines.len() && !text.ends_with('\n') => {
                tracing::warn!("ignoring truncated last line of {}: {e}", path.display());
            }
            Err(e) => {
                return Err(ServiceError::CorruptLog {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

impl ReviewState {
    /// Loads the review set and replays the judgment log.
    pub fn open(config: ReviewConfig) -> Result<Arc<Self>, ServiceError> {
        if config.n_raters < 2 {
            return Err(ServiceError::TooFewRaters);
        }
        let mut index = HashMap::new();
        let mut images = HashMap::new();
        for (i, r) in config.review_set.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(ServiceError::DuplicateRecord(r.id.clone()));
            }
            for img in &r.images {
                images.insert(img.id.clone(), img.clone());
            }
        }
        let judgments = read_judgment_log(&config.log_path)?;
        if let Ok(bytes) = std::fs::read(&config.log_path) {
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
                std::fs::OpenOptions::new()
                    .write(true)
                    .open(&config.log_path)?
                    .set_len(keep as u64)?;
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&config.log_path)?;
        Ok(Arc::new(Self {
            records: config.review_set,
            index,
            images,
            store: config.store,
            n_raters: config.n_raters,
            log_path: config.log_path,
            judgments: RwLock::new(judgments),
            writer: tokio::sync::Mutex::new(file),
            static_dir: config.static_dir,
        }))
    }

    pub fn review_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn judgments(&self) -> Vec<Judgment> {
        self.judgments.read().expect("judgment lock").clone()
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn report(&self) -> AgreementReport {
        live_report(&self.judgments(), &self.review_ids(), self.n_raters).expect("n_raters validated at open")
    }

    fn judged_by(&self, annotator: &str) -> BTreeMap<String, Judgment> {
        let all = self.judgments.read().expect("judgment lock");
        effective_judgments(&all)
            .into_iter()
            .filter(|((rid, a), _)| a == annotator && self.index.contains_key(rid))
            .map(|((rid, _), j)| (rid, j.clone()))
            .collect()
    }

    async fn submit(&self, record_id: &str, input: JudgmentInput) -> Result<Judgment, ServiceError> {
        let mut file = self.writer.lock().await;
        let now = Utc::now();
        let last: Option<DateTime<Utc>> = self
            .judgments
            .read()
            .expect("judgment lock")
            .last()
            .map(|j| j.submitted_at);
        let submitted_at = match last {
            Some(t) if t > now => t,
            _ => now,
        };
        let j = Judgment {
            record_id: record_id.to_string(),
            annotator_id: input.annotator,
            final_answer_ok: input.final_answer_ok,
            sub_answers_ok: input.sub_answers_ok,
            focus_ok: input.focus_ok,
            submitted_at,
        };
        let mut line = serde_json::to_string(&j).map_err(std::io::Error::other)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        self.judgments.write().expect("judgment lock").push(j.clone());
        Ok(j)
    }

    fn item_view(&self, pos: usize, annotator: &str) -> ItemView {
        let record = &self.records[pos];
        ItemView {
            position: pos + 1,
            total: self.records.len(),
            image_urls: record.images.iter().map(|i| format!("/api/images/{}", i.id)).collect(),
            judgment: self.judged_by(annotator).remove(&record.id),
            record: record.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemView {
    /// 1-based position in the review set.
    pub position: usize,
    pub total: usize,
    pub record: SynthesisRecord,
    pub image_urls: Vec<String>,
    /// This annotator's stored judgment, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgment: Option<Judgment>,
}

#[derive(Debug, Clone, Deserialize)]
struct JudgmentInput {
    annotator: String,
    final_answer_ok: bool,
    sub_answers_ok: bool,
    focus_ok: bool,
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn annotator_param(q: &AnnotatorQuery) -> Option<&str> {
    q.annotator.as_deref().map(str::trim).filter(|a| !a.is_empty())
}

async fn next_item(State(s): State<Arc<ReviewState>>, Query(q): Query<AnnotatorQuery>) -> Response {
    let Some(annotator) = annotator_param(&q) else {
        return error(StatusCode::BAD_REQUEST, "missing annotator");
    };
    if s.records.is_empty() {
        return error(StatusCode::NOT_FOUND, "review set is empty");
    }
    let judged = s.judged_by(annotator);
    match s.records.iter().position(|r| !judged.contains_key(&r.id)) {
        Some(pos) => Json(s.item_view(pos, annotator)).into_response(),
        None => Json(json!({ "done": true, "judged": judged.len() })).into_response(),
    }
}

async fn get_item(
    State(s): State<Arc<ReviewState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AnnotatorQuery>,
) -> Response {
    let Some(annotator) = annotator_param(&q) else {
        return error(StatusCode::BAD_REQUEST, "missing annotator");
    };
    match s.index.get(&id) {
        Some(&pos) => Json(s.item_view(pos, annotator)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown item {id}")),
    }
}

async fn post_judgment(State(s): State<Arc<ReviewState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    if !s.index.contains_key(&id) {
        return error(StatusCode::NOT_FOUND, format!("unknown item {id}"));
    }
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}")),
    };
    let input: JudgmentInput = match serde_json::from_value(value) {
        Ok(i) => i,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    if input.annotator.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "annotator must be non-empty");
    }
    let input = JudgmentInput {
        annotator: input.annotator.trim().to_string(),
        ..input
    };
    match s.submit(&id, input).await {
        Ok(j) => Json(j).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn agreement(State(s): State<Arc<ReviewState>>) -> Json<AgreementReport> {
    Json(s.report())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub n_raters: usize,
    /// Judged review items per annotator.
    pub annotators: BTreeMap<String, usize>,
}

async fn progress(State(s): State<Arc<ReviewState>>) -> Json<Progress> {
    let all = s.judgments();
    let mut annotators = BTreeMap::new();
    for (rid, a) in effective_judgments(&all).into_keys() {
        if s.index.contains_key(&rid) {
            *annotators.entry(a).or_insert(0) += 1;
        }
    }
    Json(Progress {
        total: s.records.len(),
        n_raters: s.n_raters,
        annotators,
    })
}

async fn image(State(s): State<Arc<ReviewState>>, UrlPath(id): UrlPath<String>) -> Response {
    if !is_content_id(&id) {
        return error(StatusCode::BAD_REQUEST, "malformed image id");
    }
    let Some(img) = s.images.get(&id) else {
        return error(StatusCode::NOT_FOUND, "unknown image");
    };
    let path = match s.store.resolve(img) {
        Ok(p) => p,
        Err(e) => return error(StatusCode::NOT_FOUND, e.to_string()),
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => (
            [
                (header::CONTENT_TYPE, image_mime(&img.path)),
                (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
            ],
            bytes,
        )
            .into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "image missing from store"),
    }
}

pub fn router(state: Arc<ReviewState>) -> Router {
    let static_dir = state.static_dir.clone();
    let api = Router::new()
        .route("/api/items", get(next_item))
        .route("/api/items/{id}", get(get_item))
        .route("/api/items/{id}/judgment", post(post_judgment))
        .route("/api/agreement", get(agreement))
        .route("/api/progress", get(progress))
        .route("/api/images/{*id}", get(image))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<ReviewState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
