//! HTTP service for the human refinement round.
//!
//! Five annotators, each holding a static token from the run config, judge
//! whether the automatically assigned ground truth of each sampled statement
//! is accurate. The service hands out tasks, records judgments durably, and
//! reports progress and consensus.
//!
//! | Method | Path | Purpose |
//! |---|---|---|
//! | GET | `/api/task?token=T` | next statement for the annotator |
//! | POST | `/api/judgment` | record a verdict |
//! | GET | `/api/progress` | live counts |
//! | GET | `/api/consensus?dimension=D` | agreement table and outcomes |
//! | GET | `/api/image/{id}?token=T` | image bytes by id |
//!
//! `GET /api/task?token=t1`:
//!
//! ```json
//! {"done": false, "statement_id": "3f0c9a1b7d2e4c5a6b8e", "image_url": "/api/image/9a1b7d2e4c5a6b8e",
//!  "text": "In the context of: ...", "dimension": "scene_context", "assigned_label": true, "remaining": 19}
//! ```
//!
//! or `{"done": true, "remaining": 0}` once the queue is exhausted.
//!
//! `POST /api/judgment` with `{"token": "t1", "statement_id": "3f0c...", "verdict": true}` answers
//! `200 {"accepted": true, "remaining": 18}`; a second submission for the
//! same pair answers `409`. `verdict` is true when the annotator finds the
//! assigned label accurate.
//!
//! Errors are `{"error": "..."}` with status 400, 401, 404, 409 or 500.

pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use insets_core::config::ReviewConfig;
use insets_core::corpus::{self, ImageRecord};
use insets_core::pipeline::{BENCHMARK, IMAGES, JUDGMENTS};
use insets_core::refinement::{self, AgreementColumn, AgreementReport, RefinementError};
use insets_core::{ConsensusOutcome, Dimension, Judgment, Statement};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use store::{JudgmentStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no annotators configured; add [[review.annotators]] entries")]
    NoAnnotators,
    #[error("token of annotator `{0}` is shared with another annotator")]
    SharedToken(String),
    #[error("invalid allowed origin `{0}`")]
    Origin(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

struct Session {
    cursor: usize,
    last_seen: Instant,
}

pub struct ReviewState {
    statements: Vec<Statement>,
    position: HashMap<String, usize>,
    images: HashMap<String, ImageRecord>,
    tokens: HashMap<String, String>,
    annotators: Vec<String>,
    sessions: Mutex<HashMap<String, Session>>,
    store: Mutex<JudgmentStore>,
    idle_timeout: Duration,
}

impl ReviewState {
    /// Loads the sampled benchmark and image table from a run directory and
    /// opens (or creates) its judgment log.
    pub fn open(out_dir: &Path, cfg: &ReviewConfig) -> Result<Self, ReviewError> {
        let mut statements: Vec<Statement> =
            corpus::require_jsonl(&out_dir.join(BENCHMARK), corpus::STATEMENTS_SCHEMA, "sample")?;
        statements.sort_by(|a, b| a.id.cmp(&b.id));
        let images: Vec<ImageRecord> = corpus::require_jsonl(&out_dir.join(IMAGES), corpus::IMAGES_SCHEMA, "ingest")?;
        if cfg.annotators.is_empty() {
            return Err(ReviewError::NoAnnotators);
        }
        let mut tokens = HashMap::new();
        for a in &cfg.annotators {
            if tokens.insert(a.token.clone(), a.id.clone()).is_some() {
                return Err(ReviewError::SharedToken(a.id.clone()));
            }
        }
        Ok(ReviewState {
            position: statements.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect(),
            statements,
            images: images.into_iter().map(|r| (r.image_id.clone(), r)).collect(),
            tokens,
            annotators: cfg.annotators.iter().map(|a| a.id.clone()).collect(),
            sessions: Mutex::new(HashMap::new()),
            store: Mutex::new(JudgmentStore::open(&out_dir.join(JUDGMENTS))?),
            idle_timeout: Duration::from_secs(cfg.idle_timeout_secs),
        })
    }

    pub fn with_idle_timeout(mut self, timeout: Duration) -> Self {
        self.idle_timeout = timeout;
        self
    }

    pub fn judgments(&self) -> Vec<Judgment> {
        self.store.lock().unwrap().judgments().to_vec()
    }

    pub fn statements(&self) -> &[Statement] {
        &self.statements
    }

    /// Resolves a token to its annotator, opening or refreshing the session.
    /// A session idle for longer than the timeout is closed and the request
    /// refused; the next request opens a new one.
    fn authenticate(&self, token: &str) -> Result<String, ApiError> {
        let annotator = self
            .tokens
            .get(token)
            .ok_or_else(|| ApiError(StatusCode::UNAUTHORIZED, "invalid token".into()))?;
        let mut sessions = self.sessions.lock().unwrap();
        let now = Instant::now();
        match sessions.get_mut(token) {
            Some(s) if now.duration_since(s.last_seen) > self.idle_timeout => {
                sessions.remove(token);
                Err(ApiError(
                    StatusCode::UNAUTHORIZED,
                    "session expired after inactivity; sign in again".into(),
                ))
            }
            Some(s) => {
                s.last_seen = now;
                Ok(annotator.clone())
            }
            None => {
                sessions.insert(
                    token.to_string(),
                    Session {
                        cursor: 0,
                        last_seen: now,
                    },
                );
                Ok(annotator.clone())
            }
        }
    }

    fn next_task(&self, token: &str, annotator: &str) -> TaskResponse {
        let store = self.store.lock().unwrap();
        let open = |s: &Statement| store.count(&s.id) < refinement::ANNOTATORS && !store.has(&s.id, annotator);
        let mut sessions = self.sessions.lock().unwrap();
        let session = sessions.get_mut(token).expect("authenticated");
        // statements behind the cursor are judged or full, and stay so
        while session.cursor < self.statements.len() && !open(&self.statements[session.cursor]) {
            session.cursor += 1;
        }
        let remaining = self.statements[session.cursor..].iter().filter(|s| open(s)).count();
        match self.statements.get(session.cursor) {
            None => TaskResponse {
                done: true,
                remaining: 0,
                task: None,
            },
            Some(s) => TaskResponse {
                done: false,
                remaining,
                task: Some(Task {
                    statement_id: s.id.clone(),
                    image_url: format!("/api/image/{}", s.image_id),
                    text: s.text.clone(),
                    dimension: s.dimension,
                    assigned_label: s.ground_truth,
                }),
            },
        }
    }

    fn remaining_for(&self, annotator: &str) -> usize {
        let store = self.store.lock().unwrap();
        self.statements
            .iter()
            .filter(|s| store.count(&s.id) < refinement::ANNOTATORS && !store.has(&s.id, annotator))
            .count()
    }

    pub fn progress(&self) -> Progress {
        let store = self.store.lock().unwrap();
        let mut per_annotator: BTreeMap<String, usize> = self.annotators.iter().map(|a| (a.clone(), 0)).collect();
        for j in store.judgments() {
            *per_annotator.entry(j.annotator_id.clone()).or_default() += 1;
        }
        Progress {
            statements: self.statements.len(),
            judgments: store.judgments().len(),
            required: self.statements.len() * refinement::ANNOTATORS,
            complete: self
                .statements
                .iter()
                .filter(|s| store.count(&s.id) >= refinement::ANNOTATORS)
                .count(),
            per_annotator,
        }
    }

    /// Consensus over the recorded judgments, computed by the refinement
    /// module. No judgments (or none in `dimension`) gives an all-zero table.
    pub fn consensus(&self, dimension: Option<Dimension>) -> Result<ConsensusView, RefinementError> {
        let judgments = self.judgments();
        let (done, pending) = refinement::outcomes(&judgments)?;
        let report = match refinement::agreement_report(&judgments, &self.statements, dimension) {
            Ok(r) => r,
            Err(RefinementError::Empty) => AgreementReport {
                per_dimension: BTreeMap::new(),
                total: AgreementColumn::default(),
            },
            Err(e) => return Err(e),
        };
        let in_dim = |id: &str| {
            dimension.is_none_or(|d| self.position.get(id).is_some_and(|&i| self.statements[i].dimension == d))
        };
        Ok(ConsensusView {
            dimension,
            report,
            outcomes: done.into_iter().filter(|o| in_dim(&o.statement_id)).collect(),
            pending: pending.iter().filter(|id| in_dim(id)).count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub statement_id: String,
    pub image_url: String,
    pub text: String,
    pub dimension: Dimension,
    /// Ground truth assigned by construction; the annotator judges it.
    pub assigned_label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResponse {
    pub done: bool,
    pub remaining: usize,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub token: String,
    pub statement_id: String,
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub statements: usize,
    pub judgments: usize,
    pub required: usize,
    /// Statements with all five judgments.
    pub complete: usize,
    pub per_annotator: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusView {
    pub dimension: Option<Dimension>,
    pub report: AgreementReport,
    pub outcomes: Vec<ConsensusOutcome>,
    pub pending: usize,
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type Shared = Arc<ReviewState>;

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

#[derive(Deserialize)]
struct DimensionQuery {
    dimension: Option<String>,
}

fn token(q: &TokenQuery) -> Result<&str, ApiError> {
    q.token
        .as_deref()
        .ok_or_else(|| ApiError(StatusCode::UNAUTHORIZED, "missing token".into()))
}

async fn get_task(State(st): State<Shared>, Query(q): Query<TokenQuery>) -> Result<Json<TaskResponse>, ApiError> {
    let token = token(&q)?;
    let annotator = st.authenticate(token)?;
    Ok(Json(st.next_task(token, &annotator)))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn post_judgment(State(st): State<Shared>, Json(sub): Json<Submission>) -> Result<Json<Ack>, ApiError> {
    let annotator = st.authenticate(&sub.token)?;
    if !st.position.contains_key(&sub.statement_id) {
        return Err(ApiError(
            StatusCode::NOT_FOUND,
            format!("unknown statement {}", sub.statement_id),
        ));
    }
    let j = Judgment {
        statement_id: sub.statement_id,
        annotator_id: annotator.clone(),
        verdict: sub.verdict,
        timestamp_ms: now_ms(),
    };
    let st2 = st.clone();
    // the write syncs to disk; keep it off the async workers
    let result = tokio::task::spawn_blocking(move || st2.store.lock().unwrap().append(j))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    match result {
        Ok(()) => Ok(Json(Ack {
            accepted: true,
            remaining: st.remaining_for(&annotator),
        })),
        Err(e @ StoreError::Duplicate { .. }) => Err(ApiError(StatusCode::CONFLICT, e.to_string())),
        Err(e) => {
            log::error!("judgment not recorded: {e}");
            Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, "judgment could not be stored".into()))
        }
    }
}

async fn get_progress(State(st): State<Shared>) -> Json<Progress> {
    Json(st.progress())
}

async fn get_consensus(
    State(st): State<Shared>,
    Query(q): Query<DimensionQuery>,
) -> Result<Json<ConsensusView>, ApiError> {
    let dimension = match q.dimension.as_deref().filter(|d| !d.is_empty()) {
        None => None,
        Some(d) => Some(
            Dimension::parse(d).ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, format!("unknown dimension `{d}`")))?,
        ),
    };
    st.consensus(dimension)
        .map(Json)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn get_image(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<TokenQuery>,
) -> Result<Response, ApiError> {
    st.authenticate(token(&q)?)?;
    let rec = st
        .images
        .get(&id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown image {id}")))?;
    let bytes = tokio::fs::read(&rec.path).await.map_err(|e| {
        log::error!("{}: {e}", rec.path.display());
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, "image unavailable".into())
    })?;
    Ok(([(header::CONTENT_TYPE, rec.media_type.clone())], bytes).into_response())
}

pub fn router(state: Arc<ReviewState>, allowed_origins: &[String]) -> Result<Router, ReviewError> {
    let origins = allowed_origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| ReviewError::Origin(o.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Ok(Router::new()
        .route("/api/task", get(get_task))
        .route("/api/judgment", post(post_judgment))
        .route("/api/progress", get(get_progress))
        .route("/api/consensus", get(get_consensus))
        .route("/api/image/{id}", get(get_image))
        .layer(cors)
        .with_state(state))
}

/// Serves until the process is stopped.
pub async fn serve(out_dir: PathBuf, cfg: ReviewConfig) -> Result<(), ReviewError> {
    let state = Arc::new(ReviewState::open(&out_dir, &cfg)?);
    log::info!(
        "review service on {} ({} statements, {} judgments recorded)",
        cfg.bind,
        state.statements.len(),
        state.judgments().len()
    );
    let app = router(state, &cfg.allowed_origins)?;
    let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
    axum::serve(listener, app).await?;
    Ok(())
}
