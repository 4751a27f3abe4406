//! HTTP service over one project for the labeling console.
//!
//! Every state change goes through the single [`Project`] behind a mutex.
//! Iterations and finalization run as background jobs whose status is
//! polled; while a job runs, other mutating requests get `409 Conflict`.
//! Read-only endpoints answer from a snapshot refreshed after each change.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Body;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use camtrap_core::active::{IterationRecord, StartMode};
use camtrap_core::ingest::BBox;
use camtrap_core::store::Project;
use camtrap_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },

    #[error("server failure: {0}")]
    Server(#[source] std::io::Error),
}

/// Error reply: status code plus `{"error": message}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "a background job is running")
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::NoModel | CoreError::NoLabels | CoreError::EmptyPool => StatusCode::CONFLICT,
            CoreError::LabelConflict { .. } => StatusCode::CONFLICT,
            e if e.is_validation() => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LastMetrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Status {
    pub iteration: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test_size: usize,
    pub last_metrics: Option<LastMetrics>,
    pub queued: usize,
    pub job_running: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxView {
    pub bbox: [f64; 4],
    pub confidence: f64,
    pub category: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueueItem {
    pub image_id: String,
    pub url: String,
    pub station_id: String,
    pub boxes: Vec<BoxView>,
    /// Class scores of the latest model; absent before the first iteration.
    pub current_scores: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub labeled_count: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub coverage: f64,
    pub embedder: String,
    pub alpha: f64,
    pub queried: usize,
}

impl From<&IterationRecord> for HistoryRow {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iteration: r.iteration,
            labeled_count: r.labeled_count,
            accuracy: r.accuracy,
            weighted_f1: r.weighted_f1,
            coverage: r.coverage,
            embedder: r.lambda.embedder.name.clone(),
            alpha: r.lambda.alpha,
            queried: r.queried.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct JobView {
    pub job_id: u64,
    pub kind: String,
    pub state: JobState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<HistoryRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
struct Snapshot {
    status: Option<Status>,
    queue: Vec<QueueItem>,
    history: Vec<HistoryRow>,
    predictions_csv: Option<String>,
}

#[derive(Default)]
struct Jobs {
    next: u64,
    table: BTreeMap<u64, JobView>,
    running: Option<u64>,
}

/// Shared service state.
pub struct AppState {
    project: Mutex<Project>,
    snapshot: RwLock<Snapshot>,
    jobs: Mutex<Jobs>,
    /// Responses of completed mutating requests by `(endpoint, key)`.
    replies: Mutex<HashMap<(String, String), serde_json::Value>>,
}

impl AppState {
    pub fn new(project: Project) -> Arc<Self> {
        let state = Arc::new(Self {
            project: Mutex::new(project),
            snapshot: RwLock::new(Snapshot::default()),
            jobs: Mutex::new(Jobs::default()),
            replies: Mutex::new(HashMap::new()),
        });
        {
            let p = state.project.lock().unwrap();
            state.refresh(&p);
        }
        state
    }

    /// Rebuild the read-only snapshot from the project.
    fn refresh(&self, p: &Project) {
        let snapshot = build_snapshot(p, self.job_running());
        *self.snapshot.write().unwrap() = snapshot;
    }

    fn job_running(&self) -> bool {
        self.jobs.lock().unwrap().running.is_some()
    }

    /// Run `f` on the project unless a job is running, save, and refresh.
    fn mutate<T>(&self, f: impl FnOnce(&mut Project) -> Result<T, CoreError>) -> ApiResult<T> {
        if self.job_running() {
            return Err(ApiError::busy());
        }
        let mut p = self.project.lock().unwrap();
        let out = f(&mut p);
        // Reload nothing on failure: core operations leave the state untouched.
        let out = out?;
        p.save()?;
        self.refresh(&p);
        Ok(out)
    }

    fn replay(&self, endpoint: &str, key: &Option<String>) -> Option<serde_json::Value> {
        let key = key.as_ref()?;
        self.replies
            .lock()
            .unwrap()
            .get(&(endpoint.to_string(), key.clone()))
            .cloned()
    }

    fn remember(&self, endpoint: &str, key: &Option<String>, reply: &serde_json::Value) {
        if let Some(key) = key {
            self.replies
                .lock()
                .unwrap()
                .insert((endpoint.to_string(), key.clone()), reply.clone());
        }
    }

    /// Project access for tests and embedding applications.
    pub fn with_project<T>(&self, f: impl FnOnce(&Project) -> T) -> T {
        f(&self.project.lock().unwrap())
    }
}

fn build_snapshot(p: &Project, job_running: bool) -> Snapshot {
    let al = p.active();
    let history: Vec<HistoryRow> = al
        .map(|a| a.history.iter().map(HistoryRow::from).collect())
        .unwrap_or_default();
    let status = Status {
        iteration: al.map_or(0, |a| a.iteration),
        labeled: al.map_or(0, |a| a.labeled_pool.len()),
        unlabeled: al.map_or_else(
            || {
                let test = p
                    .manifest
                    .split
                    .as_ref()
                    .map_or(0, |s| s.ids(camtrap_core::tuning::Split::Test).len());
                p.dataset.len() - test
            },
            |a| a.unlabeled_pool.len(),
        ),
        test_size: al.map_or_else(
            || {
                p.manifest
                    .split
                    .as_ref()
                    .map_or(0, |s| s.ids(camtrap_core::tuning::Split::Test).len())
            },
            |a| a.frozen_test.len(),
        ),
        last_metrics: al.and_then(|a| a.history.last()).map(|r| LastMetrics {
            accuracy: r.accuracy,
            weighted_f1: r.weighted_f1,
            coverage: r.coverage,
        }),
        queued: al.map_or(0, |a| a.queued.len()),
        job_running,
    };
    let queue = al.map(|a| queue_items(p, &a.queued)).unwrap_or_default();
    let predictions_csv = p
        .manifest
        .predictions
        .as_ref()
        .and_then(|rel| std::fs::read_to_string(p.path(rel)).ok());
    Snapshot {
        status: Some(status),
        queue,
        history,
        predictions_csv,
    }
}

fn queue_items(p: &Project, ids: &[String]) -> Vec<QueueItem> {
    let head = p.al_head().ok().flatten();
    let lambda = p.active().and_then(|a| a.lambda.clone());
    let deps = p.deps();
    let space = p.dataset.label_space();
    ids.iter()
        .filter_map(|id| {
            let (img, ds) = p.dataset.entry(id)?;
            let boxes = ds
                .detections
                .iter()
                .map(|d| {
                    let BBox { x, y, w, h } = d.bbox;
                    BoxView {
                        bbox: [x, y, w, h],
                        confidence: d.confidence,
                        category: serde_json::to_value(d.category)
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_string))
                            .unwrap_or_default(),
                    }
                })
                .collect();
            let current_scores = match (&head, &lambda) {
                (Some(h), Some(l)) => deps
                    .predict(h, std::slice::from_ref(id), l)
                    .ok()
                    .and_then(|mut v| v.pop())
                    .map(|pred| {
                        space
                            .classes()
                            .iter()
                            .cloned()
                            .zip(pred.scores)
                            .collect::<BTreeMap<_, _>>()
                    }),
                _ => None,
            };
            Some(QueueItem {
                image_id: id.clone(),
                url: format!("/api/images/{id}"),
                station_id: img.station_id.clone(),
                boxes,
                current_scores,
            })
        })
        .collect()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/select", post(select))
        .route("/api/queue", get(queue))
        .route("/api/images/{id}", get(image))
        .route("/api/labels", post(labels))
        .route("/api/iterate", post(iterate))
        .route("/api/jobs/{id}", get(job))
        .route("/api/history", get(history))
        .route("/api/finalize", post(finalize))
        .route("/api/export/predictions", get(export_predictions))
        .with_state(state)
}

async fn status(State(s): State<Arc<AppState>>) -> Json<Status> {
    let mut st = s
        .snapshot
        .read()
        .unwrap()
        .status
        .clone()
        .expect("snapshot built at startup");
    st.job_running = s.job_running();
    Json(st)
}

#[derive(Debug, Default, Deserialize)]
pub struct SelectRequest {
    pub batch_size: Option<usize>,
    pub stratified: Option<bool>,
    pub idempotency_key: Option<String>,
}

async fn select(
    State(s): State<Arc<AppState>>,
    body: Option<Json<SelectRequest>>,
) -> ApiResult<Json<serde_json::Value>> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    if let Some(reply) = s.replay("select", &req.idempotency_key) {
        return Ok(Json(reply));
    }
    let state = s.clone();
    let reply = blocking(move || {
        let queued = state.mutate(|p| p.al_select(req.batch_size, req.stratified))?;
        let reply = json!({ "queued": queued });
        state.remember("select", &req.idempotency_key, &reply);
        Ok(reply)
    })
    .await?;
    Ok(Json(reply))
}

async fn queue(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let items = s.snapshot.read().unwrap().queue.clone();
    Json(json!({ "items": items }))
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn image(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let path: Option<PathBuf> = s.with_project(|p| p.image_path(&id));
    let Some(path) = path else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("no image file for {id:?}"),
        ));
    };
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    Ok((
        [(header::CONTENT_TYPE, content_type(&path))],
        Body::from(bytes),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
pub struct LabelItem {
    pub image_id: String,
    pub label: String,
}

#[derive(Debug, Deserialize)]
pub struct LabelsRequest {
    pub labels: Vec<LabelItem>,
    pub idempotency_key: Option<String>,
}

async fn labels(
    State(s): State<Arc<AppState>>,
    Json(req): Json<LabelsRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    if let Some(reply) = s.replay("labels", &req.idempotency_key) {
        return Ok(Json(reply));
    }
    let state = s.clone();
    let reply = blocking(move || {
        let pairs: Vec<(String, String)> = req
            .labels
            .into_iter()
            .map(|l| (l.image_id, l.label))
            .collect();
        let outcome = state.mutate(|p| p.al_label_each(&pairs))?;
        let rejected: Vec<_> = outcome
            .rejected
            .iter()
            .map(|(id, reason)| json!({ "image_id": id, "reason": reason }))
            .collect();
        let reply = json!({ "accepted": outcome.accepted.len(), "rejected": rejected });
        state.remember("labels", &req.idempotency_key, &reply);
        Ok(reply)
    })
    .await?;
    Ok(Json(reply))
}

#[derive(Debug, Default, Deserialize)]
pub struct IterateRequest {
    pub skip_tuning: Option<bool>,
    pub start_mode: Option<StartMode>,
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct FinalizeRequest {
    pub idempotency_key: Option<String>,
}

enum JobKind {
    Iterate {
        skip_tuning: Option<bool>,
        start_mode: Option<StartMode>,
    },
    Finalize,
}

fn start_job(
    s: &Arc<AppState>,
    kind: JobKind,
    endpoint: &str,
    key: &Option<String>,
) -> ApiResult<serde_json::Value> {
    let id = {
        let mut jobs = s.jobs.lock().unwrap();
        if jobs.running.is_some() {
            return Err(ApiError::busy());
        }
        jobs.next += 1;
        let id = jobs.next;
        let name = match kind {
            JobKind::Iterate { .. } => "iterate",
            JobKind::Finalize => "finalize",
        };
        jobs.table.insert(
            id,
            JobView {
                job_id: id,
                kind: name.into(),
                state: JobState::Pending,
                record: None,
                predictions: None,
                error: None,
            },
        );
        jobs.running = Some(id);
        id
    };
    let reply = json!({ "job_id": id });
    s.remember(endpoint, key, &reply);
    let state = s.clone();
    tokio::task::spawn_blocking(move || run_job(&state, id, kind));
    Ok(reply)
}

fn run_job(s: &AppState, id: u64, kind: JobKind) {
    s.jobs.lock().unwrap().table.get_mut(&id).unwrap().state = JobState::Running;
    let mut p = s.project.lock().unwrap();
    let result: Result<(Option<HistoryRow>, Option<usize>), CoreError> = match kind {
        JobKind::Iterate {
            skip_tuning,
            start_mode,
        } => p
            .al_iterate(skip_tuning, start_mode)
            .map(|r| (Some(HistoryRow::from(&r)), None)),
        JobKind::Finalize => p.al_finalize().map(|preds| (None, Some(preds.len()))),
    };
    let result = result.and_then(|r| p.save().map(|_| r));
    {
        let mut jobs = s.jobs.lock().unwrap();
        let job = jobs.table.get_mut(&id).unwrap();
        match result {
            Ok((record, predictions)) => {
                job.state = JobState::Done;
                job.record = record;
                job.predictions = predictions;
            }
            Err(e) => {
                log::error!("job {id} failed: {e}");
                job.state = JobState::Failed;
                job.error = Some(e.to_string());
            }
        }
        jobs.running = None;
    }
    s.refresh(&p);
}

async fn iterate(
    State(s): State<Arc<AppState>>,
    body: Option<Json<IterateRequest>>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    if let Some(reply) = s.replay("iterate", &req.idempotency_key) {
        return Ok((StatusCode::ACCEPTED, Json(reply)));
    }
    let kind = JobKind::Iterate {
        skip_tuning: req.skip_tuning,
        start_mode: req.start_mode,
    };
    let reply = start_job(&s, kind, "iterate", &req.idempotency_key)?;
    Ok((StatusCode::ACCEPTED, Json(reply)))
}

async fn finalize(
    State(s): State<Arc<AppState>>,
    body: Option<Json<FinalizeRequest>>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    if let Some(reply) = s.replay("finalize", &req.idempotency_key) {
        return Ok((StatusCode::ACCEPTED, Json(reply)));
    }
    let reply = start_job(&s, JobKind::Finalize, "finalize", &req.idempotency_key)?;
    Ok((StatusCode::ACCEPTED, Json(reply)))
}

async fn job(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> ApiResult<Json<JobView>> {
    s.jobs
        .lock()
        .unwrap()
        .table
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no job {id}")))
}

async fn history(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let rows = s.snapshot.read().unwrap().history.clone();
    Json(json!({ "rows": rows }))
}

async fn export_predictions(State(s): State<Arc<AppState>>) -> ApiResult<Response> {
    let csv = s.snapshot.read().unwrap().predictions_csv.clone();
    match csv {
        Some(csv) => Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response()),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "no predictions yet; run finalize",
        )),
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

/// Open `project_path` for writing and serve it until the process stops.
pub async fn serve(project_path: &Path, addr: SocketAddr) -> Result<(), ServiceError> {
    let project = Project::open(project_path)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::BindFailure { addr, source })?;
    log::info!(
        "serving {} on http://{}",
        project_path.display(),
        listener.local_addr().map_err(ServiceError::Server)?
    );
    let app = router(AppState::new(project));
    axum::serve(listener, app)
        .await
        .map_err(ServiceError::Server)
}
