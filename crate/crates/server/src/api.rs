//! HTTP/JSON session service.
//!
//! Sessions live under `/sessions/{id}`. Mutating endpoints take the
//! session's write lock, so each session has a single writer; reads share it.
//! Every accepted mutation is persisted before the response is sent.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use dpexplore::curator::{Curator, DataRequest, LedgerEntry};
use dpexplore::recommender::{recommend, JobControl, QConfig};
use dpexplore::schema::{Dataset, Schema};
use dpexplore::session::{IntentSpec, JobStatus, Priors, Session, SummaryEntry};
use dpexplore::{NoisyResponse, ProgressEstimate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

use crate::error::{AppError, ErrorKind};
use crate::store::Store;

type ApiResult<T> = Result<Json<T>, AppError>;

/// Live handle of a recommendation job.
struct ActiveJob {
    id: String,
    cancel: Arc<AtomicBool>,
    /// `f64` bits of the completed fraction.
    fraction: Arc<AtomicU64>,
}

struct Handle {
    session: RwLock<Session>,
    curator: tokio::sync::Mutex<Curator>,
    /// Analyst-side randomness: previews and noise-removed instances.
    rng: Mutex<ChaCha8Rng>,
    job: Mutex<Option<ActiveJob>>,
}

pub struct AppState {
    store: Store,
    seed: Option<u64>,
    created: AtomicU64,
    datasets: Mutex<HashMap<String, Arc<Dataset>>>,
    sessions: Mutex<HashMap<String, Arc<Handle>>>,
}

impl AppState {
    /// `seed` makes session seeds and analyst randomness reproducible; in
    /// builds with the `test-hooks` feature it also seeds the curator.
    pub fn new(store: Store, seed: Option<u64>) -> Arc<Self> {
        Arc::new(Self {
            store,
            seed,
            created: AtomicU64::new(0),
            datasets: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    fn dataset(&self, name: &str) -> Result<Arc<Dataset>, AppError> {
        if let Some(d) = self.datasets.lock().unwrap().get(name) {
            return Ok(d.clone());
        }
        let d = Arc::new(self.store.dataset(name)?);
        self.datasets.lock().unwrap().insert(name.to_string(), d.clone());
        Ok(d)
    }

    fn make_handle(&self, session: Session, dataset: Arc<Dataset>) -> Arc<Handle> {
        let curator = Curator::seeded(dataset.clone(), session.seed ^ 0x00c0_ffee)
            .filter(|_| self.seed.is_some())
            .unwrap_or_else(|| Curator::new(dataset));
        Arc::new(Handle {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(session.seed)),
            session: RwLock::new(session),
            curator: tokio::sync::Mutex::new(curator),
            job: Mutex::new(None),
        })
    }

    /// In-memory handle, loading the snapshot on first use.
    fn handle(&self, id: &str) -> Result<Arc<Handle>, AppError> {
        if let Some(h) = self.sessions.lock().unwrap().get(id) {
            return Ok(h.clone());
        }
        let session = self.store.load_session(id)?.ok_or_else(|| AppError::not_found(format!("no session `{id}`")))?;
        let dataset = self.dataset(&session.dataset)?;
        let handle = self.make_handle(session, dataset);
        Ok(self.sessions.lock().unwrap().entry(id.to_string()).or_insert(handle).clone())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/datasets", get(list_datasets))
        .route("/datasets/{name}/schema", get(dataset_schema))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/schema", get(get_schema))
        .route("/sessions/{id}/intent", put(put_intent))
        .route("/sessions/{id}/priors", put(put_priors))
        .route("/sessions/{id}/progress", put(put_progress))
        .route("/sessions/{id}/recommend", post(post_recommend))
        .route("/sessions/{id}/jobs/{job}", get(get_job))
        .route("/sessions/{id}/jobs/{job}", delete(cancel_job))
        .route("/sessions/{id}/simulate", post(post_simulate))
        .route("/sessions/{id}/requests", post(post_request))
        .route("/sessions/{id}/responses", get(list_responses))
        .route("/sessions/{id}/responses/{rid}", get(get_response))
        .route("/sessions/{id}/responses/{rid}/instance", post(post_instance))
        .route("/sessions/{id}/summary", get(get_summary))
        .route("/sessions/{id}/budget", get(get_budget))
        .with_state(state)
}

/// JSON body parsing with 400 (not 422) on malformed input.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, AppError> {
    serde_json::from_slice(body).map_err(|e| AppError::validation(format!("invalid request body: {e}")))
}

async fn list_datasets(State(st): State<Arc<AppState>>) -> ApiResult<Vec<String>> {
    Ok(Json(st.store.datasets()?))
}

async fn dataset_schema(State(st): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Schema> {
    Ok(Json(st.store.schema(&name)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    dataset: String,
    epsilon_total: f64,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Created {
    id: String,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Created>), AppError> {
    let req: CreateSession = parse(&body)?;
    let dataset = st.dataset(&req.dataset)?;
    let n = st.created.fetch_add(1, Ordering::Relaxed);
    let seed = req
        .seed
        .or_else(|| st.seed.map(|s| s.wrapping_add(n)))
        .unwrap_or_else(|| rand::rng().random());
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::new(&id, &req.dataset, dataset.schema(), dataset.n(), req.epsilon_total, seed)?;
    st.store.save_session(&session)?;
    let handle = st.make_handle(session, dataset);
    st.sessions.lock().unwrap().insert(id.clone(), handle);
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Session> {
    Ok(Json(st.handle(&id)?.session.read().await.clone()))
}

async fn get_schema(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Schema> {
    Ok(Json(st.handle(&id)?.session.read().await.schema().clone()))
}

/// Applies `f` under the write lock and persists the result.
async fn mutate<T>(
    st: &AppState,
    id: &str,
    f: impl FnOnce(&mut Session) -> Result<T, AppError>,
) -> Result<T, AppError> {
    let handle = st.handle(id)?;
    let mut session = handle.session.write().await;
    let mut draft = session.clone();
    let out = f(&mut draft)?;
    st.store.save_session(&draft)?;
    *session = draft;
    Ok(out)
}

async fn put_intent(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Session> {
    let spec: IntentSpec = parse(&body)?;
    Ok(Json(
        mutate(&st, &id, |s| {
            s.set_intent(&spec)?;
            Ok(s.clone())
        })
        .await?,
    ))
}

async fn put_priors(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Session> {
    let priors: Priors = parse(&body)?;
    Ok(Json(
        mutate(&st, &id, |s| {
            s.set_priors(&priors)?;
            Ok(s.clone())
        })
        .await?,
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgressBody {
    p: f64,
}

async fn put_progress(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<ProgressEstimate> {
    let ProgressBody { p } = parse(&body)?;
    Ok(Json(
        mutate(&st, &id, |s| {
            s.set_progress(p)?;
            Ok(s.progress)
        })
        .await?,
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecommendBody {
    k: usize,
    #[serde(default)]
    config: Option<QConfig>,
}

#[derive(Debug, Serialize)]
struct JobCreated {
    job_id: String,
}

async fn post_recommend(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<JobCreated>), AppError> {
    let req: RecommendBody = parse(&body)?;
    if req.k == 0 {
        return Err(AppError::validation("k must be at least 1"));
    }
    let handle = st.handle(&id)?;
    let mut session = handle.session.write().await;
    let cancel = Arc::new(AtomicBool::new(false));
    let fraction = Arc::new(AtomicU64::new(0f64.to_bits()));
    let job_id = format!("j{}", session.jobs.len() + 1);
    {
        let mut active = handle.job.lock().unwrap();
        if active.is_some() {
            return Err(AppError::new(ErrorKind::Conflict, "a recommendation job is already running"));
        }
        *active = Some(ActiveJob { id: job_id.clone(), cancel: cancel.clone(), fraction: fraction.clone() });
    }
    let mut draft = session.clone();
    draft.jobs.insert(job_id.clone(), JobStatus::Pending);
    if let Err(e) = st.store.save_session(&draft) {
        *handle.job.lock().unwrap() = None;
        return Err(e);
    }
    *session = draft;
    let config = req.config.unwrap_or_else(|| QConfig { seed: session.seed, ..QConfig::default() });
    let (intent, model, ledger, progress) =
        (session.intent.clone(), session.model.clone(), session.ledger.clone(), session.progress);
    drop(session);

    let (st2, handle2, job) = (st.clone(), handle.clone(), job_id.clone());
    tokio::spawn(async move {
        let result = tokio::task::spawn_blocking(move || {
            let input = dpexplore::recommender::PlannerInput {
                intent: &intent,
                model: &model,
                ledger: &ledger,
                progress: &progress,
            };
            let report = |f: f64| fraction.store(f.to_bits(), Ordering::Relaxed);
            recommend(input, &config, req.k, JobControl { cancel: Some(&cancel), on_progress: Some(&report) })
        })
        .await;
        let status = match result {
            Ok(Ok(candidates)) => JobStatus::Done { candidates },
            Ok(Err(dpexplore::RecommendError::Cancelled)) => JobStatus::Cancelled,
            Ok(Err(e)) => JobStatus::Failed { error: e.to_string() },
            Err(e) => JobStatus::Failed { error: format!("job panicked: {e}") },
        };
        let mut session = handle2.session.write().await;
        session.jobs.insert(job.clone(), status);
        // A failed write leaves the result in memory; the next mutation retries it.
        let _ = st2.store.save_session(&session);
        *handle2.job.lock().unwrap() = None;
    });
    Ok((StatusCode::ACCEPTED, Json(JobCreated { job_id })))
}

async fn get_job(State(st): State<Arc<AppState>>, Path((id, job)): Path<(String, String)>) -> ApiResult<JobStatus> {
    let handle = st.handle(&id)?;
    let session = handle.session.read().await;
    let status = session.jobs.get(&job).cloned().ok_or_else(|| AppError::not_found(format!("no job `{job}`")))?;
    if status.is_active() {
        if let Some(active) = handle.job.lock().unwrap().as_ref().filter(|a| a.id == job) {
            let fraction = f64::from_bits(active.fraction.load(Ordering::Relaxed));
            return Ok(Json(JobStatus::Running { fraction }));
        }
    }
    Ok(Json(status))
}

async fn cancel_job(
    State(st): State<Arc<AppState>>,
    Path((id, job)): Path<(String, String)>,
) -> Result<StatusCode, AppError> {
    let handle = st.handle(&id)?;
    if !handle.session.read().await.jobs.contains_key(&job) {
        return Err(AppError::not_found(format!("no job `{job}`")));
    }
    if let Some(active) = handle.job.lock().unwrap().as_ref().filter(|a| a.id == job) {
        active.cancel.store(true, Ordering::Relaxed);
    }
    Ok(StatusCode::ACCEPTED)
}

async fn post_simulate(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<NoisyResponse> {
    let request: DataRequest = parse(&body)?;
    let handle = st.handle(&id)?;
    let session = handle.session.read().await;
    let mut rng = handle.rng.lock().unwrap();
    Ok(Json(session.simulate(&request, &mut *rng)?))
}

async fn post_request(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<NoisyResponse> {
    let request: DataRequest = parse(&body)?;
    let handle = st.handle(&id)?;
    let mut session = handle.session.write().await;
    let mut curator = handle.curator.lock().await;
    let mut draft = session.clone();
    let response = draft.execute(&mut curator, &request)?;
    st.store.save_session(&draft)?;
    *session = draft;
    Ok(Json(response))
}

async fn list_responses(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Vec<NoisyResponse>> {
    Ok(Json(st.handle(&id)?.session.read().await.responses.clone()))
}

async fn get_response(
    State(st): State<Arc<AppState>>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<NoisyResponse> {
    Ok(Json(st.handle(&id)?.session.read().await.response(&rid)?.clone()))
}

#[derive(Debug, Serialize)]
struct Instance {
    response_id: String,
    values: Vec<f64>,
}

async fn post_instance(
    State(st): State<Arc<AppState>>,
    Path((id, rid)): Path<(String, String)>,
) -> ApiResult<Instance> {
    let handle = st.handle(&id)?;
    let session = handle.session.read().await;
    let mut rng = handle.rng.lock().unwrap();
    let values = session.instance(&rid, &mut *rng)?;
    Ok(Json(Instance { response_id: rid, values }))
}

async fn get_summary(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Vec<SummaryEntry>> {
    Ok(Json(st.handle(&id)?.session.read().await.summary()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon_total: f64,
    pub epsilon_remain: f64,
    pub entries: Vec<LedgerEntry>,
}

async fn get_budget(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Budget> {
    let handle = st.handle(&id)?;
    let session = handle.session.read().await;
    let l = &session.ledger;
    Ok(Json(Budget { epsilon_total: l.epsilon_total(), epsilon_remain: l.epsilon_remain(), entries: l.entries().to_vec() }))
}

/// Serves until the process is stopped.
pub async fn serve(store: Store, port: u16, seed: Option<u64>) -> std::io::Result<()> {
    let app = router(AppState::new(store, seed));
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}
