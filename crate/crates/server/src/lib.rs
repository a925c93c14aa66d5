//! HTTP/JSON service over the ADVENT pipeline.
//!
//! Pipeline operations (`generate`, `preprocess`, `run`, `evaluate`, `report`)
//! run on the blocking pool. The federated onset server and the malicious-list
//! aggregator are long-lived sessions behind one lock each, so many vehicle
//! clients can talk to them concurrently while every state change stays
//! serialized.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;

use advent_core::api::*;
use advent_core::fed_mnd::AggregationState;
use advent_core::fed_onset::{GlobalModel, OnsetServer};
use advent_core::metrics::{self, Confusion, EvalReport, Metrics};
use advent_core::mnd::{self, SuspicionReport};
use advent_core::pipeline::{self, RunManifest};
use advent_core::protocol::Message;
use advent_core::Error;

pub struct ApiFailure(Error);

impl From<Error> for ApiFailure {
    fn from(e: Error) -> Self {
        ApiFailure(e)
    }
}

fn status_of(e: &Error) -> (StatusCode, &'static str) {
    match e {
        Error::Config { .. } => (StatusCode::BAD_REQUEST, "config"),
        Error::Parse { .. } => (StatusCode::BAD_REQUEST, "parse"),
        Error::Dimension { .. } => (StatusCode::BAD_REQUEST, "dimension"),
        Error::Domain(_) => (StatusCode::UNPROCESSABLE_ENTITY, "domain"),
        Error::Protocol { .. } => (StatusCode::CONFLICT, "protocol"),
        Error::Stall { .. } => (StatusCode::CONFLICT, "stall"),
        Error::NotReady(_) => (StatusCode::SERVICE_UNAVAILABLE, "not_ready"),
        Error::Evaluation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "evaluation"),
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => (StatusCode::NOT_FOUND, "io"),
        Error::Io { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
        Error::Json(_) => (StatusCode::BAD_REQUEST, "json"),
        Error::Csv(_) => (StatusCode::BAD_REQUEST, "csv"),
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        let (status, kind) = status_of(&self.0);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        } else {
            tracing::debug!(error = %self.0, "request rejected");
        }
        let body = ApiError {
            kind: kind.to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiFailure>;

#[derive(Clone)]
pub struct AppState {
    onset: Arc<Mutex<OnsetServer>>,
    mnd: Arc<Mutex<MndSessionState>>,
}

struct MndSessionState {
    aggregation: AggregationState,
    inbox: Vec<SuspicionReport>,
}

impl MndSessionState {
    fn new(s: &MndSession) -> Result<Self, Error> {
        Ok(MndSessionState {
            aggregation: AggregationState::new(s.mode, s.threshold, s.timer_duration_s)?,
            inbox: Vec::new(),
        })
    }
}

impl AppState {
    pub fn new() -> Result<Self, Error> {
        let onset = OnsetServer::new(Default::default(), Default::default())?;
        Ok(AppState {
            onset: Arc::new(Mutex::new(onset)),
            mnd: Arc::new(Mutex::new(MndSessionState::new(&MndSession::default())?)),
        })
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // A panic while holding the lock leaves state consistent enough to report on.
    m.lock().unwrap_or_else(|p| p.into_inner())
}

async fn blocking<T, F>(f: F) -> Result<T, ApiFailure>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, Error> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiFailure),
        Err(e) => Err(ApiFailure(Error::Domain(format!("worker task failed: {e}")))),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/generate", post(generate))
        .route("/v1/preprocess", post(preprocess))
        .route("/v1/run", post(run))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/report", post(report))
        .route("/v1/onset/session", post(onset_session))
        .route("/v1/onset/messages", post(onset_message))
        .route("/v1/onset/round0/close", post(onset_close_round0))
        .route("/v1/onset/round/close", post(onset_close_round))
        .route("/v1/onset/join", post(onset_join))
        .route("/v1/onset/status", get(onset_status))
        .route("/v1/onset/model", get(onset_model))
        .route("/v1/mnd/detect", post(mnd_detect))
        .route("/v1/mnd/session", post(mnd_session))
        .route("/v1/mnd/messages", post(mnd_message))
        .route("/v1/mnd/aggregate", post(mnd_aggregate))
        .route("/v1/mnd/list", get(mnd_list))
        .route("/v1/metrics/score", post(score))
        .with_state(state)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Bind `addr` and serve in a background task. Returns the bound address.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let state = AppState::new().map_err(std::io::Error::other)?;
    let handle = tokio::spawn(async move { axum::serve(listener, router(state)).await });
    Ok((local, handle))
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn generate(Json(req): Json<GenerateRequest>) -> ApiResult<GenerateResponse> {
    let resp = blocking(move || {
        let (events, truth_path) = pipeline::generate_to(&req.config, &req.output)?;
        Ok(GenerateResponse {
            events,
            events_path: req.output,
            truth_path,
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn preprocess(Json(req): Json<PreprocessRequest>) -> ApiResult<PreprocessResponse> {
    let resp = blocking(move || {
        let vehicles = pipeline::preprocess_to(&req.scenario_path, &req.output_dir, req.window, req.label_mode)?;
        Ok(PreprocessResponse {
            vehicles,
            output_dir: req.output_dir,
        })
    })
    .await?;
    Ok(Json(resp))
}

async fn run(Json(manifest): Json<RunManifest>) -> ApiResult<RunResponse> {
    let out = blocking(move || pipeline::run(&manifest)).await?;
    Ok(Json(RunResponse {
        report: out.report,
        timing: out.timing,
        output_dir: out.output_dir,
    }))
}

async fn evaluate(Json(req): Json<DirRequest>) -> ApiResult<EvalReport> {
    Ok(Json(blocking(move || pipeline::evaluate(&req.dir)).await?))
}

async fn report(Json(req): Json<DirRequest>) -> ApiResult<ReportResponse> {
    let c = blocking(move || pipeline::report(&req.dir)).await?;
    Ok(Json(ReportResponse {
        rows: c.rows,
        csv: c.csv,
        table: c.table,
    }))
}

fn onset_status_of(s: &OnsetServer) -> OnsetStatus {
    OnsetStatus {
        round: s.current_round(),
        model_version: s.model().map(|m| m.model_version),
        pending_trees: s.pending_trees(),
        pending_updates: s.pending_updates(),
        fedavg_calls: s.fedavg_calls(),
    }
}

async fn onset_session(State(state): State<AppState>, Json(req): Json<OnsetSession>) -> ApiResult<OnsetStatus> {
    let server = OnsetServer::new(req.fed, req.head)?;
    let status = onset_status_of(&server);
    *lock(&state.onset) = server;
    Ok(Json(status))
}

async fn onset_message(State(state): State<AppState>, Json(msg): Json<Message>) -> ApiResult<Vec<Message>> {
    Ok(Json(lock(&state.onset).handle(msg)?))
}

async fn onset_close_round0(State(state): State<AppState>) -> ApiResult<Vec<Message>> {
    let onset = state.onset.clone();
    // Round 0 builds the head and clones every ensemble; keep it off the reactor.
    let msgs = blocking(move || lock(&onset).close_round0()).await?;
    Ok(Json(msgs))
}

async fn onset_close_round(State(state): State<AppState>) -> ApiResult<Message> {
    let onset = state.onset.clone();
    Ok(Json(blocking(move || lock(&onset).close_weight_round()).await?))
}

async fn onset_join(State(state): State<AppState>, Json(req): Json<JoinRequest>) -> ApiResult<Vec<Message>> {
    Ok(Json(lock(&state.onset).join(req.cid)))
}

async fn onset_status(State(state): State<AppState>) -> Json<OnsetStatus> {
    Json(onset_status_of(&lock(&state.onset)))
}

async fn onset_model(State(state): State<AppState>) -> ApiResult<GlobalModel> {
    lock(&state.onset)
        .model()
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiFailure(Error::NotReady("round 0 has not closed".into())))
}

async fn mnd_detect(Json(req): Json<DetectRequest>) -> ApiResult<SuspicionReport> {
    req.params.validate()?;
    Ok(Json(mnd::detect(&req.counts, &req.params)))
}

async fn mnd_session(State(state): State<AppState>, Json(req): Json<MndSession>) -> ApiResult<MndSession> {
    let fresh = MndSessionState::new(&req)?;
    *lock(&state.mnd) = fresh;
    Ok(Json(req))
}

async fn mnd_message(State(state): State<AppState>, Json(msg): Json<Message>) -> Result<(StatusCode, Json<Accepted>), ApiFailure> {
    let Message::SuspicionReport { cid, report, .. } = msg else {
        return Err(ApiFailure(Error::Protocol {
            client: None,
            message: format!("malicious node server does not accept {}", msg.type_name()),
        }));
    };
    if cid != report.reporter {
        return Err(ApiFailure(Error::Protocol {
            client: Some(cid),
            message: format!("report is signed by {}", report.reporter),
        }));
    }
    let mut s = lock(&state.mnd);
    s.inbox.push(report);
    Ok((StatusCode::ACCEPTED, Json(Accepted { queued: s.inbox.len() })))
}

async fn mnd_aggregate(State(state): State<AppState>, Json(clock): Json<Clock>) -> ApiResult<Message> {
    let mut s = lock(&state.mnd);
    let reports = std::mem::take(&mut s.inbox);
    let (_, msg) = s.aggregation.ingest_round(&reports, clock.now_s);
    Ok(Json(msg))
}

async fn mnd_list(State(state): State<AppState>, Query(clock): Query<Clock>) -> Json<Message> {
    Json(lock(&state.mnd).aggregation.current(clock.now_s))
}

async fn score(Json(c): Json<Confusion>) -> Json<Metrics> {
    Json(metrics::score(&c))
}
