//! REST facade over the session engine.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use adventure_core::assessment::{CachingRunner, CodeRunner};
use adventure_core::events::{read_log, Choice, JsonlLog, Mode, Phase, SystemClock};
use adventure_core::genai::FileMemoryStore;
use adventure_core::graph::{load_graph, sample_graph, GraphError, Hint, KnowledgeGraph, Level};
use adventure_core::session::{
    shared_graph, Engine, EngineParts, SessionError, UNAVAILABLE_NOTICE,
};
use adventure_core::telemetry::{groups_from_modes, report};

use crate::accounts::{AccountError, AccountStore, Role};
use crate::config::ServiceConfig;
use crate::store::{recover_state, write_snapshot, Recovery, StoreError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenInfo {
    pub username: String,
    pub learner_id: String,
    pub role: Role,
    pub mode: Option<Mode>,
    pub locale: String,
}

pub struct AppState {
    pub engine: Arc<Engine>,
    pub accounts: RwLock<AccountStore>,
    pub config: ServiceConfig,
    pub recovery: Recovery,
    tokens: RwLock<HashMap<String, TokenInfo>>,
    in_flight: Mutex<HashMap<String, usize>>,
}

impl AppState {
    pub fn snapshot_now(&self) -> Result<(), StoreError> {
        write_snapshot(&self.config.paths().snapshot, &self.engine.state())
    }
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("data directory {path} is not writable: {source}")]
    DataDir {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("knowledge graph: {0}")]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot open event log: {0}")]
    Log(std::io::Error),
    #[error("cannot open chat memory: {0}")]
    Memory(std::io::Error),
    #[error(transparent)]
    Accounts(#[from] AccountError),
    #[error("engine: {0}")]
    Engine(#[from] SessionError),
}

pub fn load_configured_graph(config: &ServiceConfig) -> Result<KnowledgeGraph, GraphError> {
    match config.graph_path() {
        Some(p) => load_graph(p),
        None => Ok(sample_graph()),
    }
}

/// Opens the data directory, recovers state and wires the engine.
pub fn open_app(config: &ServiceConfig) -> Result<Arc<AppState>, StartupError> {
    let paths = config.paths();
    let dir_err = |source| StartupError::DataDir {
        path: paths.dir.clone(),
        source,
    };
    std::fs::create_dir_all(&paths.dir).map_err(dir_err)?;
    let probe = paths.dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(dir_err)?;
    std::fs::remove_file(&probe).map_err(dir_err)?;

    let kg = load_configured_graph(config)?;
    let (state, recovery) = recover_state(&paths.events, &paths.snapshot)?;
    tracing::info!(
        events = recovery.events,
        from_snapshot = recovery.from_snapshot,
        learners = state.learners.len(),
        "state recovered"
    );
    let sink = Arc::new(JsonlLog::open(&paths.events).map_err(StartupError::Log)?);
    let runner: Arc<dyn CodeRunner> = Arc::new(CachingRunner::new(config.runners.clone()));
    let shared = shared_graph(kg);
    let llm = config.build_llm(shared.clone(), runner.clone());
    let engine = Engine::with_state(
        EngineParts {
            kg: shared,
            runner,
            llm,
            embedder: config.build_embedder(),
            memory: Arc::new(FileMemoryStore::new(&paths.memory).map_err(StartupError::Memory)?),
            clock: Arc::new(SystemClock),
            sink,
        },
        config.engine_config(),
        state,
    )?;
    Ok(Arc::new(AppState {
        engine: Arc::new(engine),
        accounts: RwLock::new(AccountStore::load(&paths.accounts)?),
        config: config.clone(),
        recovery,
        tokens: RwLock::new(HashMap::new()),
        in_flight: Mutex::new(HashMap::new()),
    }))
}

/// Every route, for tests that sweep the table.
pub const ROUTES: &[(&str, &str, bool)] = &[
    ("POST", "/api/login", false),
    ("GET", "/api/concepts", false),
    ("POST", "/api/concepts/{id}/start", false),
    ("POST", "/api/pretest/submit", false),
    ("GET", "/api/session/current", false),
    ("POST", "/api/run", false),
    ("POST", "/api/submission", false),
    ("POST", "/api/feedback/agreement", false),
    ("POST", "/api/recommendation/decision", false),
    ("POST", "/api/skip", false),
    ("GET", "/api/progress", false),
    ("GET", "/api/admin/analytics", true),
    ("POST", "/api/admin/kg/reload", true),
];

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/login", post(login))
        .route("/api/concepts", get(concepts))
        .route("/api/concepts/{id}/start", post(start_concept))
        .route("/api/pretest/submit", post(pretest))
        .route("/api/session/current", get(current))
        .route("/api/run", post(run))
        .route("/api/submission", post(submission))
        .route("/api/feedback/agreement", post(agreement))
        .route("/api/recommendation/decision", post(decision))
        .route("/api/skip", post(skip))
        .route("/api/progress", get(progress))
        .route("/api/admin/analytics", get(analytics))
        .route("/api/admin/kg/reload", post(reload_graph))
        .with_state(state)
}

// ---------------------------------------------------------------- errors

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub phase: Option<Phase>,
    pub fallback: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            phase: None,
            fallback: None,
        }
    }

    fn unauthorized(message: &str) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", message)
    }

    fn forbidden(message: &str) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", message)
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation_error",
            message,
        )
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", message)
    }

    fn with_phase(mut self, phase: Option<Phase>) -> Self {
        self.phase = phase;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "code": self.code, "message": self.message });
        if let Some(p) = self.phase {
            body["phase"] = json!(p);
        }
        if let Some(f) = self.fallback {
            body["fallback"] = f;
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use SessionError::*;
        let phase = e.phase();
        let message = e.to_string();
        let (status, code) = match &e {
            WrongPhase { .. } => (StatusCode::CONFLICT, "wrong_phase"),
            InvalidChoice { .. } => (StatusCode::CONFLICT, "invalid_choice"),
            NoActiveSession => (StatusCode::CONFLICT, "no_active_session"),
            NoAgreementStep(_) => (StatusCode::CONFLICT, "no_agreement_step"),
            ModeMismatch { .. } => (StatusCode::CONFLICT, "mode_mismatch"),
            RatingOutOfRange(_) | PretestArity(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "validation_error")
            }
            Graph(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_concept"),
            Elo(_) => (StatusCode::UNPROCESSABLE_ENTITY, "no_exercises"),
            UnknownLearner(_) => (StatusCode::UNAUTHORIZED, "unauthorized"),
            Embed(_) => (StatusCode::SERVICE_UNAVAILABLE, "embedder_unavailable"),
            Runner(_) | Log(_) | Internal(_) => {
                tracing::error!(error = %e, "request failed");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal_error")
            }
        };
        ApiError::new(status, code, message).with_phase(phase)
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

// ------------------------------------------------------------ extractors

/// JSON body whose rejections use the service's error shape.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| ApiJson(v))
            .map_err(|e: JsonRejection| ApiError::validation(e.body_text()))
    }
}

pub struct ApiQuery<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for ApiQuery<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(v)| ApiQuery(v))
            .map_err(|e: QueryRejection| ApiError::validation(e.body_text()))
    }
}

/// Any authenticated account.
pub struct Caller(pub TokenInfo);

impl FromRequestParts<Arc<AppState>> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &Arc<AppState>,
    ) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::unauthorized("missing bearer token"))?;
        state
            .tokens
            .read()
            .get(token.trim())
            .cloned()
            .map(Caller)
            .ok_or_else(|| ApiError::unauthorized("unknown or expired token"))
    }
}

/// A learner account, holding one of its in-flight request slots.
pub struct Learner {
    pub info: TokenInfo,
    pub mode: Mode,
    _slot: InFlightSlot,
}

struct InFlightSlot {
    state: Arc<AppState>,
    learner: String,
}

impl Drop for InFlightSlot {
    fn drop(&mut self) {
        let mut map = self.state.in_flight.lock();
        if let Some(n) = map.get_mut(&self.learner) {
            *n -= 1;
            if *n == 0 {
                map.remove(&self.learner);
            }
        }
    }
}

impl FromRequestParts<Arc<AppState>> for Learner {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &Arc<AppState>,
    ) -> Result<Self, Self::Rejection> {
        let Caller(info) = Caller::from_request_parts(parts, state).await?;
        let mode = match (info.role, info.mode) {
            (Role::Learner, Some(m)) => m,
            _ => return Err(ApiError::forbidden("learner account required")),
        };
        {
            let mut map = state.in_flight.lock();
            let n = map.entry(info.learner_id.clone()).or_insert(0);
            if *n >= state.config.max_in_flight_per_learner {
                return Err(ApiError::new(
                    StatusCode::TOO_MANY_REQUESTS,
                    "too_many_requests",
                    "another request for this learner is still running",
                ));
            }
            *n += 1;
        }
        Ok(Learner {
            _slot: InFlightSlot {
                state: state.clone(),
                learner: info.learner_id.clone(),
            },
            info,
            mode,
        })
    }
}

pub struct Admin(pub TokenInfo);

impl FromRequestParts<Arc<AppState>> for Admin {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &Arc<AppState>,
    ) -> Result<Self, Self::Rejection> {
        let Caller(info) = Caller::from_request_parts(parts, state).await?;
        if info.role != Role::Admin {
            return Err(ApiError::forbidden("admin account required"));
        }
        Ok(Admin(info))
    }
}

// -------------------------------------------------------------- handlers

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Deserialize)]
struct LoginBody {
    username: String,
    password: String,
}

#[derive(Serialize)]
struct LoginResponse {
    token: String,
    mode: Option<Mode>,
    role: Role,
    locale: String,
    learner_id: String,
}

async fn login(
    State(st): State<Arc<AppState>>,
    ApiJson(body): ApiJson<LoginBody>,
) -> ApiResult<Json<LoginResponse>> {
    let account = st
        .accounts
        .read()
        .verify(&body.username, &body.password)
        .cloned()
        .ok_or_else(|| ApiError::unauthorized("invalid username or password"))?;
    if let Some(mode) = account.mode {
        let engine = st.engine.clone();
        let learner = account.learner_id.clone();
        blocking(move || engine.login(&learner, mode).map_err(ApiError::from)).await?;
    }
    let token = uuid::Uuid::new_v4().to_string();
    st.tokens.write().insert(
        token.clone(),
        TokenInfo {
            username: account.username.clone(),
            learner_id: account.learner_id.clone(),
            role: account.role,
            mode: account.mode,
            locale: account.locale.clone(),
        },
    );
    Ok(Json(LoginResponse {
        token,
        mode: account.mode,
        role: account.role,
        locale: account.locale,
        learner_id: account.learner_id,
    }))
}

#[derive(Deserialize)]
struct ConceptQuery {
    language: Option<String>,
}

#[derive(Serialize)]
struct ConceptItem {
    id: String,
    name: String,
    language: String,
    order_index: u32,
    exercises: usize,
    mastered: bool,
}

async fn concepts(
    State(st): State<Arc<AppState>>,
    Caller(who): Caller,
    ApiQuery(q): ApiQuery<ConceptQuery>,
) -> ApiResult<Json<Vec<ConceptItem>>> {
    let kg = st.engine.graph();
    let mastered = st.engine.mastered(&who.learner_id);
    let mut list: Vec<_> = kg
        .concepts()
        .iter()
        .filter(|c| q.language.as_deref().is_none_or(|l| c.language == l))
        .collect();
    list.sort_by(|a, b| {
        (a.language.as_str(), a.order_index, a.id.as_str()).cmp(&(
            b.language.as_str(),
            b.order_index,
            b.id.as_str(),
        ))
    });
    Ok(Json(
        list.into_iter()
            .map(|c| ConceptItem {
                id: c.id.clone(),
                name: c.name.clone(),
                language: c.language.clone(),
                order_index: c.order_index,
                exercises: kg.concept_exercises(&c.id).count(),
                mastered: mastered.contains(&c.id),
            })
            .collect(),
    ))
}

/// What a learner may see of an exercise: no tests, no reference code.
#[derive(Serialize)]
struct ExerciseView {
    id: String,
    concept_id: String,
    level: Level,
    statement: String,
    hints: Vec<Hint>,
}

fn exercise_view(kg: &KnowledgeGraph, id: &str, locale: &str) -> Option<ExerciseView> {
    kg.exercise(id).map(|e| ExerciseView {
        id: e.id.clone(),
        concept_id: e.concept_id.clone(),
        level: e.level,
        statement: e.statements.get(locale).to_string(),
        hints: e.hints.clone(),
    })
}

#[derive(Deserialize)]
struct LocaleQuery {
    locale: Option<String>,
}

fn session_payload(st: &AppState, learner: &str, locale: &str) -> ApiResult<Value> {
    let view = st.engine.view(learner)?;
    let kg = st.engine.graph();
    let exercise = view
        .current_exercise
        .as_deref()
        .and_then(|id| exercise_view(&kg, id, locale));
    let pretest: Vec<ExerciseView> = if view.phase == Phase::NeedsPretest {
        view.pretest_items
            .iter()
            .filter_map(|id| exercise_view(&kg, id, locale))
            .collect()
    } else {
        Vec::new()
    };
    Ok(json!({ "session": view, "exercise": exercise, "pretest": pretest }))
}

async fn start_concept(
    State(st): State<Arc<AppState>>,
    who: Learner,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let language = st
        .engine
        .graph()
        .concept(&id)
        .map(|c| c.language.clone())
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "unknown_concept",
                format!("unknown concept {id:?}"),
            )
        })?;
    let st2 = st.clone();
    blocking(move || {
        st2.engine
            .start_concept(&who.info.learner_id, &language, &id)?;
        session_payload(&st2, &who.info.learner_id, &who.info.locale)
    })
    .await
    .map(Json)
}

async fn current(
    State(st): State<Arc<AppState>>,
    who: Learner,
    ApiQuery(q): ApiQuery<LocaleQuery>,
) -> ApiResult<Json<Value>> {
    let locale = q.locale.unwrap_or_else(|| who.info.locale.clone());
    session_payload(&st, &who.info.learner_id, &locale).map(Json)
}

#[derive(Deserialize)]
struct PretestBody {
    codes: Vec<String>,
}

async fn pretest(
    State(st): State<Arc<AppState>>,
    who: Learner,
    ApiJson(body): ApiJson<PretestBody>,
) -> ApiResult<Response> {
    blocking(move || {
        let out = st
            .engine
            .submit_pretest(&who.info.learner_id, &body.codes)?;
        Ok(Json(out).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct CodeBody {
    code: String,
}

async fn run(
    State(st): State<Arc<AppState>>,
    who: Learner,
    ApiJson(body): ApiJson<CodeBody>,
) -> ApiResult<Response> {
    blocking(move || Ok(Json(st.engine.run(&who.info.learner_id, &body.code)?).into_response()))
        .await
}

async fn submission(
    State(st): State<Arc<AppState>>,
    who: Learner,
    ApiJson(body): ApiJson<CodeBody>,
) -> ApiResult<Response> {
    blocking(move || {
        let out = st.engine.submit(&who.info.learner_id, &body.code)?;
        if out.degraded {
            let mut err = ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "genai_unavailable",
                UNAVAILABLE_NOTICE,
            )
            .with_phase(Some(out.phase));
            err.fallback = Some(serde_json::to_value(&out).expect("outcome serializes"));
            return Err(err);
        }
        Ok(Json(out).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct AgreementBody {
    /// Omitted or null when the learner skips the question.
    #[serde(default)]
    rating: Option<i64>,
}

async fn agreement(
    State(st): State<Arc<AppState>>,
    who: Learner,
    ApiJson(body): ApiJson<AgreementBody>,
) -> ApiResult<Json<Value>> {
    blocking(move || {
        let phase = match body.rating {
            Some(r) => st.engine.record_agreement(&who.info.learner_id, r)?,
            None => st.engine.skip_agreement(&who.info.learner_id)?,
        };
        Ok(Json(json!({ "phase": phase })))
    })
    .await
}

#[derive(Deserialize)]
struct DecisionBody {
    choice: String,
}

async fn decision(
    State(st): State<Arc<AppState>>,
    who: Learner,
    ApiJson(body): ApiJson<DecisionBody>,
) -> ApiResult<Response> {
    blocking(move || {
        let learner = &who.info.learner_id;
        let choice: Choice = match body.choice.parse() {
            Ok(c) => c,
            Err(_) => {
                let phase = st.engine.view(learner)?.phase;
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "invalid_choice",
                    format!("unknown choice {:?}", body.choice),
                )
                .with_phase(Some(phase)));
            }
        };
        Ok(Json(st.engine.resolve_recommendation(learner, choice)?).into_response())
    })
    .await
}

async fn skip(State(st): State<Arc<AppState>>, who: Learner) -> ApiResult<Json<Value>> {
    blocking(move || {
        let exercise = st.engine.request_other_exercise(&who.info.learner_id)?;
        Ok(Json(json!({ "exercise": exercise })))
    })
    .await
}

async fn progress(State(st): State<Arc<AppState>>, who: Learner) -> ApiResult<Response> {
    Ok(Json(st.engine.progress(&who.info.learner_id)?).into_response())
}

#[derive(Deserialize)]
struct AnalyticsQuery {
    format: Option<String>,
}

async fn analytics(
    State(st): State<Arc<AppState>>,
    _admin: Admin,
    ApiQuery(q): ApiQuery<AnalyticsQuery>,
) -> ApiResult<Response> {
    let text = match q.format.as_deref() {
        None | Some("json") => false,
        Some("text") => true,
        Some(other) => return Err(ApiError::validation(format!("unknown format {other:?}"))),
    };
    let path = st.config.paths().events;
    blocking(move || {
        let log = read_log(&path).map_err(|e| ApiError::internal(e.to_string()))?;
        let r = report(&log.records, &groups_from_modes(&log.records));
        Ok(if text {
            (
                [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
                r.to_text(),
            )
                .into_response()
        } else {
            Json(r).into_response()
        })
    })
    .await
}

#[derive(Deserialize)]
struct ReloadBody {
    path: Option<std::path::PathBuf>,
}

async fn reload_graph(
    State(st): State<Arc<AppState>>,
    _admin: Admin,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let requested = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        serde_json::from_slice::<ReloadBody>(&body)
            .map_err(|e| ApiError::validation(e.to_string()))?
            .path
    };
    blocking(move || {
        let kg = match requested {
            Some(p) => load_graph(p),
            None => load_configured_graph(&st.config),
        }
        .map_err(|e| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_graph",
                e.to_string(),
            )
        })?;
        let (concepts, exercises) = (kg.concepts().len(), kg.exercises().len());
        st.engine.reload_graph(kg)?;
        tracing::info!(concepts, exercises, "knowledge graph reloaded");
        Ok(Json(
            json!({ "concepts": concepts, "exercises": exercises }),
        ))
    })
    .await
}
