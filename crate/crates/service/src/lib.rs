//! HTTP JSON API for interactive dialogue sessions.
//!
//! A human and the system alternate lines. Each session steers its replies
//! toward revealing (`alpha > 0`), concealing (`alpha < 0`) or neutral
//! (`alpha = 0`) narrative shaping and exposes the belief arc after every line.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | create a session |
//! | GET | `/sessions/{id}` | config and transcript |
//! | POST | `/sessions/{id}/utterance` | one human line and the system reply (`?diagnostics=true` adds candidate scores) |
//! | GET | `/sessions/{id}/arc` | the arc so far |
//! | GET | `/healthz` | status and build info |
//!
//! Errors are `{code, message}` JSON with a matching HTTP status.

mod error;

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, PoisonError};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method as HttpMethod, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use narrative_core::arc::{ArcPoint, ShapingConfig};
use narrative_core::conversation::ConversationModel;
use narrative_core::corpus::Utterance;
use narrative_core::shaping::{GenerationSession, LineSource, Method, Transcript, DEFAULT_K};
use narrative_core::universe::UniverseModel;
use narrative_core::Exec;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::RwLock;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use error::ApiError;

/// Utterance-response pairs per session unless the request says otherwise.
pub const DEFAULT_TURN_LIMIT: usize = 5;
pub const SNAPSHOT_VERSION: u32 = 1;

/// The three shaping regimes a session can run in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Reveal,
    Conceal,
    Neutral,
}

impl Mode {
    pub fn default_alpha(self) -> f64 {
        match self {
            Mode::Reveal => 20.0,
            Mode::Conceal => -25.0,
            Mode::Neutral => 0.0,
        }
    }

    pub fn of_alpha(alpha: f64) -> Mode {
        if alpha > 0.0 {
            Mode::Reveal
        } else if alpha < 0.0 {
            Mode::Conceal
        } else {
            Mode::Neutral
        }
    }
}

/// Resolve the session `(mode, alpha)` from a request carrying either or both.
pub fn resolve_mode(mode: Option<Mode>, alpha: Option<f64>) -> Result<(Mode, f64), ApiError> {
    if let Some(a) = alpha {
        if !a.is_finite() {
            return Err(ApiError::bad_request(
                "invalid_alpha",
                "alpha must be finite",
            ));
        }
    }
    match (mode, alpha) {
        (None, None) => Err(ApiError::bad_request(
            "invalid_mode",
            "either mode or alpha is required",
        )),
        (Some(m), None) => Ok((m, m.default_alpha())),
        (None, Some(a)) => Ok((Mode::of_alpha(a), a)),
        (Some(m), Some(a)) if Mode::of_alpha(a) == m => Ok((m, a)),
        (Some(m), Some(a)) => Err(ApiError::bad_request(
            "mode_alpha_mismatch",
            format!(
                "alpha {a} is inconsistent with mode `{}`",
                serde_json::to_value(m).expect("enum")
            ),
        )),
    }
}

/// Server-wide settings.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub turn_limit: usize,
    /// Candidates considered per greedy turn.
    pub k: usize,
    pub method: Method,
    /// Where to write all sessions on shutdown.
    pub persist_path: Option<PathBuf>,
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
    /// Labels describing the models, reported by `/healthz`.
    pub conversation_model: String,
    pub universe_model: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            turn_limit: DEFAULT_TURN_LIMIT,
            k: DEFAULT_K,
            method: Method::Greedy,
            persist_path: None,
            cors_origins: Vec::new(),
            conversation_model: "retrieval".into(),
            universe_model: "naive-bayes".into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub turn_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub method: Method,
    pub max_score: f64,
    pub max_samples: usize,
    pub k: usize,
    pub seed: u64,
    pub turn_limit: usize,
    pub universes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub config: SessionConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRequest {
    pub text: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnQuery {
    #[serde(default)]
    pub diagnostics: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateDiagnostic {
    pub text: String,
    pub q_score: f64,
    pub delta: f64,
    pub sigma: f64,
    pub q_tilde: f64,
    pub chosen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `false` only when rejection sampling ran out of draws and fell back.
    pub accepted: bool,
    pub draws: usize,
    /// Candidates scored this turn; for rejection sampling only the chosen line.
    pub candidates: Vec<CandidateDiagnostic>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnResponse {
    /// 1-based index of this utterance-response pair.
    pub turn: usize,
    pub turns_remaining: usize,
    /// Arc point after the human line.
    pub human_point: ArcPoint,
    pub response_text: String,
    /// Arc point after the system line.
    pub arc_point: ArcPoint,
    /// Present only when requested with `?diagnostics=true`.
    pub candidate_diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub config: SessionConfig,
    pub turns: usize,
    /// Unix seconds.
    pub created: u64,
    pub updated: u64,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub sessions: Vec<SessionView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub service: String,
    pub version: String,
    pub conversation_model: String,
    pub universe_model: String,
    pub universes: Vec<String>,
    pub sessions: usize,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Session {
    id: String,
    config: SessionConfig,
    turns: usize,
    created: u64,
    updated: u64,
    generation: GenerationSession,
}

impl Session {
    fn turn(&mut self, text: &str, diagnostics: bool) -> Result<TurnResponse, ApiError> {
        if self.turns >= self.config.turn_limit {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "turn_limit_reached",
                format!(
                    "session `{}` finished its {} turns",
                    self.id, self.config.turn_limit
                ),
            ));
        }
        let utterance = Utterance::new(text)
            .map_err(|_| ApiError::bad_request("empty_text", "text is empty"))?;
        self.generation.absorb(utterance, LineSource::Human)?;
        let human_point = self.generation.arc().last().clone();
        let turn = self.generation.step(self.config.method, self.config.k)?;
        self.turns += 1;
        self.updated = now();

        let candidate_diagnostics = diagnostics.then(|| {
            let diag = |c: &narrative_core::shaping::ScoredCandidate, chosen| CandidateDiagnostic {
                text: c.candidate.utterance.text().to_owned(),
                q_score: c.candidate.q_score,
                delta: c.delta,
                sigma: c.sigma,
                q_tilde: c.q_tilde,
                chosen,
            };
            let candidates = if turn.considered.is_empty() {
                vec![diag(&turn.chosen, true)]
            } else {
                turn.considered
                    .iter()
                    .map(|c| diag(c, c == &turn.chosen))
                    .collect()
            };
            Diagnostics {
                accepted: turn.accepted,
                draws: turn.draws,
                candidates,
            }
        });
        Ok(TurnResponse {
            turn: self.turns,
            turns_remaining: self.config.turn_limit - self.turns,
            human_point,
            response_text: turn.chosen.candidate.utterance.text().to_owned(),
            arc_point: self.generation.arc().last().clone(),
            candidate_diagnostics,
        })
    }

    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            config: self.config.clone(),
            turns: self.turns,
            created: self.created,
            updated: self.updated,
            transcript: self.generation.transcript(self.config.method),
        }
    }
}

type SessionHandle = Arc<Mutex<Session>>;

/// Shared models plus the session table. Models are read-only; each session
/// serializes its own turns behind a mutex.
pub struct AppState {
    universe: Arc<dyn UniverseModel>,
    conversation: Arc<dyn ConversationModel>,
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, SessionHandle>>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl AppState {
    pub fn new(
        universe: Arc<dyn UniverseModel>,
        conversation: Arc<dyn ConversationModel>,
        config: ServiceConfig,
    ) -> Arc<Self> {
        Arc::new(AppState {
            universe,
            conversation,
            config,
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    async fn session(&self, id: &str) -> Result<SessionHandle, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    pub async fn create(
        &self,
        req: CreateSessionRequest,
    ) -> Result<CreateSessionResponse, ApiError> {
        let (mode, alpha) = resolve_mode(req.mode, req.alpha)?;
        let turn_limit = req.turn_limit.unwrap_or(self.config.turn_limit);
        if turn_limit == 0 {
            return Err(ApiError::bad_request(
                "invalid_turn_limit",
                "turn_limit must be at least 1",
            ));
        }
        let labels = self.universe.universe_set().labels().to_vec();
        let shaping = ShapingConfig::with_defaults(alpha, labels.len())
            .map_err(|e| ApiError::bad_request("invalid_alpha", e.to_string()))?;
        let seed = req.seed.unwrap_or_else(rand::random);
        let id = uuid::Uuid::new_v4().simple().to_string();
        let config = SessionConfig {
            mode,
            alpha,
            method: req.method.unwrap_or(self.config.method),
            max_score: shaping.max_score,
            max_samples: shaping.max_samples,
            k: self.config.k,
            seed,
            turn_limit,
            universes: labels,
        };
        let generation = GenerationSession::new(
            self.universe.clone(),
            self.conversation.clone(),
            shaping,
            seed,
        )
        .with_exec(Exec::Sequential);
        let t = now();
        let session = Session {
            id: id.clone(),
            config: config.clone(),
            turns: 0,
            created: t,
            updated: t,
            generation,
        };
        self.sessions
            .write()
            .await
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        tracing::info!(session = %id, ?mode, alpha, seed, "session created");
        Ok(CreateSessionResponse {
            session_id: id,
            config,
        })
    }

    pub async fn turn(
        &self,
        id: &str,
        text: String,
        diagnostics: bool,
    ) -> Result<TurnResponse, ApiError> {
        let session = self.session(id).await?;
        tokio::task::spawn_blocking(move || {
            session
                .lock()
                .unwrap_or_else(PoisonError::into_inner)
                .turn(&text, diagnostics)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
    }

    pub async fn arc(&self, id: &str) -> Result<serde_json::Value, ApiError> {
        let session = self.session(id).await?;
        let s = session.lock().unwrap_or_else(PoisonError::into_inner);
        Ok(s.generation.arc().to_json_value())
    }

    pub async fn view(&self, id: &str) -> Result<SessionView, ApiError> {
        let session = self.session(id).await?;
        let s = session.lock().unwrap_or_else(PoisonError::into_inner);
        Ok(s.view())
    }

    pub async fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            service: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            conversation_model: self.config.conversation_model.clone(),
            universe_model: self.config.universe_model.clone(),
            universes: self.universe.universe_set().labels().to_vec(),
            sessions: self.sessions.read().await.len(),
        }
    }

    /// All sessions, oldest first.
    pub async fn snapshot(&self) -> Snapshot {
        let handles: Vec<SessionHandle> = self.sessions.read().await.values().cloned().collect();
        let mut sessions: Vec<SessionView> = handles
            .iter()
            .map(|h| h.lock().unwrap_or_else(PoisonError::into_inner).view())
            .collect();
        sessions.sort_by(|a, b| (a.created, &a.session_id).cmp(&(b.created, &b.session_id)));
        Snapshot {
            version: SNAPSHOT_VERSION,
            sessions,
        }
    }

    /// Write the snapshot to `path` as JSON.
    pub async fn persist(&self, path: &Path) -> std::io::Result<()> {
        let json =
            serde_json::to_string_pretty(&self.snapshot().await).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let Json(req) = body?;
    Ok((StatusCode::CREATED, Json(app.create(req).await?)))
}

async fn post_utterance(
    State(app): State<Arc<AppState>>,
    id: Result<UrlPath<String>, PathRejection>,
    query: Result<Query<TurnQuery>, QueryRejection>,
    body: Result<Json<UtteranceRequest>, JsonRejection>,
) -> Result<Json<TurnResponse>, ApiError> {
    let UrlPath(id) = id?;
    let Query(query) = query?;
    let Json(req) = body?;
    Ok(Json(app.turn(&id, req.text, query.diagnostics).await?))
}

async fn get_arc(
    State(app): State<Arc<AppState>>,
    id: Result<UrlPath<String>, PathRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let UrlPath(id) = id?;
    Ok(Json(app.arc(&id).await?))
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    id: Result<UrlPath<String>, PathRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let UrlPath(id) = id?;
    Ok(Json(app.view(&id).await?))
}

async fn healthz(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(app.health().await)
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

fn cors(origins: &[String]) -> CorsLayer {
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([HttpMethod::GET, HttpMethod::POST])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/utterance", post(post_utterance))
        .route("/sessions/{id}/arc", get(get_arc))
        .fallback(fallback)
        .layer(cors(&state.config.cors_origins))
        .with_state(state)
}

/// Serve on `listener` until `shutdown` resolves, then persist sessions if
/// the config names a file.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    if let Some(path) = &state.config.persist_path {
        state.persist(path).await?;
        tracing::info!(path = %path.display(), "sessions saved");
    }
    Ok(())
}
