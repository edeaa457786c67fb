//! Explorer service: sessions that evaluate grasp poses, accept human pose
//! deltas, run the virtual operator and stream every state change.

mod error;
mod session;
pub mod views;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use graspcue_core::scenario::{builtin_scenario, Scenario, ScenarioError, BUILTIN_NAMES};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, oneshot};

pub use error::ApiError;
use session::{Command, SessionHandle};
use views::*;

pub const DEFAULT_PORT: u16 = 7070;
pub const DEFAULT_TICK_HZ: f64 = 30.0;
pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Extra scenario files, addressed by file name.
    pub scenario_dir: Option<PathBuf>,
    /// Descent steps per second while a descent runs.
    pub tick_hz: f64,
    pub idle_timeout: Duration,
    pub delta_cap: DeltaCap,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { scenario_dir: None, tick_hz: DEFAULT_TICK_HZ, idle_timeout: DEFAULT_IDLE_TIMEOUT, delta_cap: DeltaCap::default() }
    }
}

impl ServiceConfig {
    fn tick(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.tick_hz)
    }
}

/// Shared router state: the configuration and the live sessions.
#[derive(Clone)]
pub struct AppState {
    config: Arc<ServiceConfig>,
    sessions: Arc<Mutex<HashMap<String, Arc<SessionHandle>>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        assert!(config.tick_hz.is_finite() && config.tick_hz > 0.0, "tick rate must be positive");
        Self { config: Arc::new(config), sessions: Arc::default() }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        let handle = self
            .sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session '{id}'")))?;
        handle.touch();
        Ok(handle)
    }

    /// Drops sessions idle for longer than the timeout; a running descent counts as activity.
    pub fn evict_idle(&self) -> usize {
        let mut sessions = self.sessions.lock().expect("session table");
        let before = sessions.len();
        sessions.retain(|_, h| h.state.borrow().descent.running || h.idle_for() <= self.config.idle_timeout);
        before - sessions.len()
    }

    fn resolve_scenario(&self, name: &str) -> Result<Scenario, ApiError> {
        if let Some(s) = builtin_scenario(name) {
            return Ok(s);
        }
        let unknown = || ApiError::scenario(ScenarioError::Unknown(name.to_string()));
        let dir = self.config.scenario_dir.as_deref().ok_or_else(unknown)?;
        let plain = !name.is_empty() && !name.starts_with('.') && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !plain {
            return Err(unknown());
        }
        let file = [dir.join(name), dir.join(format!("{name}.json"))].into_iter().find(|p| p.is_file()).ok_or_else(unknown)?;
        Scenario::load(&file).map_err(ApiError::scenario)
    }

    fn scenario_files(&self) -> Vec<String> {
        let Some(dir) = self.config.scenario_dir.as_deref() else { return vec![] };
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let p = e.path();
                (p.extension().is_some_and(|x| x == "json")).then(|| p.file_stem()?.to_str().map(String::from)).flatten()
            })
            .collect();
        names.sort();
        names
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/scenarios", get(list_scenarios))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/evaluate", post(evaluate))
        .route("/sessions/{id}/pose-delta", post(pose_delta))
        .route("/sessions/{id}/descent", post(descent))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

/// Serves on `listener` until the process stops, evicting idle sessions periodically.
pub async fn serve_on(listener: TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(config);
    let reaper = state.clone();
    let period = (reaper.config.idle_timeout / 4).clamp(Duration::from_millis(10), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut ticker = tokio::time::interval(period);
        loop {
            ticker.tick().await;
            let n = reaper.evict_idle();
            if n > 0 {
                tracing::info!(evicted = n, "idle sessions dropped");
            }
        }
    });
    tracing::info!(addr = %listener.local_addr()?, "explorer service listening");
    axum::serve(listener, router(state)).await
}

pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    serve_on(TcpListener::bind(addr).await?, config).await
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") }))
}

async fn list_scenarios(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "builtin": BUILTIN_NAMES, "files": state.scenario_files() }))
}

async fn create_session(
    State(state): State<AppState>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<StateView>), ApiError> {
    let request = body(payload)?;
    let scenario = state.resolve_scenario(&request.scenario)?;
    let context = tokio::task::spawn_blocking(move || -> Result<EvalContext, ApiError> {
        let problem = scenario.problem().map_err(ApiError::scenario)?;
        EvalContext::new(scenario, problem).map_err(ApiError::numerical)
    })
    .await
    .expect("scenario setup panicked")?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let spawned = session::spawn(id.clone(), Arc::new(context), state.config.tick(), state.config.delta_cap).await?;
    state.sessions.lock().expect("session table").insert(id, Arc::new(spawned.handle));
    Ok((StatusCode::CREATED, Json(spawned.initial)))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<StateView>, ApiError> {
    Ok(Json(state.session(&id)?.state.borrow().clone()))
}

async fn delete_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ApiError> {
    state.sessions.lock().expect("session table").remove(&id).ok_or_else(|| ApiError::not_found(format!("no session '{id}'")))?;
    Ok(StatusCode::NO_CONTENT)
}

/// Evaluates without touching the session state.
async fn evaluate(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<EvaluateRequest>, JsonRejection>,
) -> Result<Json<EvaluateResponse>, ApiError> {
    let handle = state.session(&id)?;
    let pose = body(payload)?.pose;
    let context = handle.context.clone();
    let response = tokio::task::spawn_blocking(move || -> Result<EvaluateResponse, ApiError> {
        let (eval, warning) = context.evaluate(&pose).map_err(ApiError::numerical)?;
        Ok(EvaluateResponse { pose, evaluation: eval.map(|e| context.view(&pose, &e)), warning })
    })
    .await
    .expect("evaluation panicked")?;
    Ok(Json(response))
}

async fn ask<T>(handle: &SessionHandle, make: impl FnOnce(oneshot::Sender<Result<T, ApiError>>) -> Command) -> Result<T, ApiError> {
    let (tx, rx) = oneshot::channel();
    handle.commands.send(make(tx)).await.map_err(|_| ApiError::gone())?;
    rx.await.map_err(|_| ApiError::gone())?
}

async fn pose_delta(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<PoseDelta>, JsonRejection>,
) -> Result<Json<StateView>, ApiError> {
    let handle = state.session(&id)?;
    let delta = body(payload)?.delta;
    Ok(Json(ask(&handle, |reply| Command::PoseDelta { delta, reply }).await?))
}

async fn descent(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<DescentRequest>, JsonRejection>,
) -> Result<Json<DescentAck>, ApiError> {
    let handle = state.session(&id)?;
    let request = body(payload)?;
    Ok(Json(ask(&handle, |reply| Command::Descent { request, reply }).await?))
}

async fn stream(State(state): State<AppState>, UrlPath(id): UrlPath<String>, ws: WebSocketUpgrade) -> Response {
    match state.session(&id) {
        Ok(handle) => {
            let (events, current) = handle.subscribe();
            drop(handle);
            ws.on_upgrade(move |socket| forward(socket, events, current))
        }
        Err(e) => e.into_response(),
    }
}

async fn send_event(socket: &mut WebSocket, event: &StreamEvent) -> bool {
    let text = serde_json::to_string(event).expect("events serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

/// Sends the current state, then every later revision in order.
async fn forward(mut socket: WebSocket, mut events: broadcast::Receiver<StateView>, current: StateView) {
    let mut last = current.revision;
    if !send_event(&mut socket, &StreamEvent::State(Box::new(current))).await {
        return;
    }
    let reason = loop {
        tokio::select! {
            event = events.recv() => match event {
                Ok(view) if view.revision <= last => {}
                Ok(view) => {
                    last = view.revision;
                    if !send_event(&mut socket, &StreamEvent::State(Box::new(view))).await {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => break "subscriber lagged",
                Err(broadcast::error::RecvError::Closed) => break "session closed",
            },
            incoming = socket.recv() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                Some(Ok(_)) => {}
            },
        }
    };
    let _ = send_event(&mut socket, &StreamEvent::Closed { reason: reason.into() }).await;
    let _ = socket.send(Message::Close(None)).await;
}

/// Reads a scenario directory path, checking it exists.
pub fn scenario_dir(path: &Path) -> std::io::Result<PathBuf> {
    if path.is_dir() {
        Ok(path.to_path_buf())
    } else {
        Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} is not a directory", path.display())))
    }
}
