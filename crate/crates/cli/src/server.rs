//! HTTP + websocket front end for [`SessionRegistry`].
//!
//! - `POST /api/sessions[?scenario=name]` with a flat config body (lines are
//!   applied on top of the named scenario, if any) returns `{"id", "frame"}`.
//! - `GET /api/scenarios` lists the shipped scenario configs.
//! - `GET /ws/{id}` streams frames at the tick rate and accepts client
//!   messages.
//! - everything else is served from the static UI directory, if configured.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use ioda_core::session::{ClientMessage, Frame, ServerMessage, SessionRegistry};
use ioda_core::{Error, ScenarioConfig};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub struct AppState {
    pub registry: SessionRegistry,
    pub scenarios_dir: PathBuf,
    pub tick: Duration,
    attached: Mutex<HashSet<u64>>,
}

impl AppState {
    pub fn new(scenarios_dir: PathBuf, tick: Duration) -> Self {
        AppState {
            registry: SessionRegistry::new(),
            scenarios_dir,
            tick,
            attached: Mutex::new(HashSet::new()),
        }
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let app = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/scenarios", get(list_scenarios))
        .route("/ws/{id}", get(attach));
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    };
    app.with_state(state)
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(ServerMessage::Error { message })).into_response()
}

fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::InvalidCommand(_) => {
            StatusCode::BAD_REQUEST
        }
        Error::SessionNotFound(_) => StatusCode::NOT_FOUND,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

#[derive(Deserialize)]
struct CreateQuery {
    scenario: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub id: u64,
    pub frame: ServerMessage,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Query(q): Query<CreateQuery>,
    body: String,
) -> Response {
    let mut text = String::new();
    if let Some(name) = q.scenario {
        let known = crate::list_scenarios(&app.scenarios_dir).unwrap_or_default();
        let Some((_, path)) = known.into_iter().find(|(n, _)| *n == name) else {
            return error_response(StatusCode::NOT_FOUND, format!("unknown scenario `{name}`"));
        };
        match std::fs::read_to_string(&path) {
            Ok(t) => text = t,
            Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
        text.push('\n');
    }
    text.push_str(&body);
    let app2 = app.clone();
    // asset loading reads and indexes the rollout file
    let created = tokio::task::spawn_blocking(move || {
        let cfg = ScenarioConfig::parse(&text, Path::new("<request>"))?;
        app2.registry.create(cfg)
    })
    .await;
    match created {
        Ok(Ok((id, frame))) => (
            StatusCode::CREATED,
            Json(Created {
                id,
                frame: ServerMessage::Frame(frame),
            }),
        )
            .into_response(),
        Ok(Err(e)) => error_response(status_for(&e), e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub name: String,
    pub description: String,
    pub config: String,
}

async fn list_scenarios(State(app): State<Arc<AppState>>) -> Response {
    let list = match crate::list_scenarios(&app.scenarios_dir) {
        Ok(l) => l,
        Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let mut out = Vec::new();
    for (name, path) in list {
        let config = std::fs::read_to_string(&path).unwrap_or_default();
        let description = config
            .lines()
            .find_map(|l| l.trim().strip_prefix('#'))
            .map(|d| d.trim().to_string())
            .unwrap_or_default();
        out.push(ScenarioEntry {
            name,
            description,
            config,
        });
    }
    Json(out).into_response()
}

async fn attach(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
    ws: WebSocketUpgrade,
) -> Response {
    if let Err(e) = app.registry.get(id) {
        return error_response(StatusCode::NOT_FOUND, e.to_string());
    }
    if !app.attached.lock().expect("attach set poisoned").insert(id) {
        return error_response(
            StatusCode::CONFLICT,
            format!("session {id} already has a client"),
        );
    }
    ws.on_upgrade(move |socket| async move {
        drive(&app, id, socket).await;
        app.attached
            .lock()
            .expect("attach set poisoned")
            .remove(&id);
    })
}

fn encode(m: &ServerMessage) -> Message {
    Message::Text(
        serde_json::to_string(m)
            .expect("server messages serialize")
            .into(),
    )
}

/// Tick the session at the configured rate until the client closes it or
/// disconnects. A dropped connection leaves the session in the registry.
async fn drive(app: &AppState, id: u64, socket: WebSocket) {
    let (mut tx, mut rx) = socket.split();
    let Ok(session) = app.registry.get(id) else {
        return;
    };
    let first: Option<Frame> = {
        let s = session.lock().expect("session poisoned");
        s.trajectory().is_empty().then(|| s.initial_frame())
    };
    if let Some(f) = first {
        if tx.send(encode(&ServerMessage::Frame(f))).await.is_err() {
            return;
        }
    }
    let mut interval = tokio::time::interval(app.tick);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    interval.tick().await;
    loop {
        let outgoing: Vec<ServerMessage> = tokio::select! {
            _ = interval.tick() => {
                let mut s = session.lock().expect("session poisoned");
                match s.tick() {
                    Ok(msgs) => msgs,
                    Err(e) => vec![ServerMessage::Error { message: e.to_string() }],
                }
            }
            incoming = rx.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                let msg = match serde_json::from_str::<ClientMessage>(&text) {
                    Ok(m) => m,
                    Err(e) => {
                        let m = ServerMessage::Error { message: format!("bad message: {e}") };
                        if tx.send(encode(&m)).await.is_err() {
                            return;
                        }
                        continue;
                    }
                };
                if msg == ClientMessage::Close {
                    let _ = app.registry.close(id);
                    let _ = tx.send(Message::Close(None)).await;
                    return;
                }
                let mut s = session.lock().expect("session poisoned");
                match s.apply(msg) {
                    Ok(Some(frame)) => vec![ServerMessage::Frame(frame)],
                    Ok(None) => Vec::new(),
                    Err(e) => vec![ServerMessage::Error { message: e.to_string() }],
                }
            }
        };
        for m in &outgoing {
            if tx.send(encode(m)).await.is_err() {
                return;
            }
        }
    }
}

/// Serve until the process is interrupted.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
