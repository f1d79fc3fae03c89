//! HTTP/JSON and server-sent-events front end.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use log::{error, info};
use reefpipe_core::tracker::{ReviewLabel, TrackState};
use serde::Deserialize;
use tokio::sync::watch;
use tower_http::services::ServeDir;

use crate::events::ServiceEvent;
use crate::labels::Verdict;
use crate::store::{TrackFilter, TrackStore};
use crate::ServiceError;

const DEFAULT_PAGE: usize = 50;
const MAX_PAGE: usize = 500;

#[derive(Clone)]
struct AppState {
    store: Arc<TrackStore>,
    shutdown: watch::Receiver<bool>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            ServiceError::NotFound(_) | ServiceError::NoCrop { .. } => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            error!("{self}");
        }
        (
            status,
            Json(serde_json::json!({ "error": code, "message": self.to_string() })),
        )
            .into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
struct ListQuery {
    state: Option<String>,
    label: Option<String>,
    unreviewed: Option<bool>,
    offset: Option<usize>,
    limit: Option<usize>,
}

fn parse_state(s: &str) -> Result<TrackState, ServiceError> {
    match s {
        "active" => Ok(TrackState::Active),
        "lost" => Ok(TrackState::Lost),
        "finalized" => Ok(TrackState::Finalized),
        other => Err(ServiceError::Invalid(format!("unknown state {other:?}"))),
    }
}

fn parse_label(s: &str) -> Result<ReviewLabel, ServiceError> {
    match s {
        "tp" | "true_positive" => Ok(ReviewLabel::TruePositive),
        "fp" | "false_positive" => Ok(ReviewLabel::FalsePositive),
        "unreviewed" => Ok(ReviewLabel::Unreviewed),
        other => Err(ServiceError::Invalid(format!("unknown label {other:?}"))),
    }
}

fn parse_id(s: &str) -> Result<u64, ServiceError> {
    s.parse()
        .map_err(|_| ServiceError::Invalid(format!("track id must be a non-negative integer, got {s:?}")))
}

async fn list_tracks(State(app): State<AppState>, Query(q): Query<ListQuery>) -> Result<Response, ServiceError> {
    let filter = TrackFilter {
        state: q.state.as_deref().map(parse_state).transpose()?,
        label: q.label.as_deref().map(parse_label).transpose()?,
        unreviewed_only: q.unreviewed.unwrap_or(false),
    };
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    Ok(Json(app.store.list_tracks(&filter, q.offset.unwrap_or(0), limit)).into_response())
}

async fn get_track(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let id = parse_id(&id)?;
    let store = Arc::clone(&app.store);
    let detail = tokio::task::spawn_blocking(move || store.get_track(id))
        .await
        .map_err(|e| ServiceError::Invalid(e.to_string()))??;
    Ok(Json(detail).into_response())
}

async fn get_crop(State(app): State<AppState>, Path((id, n)): Path<(String, String)>) -> Result<Response, ServiceError> {
    let id = parse_id(&id)?;
    let n: usize = n
        .parse()
        .map_err(|_| ServiceError::Invalid(format!("crop index must be a non-negative integer, got {n:?}")))?;
    let store = Arc::clone(&app.store);
    let jpeg = tokio::task::spawn_blocking(move || store.crop_jpeg(id, n))
        .await
        .map_err(|e| ServiceError::Invalid(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/jpeg")], jpeg).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    verdict: String,
    reviewer: String,
}

async fn label_track(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ServiceError> {
    let id = parse_id(&id)?;
    let body: LabelBody =
        serde_json::from_slice(&body).map_err(|e| ServiceError::Invalid(format!("malformed label body: {e}")))?;
    let verdict = match body.verdict.as_str() {
        "tp" => Verdict::TruePositive,
        "fp" => Verdict::FalsePositive,
        other => return Err(ServiceError::Invalid(format!("verdict must be \"tp\" or \"fp\", got {other:?}"))),
    };
    let store = Arc::clone(&app.store);
    let rec = tokio::task::spawn_blocking(move || store.label_track(id, verdict, &body.reviewer))
        .await
        .map_err(|e| ServiceError::Invalid(e.to_string()))??;
    Ok(Json(rec).into_response())
}

async fn stats(State(app): State<AppState>) -> Response {
    Json(app.store.stats()).into_response()
}

#[derive(Debug, Default, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

struct Subscription {
    store: Arc<TrackStore>,
    cursor: u64,
    wake: watch::Receiver<u64>,
    shutdown: watch::Receiver<bool>,
    pending: VecDeque<crate::events::Envelope>,
}

fn sse_event(env: &crate::events::Envelope) -> Event {
    Event::default()
        .id(env.id.to_string())
        .event(env.event.name())
        .data(serde_json::to_string(&*env.event).expect("event serializes"))
}

async fn events(
    State(app): State<AppState>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let from_header = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|s| s.trim().parse::<u64>().ok());
    let sub = Subscription {
        cursor: q.since.or(from_header).unwrap_or(0),
        wake: app.store.hub().subscribe(),
        shutdown: app.shutdown.clone(),
        store: app.store,
        pending: VecDeque::new(),
    };
    let stream = futures::stream::unfold(sub, |mut sub| async move {
        loop {
            if let Some(env) = sub.pending.pop_front() {
                return Some((Ok(sse_event(&env)), sub));
            }
            if *sub.shutdown.borrow() {
                return None;
            }
            sub.wake.borrow_and_update();
            let batch = sub.store.hub().since(sub.cursor, 256);
            if let Some(last) = batch.last() {
                sub.cursor = last.id;
                sub.pending.extend(batch);
                continue;
            }
            tokio::select! {
                r = sub.wake.changed() => if r.is_err() { return None; },
                _ = sub.shutdown.changed() => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

const PLACEHOLDER_INDEX: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>reefpipe</title></head>\n<body><h1>reefpipe review service</h1>\n<p>The review console is not installed. The API is available under <code>/api/</code>.</p>\n</body></html>\n";

/// The API router. Static assets under `static_dir` are served at `/`
/// when given.
pub fn router(store: Arc<TrackStore>, static_dir: Option<PathBuf>, shutdown: watch::Receiver<bool>) -> Router {
    let api = Router::new()
        .route("/api/tracks", get(list_tracks))
        .route("/api/tracks/{id}", get(get_track))
        .route("/api/tracks/{id}/crops/{n}", get(get_crop))
        .route("/api/tracks/{id}/label", post(label_track))
        .route("/api/stats", get(stats))
        .route("/api/events", get(events))
        .with_state(AppState { store, shutdown });
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_INDEX) })),
    }
}

/// A running HTTP server.
pub struct Server {
    addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    handle: tokio::task::JoinHandle<()>,
}

impl Server {
    /// Bind `addr` and serve in the background. Also publishes a metrics
    /// tick once per second while the store has metrics attached.
    pub async fn start(store: Arc<TrackStore>, addr: &str, static_dir: Option<PathBuf>) -> Result<Self, ServiceError> {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| ServiceError::Bind(format!("{addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| ServiceError::Bind(format!("{addr}: {e}")))?;
        let (tx, rx) = watch::channel(false);
        let app = router(Arc::clone(&store), static_dir, rx.clone());

        let mut tick_stop = rx.clone();
        let tick_store = Arc::clone(&store);
        tokio::spawn(async move {
            let mut every = tokio::time::interval(Duration::from_secs(1));
            loop {
                tokio::select! {
                    _ = every.tick() => {
                        if let Some(metrics) = tick_store.metrics_snapshot() {
                            tick_store.hub().publish(ServiceEvent::MetricsTick { metrics });
                        }
                    }
                    _ = tick_stop.changed() => break,
                }
            }
        });

        let mut stop = rx;
        let handle = tokio::spawn(async move {
            let served = axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = stop.wait_for(|v| *v).await;
                })
                .await;
            if let Err(e) = served {
                error!("server error: {e}");
            }
        });
        info!("serving on {local}");
        Ok(Self {
            addr: local,
            shutdown: tx,
            handle,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting requests, end event streams and wait for the server.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.handle.await;
    }
}
