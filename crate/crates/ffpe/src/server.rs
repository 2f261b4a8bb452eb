//! Reader-study HTTP service.
//!
//! Endpoints, all JSON unless noted:
//!
//! - `GET  /api/deck` deck id, length and item ids in display order
//! - `GET  /api/items/{item_id}/image` the item's PNG
//! - `POST /api/sessions` `{session_id, rater_id}`; resumes an existing session of the same rater
//! - `GET  /api/sessions/{session_id}` cursor, completion and the current item
//! - `POST /api/sessions/{session_id}/judgments` `{item_id, judged_source}`
//! - `GET  /api/sessions/{session_id}/export` reader responses, once complete
//!
//! Other paths are served from the static asset directory, if one is set.
//! Accepted changes are appended to the log and synced before the reply.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ffpe_core::eval::Source;
use ffpe_core::survey::{Deck, Judgment, PublicItem, SessionView, SurveyBook, SurveyEvent};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Deck file name inside a deck directory.
pub const DECK_FILE: &str = "deck.json";

pub type Clock = Arc<dyn Fn() -> String + Send + Sync>;

pub fn utc_now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

struct Inner {
    book: SurveyBook,
    log: File,
}

#[derive(Clone)]
pub struct SurveyServer {
    inner: Arc<Mutex<Inner>>,
    deck_dir: PathBuf,
    log_path: PathBuf,
    assets: Option<PathBuf>,
    clock: Clock,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DeckInfo {
    pub deck_id: String,
    pub total: usize,
    pub items: Vec<PublicItem>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartRequest {
    pub session_id: String,
    pub rater_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JudgmentRequest {
    pub item_id: String,
    pub judged_source: Source,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn rejected(e: ffpe_core::Error) -> ApiError {
    let status = match &e {
        ffpe_core::Error::Survey(m) if m.starts_with("unknown session") => StatusCode::NOT_FOUND,
        _ => StatusCode::CONFLICT,
    };
    ApiError(status, e.to_string())
}

impl SurveyServer {
    /// Load `deck_path` and replay `log_path` (created if absent).
    pub fn open(deck_path: &Path, log_path: &Path, assets: Option<PathBuf>, clock: Clock) -> Result<Self> {
        let deck: Deck = io::read_json(deck_path)?;
        deck.validate().map_err(|e| Error::format(deck_path, e.to_string()))?;
        let deck_dir = deck_path.parent().map(Path::to_path_buf).unwrap_or_default();
        for item in &deck.items {
            let p = deck_dir.join(&item.image);
            if !p.is_file() {
                return Err(Error::format(
                    deck_path,
                    format!("image for {} not found at {}", item.item_id, p.display()),
                ));
            }
        }
        let mut events = Vec::new();
        if log_path.exists() {
            let f = File::open(log_path).map_err(Error::io(log_path))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(Error::io(log_path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: SurveyEvent =
                    serde_json::from_str(&line).map_err(|e| Error::format(log_path, format!("line {}: {e}", i + 1)))?;
                events.push(e);
            }
        }
        let book = SurveyBook::replay(deck, events).map_err(|e| Error::format(log_path, e.to_string()))?;
        if let Some(dir) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let log = OpenOptions::new().create(true).append(true).open(log_path).map_err(Error::io(log_path))?;
        Ok(Self {
            inner: Arc::new(Mutex::new(Inner { book, log })),
            deck_dir,
            log_path: log_path.into(),
            assets,
            clock,
        })
    }

    pub fn router(self) -> Router {
        Router::new()
            .route("/api/deck", get(deck_info))
            .route("/api/items/{item_id}/image", get(item_image))
            .route("/api/sessions", post(start_session))
            .route("/api/sessions/{session_id}", get(session_view))
            .route("/api/sessions/{session_id}/judgments", post(submit_judgment))
            .route("/api/sessions/{session_id}/export", get(export))
            .fallback(static_asset)
            .with_state(self)
    }

    fn commit<T>(
        &self,
        f: impl FnOnce(&mut SurveyBook) -> ffpe_core::Result<(Option<SurveyEvent>, T)>,
    ) -> std::result::Result<T, ApiError> {
        let mut inner = self.inner.lock().expect("survey state lock");
        let (event, out) = f(&mut inner.book).map_err(rejected)?;
        if let Some(e) = event {
            let line = serde_json::to_string(&e).expect("events serialize");
            let Inner { log, .. } = &mut *inner;
            io::append_line(log, &self.log_path, &line)
                .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        }
        Ok(out)
    }
}

async fn deck_info(State(s): State<SurveyServer>) -> Json<DeckInfo> {
    let inner = s.inner.lock().expect("survey state lock");
    let deck = &inner.book.deck;
    Json(DeckInfo { deck_id: deck.deck_id.clone(), total: deck.len(), items: deck.public_items() })
}

async fn item_image(
    State(s): State<SurveyServer>,
    UrlPath(item_id): UrlPath<String>,
) -> std::result::Result<Response, ApiError> {
    let rel = {
        let inner = s.inner.lock().expect("survey state lock");
        let item = inner
            .book
            .deck
            .item(&item_id)
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown item `{item_id}`")))?;
        item.image.clone()
    };
    let bytes =
        fs::read(s.deck_dir.join(&rel)).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], bytes).into_response())
}

async fn start_session(
    State(s): State<SurveyServer>,
    Json(req): Json<StartRequest>,
) -> std::result::Result<Json<SessionView>, ApiError> {
    let view = s.commit(|book| {
        if let Ok(existing) = book.session(&req.session_id) {
            if existing.rater_id != req.rater_id {
                return Err(ffpe_core::Error::Survey(format!("session `{}` belongs to another rater", req.session_id)));
            }
            return Ok((None, existing.view(&book.deck)));
        }
        let e = book.start(&req.session_id, &req.rater_id)?;
        Ok((Some(e), book.session(&req.session_id)?.view(&book.deck)))
    })?;
    Ok(Json(view))
}

async fn session_view(
    State(s): State<SurveyServer>,
    UrlPath(session_id): UrlPath<String>,
) -> std::result::Result<Json<SessionView>, ApiError> {
    let inner = s.inner.lock().expect("survey state lock");
    let session = inner.book.session(&session_id).map_err(rejected)?;
    Ok(Json(session.view(&inner.book.deck)))
}

async fn submit_judgment(
    State(s): State<SurveyServer>,
    UrlPath(session_id): UrlPath<String>,
    Json(req): Json<JudgmentRequest>,
) -> std::result::Result<Json<SessionView>, ApiError> {
    let timestamp = (s.clock)();
    let view = s.commit(|book| {
        let j = Judgment { item_id: req.item_id, judged_source: req.judged_source, timestamp };
        let e = book.submit(&session_id, j)?;
        Ok((Some(e), book.session(&session_id)?.view(&book.deck)))
    })?;
    Ok(Json(view))
}

async fn export(
    State(s): State<SurveyServer>,
    UrlPath(session_id): UrlPath<String>,
) -> std::result::Result<Response, ApiError> {
    let inner = s.inner.lock().expect("survey state lock");
    let session = inner.book.session(&session_id).map_err(rejected)?;
    let responses = session.export(&inner.book.deck).map_err(rejected)?;
    Ok(Json(responses).into_response())
}

const PLACEHOLDER: &str = "<!doctype html><title>Reader study</title>\
<p>No static assets configured. The survey API is served under <code>/api</code>.</p>\n";

async fn static_asset(State(s): State<SurveyServer>, uri: Uri) -> Response {
    let Some(root) = &s.assets else {
        return if uri.path() == "/" {
            ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], PLACEHOLDER).into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    match fs::read(root.join(rel)) {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(rel))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

fn content_type(p: &Path) -> &'static str {
    match p.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "png" => "image/png",
        "svg" => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

/// Bind `addr` and serve until the process ends.
pub async fn serve(server: SurveyServer, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, server.router()).await
}
