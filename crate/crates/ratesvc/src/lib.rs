//! HTTP front end for blinded pair ratings.
//!
//! `GET /api/pairs/next?rater=ID`, `POST /api/ratings`, `GET /api/summary`
//! and `GET /audio/{ref}`; all bodies are JSON.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use duplexkit_core::rating::{summarize, PairSet, PairView, RatingError, RatingRecord, RatingStore, Summary};
use serde::{Deserialize, Serialize};

pub struct AppState {
    pairs: PairSet,
    store: Mutex<RatingStore>,
    audio_root: PathBuf,
}

impl AppState {
    pub fn new(pairs: PairSet, store: RatingStore, audio_root: impl Into<PathBuf>) -> Self {
        Self { pairs, store: Mutex::new(store), audio_root: audio_root.into() }
    }

    /// Summary over a snapshot of the store taken under the lock.
    pub fn summary(&self) -> Result<Summary, RatingError> {
        let records = self.store.lock().expect("store lock").records().to_vec();
        summarize(&self.pairs, &records)
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<RatingError> for ApiError {
    fn from(e: RatingError) -> Self {
        let code = match e {
            RatingError::Duplicate { .. } => StatusCode::CONFLICT,
            RatingError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            RatingError::UnknownPair(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

#[derive(Deserialize)]
struct RaterQuery {
    #[serde(default)]
    rater: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct NextPair {
    pub done: bool,
    pub completed: usize,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairView>,
}

async fn next_pair(State(st): State<Arc<AppState>>, Query(q): Query<RaterQuery>) -> Result<Json<NextPair>, ApiError> {
    if q.rater.trim().is_empty() {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, "rater is required".into()));
    }
    let store = st.store.lock().expect("store lock");
    let pair = st.pairs.next_for(&q.rater, &store);
    Ok(Json(NextPair { done: pair.is_none(), completed: store.completed_by(&q.rater), pair }))
}

async fn submit(State(st): State<Arc<AppState>>, Json(record): Json<RatingRecord>) -> Result<Response, ApiError> {
    let mut store = st.store.lock().expect("store lock");
    let stored = store.submit(&st.pairs, record)?.clone();
    Ok((StatusCode::CREATED, Json(stored)).into_response())
}

async fn summary(State(st): State<Arc<AppState>>) -> Result<Json<Summary>, ApiError> {
    Ok(Json(st.summary()?))
}

/// Relative path of plain components only.
fn sanitize(reference: &str) -> Option<PathBuf> {
    let p = Path::new(reference);
    let ok = !reference.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    ok.then(|| p.to_path_buf())
}

async fn audio(State(st): State<Arc<AppState>>, UrlPath(reference): UrlPath<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no clip {reference:?}"));
    let rel = sanitize(&reference).ok_or_else(not_found)?;
    if !st.pairs.references(&reference) {
        return Err(not_found());
    }
    let bytes = tokio::fs::read(st.audio_root.join(rel)).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/pairs/next", get(next_pair))
        .route("/api/ratings", post(submit))
        .route("/api/summary", get(summary))
        .route("/audio/{*reference}", get(audio))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
