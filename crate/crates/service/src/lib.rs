//! Local HTTP front end for pairwise annotation and filter recommendation.
//!
//! Endpoints:
//!
//! | method | path                       | body                         |
//! |--------|----------------------------|------------------------------|
//! | GET    | `/api/hit?annotator=<id>`  | a new HIT as a `HitView`     |
//! | GET    | `/api/image/{filtered_id}` | PNG bytes                    |
//! | POST   | `/api/hit/{id}`            | `Submission` in, `Decision` out |
//! | GET    | `/api/progress`            | queue and HIT counters       |
//! | GET    | `/api/recommend?ref=&k=`   | top-K filters for a reference |
//!
//! Errors come back as `{"error": <kind>, "detail": <message>}`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use filtrank::annotation::{AnnotationStore, Decision, HitView, Progress, Submission};
use filtrank::dataset::{filtered_id, parse_filtered_id, Corpus};
use filtrank::error::Error;
use filtrank::evaluation::rank_filters;
use filtrank::filters::{apply_filter, FILTER_COUNT};
use filtrank::imagecore::encode_png;
use filtrank::models::ColumnModel;

pub const DEFAULT_K: usize = 5;

pub struct AppState {
    store: Mutex<AnnotationStore>,
    corpus: Corpus,
    model: Option<ColumnModel<f32>>,
}

impl AppState {
    pub fn new(store: AnnotationStore, corpus: Corpus, model: Option<ColumnModel<f32>>) -> Self {
        Self {
            store: Mutex::new(store),
            corpus,
            model,
        }
    }

    /// Runs `f` with exclusive access to the store.
    pub fn with_store<R>(&self, f: impl FnOnce(&mut AnnotationStore) -> R) -> R {
        let mut guard = self.store.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    }
}

#[derive(Debug)]
pub enum ApiError {
    Core(Error),
    NoModelLoaded,
    BadRequest(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, detail) = match self {
            ApiError::Core(e) => {
                let status = match &e {
                    Error::UnknownHit(_) | Error::MissingFilteredImage(_) | Error::UnknownFilter(_) => {
                        StatusCode::NOT_FOUND
                    }
                    Error::MissingFile(_) => StatusCode::NOT_FOUND,
                    Error::AlreadyClosed(_) | Error::InsufficientPendingPairs { .. } => StatusCode::CONFLICT,
                    Error::InvalidSubmission(_) => StatusCode::BAD_REQUEST,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, e.kind().to_string(), e.to_string())
            }
            ApiError::NoModelLoaded => (
                StatusCode::SERVICE_UNAVAILABLE,
                "NoModelLoaded".into(),
                "the service was started without a model checkpoint".into(),
            ),
            ApiError::BadRequest(d) => (StatusCode::BAD_REQUEST, "BadRequest".into(), d),
        };
        (status, Json(ErrorBody { error: kind, detail })).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Deserialize)]
pub struct HitQuery {
    pub annotator: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct RecommendQuery {
    #[serde(rename = "ref")]
    pub ref_id: String,
    pub k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Recommendation {
    pub ref_id: String,
    pub entries: Vec<RecommendedFilter>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecommendedFilter {
    pub rank: usize,
    pub filter: String,
    pub score: f64,
    pub image: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/hit", get(next_hit))
        .route("/api/hit/{id}", axum::routing::post(submit))
        .route("/api/image/{filtered_id}", get(image))
        .route("/api/progress", get(progress))
        .route("/api/recommend", get(recommend))
        .with_state(state)
}

/// The API plus a static directory served at `/`.
pub fn router_with_static(state: Arc<AppState>, dir: impl Into<PathBuf>) -> Router {
    router(state).fallback_service(ServeDir::new(dir.into()))
}

async fn next_hit(State(st): State<Arc<AppState>>, Query(q): Query<HitQuery>) -> ApiResult<Json<HitView>> {
    let hit = st.with_store(|s| s.next_hit(q.annotator.as_deref()))?;
    Ok(Json(hit.view()))
}

async fn submit(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(sub): Json<Submission>,
) -> ApiResult<Json<Decision>> {
    if sub.hit_id != id {
        return Err(ApiError::BadRequest(format!(
            "submission for {} posted to /api/hit/{id}",
            sub.hit_id
        )));
    }
    Ok(Json(st.with_store(|s| s.submit(&sub))?))
}

async fn progress(State(st): State<Arc<AppState>>) -> Json<Progress> {
    Json(st.with_store(|s| s.progress()))
}

async fn image(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let (ref_id, filter) = parse_filtered_id(&id)?;
    let st = st.clone();
    let bytes = tokio::task::spawn_blocking(move || -> filtrank::error::Result<Vec<u8>> {
        let img = st
            .corpus
            .image(&ref_id)
            .map_err(|_| Error::MissingFilteredImage(id.clone()))?;
        encode_png(&apply_filter(img, filter))
    })
    .await
    .map_err(|e| ApiError::BadRequest(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn recommend(State(st): State<Arc<AppState>>, Query(q): Query<RecommendQuery>) -> ApiResult<Json<Recommendation>> {
    let k = q.k.unwrap_or(DEFAULT_K);
    if !(1..=FILTER_COUNT).contains(&k) {
        return Err(ApiError::BadRequest(format!("k must be in 1..={FILTER_COUNT}, got {k}")));
    }
    if st.model.is_none() {
        return Err(ApiError::NoModelLoaded);
    }
    let st = st.clone();
    let ranking = tokio::task::spawn_blocking(move || {
        let model = st.model.as_ref().expect("checked above");
        let img = st.corpus.image(&q.ref_id)?;
        rank_filters(model, &q.ref_id, img, model.mode())
    })
    .await
    .map_err(|e| ApiError::BadRequest(e.to_string()))??;
    let entries = ranking
        .top(k)
        .iter()
        .enumerate()
        .map(|(i, &(f, score))| RecommendedFilter {
            rank: i + 1,
            filter: f.name().to_string(),
            score,
            image: filtered_id(&ranking.ref_id, f),
        })
        .collect();
    Ok(Json(Recommendation {
        ref_id: ranking.ref_id,
        entries,
    }))
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app).await
}
