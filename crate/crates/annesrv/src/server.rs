//! HTTP/JSON API over the sample and judgment stores.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/samples?model=&annotator=` | queue, next unjudged first |
//! | GET | `/api/samples/{id}` | one sample |
//! | POST | `/api/judgments` | `{sample_id, model_id, label, annotator}` |
//! | GET | `/api/results/{model_id}?mode=&annotator=` | aggregate percentages |
//! | GET | `/api/progress?annotator=&model=` | judged / total pairs |

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::aggregate::{aggregate_with, per_annotator, Mode, Percentages};
use crate::{now_secs, resolve_overwrites, AnnError, Judgment, JudgmentStore, Label, SampleStore};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub samples: PathBuf,
    pub judgments: PathBuf,
    /// Directory of static UI files served at `/`.
    pub static_dir: Option<PathBuf>,
    pub addr: SocketAddr,
}

#[derive(Debug, Clone)]
pub struct AppState {
    pub samples: Arc<SampleStore>,
    pub judgments: Arc<JudgmentStore>,
}

impl AppState {
    pub fn new(samples: SampleStore, judgments: JudgmentStore) -> Self {
        AppState {
            samples: Arc::new(samples),
            judgments: Arc::new(judgments),
        }
    }

    pub fn open(cfg: &ServerConfig) -> crate::Result<Self> {
        Ok(Self::new(
            SampleStore::load(&cfg.samples)?,
            JudgmentStore::open(&cfg.judgments)?,
        ))
    }
}

struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": msg.into() }),
        }
    }

    fn unprocessable(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, msg)
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, msg)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<AnnError> for ApiError {
    fn from(e: AnnError) -> Self {
        match e {
            AnnError::NoJudgments(_) | AnnError::NoAnnotatorJudgments { .. } => ApiError::not_found(e.to_string()),
            AnnError::Io(_) | AnnError::Store { .. } => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
            _ => ApiError::unprocessable(e.to_string()),
        }
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Deserialize)]
struct QueueQuery {
    model: Option<String>,
    annotator: Option<String>,
}

/// A sample as listed in the queue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleView {
    pub id: String,
    pub category: String,
    pub prompt: String,
    pub reference: Option<String>,
    pub outputs: BTreeMap<String, String>,
    /// The annotator's current label for the requested model, if any.
    pub judged: Option<Label>,
}

async fn list_samples(State(st): State<AppState>, Query(q): Query<QueueQuery>) -> Json<Vec<SampleView>> {
    let snapshot = st.judgments.snapshot();
    let mine: BTreeMap<&str, Label> = match (&q.model, &q.annotator) {
        (Some(m), Some(a)) => resolve_overwrites(&snapshot)
            .into_iter()
            .filter(|j| &j.model_id == m && &j.annotator == a)
            .map(|j| (j.sample_id.as_str(), j.label))
            .collect(),
        _ => BTreeMap::new(),
    };
    let mut views: Vec<SampleView> = st
        .samples
        .samples()
        .iter()
        .filter(|s| q.model.as_ref().is_none_or(|m| s.outputs.contains_key(m)))
        .map(|s| SampleView {
            id: s.id.clone(),
            category: s.category.clone(),
            prompt: s.prompt.clone(),
            reference: s.reference.clone(),
            outputs: match &q.model {
                Some(m) => s
                    .outputs
                    .iter()
                    .filter(|(k, _)| *k == m)
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
                None => s.outputs.clone(),
            },
            judged: mine.get(s.id.as_str()).copied(),
        })
        .collect();
    // Stable: unjudged first, store order within each group.
    views.sort_by_key(|v| v.judged.is_some());
    Json(views)
}

async fn get_sample(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = st
        .samples
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown sample `{id}`")))?;
    Ok(Json(s).into_response())
}

fn required_str<'a>(body: &'a Value, field: &str) -> ApiResult<&'a str> {
    match body.get(field).and_then(Value::as_str) {
        Some(s) if !s.trim().is_empty() => Ok(s),
        _ => Err(ApiError::unprocessable(format!("`{field}` must be a non-empty string"))),
    }
}

async fn post_judgment(State(st): State<AppState>, body: Option<Json<Value>>) -> ApiResult<Response> {
    let Json(body) = body.ok_or_else(|| ApiError::unprocessable("body must be a JSON object"))?;
    let label_text = required_str(&body, "label")?;
    let label: Label = label_text.parse().map_err(|_| ApiError {
        status: StatusCode::UNPROCESSABLE_ENTITY,
        body: json!({
            "error": format!("invalid label `{label_text}`"),
            "allowed": Label::ALL.map(Label::as_str),
        }),
    })?;
    let sample_id = required_str(&body, "sample_id")?;
    let model_id = required_str(&body, "model_id")?;
    let annotator = required_str(&body, "annotator")?;
    let sample = st
        .samples
        .get(sample_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown sample `{sample_id}`")))?;
    if !sample.outputs.contains_key(model_id) {
        return Err(ApiError::not_found(format!(
            "sample `{sample_id}` has no output for model `{model_id}`"
        )));
    }
    let j = Judgment {
        sample_id: sample_id.to_string(),
        model_id: model_id.to_string(),
        label,
        annotator: annotator.to_string(),
        timestamp: now_secs(),
    };
    let store = st.judgments.clone();
    let stored = j.clone();
    tokio::task::spawn_blocking(move || store.append(stored))
        .await
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?
        .map_err(|e| {
            log::error!("judgment store write failed: {e}");
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                format!("judgment store unavailable: {e}"),
            )
        })?;
    Ok((StatusCode::CREATED, Json(j)).into_response())
}

#[derive(Debug, Deserialize)]
struct ResultsQuery {
    mode: Option<String>,
    annotator: Option<String>,
}

/// Body of `GET /api/results/{model_id}` in the single, annotator and
/// majority modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsView {
    pub model_id: String,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
    #[serde(flatten)]
    pub percentages: Percentages,
}

const MODES: [&str; 3] = ["single", "majority", "per_annotator"];

async fn get_results(
    State(st): State<AppState>,
    Path(model_id): Path<String>,
    Query(q): Query<ResultsQuery>,
) -> ApiResult<Response> {
    let snapshot = st.judgments.snapshot();
    let mode = q.mode.as_deref().unwrap_or("single");
    match mode {
        "single" => {
            let (m, who) = match &q.annotator {
                Some(a) => (Mode::Annotator(a.clone()), Some(a.clone())),
                None => (Mode::Single, crate::aggregate::primary_annotator(&snapshot, &model_id)),
            };
            let percentages = aggregate_with(&snapshot, &model_id, &m)?;
            Ok(Json(ResultsView {
                model_id,
                mode: mode.into(),
                annotator: who,
                percentages,
            })
            .into_response())
        }
        "majority" => {
            let percentages = aggregate_with(&snapshot, &model_id, &Mode::Majority)?;
            Ok(Json(ResultsView {
                model_id,
                mode: mode.into(),
                annotator: None,
                percentages,
            })
            .into_response())
        }
        "per_annotator" => {
            let rows = per_annotator(&snapshot, &model_id)?;
            Ok(Json(json!({ "model_id": model_id, "mode": mode, "annotators": rows })).into_response())
        }
        other => Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": format!("unknown mode `{other}`"), "allowed": MODES }),
        }),
    }
}

#[derive(Debug, Deserialize)]
struct ProgressQuery {
    annotator: Option<String>,
    model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub annotator: String,
    /// (sample, model) pairs the annotator has labelled.
    pub judged: usize,
    /// (sample, model) pairs with an output.
    pub total: usize,
    pub remaining: usize,
}

async fn get_progress(State(st): State<AppState>, Query(q): Query<ProgressQuery>) -> ApiResult<Json<Progress>> {
    let annotator = q
        .annotator
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| ApiError::unprocessable("`annotator` query parameter is required"))?;
    let pairs: BTreeSet<(&str, &str)> = st
        .samples
        .samples()
        .iter()
        .flat_map(|s| s.outputs.keys().map(move |m| (s.id.as_str(), m.as_str())))
        .filter(|(_, m)| q.model.as_deref().is_none_or(|want| want == *m))
        .collect();
    let snapshot = st.judgments.snapshot();
    let judged: BTreeSet<(&str, &str)> = snapshot
        .iter()
        .filter(|j| j.annotator == annotator)
        .map(|j| (j.sample_id.as_str(), j.model_id.as_str()))
        .filter(|p| pairs.contains(p))
        .collect();
    Ok(Json(Progress {
        annotator,
        judged: judged.len(),
        total: pairs.len(),
        remaining: pairs.len() - judged.len(),
    }))
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/samples", get(list_samples))
        .route("/api/samples/{id}", get(get_sample))
        .route("/api/judgments", axum::routing::post(post_judgment))
        .route("/api/results/{model_id}", get(get_results))
        .route("/api/progress", get(get_progress))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Serves on an already-bound listener until the task is cancelled.
pub async fn serve_listener(
    listener: tokio::net::TcpListener,
    state: AppState,
    static_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    axum::serve(listener, router(state, static_dir)).await
}

pub async fn serve(cfg: ServerConfig) -> crate::Result<()> {
    let state = AppState::open(&cfg)?;
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    log::info!(
        "serving {} samples on http://{}",
        state.samples.len(),
        listener.local_addr()?
    );
    serve_listener(listener, state, cfg.static_dir).await?;
    Ok(())
}
