use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use regal::data_model::{Rect, RegionState};
use regal::evaluation::write_curve_csv;
use regal::oracle::HumanLabel;
use regal::orchestrator::RunConfig;

use crate::images::context_and_crop;
use crate::session::{JobStatus, SessionCore, SessionError};
use crate::{AppState, SessionHandle};

impl IntoResponse for SessionError {
    fn into_response(self) -> Response {
        let code = match &self {
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::BadRequest(_) => StatusCode::BAD_REQUEST,
            SessionError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, SessionError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/queue", get(queue))
        .route("/sessions/{id}/labels", post(label))
        .route("/sessions/{id}/train", post(train))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/curve", get(curve))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

fn find(state: &AppState, id: &str) -> ApiResult<Arc<SessionHandle>> {
    state
        .session(id)
        .ok_or_else(|| SessionError::NotFound(format!("unknown session {id}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| SessionError::Internal(format!("worker panicked: {e}")))?
}

#[derive(Deserialize)]
struct CreateSession {
    manifest: PathBuf,
    #[serde(default)]
    config: RunConfig,
}

async fn create_session(State(state): State<Arc<AppState>>, Json(body): Json<CreateSession>) -> ApiResult<impl IntoResponse> {
    let id = format!("s{:016x}", rand::random::<u64>());
    let root = state.root().to_path_buf();
    let sid = id.clone();
    let core = blocking(move || SessionCore::create(&root, &sid, &body.manifest, body.config)).await?;
    let queued = core.queue.entries.len();
    state.insert(core);
    tracing::info!(session = %id, queued, "created session");
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "queued": queued }))))
}

#[derive(Deserialize)]
struct QueueParams {
    k: Option<usize>,
    #[serde(default = "yes")]
    images: bool,
}

fn yes() -> bool {
    true
}

#[derive(Serialize)]
struct QueueItem {
    image_id: String,
    region_index: usize,
    rect: Rect,
    score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    crop_png: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    context_png: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heatmap_png: Option<String>,
}

async fn queue(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<QueueParams>,
) -> ApiResult<impl IntoResponse> {
    let snap = find(&state, &id)?.snapshot();
    let pending: Vec<_> = snap
        .queue
        .iter()
        .filter(|(_, s)| *s == RegionState::Unlabeled)
        .map(|(e, _)| e.clone())
        .collect();
    let k = q.k.unwrap_or(5);
    let mut items = Vec::new();
    for e in pending.iter().take(k) {
        let (context, crop) = if q.images {
            let (c, r) = context_and_crop(snap.data.image(&e.image_id)?, e.rect)?;
            (Some(c), Some(r))
        } else {
            (None, None)
        };
        items.push(QueueItem {
            image_id: e.image_id.clone(),
            region_index: e.region_index,
            rect: e.rect,
            score: e.score,
            crop_png: crop,
            context_png: context,
            heatmap_png: q
                .images
                .then(|| snap.heatmaps.get(&e.image_id).map(|b| STANDARD.encode(b)))
                .flatten(),
        });
    }
    let training = matches!(snap.job, JobStatus::Training { .. });
    Ok(Json(json!({
        "cycle": snap.cycle,
        "pending": pending.len(),
        "exhausted": pending.is_empty(),
        "read_only": training,
        "entries": items,
    })))
}

#[derive(Deserialize)]
struct LabelRequest {
    image_id: String,
    region_index: usize,
    #[serde(default)]
    points: Option<Vec<(i64, i64)>>,
    #[serde(default)]
    background: bool,
}

impl LabelRequest {
    fn label(&self) -> ApiResult<HumanLabel> {
        match (&self.points, self.background) {
            (Some(_), true) => Err(SessionError::Unprocessable("send points or background, not both".into())),
            (None, false) => Err(SessionError::Unprocessable("send points or background".into())),
            (None, true) => Ok(HumanLabel::Background),
            (Some(pts), false) => pts
                .iter()
                .map(|&(r, c)| {
                    if r < 0 || c < 0 {
                        Err(SessionError::Unprocessable(format!("point ({r}, {c}) is outside the slice")))
                    } else {
                        Ok((r as usize, c as usize))
                    }
                })
                .collect::<ApiResult<_>>()
                .map(HumanLabel::Points),
        }
    }
}

async fn label(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<LabelRequest>,
) -> ApiResult<impl IntoResponse> {
    let h = find(&state, &id)?;
    let label = body.label()?;
    let (image_id, region_index) = (body.image_id.clone(), body.region_index);
    let (region_state, budget) = blocking(move || {
        h.write(|core| {
            let s = core.label(&image_id, region_index, label)?;
            Ok((s, core.state.ledger.total_seconds()))
        })
    })
    .await?;
    Ok(Json(json!({
        "image_id": body.image_id,
        "region_index": body.region_index,
        "state": region_state,
        "budget_seconds": budget,
    })))
}

async fn train(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let h = find(&state, &id)?;
    let job = h.write(|core| core.start_training())?;
    let cycle = h.snapshot().cycle;
    tokio::task::spawn_blocking(move || {
        let progress = |stage: &str| {
            if let Err(e) = h.write(|core| core.set_stage(stage)) {
                tracing::warn!(error = %e, "could not persist job stage");
            }
        };
        let result = job.run(&progress);
        if let Err(e) = h.write(|core| core.finish_training(result)) {
            tracing::error!(error = %e, "training cycle failed");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "cycle": cycle, "job": "training" }))))
}

async fn status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let snap = find(&state, &id)?.snapshot();
    let code = if matches!(snap.job, JobStatus::Failed { .. }) {
        StatusCode::INTERNAL_SERVER_ERROR
    } else {
        StatusCode::OK
    };
    let body = json!({
        "id": snap.id,
        "cycle": snap.cycle,
        "budget_seconds": snap.budget_seconds,
        "labeled_regions": snap.labeled_regions,
        "ledger_regions": snap.ledger_regions,
        "val_dice": snap.val_dice,
        "job": snap.job,
        "heuristic": snap.config.heuristic,
        "regions_per_image": snap.config.regions_per_image,
    });
    Ok((code, Json(body)))
}

async fn curve(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let snap = find(&state, &id)?.snapshot();
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, &snap.rows)?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], buf))
}
