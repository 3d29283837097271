//! REST API over the removal pipeline.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | upload an image (JSON `{"image": <png b64>}` or multipart field `image`) |
//! | GET | `/sessions/{id}` | session summary |
//! | POST | `/sessions/{id}/prompts` | apply a point or box prompt to the target mask |
//! | GET, PUT, DELETE | `/sessions/{id}/mask` | target mask as PNG; PUT takes `{"mask": <png b64>}` |
//! | GET | `/sessions/{id}/labels` | three-label map as PNG |
//! | POST | `/sessions/{id}/bfe` | infer tags with the vision-language model |
//! | GET, PUT | `/sessions/{id}/tags` | inspect or edit the tag lists |
//! | POST | `/sessions/{id}/jobs` | start adaptation; body is a partial config |
//! | GET | `/sessions/{id}/jobs/current` | status, iteration count, latest losses |
//! | GET | `/sessions/{id}/result` | edited image as PNG |
//! | GET | `/sessions/{id}/adapter` | adapter archive |
//! | GET | `/sessions/{id}/snapshot` | everything needed to reproduce the run |
//!
//! Errors are `{"error": {"code", "message"}}`. Validation failures are 422,
//! a second job while one is running is 409.

mod error;
mod session;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use erase_core::backbone::BackboneSpec;
use erase_core::bfe::{localize_tags, run_bfe, BfeConfig, TagRole};
use erase_core::clients::{Tag2MaskClient, VisionLanguageClient};
use erase_core::harness::default_config;
use erase_core::pipeline::{run_removal, run_removal_unmerged};
use erase_core::segment::PromptEvent;
use erase_core::tta::TraceStep;
use erase_core::types::{normalize_tag, BinaryMask};
use erase_core::{hex, io};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

pub use error::{error_code, ApiError, ErrorBody};
use session::{JobOutput, Session};
pub use session::{JobStatus, JobView, TagsBody, TagsView, NO_BACKGROUND_WARNING};

const BODY_LIMIT: usize = 32 * 1024 * 1024;

pub struct ServiceConfig {
    pub backbone: BackboneSpec,
    /// Tag classifier; `POST /bfe` answers 503 without one.
    pub mllm: Option<Arc<dyn VisionLanguageClient>>,
    /// Localizes tags by name.
    pub tag2mask: Arc<dyn Tag2MaskClient>,
    /// Answers point and box prompts.
    pub segmenter: Arc<dyn Tag2MaskClient>,
    pub bfe: BfeConfig,
}

type SessionRef = Arc<Mutex<Session>>;

struct AppState {
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionRef>>,
    next_id: AtomicU64,
}

type Shared = Arc<AppState>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(config: ServiceConfig) -> Router {
    let state = Arc::new(AppState {
        config,
        sessions: Mutex::new(HashMap::new()),
        next_id: AtomicU64::new(1),
    });
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/prompts", post(add_prompt))
        .route(
            "/sessions/{id}/mask",
            get(get_mask).put(put_mask).delete(clear_mask),
        )
        .route("/sessions/{id}/labels", get(get_labels))
        .route("/sessions/{id}/bfe", post(infer_tags))
        .route("/sessions/{id}/tags", get(get_tags).put(put_tags))
        .route("/sessions/{id}/jobs", post(start_job))
        .route("/sessions/{id}/jobs/current", get(current_job))
        .route("/sessions/{id}/result", get(get_result))
        .route("/sessions/{id}/adapter", get(get_adapter))
        .route("/sessions/{id}/snapshot", get(snapshot))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    config: ServiceConfig,
) -> std::io::Result<()> {
    axum::serve(listener, router(config)).await
}

fn session(state: &AppState, id: &str) -> ApiResult<SessionRef> {
    state
        .sessions
        .lock()
        .expect("session table lock")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(&format!("session {id}")))
}

fn lock(s: &SessionRef) -> std::sync::MutexGuard<'_, Session> {
    s.lock().expect("session lock")
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid("bad_json", e.to_string()))
}

fn decode_b64(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    B64.decode(text.trim())
        .map_err(|e| ApiError::invalid("bad_base64", format!("{field}: {e}")))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> erase_core::Result<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    image: String,
    #[serde(default)]
    mask: Option<String>,
}

#[derive(Serialize)]
struct SessionSummary {
    id: String,
    width: usize,
    height: usize,
    image_sha256: String,
    mask_area: usize,
    prompts: usize,
    tags: Option<TagsView>,
    job: JobView,
}

fn summary(id: &str, s: &Session) -> SessionSummary {
    SessionSummary {
        id: id.to_owned(),
        width: s.image.width(),
        height: s.image.height(),
        image_sha256: s.image_sha256.clone(),
        mask_area: s.target.area(),
        prompts: s.prompts.len(),
        tags: s.tags_view(),
        job: s.job.view(),
    }
}

async fn read_upload(req: Request) -> ApiResult<(Vec<u8>, Option<Vec<u8>>)> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if is_multipart {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::invalid("bad_multipart", e.body_text()))?;
        let (mut image, mut mask) = (None, None);
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError::invalid("bad_multipart", e.body_text()))?
        {
            let name = field.name().unwrap_or_default().to_owned();
            let bytes = field
                .bytes()
                .await
                .map_err(|e| ApiError::invalid("bad_multipart", e.body_text()))?
                .to_vec();
            match name.as_str() {
                "image" => image = Some(bytes),
                "mask" => mask = Some(bytes),
                other => {
                    return Err(ApiError::invalid(
                        "bad_multipart",
                        format!("unexpected field {other:?}"),
                    ))
                }
            }
        }
        let image =
            image.ok_or_else(|| ApiError::invalid("bad_multipart", "missing field \"image\""))?;
        Ok((image, mask))
    } else {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::invalid("bad_body", e.body_text()))?;
        let parsed: CreateBody = parse_json(&body)?;
        let image = decode_b64("image", &parsed.image)?;
        let mask = parsed
            .mask
            .as_deref()
            .map(|m| decode_b64("mask", m))
            .transpose()?;
        Ok((image, mask))
    }
}

fn decode_target(bytes: &[u8], s: &Session) -> ApiResult<BinaryMask> {
    let mask = io::decode_binary_mask(bytes)?;
    if mask.dims() != s.image.dims() {
        return Err(ApiError::invalid(
            "shape_mismatch",
            format!(
                "mask {:?} does not match image {:?}",
                mask.dims(),
                s.image.dims()
            ),
        ));
    }
    Ok(mask)
}

async fn create_session(State(state): State<Shared>, req: Request) -> ApiResult<Response> {
    let (image_bytes, mask_bytes) = read_upload(req).await?;
    let image = io::decode_image(&image_bytes)?;
    let sha = hex(&Sha256::digest(&image_bytes));
    let mut s = Session::new(image, sha);
    if let Some(m) = mask_bytes {
        s.target = decode_target(&m, &s)?;
    }
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let body = summary(&id, &s);
    state
        .sessions
        .lock()
        .expect("session table lock")
        .insert(id, Arc::new(Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = session(&state, &id)?;
    let s = lock(&s);
    Ok(Json(summary(&id, &s)).into_response())
}

async fn add_prompt(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let event: PromptEvent = parse_json(&body)?;
    let sref = session(&state, &id)?;
    let (image, current) = {
        let s = lock(&sref);
        event.validate(s.image.height(), s.image.width())?;
        (s.image.clone(), s.target.clone())
    };
    let segmenter = state.config.segmenter.clone();
    let ev = event.clone();
    let mask = blocking(move || segmenter.segment(&image, &current, &ev)).await?;
    let mut s = lock(&sref);
    s.target = mask;
    s.prompts.push(event);
    Ok(Json(json!({ "mask_area": s.target.area(), "prompts": s.prompts.len() })).into_response())
}

async fn get_mask(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = session(&state, &id)?;
    let bytes = io::encode_binary_mask(&lock(&s).target);
    Ok(png(bytes))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskBody {
    mask: String,
}

async fn put_mask(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let parsed: MaskBody = parse_json(&body)?;
    let bytes = decode_b64("mask", &parsed.mask)?;
    let sref = session(&state, &id)?;
    let mut s = lock(&sref);
    s.target = decode_target(&bytes, &s)?;
    s.prompts.clear();
    Ok(Json(json!({ "mask_area": s.target.area(), "prompts": 0 })).into_response())
}

async fn clear_mask(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let sref = session(&state, &id)?;
    let mut s = lock(&sref);
    let (h, w) = s.image.dims();
    s.target = BinaryMask::empty(h, w);
    s.prompts.clear();
    Ok(StatusCode::NO_CONTENT.into_response())
}

fn require_target(s: &Session) -> ApiResult<()> {
    if s.target.is_empty() {
        return Err(ApiError::invalid("no_target", "the target mask is empty"));
    }
    Ok(())
}

async fn get_labels(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let sref = session(&state, &id)?;
    let s = lock(&sref);
    require_target(&s)?;
    Ok(png(io::encode_label_mask(&s.label_map()?)))
}

async fn infer_tags(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let mllm = state.config.mllm.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "mllm_unavailable",
            "no vision-language client is configured",
        )
    })?;
    let sref = session(&state, &id)?;
    let (image, target) = {
        let s = lock(&sref);
        require_target(&s)?;
        (s.image.clone(), s.target.clone())
    };
    let t2m = state.config.tag2mask.clone();
    let config = state.config.bfe.clone();
    let result =
        blocking(move || run_bfe(mllm.as_ref(), t2m.as_ref(), &config, &image, &target)).await?;
    let mut s = lock(&sref);
    s.tag_masks = result
        .per_tag_masks
        .iter()
        .map(|(k, m)| (normalize_tag(k), m.clone()))
        .collect();
    s.tags = Some(result.tag_report);
    s.warnings = result.warnings;
    Ok(Json(s.tags_view()).into_response())
}

async fn get_tags(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let sref = session(&state, &id)?;
    let s = lock(&sref);
    let view = s
        .tags_view()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "tags_not_set", "no tags yet"))?;
    Ok(Json(view).into_response())
}

async fn put_tags(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let tags: TagsBody = parse_json(&body)?;
    if let Some((tag, a, b)) = tags.overlap() {
        return Err(ApiError::invalid(
            "tag_overlap",
            format!("tag {tag:?} appears in both {a} and {b}"),
        ));
    }
    let report = tags.to_report();
    report.validate()?;
    let sref = session(&state, &id)?;
    let (image, missing) = {
        let s = lock(&sref);
        let missing: Vec<(String, TagRole)> = report
            .non_target_tags
            .iter()
            .filter(|t| !s.tag_masks.contains_key(&normalize_tag(t)))
            .map(|t| (t.clone(), TagRole::NonTarget))
            .collect();
        (s.image.clone(), missing)
    };
    let localized = if missing.is_empty() {
        Vec::new()
    } else {
        let t2m = state.config.tag2mask.clone();
        let config = state.config.bfe.clone();
        let queries = missing.clone();
        blocking(move || localize_tags(t2m.as_ref(), &image, &queries, &config)).await?
    };
    let mut s = lock(&sref);
    for ((tag, _), (mask, _)) in missing.iter().zip(localized) {
        s.tag_masks.insert(normalize_tag(tag), mask);
    }
    s.warnings = if report.background_tags.is_empty() {
        vec![NO_BACKGROUND_WARNING.to_owned()]
    } else {
        Vec::new()
    };
    s.tags = Some(report);
    Ok(Json(s.tags_view()).into_response())
}

async fn start_job(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let base = default_config(&state.config.backbone);
    let text =
        std::str::from_utf8(&body).map_err(|e| ApiError::invalid("bad_body", e.to_string()))?;
    let config = if text.trim().is_empty() {
        base
    } else {
        if !text.trim_start().starts_with('{') {
            return Err(ApiError::invalid(
                "bad_json",
                "config must be a JSON object",
            ));
        }
        base.overlay(text)?
    };
    let sref = session(&state, &id)?;
    let (image, labels, tags) = {
        let mut s = lock(&sref);
        if s.job.status == JobStatus::Running {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "job_running",
                "a job is already running",
            ));
        }
        require_target(&s)?;
        let labels = s.label_map()?;
        let tags = s.background_tags();
        s.job = session::Job {
            status: JobStatus::Running,
            config: Some(config.clone()),
            ..Default::default()
        };
        (s.image.clone(), labels, tags)
    };
    let backbone = state.config.backbone.clone();
    let worker = sref.clone();
    let view = lock(&sref).job.view();
    tokio::task::spawn_blocking(move || {
        let mut observe = |step: &TraceStep| lock(&worker).job.steps.push(*step);
        let outcome = (|| {
            let (h, w) = image.dims();
            let mut bb = backbone.instantiate(h, w)?;
            let out = if backbone.is_shared() {
                run_removal_unmerged(
                    bb.as_ref(),
                    &image,
                    &labels,
                    &tags,
                    &config,
                    None,
                    &mut observe,
                )?
            } else {
                run_removal(
                    bb.as_mut(),
                    &image,
                    &labels,
                    &tags,
                    &config,
                    None,
                    &mut observe,
                )?
            };
            let png = io::encode_image(&out.image)?;
            Ok::<_, erase_core::Error>(JobOutput {
                result_sha256: hex(&Sha256::digest(&png)),
                png,
                adapter: out.lora.to_archive(),
                lora_digest: out.lora.digest(),
            })
        })();
        let mut s = lock(&worker);
        match outcome {
            Ok(o) => {
                s.job.output = Some(o);
                s.job.status = JobStatus::Done;
            }
            Err(e) => {
                log::warn!("job failed: {e}");
                s.job.error = Some(ApiError::from(e).body);
                s.job.status = JobStatus::Failed;
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(view)).into_response())
}

async fn current_job(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let sref = session(&state, &id)?;
    let view = lock(&sref).job.view();
    Ok(Json(view).into_response())
}

fn finished(s: &Session) -> ApiResult<&JobOutput> {
    s.job.output.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "not_ready",
            format!("job is {:?}", s.job.status).to_lowercase(),
        )
    })
}

async fn get_result(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let sref = session(&state, &id)?;
    let s = lock(&sref);
    Ok(png(finished(&s)?.png.clone()))
}

async fn get_adapter(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let sref = session(&state, &id)?;
    let s = lock(&sref);
    let bytes = finished(&s)?.adapter.clone();
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn snapshot(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let sref = session(&state, &id)?;
    let s = lock(&sref);
    let out = s.job.output.as_ref();
    Ok(Json(json!({
        "id": id,
        "backbone": state.config.backbone,
        "image_sha256": s.image_sha256,
        "mask": B64.encode(io::encode_binary_mask(&s.target)),
        "prompts": s.prompts,
        "tags": s.tags_view(),
        "config": s.job.config,
        "status": s.job.status,
        "trace": s.job.steps,
        "lora_digest": out.map(|o| &o.lora_digest),
        "result_sha256": out.map(|o| &o.result_sha256),
    }))
    .into_response())
}
