//! HTTP generation service: a character library and queued panel generation
//! over one model executor.

pub mod error;
pub mod executor;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use panelforge_core::checkpoint::CheckpointArchive;
use panelforge_core::diffusion::{PanelSpecDoc, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GUIDANCE, DEFAULT_STEPS, MAX_SIDE};
use panelforge_core::imaging::square_pad_white;
use serde::{Deserialize, Serialize};

pub use error::ApiError;
pub use executor::{Executor, ModelInfo};
pub use store::{CharacterRecord, GenerationJob, JobState, Store, Timings};

/// Published JSON schemas, embedded so clients can fetch them.
pub const PANEL_SPEC_SCHEMA: &str = include_str!("../schemas/panel_spec.schema.json");
pub const CHARACTER_RECORD_SCHEMA: &str = include_str!("../schemas/character_record.schema.json");
pub const GENERATION_JOB_SCHEMA: &str = include_str!("../schemas/generation_job.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub checkpoint: Option<PathBuf>,
    pub data_dir: PathBuf,
    /// Jobs allowed to wait behind the running one.
    pub queue_depth: usize,
    /// Largest accepted decoded character image, in bytes.
    pub max_upload_bytes: usize,
    pub alpha: f64,
    pub beta: f64,
    pub steps: usize,
    pub guidance: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            checkpoint: None,
            data_dir: PathBuf::from("panelforge-data"),
            queue_depth: 16,
            max_upload_bytes: 1 << 20,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
        }
    }
}

impl ServiceConfig {
    /// Fill spec fields the client left out with the service defaults.
    pub fn apply_defaults(&self, spec: &mut PanelSpecDoc) {
        spec.alpha.get_or_insert(self.alpha);
        spec.beta.get_or_insert(self.beta);
        spec.steps.get_or_insert(self.steps);
        spec.guidance.get_or_insert(self.guidance);
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    store: Arc<Store>,
    executor: Executor,
    model: ModelInfo,
}

impl AppState {
    pub fn new(config: ServiceConfig, archive: &CheckpointArchive) -> Result<Self, ApiError> {
        let store = Arc::new(Store::open(&config.data_dir)?);
        let (executor, model) = Executor::start(store.clone(), archive, config.queue_depth)?;
        Ok(AppState {
            inner: Arc::new(Inner {
                config,
                store,
                executor,
                model,
            }),
        })
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn model(&self) -> &ModelInfo {
        &self.inner.model
    }
}

pub fn router(state: AppState) -> Router {
    // Base64 inflates by 4/3; leave room for the JSON envelope.
    let limit = state.inner.config.max_upload_bytes / 3 * 4 + 64 * 1024;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/config", get(config))
        .route("/characters", post(add_character).get(list_characters))
        .route("/characters/{id}", get(get_character).delete(delete_character))
        .route("/images/{file}", get(get_image))
        .route("/generate", post(generate))
        .route("/jobs/{id}", get(get_job))
        .route("/schemas/{name}", get(get_schema))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Bind and serve until ctrl-c.
pub async fn serve(config: ServiceConfig, archive: CheckpointArchive) -> Result<(), ApiError> {
    let addr = config.listen;
    let state = AppState::new(config, &archive)?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(ApiError::internal)?;
    log::info!("listening on {}", listener.local_addr().map_err(ApiError::internal)?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ApiError::internal)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn config(State(s): State<AppState>) -> Json<serde_json::Value> {
    let c = &s.inner.config;
    let m = &s.inner.model;
    Json(serde_json::json!({
        "alpha": c.alpha,
        "beta": c.beta,
        "steps": c.steps,
        "guidance": c.guidance,
        "queue_depth": c.queue_depth,
        "max_upload_bytes": c.max_upload_bytes,
        "max_characters": m.n_c,
        "size_multiple": m.size_multiple,
        "max_side": MAX_SIDE,
        "adapter": m.adapter,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewCharacter {
    name: String,
    /// Base64 PNG or JPEG.
    image: String,
}

async fn add_character(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(&body);
    let req: NewCharacter = serde_path_to_error::deserialize(de)
        .map_err(|e| ApiError::invalid(e.path().to_string(), e.inner().to_string()))?;
    if req.name.trim().is_empty() {
        return Err(ApiError::invalid("name", "name must not be empty"));
    }
    let payload = B64
        .decode(req.image.as_bytes())
        .map_err(|e| ApiError::invalid("image", format!("not base64: {e}")))?;
    if payload.len() > s.inner.config.max_upload_bytes {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {} bytes, limit {}", payload.len(), s.inner.config.max_upload_bytes),
        ));
    }
    let format = match image::guess_format(&payload) {
        Ok(f @ (image::ImageFormat::Png | image::ImageFormat::Jpeg)) => f,
        _ => {
            return Err(ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "image must be PNG or JPEG"));
        }
    };
    let img = image::load_from_memory_with_format(&payload, format)
        .map_err(|e| ApiError::invalid("image", format!("cannot decode: {e}")))?
        .to_rgb8();
    let crop = square_pad_white(&img);
    let store = s.inner.store.clone();
    let name = req.name.clone();
    let (rec, created) = tokio::task::spawn_blocking(move || store.add_character(&name, &payload, &crop))
        .await
        .map_err(ApiError::internal)??;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(rec)).into_response())
}

async fn list_characters(State(s): State<AppState>) -> Json<Vec<CharacterRecord>> {
    Json(s.inner.store.characters())
}

async fn get_character(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<CharacterRecord>, ApiError> {
    s.inner
        .store
        .character(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("character {id} does not exist")))
}

async fn delete_character(State(s): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    if s.inner.store.delete_character(&id)? {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(format!("character {id} does not exist")))
    }
}

async fn get_image(State(s): State<AppState>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let hash = file.strip_suffix(".png").unwrap_or(&file);
    let bytes = s
        .inner
        .store
        .image_bytes(hash)
        .ok_or_else(|| ApiError::not_found(format!("image {file} does not exist")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn generate(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let mut spec = PanelSpecDoc::from_json("request", &body)?;
    let m = &s.inner.model;
    spec.validate(m.n_c, m.size_multiple)?;
    for (i, c) in spec.characters.iter().enumerate() {
        if s.inner.store.character(&c.id).is_none() {
            let mut e = ApiError::not_found(format!("character {} does not exist", c.id));
            e.field = Some(format!("characters[{i}].id"));
            return Err(e);
        }
    }
    s.inner.config.apply_defaults(&mut spec);
    let job = s.inner.store.new_job(spec)?;
    match s.inner.executor.submit(job.id.clone()) {
        executor::Submit::Queued => Ok((StatusCode::ACCEPTED, Json(job)).into_response()),
        executor::Submit::Full => {
            s.inner.store.drop_job(&job.id)?;
            Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "generation queue is full"))
        }
    }
}

#[derive(Deserialize, Default)]
struct JobQuery {
    #[serde(default)]
    inline: bool,
}

async fn get_job(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<JobQuery>,
) -> Result<Json<GenerationJob>, ApiError> {
    let mut job = s
        .inner
        .store
        .job(&id)
        .ok_or_else(|| ApiError::not_found(format!("job {id} does not exist")))?;
    if q.inline {
        if let Some(url) = &job.result {
            let hash = url.trim_start_matches("/images/").trim_end_matches(".png");
            job.result_base64 = s.inner.store.image_bytes(hash).map(|b| B64.encode(b));
        }
    }
    Ok(Json(job))
}

async fn get_schema(Path(name): Path<String>) -> Result<Response, ApiError> {
    let text = match name.as_str() {
        "panel_spec.schema.json" => PANEL_SPEC_SCHEMA,
        "character_record.schema.json" => CHARACTER_RECORD_SCHEMA,
        "generation_job.schema.json" => GENERATION_JOB_SCHEMA,
        _ => return Err(ApiError::not_found(format!("schema {name} does not exist"))),
    };
    Ok(([(header::CONTENT_TYPE, "application/schema+json")], text).into_response())
}
