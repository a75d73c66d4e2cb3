//! HTTP service: scene loading, rendering, picking and session control.
//!
//! Reads (render, pick, state, previews) work on immutable snapshots and run
//! concurrently. Everything that mutates goes through one worker thread that
//! executes jobs in arrival order.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gsdrag_core::deform::DeformError;
use gsdrag_core::image::RgbImage;
use gsdrag_core::mask::{render_view_mask, EditState};
use gsdrag_core::ply::load_ply;
use gsdrag_core::render::{cameras_to_json, load_cameras, pick, rasterize_rgb, Camera, RenderError};
use gsdrag_core::scheduler::{Corrector, CorrectorKind, EditSession, IntervalReport, SchedulerError, SessionStatus};
use gsdrag_core::GaussianScene;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use crate::commands::{interval_dir, write_snapshot, CliError};
use crate::config::{ConfigError, EditConfig, Needs};

/// JSON error body `{code, message, field?}` with its status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), field: None }
    }

    fn with_field(mut self, field: impl Into<String>) -> Self {
        let field = field.into();
        self.field = (!field.is_empty()).then_some(field);
        self
    }

    fn bad_request(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message).with_field(field)
    }

    fn no_scene() -> Self {
        Self::new(StatusCode::CONFLICT, "no_scene", "no scene is loaded")
    }

    fn no_session() -> Self {
        Self::new(StatusCode::NOT_FOUND, "no_session", "no session has been created")
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"code": self.code, "message": self.message});
        if let Some(field) = self.field {
            body["field"] = Value::String(field);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_config", e.message).with_field(e.field)
    }
}

impl From<SchedulerError> for ApiError {
    fn from(e: SchedulerError) -> Self {
        match e {
            SchedulerError::InvalidParams { .. } => ConfigError::from(e).into(),
            SchedulerError::Deform(DeformError::InvalidSpec { .. }) => ConfigError::from(e).into(),
            SchedulerError::InvalidTransition { .. } => {
                ApiError::new(StatusCode::CONFLICT, "invalid_transition", e.to_string())
            }
            SchedulerError::Corrector(_) => ApiError::new(StatusCode::BAD_GATEWAY, "corrector_failed", e.to_string()),
            SchedulerError::HandleNotVisible | SchedulerError::Deform(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "edit_failed", e.to_string())
            }
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Config(c) => c.into(),
            CliError::Scheduler(s) => s.into(),
            other => ApiError::internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn encode(img: &RgbImage) -> ApiResult<Vec<u8>> {
    img.encode_png().map_err(|e| ApiError::internal(e.to_string()))
}

/// Percent-encodes everything outside the URL-unreserved set.
fn url_encode(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub view_id: String,
    pub pass: usize,
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub perc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepSummary {
    pub u: usize,
    pub status: SessionStatus,
    pub captured: usize,
    pub strengths: Vec<f64>,
    pub losses: Vec<LossRow>,
    pub preview_urls: Vec<String>,
}

impl StepSummary {
    fn new(report: &IntervalReport, views: &[String], status: SessionStatus) -> Self {
        let mut losses = Vec::new();
        for (id, records) in views.iter().zip(&report.losses) {
            for r in records {
                let t = &r.terms;
                losses.push(LossRow {
                    view_id: id.clone(),
                    pass: r.pass,
                    total: t.total,
                    l1: t.l1,
                    ssim: t.ssim,
                    perc: t.perc,
                });
            }
        }
        let u = report.interval;
        StepSummary {
            u,
            status,
            captured: report.captured,
            strengths: report.strengths.clone(),
            losses,
            preview_urls: views.iter().map(|id| format!("/session/preview?u={u}&cam={}", url_encode(id))).collect(),
        }
    }
}

/// Published, read-only picture of the session.
#[derive(Debug, Clone)]
struct SessionView {
    id: String,
    status: SessionStatus,
    current: usize,
    intervals: usize,
    views: Vec<String>,
    strengths: Vec<f64>,
    drag: Value,
    last_error: Option<String>,
    /// PNG renders per interval, index 0 holding the originals.
    previews: Vec<Arc<Vec<Vec<u8>>>>,
    /// Latest mask per view.
    masks: Arc<Vec<Vec<u8>>>,
    steps: Vec<StepSummary>,
    output_dir: Option<PathBuf>,
}

impl SessionView {
    fn state_json(&self) -> Value {
        json!({
            "session_id": self.id,
            "status": self.status,
            "u": self.current,
            "T": self.intervals,
            "views": self.views,
            "strengths": self.strengths,
            "drag": self.drag,
            "last_error": self.last_error,
            "steps": self.steps,
            "output_dir": self.output_dir,
        })
    }
}

struct LoadedScene {
    source: String,
    scene: GaussianScene,
}

#[derive(Default)]
struct Shared {
    scene: Option<Arc<LoadedScene>>,
    cameras: Arc<Vec<Camera>>,
    session: Option<Arc<SessionView>>,
    background: [f64; 3],
}

struct Active {
    session: EditSession,
    scene: GaussianScene,
    state: EditState,
    corrector: Box<dyn Corrector>,
    view: SessionView,
    applied: bool,
}

/// Owner of all mutable service state; only the worker thread touches it.
struct Worker {
    shared: Arc<RwLock<Shared>>,
    defaults: EditConfig,
    active: Option<Active>,
    next_id: u64,
}

type Job = Box<dyn FnOnce(&mut Worker) + Send>;

type Snapshot = (Option<Arc<LoadedScene>>, Arc<Vec<Camera>>, Option<Arc<SessionView>>);

#[derive(Clone)]
pub struct App {
    shared: Arc<RwLock<Shared>>,
    jobs: mpsc::Sender<Job>,
}

impl App {
    /// Starts the worker and loads the scene and cameras the config names.
    pub fn new(cfg: EditConfig) -> Result<App, CliError> {
        cfg.validate(Needs::SERVE)?;
        let mut shared = Shared { background: cfg.params.background, ..Shared::default() };
        if let Some(path) = &cfg.scene_path {
            shared.scene = Some(Arc::new(LoadedScene { source: path.display().to_string(), scene: load_ply(path)? }));
        }
        if let Some(path) = &cfg.cameras_path {
            shared.cameras = Arc::new(load_cameras(path)?);
        }
        let shared = Arc::new(RwLock::new(shared));
        let (jobs, queue) = mpsc::channel::<Job>();
        let mut worker = Worker { shared: shared.clone(), defaults: cfg, active: None, next_id: 1 };
        std::thread::Builder::new()
            .name("gsdrag-session".into())
            .spawn(move || {
                for job in queue {
                    job(&mut worker);
                }
            })
            .map_err(crate::commands::io_err("spawn session worker"))?;
        Ok(App { shared, jobs })
    }

    fn snapshot(&self) -> Snapshot {
        let s = self.shared.read().expect("shared state lock");
        (s.scene.clone(), s.cameras.clone(), s.session.clone())
    }

    /// Queues `f` behind every earlier mutation and waits for its result.
    async fn run<T, F>(&self, f: F) -> ApiResult<T>
    where
        T: Send + 'static,
        F: FnOnce(&mut Worker) -> ApiResult<T> + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.jobs
            .send(Box::new(move |w| {
                let _ = tx.send(f(w));
            }))
            .map_err(|_| ApiError::internal("session worker stopped"))?;
        rx.await.map_err(|_| ApiError::internal("session worker dropped the request"))?
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

fn parse_body(body: &Bytes) -> ApiResult<Value> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request("", format!("body is not valid JSON: {e}")))?;
    if !value.is_object() {
        return Err(ApiError::bad_request("", "body must be a JSON object"));
    }
    Ok(value)
}

type Params = Query<HashMap<String, String>>;

fn param<'a>(q: &'a HashMap<String, String>, name: &str) -> ApiResult<&'a str> {
    q.get(name)
        .map(String::as_str)
        .ok_or_else(|| ApiError::bad_request(name, format!("missing query parameter `{name}`")))
}

fn number<T: std::str::FromStr>(q: &HashMap<String, String>, name: &str) -> ApiResult<Option<T>> {
    q.get(name)
        .map(|v| v.parse::<T>().map_err(|_| ApiError::bad_request(name, format!("`{name}` is not a valid number"))))
        .transpose()
}

fn find_camera<'a>(cameras: &'a [Camera], id: &str) -> ApiResult<&'a Camera> {
    cameras.iter().find(|c| c.id == id).ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "unknown_camera", format!("no camera `{id}`")).with_field("cam")
    })
}

fn scene_info(loaded: &LoadedScene) -> Value {
    let bbox =
        loaded.scene.bbox().map(|b| json!({"min": [b.min.x, b.min.y, b.min.z], "max": [b.max.x, b.max.y, b.max.z]}));
    json!({"source": loaded.source, "count": loaded.scene.len(), "sh_degree": loaded.scene.sh_degree, "bbox": bbox})
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn load_scene(State(app): State<App>, body: Bytes) -> ApiResult<Json<Value>> {
    let body = parse_body(&body)?;
    let path = body
        .get("path")
        .and_then(Value::as_str)
        .map(PathBuf::from)
        .ok_or_else(|| ApiError::bad_request("path", "`path` must be a string"))?;
    let cameras_path = match body.get("cameras_path") {
        None | Some(Value::Null) => None,
        Some(Value::String(p)) => Some(PathBuf::from(p)),
        Some(_) => return Err(ApiError::bad_request("cameras_path", "`cameras_path` must be a string")),
    };
    app.run(move |w| w.load_scene(path, cameras_path)).await.map(Json)
}

async fn get_scene_info(State(app): State<App>) -> ApiResult<Json<Value>> {
    let (scene, _, _) = app.snapshot();
    Ok(Json(scene_info(&*scene.ok_or_else(ApiError::no_scene)?)))
}

async fn get_cameras(State(app): State<App>) -> Response {
    let (_, cameras, _) = app.snapshot();
    ([(header::CONTENT_TYPE, "application/json")], cameras_to_json(&cameras)).into_response()
}

const MAX_SIDE: usize = 4096;

async fn render(State(app): State<App>, Query(q): Params) -> ApiResult<Response> {
    let (scene, cameras, _) = app.snapshot();
    let scene = scene.ok_or_else(ApiError::no_scene)?;
    let mut cam = find_camera(&cameras, param(&q, "cam")?)?.clone();
    match (number::<usize>(&q, "w")?, number::<usize>(&q, "h")?) {
        (None, None) => {}
        (Some(w), Some(h)) if (1..=MAX_SIDE).contains(&w) && (1..=MAX_SIDE).contains(&h) => cam = cam.resized(w, h),
        (Some(_), Some(_)) => return Err(ApiError::bad_request("w", format!("size must lie in 1..={MAX_SIDE}"))),
        (w, _) => {
            return Err(ApiError::bad_request(if w.is_none() { "w" } else { "h" }, "give both `w` and `h` or neither"))
        }
    }
    let background = app.shared.read().expect("shared state lock").background;
    let bytes = blocking(move || encode(&rasterize_rgb(&scene.scene, &cam, background))).await?;
    Ok(png(bytes))
}

async fn mask(State(app): State<App>, Query(q): Params) -> ApiResult<Response> {
    let (_, _, session) = app.snapshot();
    let session = session.ok_or_else(ApiError::no_session)?;
    let cam = param(&q, "cam")?;
    let i = session.views.iter().position(|v| v == cam).ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "unknown_view", format!("`{cam}` is not a session view")).with_field("cam")
    })?;
    Ok(png(session.masks[i].clone()))
}

async fn pick_point(State(app): State<App>, Query(q): Params) -> ApiResult<Json<Value>> {
    let (scene, cameras, _) = app.snapshot();
    let scene = scene.ok_or_else(ApiError::no_scene)?;
    let cam = find_camera(&cameras, param(&q, "cam")?)?.clone();
    let x = number::<f64>(&q, "x")?.ok_or_else(|| ApiError::bad_request("x", "missing query parameter `x`"))?;
    let y = number::<f64>(&q, "y")?.ok_or_else(|| ApiError::bad_request("y", "missing query parameter `y`"))?;
    let hit = blocking(move || {
        pick(&scene.scene, &cam, [x, y]).map_err(|e| match e {
            RenderError::OutOfViewport { .. } => ApiError::bad_request("x", e.to_string()),
            other => ApiError::internal(other.to_string()),
        })
    })
    .await?;
    match hit {
        Some(p) => Ok(Json(json!({"point": [p.x, p.y, p.z]}))),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "empty_pixel", format!("nothing rendered at ({x}, {y})"))),
    }
}

async fn create_session(State(app): State<App>, body: Bytes) -> ApiResult<Json<Value>> {
    let body = parse_body(&body)?;
    app.run(move |w| w.create_session(body)).await.map(Json)
}

async fn step(State(app): State<App>) -> ApiResult<Json<StepSummary>> {
    app.run(|w| w.step()).await.map(Json)
}

async fn stop(State(app): State<App>) -> ApiResult<Json<Value>> {
    app.run(|w| w.stop()).await.map(Json)
}

async fn commit(State(app): State<App>) -> ApiResult<Json<Value>> {
    app.run(|w| w.commit()).await.map(Json)
}

async fn abort(State(app): State<App>) -> ApiResult<Json<Value>> {
    app.run(|w| w.abort()).await.map(Json)
}

async fn session_state(State(app): State<App>) -> ApiResult<Json<Value>> {
    let (_, _, session) = app.snapshot();
    Ok(Json(session.ok_or_else(ApiError::no_session)?.state_json()))
}

async fn preview(State(app): State<App>, Query(q): Params) -> ApiResult<Response> {
    let (_, _, session) = app.snapshot();
    let session = session.ok_or_else(ApiError::no_session)?;
    let u = number::<usize>(&q, "u")?.unwrap_or(session.current);
    let cam = param(&q, "cam")?;
    let renders = session.previews.get(u).ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "unknown_interval", format!("no preview for interval {u}")).with_field("u")
    })?;
    let i = session.views.iter().position(|v| v == cam).ok_or_else(|| {
        ApiError::new(StatusCode::NOT_FOUND, "unknown_view", format!("`{cam}` is not a session view")).with_field("cam")
    })?;
    Ok(png(renders[i].clone()))
}

impl Worker {
    fn publish(&self) {
        let mut s = self.shared.write().expect("shared state lock");
        s.session = self.active.as_ref().map(|a| Arc::new(a.view.clone()));
    }

    fn busy(&self) -> bool {
        self.active.as_ref().is_some_and(|a| !a.session.status.is_terminal())
    }

    fn active(&mut self) -> ApiResult<&mut Active> {
        self.active.as_mut().ok_or_else(ApiError::no_session)
    }

    fn load_scene(&mut self, path: PathBuf, cameras_path: Option<PathBuf>) -> ApiResult<Value> {
        if self.busy() {
            return Err(ApiError::new(StatusCode::CONFLICT, "session_active", "finish the running session first"));
        }
        let scene = load_ply(&path).map_err(|e| {
            ApiError::new(StatusCode::BAD_REQUEST, "scene_load_failed", e.to_string()).with_field("path")
        })?;
        let cameras = cameras_path
            .map(|p| {
                load_cameras(&p).map_err(|e| {
                    ApiError::new(StatusCode::BAD_REQUEST, "cameras_load_failed", e.to_string())
                        .with_field("cameras_path")
                })
            })
            .transpose()?;
        let loaded = Arc::new(LoadedScene { source: path.display().to_string(), scene });
        let info = scene_info(&loaded);
        self.active = None;
        let mut s = self.shared.write().expect("shared state lock");
        s.scene = Some(loaded);
        if let Some(c) = cameras {
            s.cameras = Arc::new(c);
        }
        s.session = None;
        log::info!("loaded scene {path:?}", path = path.display());
        Ok(info)
    }

    fn create_session(&mut self, mut body: Value) -> ApiResult<Value> {
        if self.busy() {
            return Err(ApiError::new(StatusCode::CONFLICT, "session_active", "a session is already running"));
        }
        let (scene, cameras) = {
            let s = self.shared.read().expect("shared state lock");
            (s.scene.clone().ok_or_else(ApiError::no_scene)?, s.cameras.clone())
        };
        if cameras.is_empty() {
            return Err(ApiError::new(StatusCode::CONFLICT, "no_cameras", "no cameras are loaded"));
        }
        let obj = body.as_object_mut().expect("checked object");
        if let Some(t) = obj.remove("T") {
            obj.insert("intervals".into(), t);
        }
        for path_key in ["scene_path", "cameras_path", "output_dir"] {
            if obj.contains_key(path_key) {
                return Err(ApiError::bad_request(path_key, "set by the service, not per session"));
            }
        }
        let mut merged = serde_json::to_value(&self.defaults).expect("config json");
        for (k, v) in body.as_object().expect("checked object") {
            merged[k] = v.clone();
        }
        let mut cfg = EditConfig::from_json(&merged.to_string())?;
        cfg.scene_path = None;
        cfg.cameras_path = None;
        cfg.validate(Needs::SERVE)?;
        let drag = cfg.drag()?.clone();

        let id = format!("s{}", self.next_id);
        let out = cfg.output_dir.join(&id);
        let buffer_dir = (cfg.corrector.kind == CorrectorKind::External).then(|| out.join("buffer"));
        let corrector = cfg.corrector.connect(cfg.seed).map_err(SchedulerError::from)?;
        let (session, state) = EditSession::start(&scene.scene, &cameras, drag, cfg.params.clone(), buffer_dir)?;
        self.next_id += 1;

        let originals = session.originals().iter().map(encode).collect::<ApiResult<Vec<_>>>()?;
        let masks = session_masks(&session, &scene.scene, &state)?;
        let view = SessionView {
            id: id.clone(),
            status: session.status,
            current: 0,
            intervals: session.intervals(),
            views: session.views.clone(),
            strengths: session.params.anneal.strengths(),
            drag: serde_json::to_value(&session.drag).expect("drag json"),
            last_error: None,
            previews: vec![Arc::new(originals)],
            masks: Arc::new(masks),
            steps: Vec::new(),
            output_dir: Some(out),
        };
        let reply = json!({"session_id": id, "views": view.views, "T": view.intervals});
        self.active = Some(Active { session, scene: scene.scene.clone(), state, corrector, view, applied: false });
        self.publish();
        log::info!("session {id} created");
        Ok(reply)
    }

    fn step(&mut self) -> ApiResult<StepSummary> {
        let a = self.active()?;
        let result = a.session.run_interval(&mut a.scene, &mut a.state, a.corrector.as_ref());
        a.view.status = a.session.status;
        a.view.last_error = a.session.last_error.clone();
        a.view.drag = serde_json::to_value(&a.session.drag).expect("drag json");
        let outcome = match result {
            Ok(report) => {
                let summary = StepSummary::new(&report, &a.session.views, a.session.status);
                let renders = report.renders.iter().map(encode).collect::<ApiResult<Vec<_>>>()?;
                let masks = report.masks.iter().map(|m| m.encode_png().map_err(|e| ApiError::internal(e.to_string())));
                a.view.masks = Arc::new(masks.collect::<ApiResult<Vec<_>>>()?);
                a.view.previews.truncate(report.interval);
                a.view.previews.push(Arc::new(renders));
                a.view.current = a.session.current;
                a.view.steps.push(summary.clone());
                if let Some(out) = &a.view.output_dir {
                    let dir = interval_dir(out, report.interval);
                    write_snapshot(&dir, &a.scene, &a.state, a.session.cameras(), &report.renders, &report.masks)?;
                }
                Ok(summary)
            }
            Err(e) => Err(ApiError::from(e)),
        };
        if outcome.is_ok() && self.active.as_ref().is_some_and(|a| a.session.status == SessionStatus::Committed) {
            self.apply()?;
        }
        self.publish();
        outcome
    }

    fn stop(&mut self) -> ApiResult<Value> {
        let a = self.active()?;
        a.session.stop()?;
        Ok(json!({"u": a.session.current, "status": a.session.status}))
    }

    fn commit(&mut self) -> ApiResult<Value> {
        let a = self.active()?;
        if a.session.status != SessionStatus::Committed {
            a.session.commit()?;
        }
        a.view.status = a.session.status;
        let path = self.apply()?;
        self.publish();
        let a = self.active()?;
        Ok(json!({"u": a.session.current, "status": a.session.status, "final_path": path}))
    }

    fn abort(&mut self) -> ApiResult<Value> {
        let a = self.active()?;
        a.session.abort()?;
        a.view.status = a.session.status;
        let reply = json!({"u": a.session.current, "status": a.session.status});
        self.publish();
        Ok(reply)
    }

    /// Makes the committed edit the service scene and writes `final/`.
    fn apply(&mut self) -> ApiResult<Option<PathBuf>> {
        let a = self.active.as_mut().ok_or_else(ApiError::no_session)?;
        let final_dir = a.view.output_dir.as_ref().map(|o| o.join("final"));
        if a.applied {
            return Ok(final_dir.map(|d| d.join("scene.ply")));
        }
        if let Some(dir) = &final_dir {
            let bg = a.session.params.background;
            let renders: Vec<RgbImage> = a.session.cameras().iter().map(|c| rasterize_rgb(&a.scene, c, bg)).collect();
            write_snapshot(dir, &a.scene, &a.state, a.session.cameras(), &renders, &[])?;
        }
        a.applied = true;
        let loaded = Arc::new(LoadedScene { source: format!("session {}", a.view.id), scene: a.scene.clone() });
        self.shared.write().expect("shared state lock").scene = Some(loaded);
        log::info!("session {} committed", a.view.id);
        Ok(final_dir.map(|d| d.join("scene.ply")))
    }
}

fn session_masks(session: &EditSession, scene: &GaussianScene, state: &EditState) -> ApiResult<Vec<Vec<u8>>> {
    let mask = session.params.mask;
    session
        .cameras()
        .iter()
        .map(|c| {
            let m = render_view_mask(scene, state, c, mask.threshold, mask.dilation_for_width(c.width))
                .map_err(|e| ApiError::internal(e.to_string()))?;
            m.encode_png().map_err(|e| ApiError::internal(e.to_string()))
        })
        .collect()
}

pub fn router(app: App) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scene", post(load_scene))
        .route("/scene/info", get(get_scene_info))
        .route("/cameras", get(get_cameras))
        .route("/render", get(render))
        .route("/mask", get(mask))
        .route("/pick", get(pick_point))
        .route("/session", post(create_session))
        .route("/session/step", post(step))
        .route("/session/stop", post(stop))
        .route("/session/commit", post(commit))
        .route("/session/abort", post(abort))
        .route("/session/state", get(session_state))
        .route("/session/preview", get(preview))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(app)
}

/// Binds `addr` and serves until the process ends. A busy port is reported
/// before any request is accepted.
pub async fn serve(cfg: EditConfig, addr: SocketAddr) -> Result<(), CliError> {
    let app = App::new(cfg)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| CliError::Bind { addr: addr.to_string(), source })?;
    log::info!("listening on http://{}", listener.local_addr().map_err(crate::commands::io_err("local address"))?);
    axum::serve(listener, router(app)).await.map_err(crate::commands::io_err("serve"))
}
