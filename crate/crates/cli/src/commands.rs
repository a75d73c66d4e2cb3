//! Batch commands: one-shot deformation, the interval pipeline and
//! rendering.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gsdrag_core::deform::{assign_handles, drag, DeformError};
use gsdrag_core::image::ImageError;
use gsdrag_core::mask::{init_edit_state, render_view_mask, EditState, MaskError};
use gsdrag_core::ply::{load_ply, save_ply, PlyError};
use gsdrag_core::render::{load_cameras, rasterize_rgb, Camera, RenderError};
use gsdrag_core::scheduler::{
    select_views, CorrectorError, EditSession, IntervalReport, SchedulerError, SessionStatus, LOSS_CSV_HEADER,
};
use gsdrag_core::GaussianScene;

use crate::config::{ConfigError, EditConfig, Needs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Deform(#[from] DeformError),
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("interval {interval} failed, last good snapshot kept: {source}")]
    Interval { interval: usize, source: SchedulerError },
    #[error("{0}")]
    Session(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(format!("create {}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(format!("write {}", path.display())))
}

/// Scene and cameras named by a validated config.
pub fn load_inputs(cfg: &EditConfig) -> Result<(GaussianScene, Vec<Camera>), CliError> {
    let scene_path = cfg.scene_path.as_ref().ok_or_else(|| ConfigError::new("scene_path", "required"))?;
    let cameras_path = cfg.cameras_path.as_ref().ok_or_else(|| ConfigError::new("cameras_path", "required"))?;
    let scene = load_ply(scene_path)?;
    let cameras = load_cameras(cameras_path)?;
    if cameras.is_empty() {
        return Err(ConfigError::new("cameras_path", "camera file lists no cameras").into());
    }
    Ok((scene, cameras))
}

fn write_masks(
    dir: &Path,
    scene: &GaussianScene,
    state: &EditState,
    cameras: &[&Camera],
    cfg: &EditConfig,
) -> Result<(), CliError> {
    create_dir(dir)?;
    let mask = cfg.params.mask;
    for cam in cameras {
        let m = render_view_mask(scene, state, cam, mask.threshold, mask.dilation_for_width(cam.width))?;
        m.save_png(dir.join(format!("{}.png", cam.id)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformOutput {
    pub scene_path: PathBuf,
    pub count: usize,
    pub captured: usize,
    pub views: Vec<String>,
}

/// Single full-strength drag with no correction or optimization. Writes
/// `deformed.ply` and one mask per selected view under `masks/`.
pub fn deform(cfg: &EditConfig) -> Result<DeformOutput, CliError> {
    cfg.validate(Needs::EDIT)?;
    let (scene, cameras) = load_inputs(cfg)?;
    let result = drag(&scene, cfg.drag()?, cfg.params.opacity_factor)?;
    let state = init_edit_state(&result.scene, &result.assignment);
    let count = cfg.params.view_count.min(cameras.len());
    let views = select_views(&result.scene, &state, &cameras, count, cfg.params.mask.threshold)?;
    let selected: Vec<&Camera> = views.iter().filter_map(|id| cameras.iter().find(|c| &c.id == id)).collect();

    let out = &cfg.output_dir;
    create_dir(out)?;
    let scene_path = out.join("deformed.ply");
    save_ply(&result.scene, &scene_path)?;
    write_masks(&out.join("masks"), &result.scene, &state, &selected, cfg)?;
    log::info!(
        "deformed {} gaussians ({} captured) into {}",
        result.scene.len(),
        result.captured.union.len(),
        scene_path.display()
    );
    Ok(DeformOutput { scene_path, count: result.scene.len(), captured: result.captured.union.len(), views })
}

pub fn interval_dir(out: &Path, u: usize) -> PathBuf {
    out.join(format!("interval_{u}"))
}

fn session_path(out: &Path) -> PathBuf {
    out.join("session.json")
}

fn loss_path(out: &Path) -> PathBuf {
    out.join("losses.csv")
}

fn save_session(out: &Path, session: &EditSession) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(session).expect("session json");
    write_file(&session_path(out), json.as_bytes())
}

/// Scene, edit state and per-view images of one snapshot directory.
pub(crate) fn write_snapshot(
    dir: &Path,
    scene: &GaussianScene,
    state: &EditState,
    cameras: &[Camera],
    renders: &[gsdrag_core::image::RgbImage],
    masks: &[gsdrag_core::image::Mask2D],
) -> Result<(), CliError> {
    create_dir(&dir.join("renders"))?;
    save_ply(scene, dir.join("scene.ply"))?;
    write_file(&dir.join("state.json"), state.to_json().as_bytes())?;
    for (cam, img) in cameras.iter().zip(renders) {
        img.save_png(dir.join("renders").join(format!("{}.png", cam.id)))?;
    }
    if !masks.is_empty() {
        create_dir(&dir.join("masks"))?;
        for m in masks {
            m.save_png(dir.join("masks").join(format!("{}.png", m.view_id)))?;
        }
    }
    Ok(())
}

fn append_losses(out: &Path, report: &IntervalReport, views: &[String]) -> Result<(), CliError> {
    let path = loss_path(out);
    let mut file = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&path)
        .map_err(io_err(format!("open {}", path.display())))?;
    let passes = report.losses.first().map_or(0, Vec::len);
    let mut text = String::new();
    for a in 0..passes {
        for (v, id) in views.iter().enumerate() {
            text.push_str(&report.losses[v][a].csv_line(id));
            text.push('\n');
        }
    }
    file.write_all(text.as_bytes()).map_err(io_err(format!("write {}", path.display())))
}

/// A snapshot's scene loses its generation counter in the PLY; the state
/// next to it carries the matching value.
fn load_snapshot(dir: &Path) -> Result<(GaussianScene, EditState), CliError> {
    let mut scene = load_ply(dir.join("scene.ply"))?;
    let state = EditState::load(dir.join("state.json"))?;
    scene.generation = state.generation;
    Ok((scene, state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub intervals_run: Vec<usize>,
    pub status: SessionStatus,
    pub count: usize,
}

/// Runs the remaining intervals of the pipeline, writing
/// `interval_{u}/`, `losses.csv`, `session.json` and finally `final/`.
///
/// With `resume` the session saved in the output directory continues from
/// its last completed interval. A failed interval leaves the previous
/// snapshot and a session file that records the error.
pub fn edit(cfg: &EditConfig, resume: bool) -> Result<EditOutput, CliError> {
    cfg.validate(Needs::EDIT)?;
    let (original, cameras) = load_inputs(cfg)?;
    let out = cfg.output_dir.clone();
    create_dir(&out)?;

    let (mut session, mut scene, mut state) = if resume {
        let path = session_path(&out);
        let text = fs::read_to_string(&path).map_err(io_err(format!("nothing to resume: {}", path.display())))?;
        let mut session: EditSession =
            serde_json::from_str(&text).map_err(|e| CliError::Session(format!("{}: {e}", path.display())))?;
        if session.status == SessionStatus::Aborted {
            return Err(CliError::Session("the saved session was aborted".into()));
        }
        session.attach(&original, &cameras)?;
        let (scene, state) = if session.current == 0 {
            let assignment = assign_handles(&original, &session.drag)?;
            (original.clone(), init_edit_state(&original, &assignment))
        } else {
            load_snapshot(&interval_dir(&out, session.current))?
        };
        log::info!("resuming at interval {} of {}", session.current + 1, session.intervals());
        (session, scene, state)
    } else {
        let drag = cfg.drag()?.clone();
        let (session, state) =
            EditSession::start(&original, &cameras, drag, cfg.params.clone(), Some(out.join("buffer")))?;
        write_file(&loss_path(&out), format!("{LOSS_CSV_HEADER}\n").as_bytes())?;
        save_session(&out, &session)?;
        (session, original.clone(), state)
    };

    let corrector = cfg.corrector.connect(cfg.seed)?;
    let mut intervals_run = Vec::new();
    while !session.status.is_terminal() && session.current < session.intervals() {
        let u = session.current + 1;
        log::info!("interval {u}/{}: {} gaussians", session.intervals(), scene.len());
        match session.run_interval(&mut scene, &mut state, corrector.as_ref()) {
            Ok(report) => {
                write_snapshot(
                    &interval_dir(&out, u),
                    &scene,
                    &state,
                    session.cameras(),
                    &report.renders,
                    &report.masks,
                )?;
                append_losses(&out, &report, &session.views)?;
                save_session(&out, &session)?;
                intervals_run.push(u);
            }
            Err(source) => {
                save_session(&out, &session)?;
                return Err(CliError::Interval { interval: u, source });
            }
        }
    }

    if session.status == SessionStatus::Committed {
        let renders: Vec<_> =
            session.cameras().iter().map(|c| rasterize_rgb(&scene, c, session.params.background)).collect();
        write_snapshot(&out.join("final"), &scene, &state, session.cameras(), &renders, &[])?;
        log::info!("committed {} gaussians to {}", scene.len(), out.join("final").display());
    }
    Ok(EditOutput { intervals_run, status: session.status, count: scene.len() })
}

/// Renders every camera to `renders/<id>.png` under `out`.
pub fn render(
    scene_path: &Path,
    cameras_path: &Path,
    out: &Path,
    background: [f64; 3],
) -> Result<Vec<PathBuf>, CliError> {
    let scene = load_ply(scene_path)?;
    let cameras = load_cameras(cameras_path)?;
    let dir = out.join("renders");
    create_dir(&dir)?;
    let mut written = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let path = dir.join(format!("{}.png", cam.id));
        rasterize_rgb(&scene, cam, background).save_png(&path)?;
        written.push(path);
    }
    log::info!("rendered {} views into {}", written.len(), dir.display());
    Ok(written)
}
