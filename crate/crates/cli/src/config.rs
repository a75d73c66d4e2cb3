//! The edit configuration document shared by every command and the service.

use std::path::{Path, PathBuf};

use gsdrag_core::deform::DeformError;
use gsdrag_core::scheduler::{CorrectorHandle, CorrectorKind, EditParams, SchedulerError};
use gsdrag_core::DragSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A configuration problem, located by a dotted field path such as
/// `drag.radius[0]`.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid config at `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl From<SchedulerError> for ConfigError {
    fn from(e: SchedulerError) -> Self {
        match e {
            SchedulerError::InvalidParams { field, reason } => ConfigError::new(field, reason),
            SchedulerError::Deform(e) => e.into(),
            other => ConfigError::new("", other.to_string()),
        }
    }
}

impl From<DeformError> for ConfigError {
    fn from(e: DeformError) -> Self {
        match e {
            DeformError::InvalidSpec { field, reason } => ConfigError::new(format!("drag.{field}"), reason),
            other => ConfigError::new("drag", other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub scene_path: Option<PathBuf>,
    pub cameras_path: Option<PathBuf>,
    pub drag: Option<DragSpec>,
    pub corrector: CorrectorHandle,
    pub output_dir: PathBuf,
    /// Seeds the mock corrector.
    pub seed: u64,
    #[serde(flatten)]
    pub params: EditParams,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            scene_path: None,
            cameras_path: None,
            drag: None,
            corrector: CorrectorHandle::default(),
            output_dir: PathBuf::from("gsdrag-out"),
            seed: 0,
            params: EditParams::default(),
        }
    }
}

/// What a command needs from the config beyond the always-checked
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub scene: bool,
    pub cameras: bool,
    pub drag: bool,
}

impl Needs {
    pub const EDIT: Needs = Needs { scene: true, cameras: true, drag: true };
    pub const RENDER: Needs = Needs { scene: true, cameras: true, drag: false };
    pub const SERVE: Needs = Needs { scene: false, cameras: false, drag: false };
}

/// Every key the config accepts, as the shape of a fully populated default.
fn template() -> Value {
    let full = EditConfig {
        scene_path: Some(PathBuf::new()),
        cameras_path: Some(PathBuf::new()),
        drag: Some(DragSpec::new(Vec::new(), Vec::new(), Vec::new())),
        corrector: CorrectorHandle::external(""),
        params: EditParams { split_quantile: Some(0.0), ..EditParams::default() },
        ..EditConfig::default()
    };
    serde_json::to_value(full).expect("config template")
}

fn check_keys(doc: &Value, template: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(doc), Value::Object(known)) = (doc, template) else {
        return Ok(());
    };
    for (key, value) in doc {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match known.get(key) {
            None => return Err(ConfigError::new(path, "unknown field")),
            Some(inner) => check_keys(value, inner, &path)?,
        }
    }
    Ok(())
}

fn located<T: serde::de::DeserializeOwned>(doc: Value) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let field = e.path().to_string();
        let field = if field == "." { String::new() } else { field };
        ConfigError::new(field, e.into_inner().to_string())
    })
}

impl EditConfig {
    /// Parses a config document. Unknown keys are rejected so that typos do
    /// not silently fall back to defaults.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::new("", e.to_string()))?;
        if !doc.is_object() {
            return Err(ConfigError::new("", "config must be a JSON object"));
        }
        check_keys(&doc, &template(), "")?;
        // Flattened fields hide their paths from the deserializer, so the
        // pipeline parameters are read as a document of their own.
        let Value::Object(mut own) = doc else { unreachable!() };
        let params: serde_json::Map<String, Value> = serde_json::to_value(EditParams::default())
            .expect("params json")
            .as_object()
            .expect("params object")
            .keys()
            .filter_map(|k| own.remove_entry(k))
            .collect();
        let mut cfg: EditConfig = located(Value::Object(own))?;
        cfg.params = located(Value::Object(params))?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.scene_path {
            fix(p);
        }
        if let Some(p) = &mut self.cameras_path {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self, needs: Needs) -> Result<(), ConfigError> {
        self.params.validate()?;
        for (field, path, needed) in
            [("scene_path", &self.scene_path, needs.scene), ("cameras_path", &self.cameras_path, needs.cameras)]
        {
            match path {
                None if needed => return Err(ConfigError::new(field, "required")),
                Some(p) if !p.is_file() => {
                    return Err(ConfigError::new(field, format!("file not found: {}", p.display())))
                }
                _ => {}
            }
        }
        match &self.drag {
            None if needs.drag => return Err(ConfigError::new("drag", "required")),
            Some(drag) => drag.validate()?,
            None => {}
        }
        if self.corrector.kind == CorrectorKind::External
            && self.corrector.endpoint.as_deref().is_none_or(|e| e.trim().is_empty())
        {
            return Err(ConfigError::new("corrector.endpoint", "required for an external corrector"));
        }
        if self.corrector.timeout_secs == 0 {
            return Err(ConfigError::new("corrector.timeout_secs", "must be at least 1"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(ConfigError::new("output_dir", "must not be empty"));
        }
        Ok(())
    }

    pub fn drag(&self) -> Result<&DragSpec, ConfigError> {
        self.drag.as_ref().ok_or_else(|| ConfigError::new("drag", "required"))
    }
}
