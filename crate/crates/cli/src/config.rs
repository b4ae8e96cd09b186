//! Project configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use catoptric::neuralfield::FieldConfig;
use catoptric::raybank::BBox;
use catoptric::renderer::RenderConfig;
use catoptric::simulator::{
    build_array_template, AnalyticScene, CaptureCamera, Layout, MirrorArrayTemplate, ViewArc,
    DEFAULT_MIRROR_DIAMETER_MM, DEFAULT_PITCH_MM,
};
use catoptric::trainer::TrainConfig;

use crate::Failure;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "CATOPTRIC_OUT";

/// Every stage's settings. Unknown keys are rejected; missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectConfig {
    /// JSON scene description; the built-in desk scene when absent.
    pub scene: Option<PathBuf>,
    pub layout: Layout,
    pub mirror_diameter_mm: f64,
    pub pitch_mm: f64,
    pub camera: CaptureCamera,
    pub perturbation_sigma_mm: f64,
    pub bbox: BBox,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub views: ViewArc,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            scene: None,
            layout: Layout::default(),
            mirror_diameter_mm: DEFAULT_MIRROR_DIAMETER_MM,
            pitch_mm: DEFAULT_PITCH_MM,
            camera: CaptureCamera::default(),
            perturbation_sigma_mm: 0.0,
            bbox: BBox::desk(),
            field: FieldConfig::tiny(),
            train: TrainConfig::desk(),
            render: RenderConfig::default(),
            views: ViewArc::default(),
            output_dir: None,
            seed: 0,
        }
    }
}

impl ProjectConfig {
    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::data(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::data(format!("invalid config {}: {e}", path.display())))
    }

    /// Checks every section before any stage runs.
    pub fn validate(&self) -> Result<(), Failure> {
        self.template()?;
        if !(self.perturbation_sigma_mm >= 0.0) {
            return Err(Failure::usage("perturbation_sigma_mm must be non-negative"));
        }
        self.bbox.validate().map_err(|e| Failure::usage(e.to_string()))?;
        self.field.validate().map_err(|e| Failure::usage(e.to_string()))?;
        self.train.validate().map_err(|e| Failure::usage(e.to_string()))?;
        self.render.validate().map_err(Failure::usage)?;
        self.views
            .intrinsics()
            .map_err(|e| Failure::usage(format!("views: {e}")))?;
        Ok(())
    }

    pub fn template(&self) -> Result<MirrorArrayTemplate, Failure> {
        build_array_template(&self.layout, self.mirror_diameter_mm, self.pitch_mm)
            .map_err(|e| Failure::usage(e.to_string()))
    }

    pub fn scene(&self) -> Result<AnalyticScene, Failure> {
        match &self.scene {
            None => Ok(AnalyticScene::desk()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::data(format!("cannot read scene {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::data(format!("invalid scene file {}: {e}", p.display())))
            }
        }
    }

    /// Flag, then config file, then the environment, then `fallback`.
    pub fn output_dir(&self, flag: Option<&Path>, fallback: &str) -> PathBuf {
        if let Some(f) = flag {
            return f.to_path_buf();
        }
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(fallback),
        }
    }
}
