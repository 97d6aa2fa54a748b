//! JSON run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::CameraConfig;
use crate::error::{arg, Result};
use crate::fusion::FusionConfig;
use crate::grid::{BevGridSpec, VoxelSpec};
use crate::intensity::IntensityCoeffs;
use crate::model::ModelConfig;
use crate::objective::LossWeights;
use crate::radar::RadarNorm;
use crate::scene::SceneConfig;
use crate::tensor::Precision;

/// Every key is optional and falls back to the default below; unknown keys
/// are rejected at every nesting level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: BevGridSpec,
    pub voxel: VoxelSpec,
    pub camera: CameraConfig,
    pub fusion: FusionConfig,
    pub radar_norm: RadarNorm,
    pub radar_hidden: usize,
    pub intensity: IntensityCoeffs,
    pub weights: LossWeights,
    pub scene: SceneConfig,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Output directory; the command line flag takes precedence.
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            grid: m.grid,
            voxel: m.voxel,
            camera: m.camera,
            fusion: m.fusion,
            radar_norm: m.radar_norm,
            radar_hidden: m.radar_hidden,
            intensity: m.intensity,
            weights: m.weights,
            scene: SceneConfig::default(),
            lr: 0.05,
            steps: 200,
            seed: 0,
            precision: m.precision,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.scene.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return arg(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            grid: self.grid,
            voxel: self.voxel,
            camera: self.camera.clone(),
            fusion: self.fusion,
            radar_norm: self.radar_norm,
            radar_hidden: self.radar_hidden,
            intensity: self.intensity,
            weights: self.weights,
            precision: self.precision,
        }
    }
}
