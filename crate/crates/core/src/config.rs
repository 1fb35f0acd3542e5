//! JSON run configuration shared by `train` and `eval`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{CoreMode, GcMode};
use crate::detector::{preset, ModelConfig};
use crate::error::{Result, SacError};
use crate::geometry::DEFAULT_RATE;
use crate::tape::FocalParams;
use crate::train::{LrSchedule, SgdConfig, SynthConfig, BOX_BETA, COCO_THRESHOLDS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    /// Core used by every stage unless `stage_cores` is given.
    pub core: CoreMode,
    pub stage_cores: Option<Vec<CoreMode>>,
    pub context: Option<GcMode>,
    pub rate: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy-d0".into(),
            core: CoreMode::Dsac,
            stage_cores: None,
            context: None,
            rate: DEFAULT_RATE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the global gradient norm to at most this value; 0 disables clipping.
    pub clip_norm: f64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final weights.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 5,
            batch_size: 16,
            seed: 42,
            warmup_steps: 100,
            momentum: 0.9,
            weight_decay: 4e-5,
            clip_norm: 0.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub gamma: f64,
    pub box_beta: f64,
    pub box_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 1.5,
            box_beta: BOX_BETA,
            box_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSection {
    pub ratios: Vec<f64>,
    pub base_multiplier: f64,
}

impl Default for AnchorSection {
    fn default() -> Self {
        Self {
            ratios: vec![0.5, 1.0, 2.0],
            base_multiplier: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training set directory; rendered in memory from `seed` when absent.
    pub path: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
    /// Validation set directory; rendered from `seed` after the training images when absent.
    pub val_path: Option<PathBuf>,
    pub val_count: usize,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            count: 512,
            seed: 42,
            val_path: None,
            val_count: 128,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub iou_thresholds: Vec<f64>,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            iou_thresholds: COCO_THRESHOLDS.to_vec(),
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub anchors: AnchorSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub precision: Precision,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| SacError::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SacError::io(path, e))?;
        Self::from_json(&text).map_err(|e| SacError::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.focal().validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(SacError::Invalid("train.epochs and train.batch_size must be positive".into()));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(SacError::Invalid(format!("train.lr must be finite and >= 0, got {}", t.lr)));
        }
        if !(t.clip_norm >= 0.0) {
            return Err(SacError::Invalid("train.clip_norm must be >= 0".into()));
        }
        if !(self.loss.box_beta > 0.0) {
            return Err(SacError::Invalid("loss.box_beta must be positive".into()));
        }
        if self.anchors.ratios.is_empty() || self.anchors.ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(SacError::Invalid("anchors.ratios must be non-empty and positive".into()));
        }
        if self.data.count == 0 {
            return Err(SacError::Invalid("data.count must be at least 1".into()));
        }
        self.model_config()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = preset(&m.preset)?.with_core(m.core).with_context(m.context);
        if let Some(cores) = &m.stage_cores {
            cfg.stage_cores = cores.clone();
        }
        cfg.rate = m.rate;
        cfg.anchor_ratios = self.anchors.ratios.clone();
        cfg.anchor_base = self.anchors.base_multiplier;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams {
            alpha: self.loss.alpha,
            gamma: self.loss.gamma,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.train.lr,
            warmup_steps: self.train.warmup_steps,
        }
    }
}
