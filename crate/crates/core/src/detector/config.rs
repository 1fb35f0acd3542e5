use serde::{Deserialize, Serialize};

use crate::blocks::{Activation, CoreMode, GcMode};
use crate::error::{Result, SacError};
use crate::geometry::{CONVERTIBLE_KERNELS, DEFAULT_RATE};

pub const PRESETS: [&str; 4] = ["toy-d0", "toy-d1", "toy-d2", "toy-grad"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
    pub kernel: usize,
    pub expand: usize,
}

const fn stage(channels: usize, repeats: usize, stride: usize, kernel: usize, expand: usize) -> StageConfig {
    StageConfig {
        channels,
        repeats,
        stride,
        kernel,
        expand,
    }
}

/// Full architecture description. The last three stages feed the pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub stage_cores: Vec<CoreMode>,
    pub context: Option<GcMode>,
    pub rate: usize,
    pub activation: Activation,
    pub fpn_width: usize,
    pub fpn_passes: usize,
    pub num_classes: usize,
    pub anchor_ratios: Vec<f64>,
    pub anchor_base: f64,
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    let (input_size, stem_channels, stages, fpn_width) = match name {
        "toy-d0" => (
            64,
            16,
            vec![
                stage(16, 1, 1, 3, 1),
                stage(24, 1, 2, 3, 4),
                stage(32, 1, 2, 5, 4),
                stage(48, 1, 2, 3, 4),
                stage(64, 1, 2, 5, 4),
            ],
            32,
        ),
        "toy-d1" => (
            64,
            20,
            vec![
                stage(20, 1, 1, 3, 1),
                stage(28, 2, 2, 3, 4),
                stage(40, 2, 2, 5, 4),
                stage(60, 2, 2, 3, 4),
                stage(80, 1, 2, 5, 4),
            ],
            40,
        ),
        "toy-d2" => (
            64,
            24,
            vec![
                stage(24, 1, 1, 3, 1),
                stage(32, 2, 2, 3, 4),
                stage(48, 3, 2, 5, 4),
                stage(72, 3, 2, 3, 4),
                stage(96, 1, 2, 5, 4),
            ],
            48,
        ),
        // 16x16 input, pyramid strides 2/4/8; sized for finite-difference checks.
        "toy-grad" => (
            16,
            4,
            vec![stage(4, 1, 1, 3, 1), stage(8, 1, 2, 3, 2), stage(8, 1, 2, 5, 2)],
            4,
        ),
        other => {
            return Err(SacError::Invalid(format!(
                "unknown preset {other:?} (expected one of {PRESETS:?})"
            )))
        }
    };
    let n = stages.len();
    Ok(ModelConfig {
        input_size,
        in_channels: 3,
        stem_channels,
        stages,
        stage_cores: vec![CoreMode::Plain; n],
        context: None,
        rate: DEFAULT_RATE,
        activation: Activation::Swish,
        fpn_width,
        fpn_passes: 1,
        num_classes: 3,
        anchor_ratios: vec![0.5, 1.0, 2.0],
        anchor_base: 4.0,
    })
}

impl ModelConfig {
    pub fn with_core(mut self, core: CoreMode) -> Self {
        self.stage_cores = vec![core; self.stages.len()];
        self
    }

    pub fn with_context(mut self, context: Option<GcMode>) -> Self {
        self.context = context;
        self
    }

    pub const STEM_STRIDE: usize = 2;

    /// Cumulative downscale after each stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut s = Self::STEM_STRIDE;
        self.stages
            .iter()
            .map(|st| {
                s *= st.stride;
                s
            })
            .collect()
    }

    /// Downscale factors of the three pyramid levels, fine to coarse.
    pub fn level_strides(&self) -> Vec<usize> {
        let s = self.stage_strides();
        s[s.len() - 3..].to_vec()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 3 {
            return Err(SacError::Invalid("at least three stages are needed for the pyramid".into()));
        }
        if self.stage_cores.len() != self.stages.len() {
            return Err(SacError::Invalid(format!(
                "{} stage core modes for {} stages",
                self.stage_cores.len(),
                self.stages.len()
            )));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if !CONVERTIBLE_KERNELS.contains(&st.kernel) {
                return Err(SacError::Invalid(format!("stage {i}: kernel {} not in {{3,5}}", st.kernel)));
            }
            if st.repeats == 0 || st.stride == 0 || st.expand == 0 || st.channels == 0 {
                return Err(SacError::Invalid(format!("stage {i}: zero-sized field in {st:?}")));
            }
        }
        let top = *self.level_strides().last().unwrap();
        if self.input_size == 0 || self.input_size % top != 0 {
            return Err(SacError::Invalid(format!(
                "input resolution {} is not divisible by the coarsest pyramid stride {top}",
                self.input_size
            )));
        }
        if self.rate == 0 || self.fpn_passes == 0 || self.num_classes == 0 || self.anchor_ratios.is_empty() {
            return Err(SacError::Invalid("rate, fpn passes, classes and anchor ratios must be non-empty".into()));
        }
        if self.anchor_ratios.iter().any(|r| !(*r > 0.0)) || !(self.anchor_base > 0.0) {
            return Err(SacError::Invalid("anchor ratios and base multiplier must be positive".into()));
        }
        Ok(())
    }
}
