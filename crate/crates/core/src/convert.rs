//! Output-preserving conversion of a plain detector into switchable atrous cores.

use crate::blocks::{CoreMode, GcMode};
use crate::detector::Detector;
use crate::error::{Result, SacError};
use crate::geometry::{plan_conversion, DEFAULT_RATE};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvertOptions {
    pub mode: CoreMode,
    pub rate: usize,
    pub context: Option<GcMode>,
}

impl ConvertOptions {
    pub fn new(mode: CoreMode) -> Self {
        Self {
            mode,
            rate: DEFAULT_RATE,
            context: Some(GcMode::Global),
        }
    }
}

/// True if the parameters contain switch or context tensors.
pub fn is_converted<T: Real>(store: &ParamStore<T>) -> bool {
    store
        .iter()
        .any(|p| p.name.contains(".switch.") || p.name.contains("_gc."))
}

/// Converts every depthwise core of `baseline` to `opts.mode`.
///
/// Depthwise, SE and projection weights are copied; switches start at
/// weight 0 / bias 1 and context blocks at zero, so outputs are unchanged.
pub fn convert_to_sac<T: Real>(baseline: &Detector<T>, opts: ConvertOptions) -> Result<Detector<T>> {
    if opts.mode == CoreMode::Plain {
        return Err(SacError::Invalid("conversion target must be dsac or dapsc".into()));
    }
    let cfg = &baseline.config;
    if cfg.stage_cores.iter().any(|&c| c != CoreMode::Plain) || cfg.context.is_some() || is_converted(&baseline.store) {
        return Err(SacError::Invalid(
            "model is already converted (it has switch or global-context parameters); convert a plain baseline".into(),
        ));
    }
    let layers: Vec<(usize, usize)> = cfg.stages.iter().map(|s| (s.kernel, 1)).collect();
    plan_conversion(&layers, cfg.input_size)?;

    let mut target = cfg.clone().with_core(opts.mode).with_context(opts.context);
    target.rate = opts.rate;
    let mut converted = Detector::new(target, 0)?;
    converted.store.copy_from(&baseline.store)?;
    Ok(converted)
}
