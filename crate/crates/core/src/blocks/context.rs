use serde::{Deserialize, Serialize};

use crate::error::{Result, SacError};
use crate::kernels::ConvSpec;
use crate::params::{Builder, Graph, Init, ParamId};
use crate::real::Real;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GcMode {
    /// Global average pool, 1x1 conv, broadcast over H and W.
    #[default]
    Global,
    /// Reflection pad 2, 5x5 stride-1 average pool, 1x1 conv.
    Local,
}

/// Additive context term. Zero-initialized, so a fresh block contributes nothing.
#[derive(Clone, Debug)]
pub struct GlobalContextBlock {
    pub mode: GcMode,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GlobalContextBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize, mode: GcMode) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                mode,
                weight: b.param("weight", vec![channels, channels, 1, 1], Init::Zeros)?,
                bias: b.param("bias", vec![channels], Init::Zeros)?,
            })
        })
    }

    /// The context term alone: `(N,C,1,1)` in global mode, `(N,C,H,W)` in local mode.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let pooled = match self.mode {
            GcMode::Global => g.tape.global_avg_pool(x),
            GcMode::Local => {
                let [_, _, h, w] = g.tape.shape(x);
                if h < 3 || w < 3 {
                    return Err(SacError::Invalid(format!(
                        "local context needs spatial extent >= 3, got {h}x{w}"
                    )));
                }
                let padded = g.tape.reflection_pad2d(x, 2)?;
                g.tape.avg_pool2d(padded, 5, 1, 0)?
            }
        };
        let (wv, bv) = (g.p(self.weight), g.p(self.bias));
        g.tape.conv2d(pooled, wv, Some(bv), ConvSpec::default())
    }

    /// `x + context(x)`.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let term = self.forward(g, x)?;
        g.tape.add(x, term)
    }
}

pub(crate) fn apply_opt<T: Real>(gc: Option<&GlobalContextBlock>, g: &mut Graph<T>, x: Var) -> Result<Var> {
    match gc {
        Some(gc) => gc.apply(g, x),
        None => Ok(x),
    }
}
