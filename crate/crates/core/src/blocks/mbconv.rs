use serde::{Deserialize, Serialize};

use crate::error::{Result, SacError};
use crate::geometry::CONVERTIBLE_KERNELS;
use crate::params::{Builder, Graph, Init};
use crate::real::Real;
use crate::tape::Var;

use super::context::{apply_opt, GcMode, GlobalContextBlock};
use super::dapsc::DapscLayer;
use super::dsac::DsacLayer;
use super::layers::{Activation, Conv, DepthwiseConv};
use super::se::SeBlock;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreMode {
    #[default]
    Plain,
    Dsac,
    Dapsc,
}

impl std::fmt::Display for CoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CoreMode::Plain => "plain",
            CoreMode::Dsac => "dsac",
            CoreMode::Dapsc => "dapsc",
        })
    }
}

/// Rate-1 depthwise convolution, optionally wrapped in pre/post context.
#[derive(Clone, Debug)]
pub struct PlainDepthwise {
    pub dw: DepthwiseConv,
    pub pre_gc: Option<GlobalContextBlock>,
    pub post_gc: Option<GlobalContextBlock>,
}

impl PlainDepthwise {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let x = apply_opt(self.pre_gc.as_ref(), g, x)?;
        let y = self.dw.forward(g, x, 1)?;
        apply_opt(self.post_gc.as_ref(), g, y)
    }
}

#[derive(Clone, Debug)]
pub enum Core {
    Plain(PlainDepthwise),
    Dsac(DsacLayer),
    Dapsc(DapscLayer),
}

impl Core {
    pub fn mode(&self) -> CoreMode {
        match self {
            Core::Plain(_) => CoreMode::Plain,
            Core::Dsac(_) => CoreMode::Dsac,
            Core::Dapsc(_) => CoreMode::Dapsc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MbConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub expand: usize,
    pub core: CoreMode,
    pub context: Option<GcMode>,
    pub rate: usize,
    pub activation: Activation,
    pub se_ratio: usize,
}

/// Mobile inverted bottleneck: expand 1x1, activation, depthwise core,
/// SE, project 1x1, and a skip when shapes allow.
///
/// A DAPSC core carries its own SE and projection.
#[derive(Clone, Debug)]
pub struct MbConv {
    pub spec: MbConvSpec,
    pub expand: Option<Conv>,
    pub core: Core,
    pub se: Option<SeBlock>,
    pub project: Option<Conv>,
    pub skip: bool,
}

impl MbConv {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, spec: MbConvSpec) -> Result<Self> {
        if !CONVERTIBLE_KERNELS.contains(&spec.kernel) {
            return Err(SacError::UnsupportedKernel(spec.kernel));
        }
        if spec.expand == 0 {
            return Err(SacError::Invalid("expansion ratio must be >= 1".into()));
        }
        let mid = spec.c_in * spec.expand;
        let expand = (spec.expand != 1)
            .then(|| Conv::pointwise(b, "expand", spec.c_in, mid, None, Init::Zeros))
            .transpose()?;
        let mut se = None;
        let mut project = None;
        let core = match spec.core {
            CoreMode::Plain | CoreMode::Dsac => {
                let core = if spec.core == CoreMode::Plain {
                    let dw = DepthwiseConv::new(b, "dw", mid, spec.kernel, spec.stride)?;
                    let pre_gc = spec.context.map(|m| GlobalContextBlock::new(b, "pre_gc", mid, m)).transpose()?;
                    let post_gc = spec.context.map(|m| GlobalContextBlock::new(b, "post_gc", mid, m)).transpose()?;
                    Core::Plain(PlainDepthwise { dw, pre_gc, post_gc })
                } else {
                    Core::Dsac(DsacLayer::new(b, mid, spec.kernel, spec.stride, spec.rate, spec.context)?)
                };
                se = Some(SeBlock::new(b, "se", mid, spec.se_ratio, spec.activation)?);
                project = Some(Conv::pointwise(b, "project", mid, spec.c_out, None, Init::Zeros)?);
                core
            }
            CoreMode::Dapsc => Core::Dapsc(DapscLayer::new(
                b,
                mid,
                spec.c_out,
                spec.kernel,
                spec.stride,
                spec.rate,
                spec.se_ratio,
                spec.activation,
                spec.context,
            )?),
        };
        Ok(Self {
            spec,
            expand,
            core,
            se,
            project,
            skip: spec.stride == 1 && spec.c_in == spec.c_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.tape.shape(x)[1];
        if c != self.spec.c_in {
            return Err(SacError::shape(
                "mbconv",
                format!("input has C={c}, block expects {}", self.spec.c_in),
            ));
        }
        let mut h = x;
        if let Some(e) = &self.expand {
            h = e.forward(g, h)?;
            h = self.spec.activation.apply(g, h);
        }
        h = match &self.core {
            Core::Plain(p) => p.forward(g, h)?,
            Core::Dsac(d) => d.forward(g, h)?,
            Core::Dapsc(d) => d.forward(g, h)?,
        };
        if let Some(se) = &self.se {
            h = se.forward(g, h)?;
        }
        if let Some(p) = &self.project {
            h = p.forward(g, h)?;
        }
        if self.skip {
            h = g.tape.add(h, x)?;
        }
        Ok(h)
    }
}
