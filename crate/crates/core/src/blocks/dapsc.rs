use crate::error::Result;
use crate::params::{Builder, Graph, Init};
use crate::real::Real;
use crate::tape::Var;

use super::context::{apply_opt, GcMode, GlobalContextBlock};
use super::layers::{Activation, Conv, DepthwiseConv};
use super::se::SeBlock;
use super::switch::SwitchFunction;
use super::blend;

/// Depthwise atrous convolution with the switch after the pointwise stage.
///
/// `branch(k) = project(se(dw(x', w, k)))` for `k` in `{1, rate}`; the two
/// branches differ only in depthwise dilation and share SE and projection.
#[derive(Clone, Debug)]
pub struct DapscLayer {
    pub dw: DepthwiseConv,
    pub rate: usize,
    pub se: SeBlock,
    pub project: Conv,
    pub switch: SwitchFunction,
    pub pre_gc: Option<GlobalContextBlock>,
    pub post_gc: Option<GlobalContextBlock>,
}

impl DapscLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rate: usize,
        se_ratio: usize,
        activation: Activation,
        context: Option<GcMode>,
    ) -> Result<Self> {
        let dw = DepthwiseConv::new(b, "dw", channels, kernel, stride)?;
        let switch = SwitchFunction::new(b, "switch", channels, stride)?;
        let pre_gc = context.map(|m| GlobalContextBlock::new(b, "pre_gc", channels, m)).transpose()?;
        let se = SeBlock::new(b, "se", channels, se_ratio, activation)?;
        let project = Conv::pointwise(b, "project", channels, out_channels, None, Init::Zeros)?;
        let post_gc = context
            .map(|m| GlobalContextBlock::new(b, "post_gc", out_channels, m))
            .transpose()?;
        Ok(Self {
            dw,
            rate,
            se,
            project,
            switch,
            pre_gc,
            post_gc,
        })
    }

    pub fn branch<T: Real>(&self, g: &mut Graph<T>, x: Var, rate: usize) -> Result<Var> {
        let d = self.dw.forward(g, x, rate)?;
        let e = self.se.forward(g, d)?;
        self.project.forward(g, e)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let x = apply_opt(self.pre_gc.as_ref(), g, x)?;
        let s = self.switch.forward(g, x)?;
        let dense = self.branch(g, x, 1)?;
        let sparse = self.branch(g, x, self.rate)?;
        let y = blend(g, s, dense, sparse)?;
        apply_opt(self.post_gc.as_ref(), g, y)
    }
}
