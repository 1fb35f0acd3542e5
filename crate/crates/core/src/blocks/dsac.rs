use crate::error::Result;
use crate::params::{Builder, Graph};
use crate::real::Real;
use crate::tape::Var;

use super::context::{apply_opt, GcMode, GlobalContextBlock};
use super::layers::DepthwiseConv;
use super::switch::SwitchFunction;
use super::blend;

/// Depthwise switchable atrous convolution.
///
/// With `x' = x + pre(x)` and `s = S(x')`:
/// `y = s * dw(x', w, 1) + (1 - s) * dw(x', w, rate)`, then `y + post(y)`.
/// Both branches read the same depthwise weight.
#[derive(Clone, Debug)]
pub struct DsacLayer {
    pub dw: DepthwiseConv,
    pub rate: usize,
    pub switch: SwitchFunction,
    pub pre_gc: Option<GlobalContextBlock>,
    pub post_gc: Option<GlobalContextBlock>,
}

impl DsacLayer {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        channels: usize,
        kernel: usize,
        stride: usize,
        rate: usize,
        context: Option<GcMode>,
    ) -> Result<Self> {
        let dw = DepthwiseConv::new(b, "dw", channels, kernel, stride)?;
        let switch = SwitchFunction::new(b, "switch", channels, stride)?;
        let pre_gc = context.map(|m| GlobalContextBlock::new(b, "pre_gc", channels, m)).transpose()?;
        let post_gc = context.map(|m| GlobalContextBlock::new(b, "post_gc", channels, m)).transpose()?;
        Ok(Self {
            dw,
            rate,
            switch,
            pre_gc,
            post_gc,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let x = apply_opt(self.pre_gc.as_ref(), g, x)?;
        let s = self.switch.forward(g, x)?;
        let dense = self.dw.forward(g, x, 1)?;
        let sparse = self.dw.forward(g, x, self.rate)?;
        let y = blend(g, s, dense, sparse)?;
        apply_opt(self.post_gc.as_ref(), g, y)
    }
}
