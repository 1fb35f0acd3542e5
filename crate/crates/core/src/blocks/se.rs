use crate::error::{Result, SacError};
use crate::params::{Builder, Graph, Init};
use crate::real::Real;
use crate::tape::Var;

use super::layers::{Activation, Conv};

/// Channel reduction ratio of the squeeze step.
pub const SE_RATIO: usize = 4;

/// Squeeze-and-excitation: `x * sigmoid(expand(act(reduce(gap(x)))))`.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub reduce: Conv,
    pub expand: Conv,
    pub activation: Activation,
    pub channels: usize,
}

impl SeBlock {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        ratio: usize,
        activation: Activation,
    ) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(SacError::Invalid(format!(
                "SE block: {channels} channels not divisible by reduction ratio {ratio}"
            )));
        }
        let squeezed = channels / ratio;
        b.scoped(name, |b| {
            Ok(Self {
                reduce: Conv::pointwise(b, "reduce", channels, squeezed, None, Init::Zeros)?,
                expand: Conv::pointwise(b, "expand", squeezed, channels, None, Init::Zeros)?,
                activation,
                channels,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.tape.shape(x)[1];
        if c != self.channels {
            return Err(SacError::shape("se", format!("input has C={c}, block expects {}", self.channels)));
        }
        let squeezed = g.tape.global_avg_pool(x);
        let r = self.reduce.forward(g, squeezed)?;
        let r = self.activation.apply(g, r);
        let e = self.expand.forward(g, r)?;
        let scale = g.tape.sigmoid(e);
        g.tape.mul(x, scale)
    }
}
