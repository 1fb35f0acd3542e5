use crate::error::{Result, SacError};
use crate::kernels::ConvSpec;
use crate::params::{Builder, Graph, Init, ParamId};
use crate::real::Real;
use crate::tape::Var;

pub const SWITCH_POOL: usize = 5;
const SWITCH_PAD: usize = 2;

/// Location-wise blend coefficient: reflection pad 2, 5x5 mean, 1x1 conv to one channel.
///
/// The output is affine in the pooled input with no squashing, so the
/// initial state (weight 0, bias 1) yields exactly 1 everywhere.
#[derive(Clone, Debug)]
pub struct SwitchFunction {
    pub weight: ParamId,
    pub bias: ParamId,
    /// Pool stride; matches the stride of the branches being blended.
    pub stride: usize,
}

impl SwitchFunction {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize, stride: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                weight: b.param("weight", vec![1, channels, 1, 1], Init::Zeros)?,
                bias: b.param("bias", vec![1], Init::Const(1.0))?,
                stride,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.tape.shape(x);
        if h <= SWITCH_PAD || w <= SWITCH_PAD {
            return Err(SacError::Invalid(format!(
                "switch needs spatial extent >= 3 for reflection padding, got {h}x{w}"
            )));
        }
        let padded = g.tape.reflection_pad2d(x, SWITCH_PAD)?;
        let pooled = g.tape.avg_pool2d(padded, SWITCH_POOL, self.stride, 0)?;
        let (wv, bv) = (g.p(self.weight), g.p(self.bias));
        g.tape.conv2d(pooled, wv, Some(bv), ConvSpec::default())
    }
}
