//! Switchable atrous convolution blocks and the MBConv composite built from them.
//!
//! Every block is a set of [`ParamId`](crate::params::ParamId)s plus static
//! hyperparameters; `forward` records onto a [`Graph`](crate::params::Graph)
//! so the same code serves inference and training.

mod context;
mod dapsc;
mod dsac;
mod layers;
mod mbconv;
mod se;
mod switch;

pub use context::{GcMode, GlobalContextBlock};
pub use dapsc::DapscLayer;
pub use dsac::DsacLayer;
pub use layers::{Activation, Conv, DepthwiseConv};
pub use mbconv::{Core, CoreMode, MbConv, MbConvSpec, PlainDepthwise};
pub use se::{SeBlock, SE_RATIO};
pub use switch::SwitchFunction;

use crate::error::Result;
use crate::params::{Graph, ParamStore};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Runs `f` on `x` without gradient tracking and returns the output value.
pub fn eval_block<T: Real>(
    store: &ParamStore<T>,
    x: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut g = store.bind(false);
    let xv = g.tape.constant(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.tape.value(y).clone())
}

/// `s * a + (1 - s) * b` with `s` broadcast over channels.
pub(crate) fn blend<T: Real>(g: &mut Graph<T>, s: Var, a: Var, b: Var) -> Result<Var> {
    let sa = g.tape.mul(s, a)?;
    let not_s = g.tape.one_minus(s);
    let sb = g.tape.mul(not_s, b)?;
    g.tape.add(sa, sb)
}
