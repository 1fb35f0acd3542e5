use serde::{Deserialize, Serialize};

use crate::error::{Result, SacError};
use crate::geometry::{same_padding, GeometryQuery};
use crate::kernels::{ConvSpec, Pad2d};
use crate::params::{Builder, Graph, Init, ParamId};
use crate::real::Real;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Swish,
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Swish => g.tape.swish(x),
            Activation::Relu => g.tape.relu(x),
        }
    }
}

/// Dense or grouped convolution with an optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv {
    /// Square-kernel convolution; `weight_init` defaults to He-normal.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: ConvSpec,
        weight_init: Option<Init>,
        bias_init: Option<Init>,
    ) -> Result<Self> {
        let c_in_g = c_in / spec.groups;
        let init = weight_init.unwrap_or(Init::He {
            fan_in: c_in_g * kernel * kernel,
        });
        b.scoped(name, |b| {
            let weight = b.param("weight", vec![c_out, c_in_g, kernel, kernel], init)?;
            let bias = bias_init.map(|i| b.param("bias", vec![c_out], i)).transpose()?;
            Ok(Self { weight, bias, spec })
        })
    }

    /// 1x1 convolution with bias.
    pub fn pointwise<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        weight_init: Option<Init>,
        bias_init: Init,
    ) -> Result<Self> {
        Self::new(b, name, c_in, c_out, 1, ConvSpec::default(), weight_init, Some(bias_init))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(self.weight);
        let b = self.bias.map(|b| g.p(b));
        g.tape.conv2d(x, w, b, self.spec)
    }
}

/// One-filter-per-channel convolution whose dilation is chosen per call, with
/// padding recomputed from the input size so output is `ceil(input / stride)`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl DepthwiseConv {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(SacError::Invalid(format!("depthwise kernel must be odd, got {kernel}")));
        }
        let weight = b.scoped(name, |b| {
            b.param(
                "weight",
                vec![channels, 1, kernel, kernel],
                Init::He { fan_in: kernel * kernel },
            )
        })?;
        Ok(Self {
            weight,
            channels,
            kernel,
            stride,
        })
    }

    pub fn spec_for(&self, h: usize, w: usize, rate: usize) -> Result<ConvSpec> {
        let (top, bottom) = same_padding(&GeometryQuery::new(self.kernel, rate, self.stride, h)?)?;
        let (left, right) = same_padding(&GeometryQuery::new(self.kernel, rate, self.stride, w)?)?;
        Ok(ConvSpec {
            stride: (self.stride, self.stride),
            padding: Pad2d {
                top,
                bottom,
                left,
                right,
            },
            dilation: (rate, rate),
            groups: self.channels,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, rate: usize) -> Result<Var> {
        let [_, c, h, w] = g.tape.shape(x);
        if c != self.channels {
            return Err(SacError::shape(
                "depthwise",
                format!("input has C={c}, weight expects {}", self.channels),
            ));
        }
        let spec = self.spec_for(h, w, rate)?;
        let wv = g.p(self.weight);
        g.tape.conv2d(x, wv, None, spec)
    }
}
