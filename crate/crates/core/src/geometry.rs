//! Effective kernel size and "same" padding of atrous convolutions.

use serde::Serialize;

use crate::error::{Result, SacError};

/// Kernel sizes that may be converted to switchable atrous layers.
pub const CONVERTIBLE_KERNELS: [usize; 2] = [3, 5];

/// Atrous rate assigned to converted layers.
pub const DEFAULT_RATE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeometryQuery {
    pub kernel: usize,
    pub rate: usize,
    pub stride: usize,
    pub input: usize,
}

impl GeometryQuery {
    pub fn new(kernel: usize, rate: usize, stride: usize, input: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(SacError::Invalid(format!("kernel size must be odd and positive, got {kernel}")));
        }
        if rate == 0 || stride == 0 || input == 0 {
            return Err(SacError::Invalid(format!(
                "rate, stride and input size must be positive (rate={rate}, stride={stride}, input={input})"
            )));
        }
        Ok(Self {
            kernel,
            rate,
            stride,
            input,
        })
    }

    /// Stride-1 query; the input size cancels out of the padding.
    pub fn unit(kernel: usize, rate: usize) -> Result<Self> {
        Self::new(kernel, rate, 1, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GeometryResult {
    pub k_d: usize,
    pub pad: (usize, usize),
}

/// `1 + rate * (kernel - 1)`
pub fn effective_kernel(q: &GeometryQuery) -> usize {
    1 + q.rate * (q.kernel - 1)
}

/// Spatial size produced by the padding from [`same_padding`]: `ceil(input / stride)`.
pub fn same_output(q: &GeometryQuery) -> usize {
    q.input.div_ceil(q.stride)
}

/// Per-side padding `(floor(T/2), ceil(T/2))` with
/// `T = (out - 1) * stride + k_d - input` and `out = ceil(input / stride)`.
///
/// At stride 1 this is `T = k_d - 1` for every input size.
pub fn same_padding(q: &GeometryQuery) -> Result<(usize, usize)> {
    let kd = effective_kernel(q) as isize;
    let out = same_output(q) as isize;
    let total = (out - 1) * q.stride as isize + kd - q.input as isize;
    if total < 0 {
        return Err(SacError::Invalid(format!(
            "negative total padding {total}: effective kernel {kd} cannot cover stride {} over input {}",
            q.stride, q.input
        )));
    }
    let t = total as usize;
    Ok((t / 2, t - t / 2))
}

pub fn geometry(q: &GeometryQuery) -> Result<GeometryResult> {
    Ok(GeometryResult {
        k_d: effective_kernel(q),
        pad: same_padding(q)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub rate: usize,
    pub pad: (usize, usize),
}

/// Assigns the default rate to a chain of `(kernel, stride)` layers whose
/// first layer sees `input` pixels; each subsequent layer sees the previous
/// layer's output.
pub fn plan_conversion(layers: &[(usize, usize)], input: usize) -> Result<Vec<LayerPlan>> {
    let mut size = input;
    let mut plan = Vec::with_capacity(layers.len());
    for &(kernel, stride) in layers {
        if !CONVERTIBLE_KERNELS.contains(&kernel) {
            return Err(SacError::UnsupportedKernel(kernel));
        }
        let q = GeometryQuery::new(kernel, DEFAULT_RATE, stride, size)?;
        plan.push(LayerPlan {
            rate: DEFAULT_RATE,
            pad: same_padding(&q)?,
        });
        size = same_output(&q);
    }
    Ok(plan)
}
