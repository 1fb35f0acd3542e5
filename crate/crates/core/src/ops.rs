//! Value-level primitives without gradient tracking.
//!
//! Same kernels the tape uses; handy for inference and for recomposing block
//! outputs in tests.

use crate::error::{Result, SacError};
use crate::kernels::{self, ConvSpec};
use crate::real::Real;
use crate::tape::sigmoid;
use crate::tensor::{numel, Tensor};

/// Weight, optional bias and hyperparameters of one convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    /// `(C_out, C_in / groups, kH, kW)`
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub spec: ConvSpec,
}

pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (out, os) = kernels::conv2d_forward(
        x.data(),
        x.shape(),
        p.weight.data(),
        p.weight.shape(),
        p.bias.as_deref(),
        &p.spec,
    )?;
    Tensor::from_vec(os, out)
}

pub fn avg_pool2d<T: Real>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let (out, os) = kernels::avg_pool_forward(x.data(), x.shape(), kernel, stride, padding)?;
    Tensor::from_vec(os, out)
}

pub fn reflection_pad2d<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (out, os) = kernels::reflection_pad_forward(x.data(), x.shape(), pad)?;
    Tensor::from_vec(os, out)
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::one() / T::lit((h * w) as f64);
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([n, c, 1, 1], out).expect("pooled shape")
}

fn broadcast<T: Real>(name: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let os = kernels::broadcast_shape(name, a.shape(), b.shape())?;
    let mut out = vec![T::zero(); numel(&os)];
    let (da, db) = (a.data(), b.data());
    kernels::for_each_broadcast(os, a.shape(), b.shape(), |o, ia, ib| out[o] = f(da[ia], db[ib]));
    Tensor::from_vec(os, out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast("add", a, b, |x, y| x + y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast("mul", a, b, |x, y| x * y)
}

fn map<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

pub fn scale<T: Real>(x: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::lit(s);
    map(x, |v| v * s)
}

pub fn sigmoid_t<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    map(x, sigmoid)
}

pub fn swish<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| v * sigmoid(v))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| v.max(T::zero()))
}

pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(SacError::Invalid("upsample factor must be >= 1".into()));
    }
    let (out, os) = kernels::upsample_nearest_forward(x.data(), x.shape(), factor);
    Tensor::from_vec(os, out)
}
