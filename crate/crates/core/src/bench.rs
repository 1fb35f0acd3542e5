//! Multiply counts and measured throughput of the three depthwise cores.

use std::time::Instant;

use serde::Serialize;

use crate::blocks::{Activation, CoreMode, DapscLayer, DepthwiseConv, DsacLayer, SE_RATIO};
use crate::error::Result;
use crate::geometry::DEFAULT_RATE;
use crate::params::{seeded_rng, Builder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BenchShape {
    pub batch: usize,
    pub channels: usize,
    pub size: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self {
            batch: 4,
            channels: 32,
            size: 32,
            kernel: 3,
            stride: 1,
        }
    }
}

fn conv_mults(n: usize, c_out: usize, hw_out: usize, c_in_per_group: usize, k: usize) -> u64 {
    (n * c_out * hw_out * c_in_per_group * k * k) as u64
}

/// Multiplies in one forward pass of a core, counting convolutions,
/// pooling scale factors, SE gating and the switch blend.
pub fn core_multiplies(mode: CoreMode, s: &BenchShape) -> u64 {
    let BenchShape {
        batch: n,
        channels: c,
        size,
        kernel: k,
        stride,
    } = *s;
    let o = size.div_ceil(stride);
    let hw = o * o;
    let dw = conv_mults(n, c, hw, 1, k);
    // reflect pad, 5x5 average pool (one scale per output), 1x1 conv to one channel
    let switch = (n * c * hw) as u64 + conv_mults(n, 1, hw, c, 1);
    // s*a + (1-s)*b
    let blend = 2 * (n * c * hw) as u64;
    let se = {
        let r = c / SE_RATIO;
        (n * c) as u64 + conv_mults(n, r, 1, c, 1) + conv_mults(n, c, 1, r, 1) + (n * c * hw) as u64
    };
    let project = conv_mults(n, c, hw, c, 1);
    match mode {
        CoreMode::Plain => dw,
        CoreMode::Dsac => 2 * dw + switch + blend,
        CoreMode::Dapsc => 2 * (dw + se + project) + switch + blend,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub block: CoreMode,
    pub shape: BenchShape,
    pub multiplies: u64,
    pub plain_multiplies: u64,
    pub multiply_ratio_vs_plain: f64,
    pub forward_elems_per_sec: f64,
    pub backward_elems_per_sec: f64,
    pub iterations: usize,
}

/// Times `iterations` forward and forward+backward passes of one core in f32.
pub fn bench_core(mode: CoreMode, shape: BenchShape, iterations: usize) -> Result<BenchReport> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = seeded_rng(0, 1);
    let c = shape.channels;
    enum Block {
        Plain(DepthwiseConv),
        Dsac(DsacLayer),
        Dapsc(DapscLayer),
    }
    let block = {
        let mut b = Builder::new(&mut store, &mut rng);
        match mode {
            CoreMode::Plain => Block::Plain(DepthwiseConv::new(&mut b, "dw", c, shape.kernel, shape.stride)?),
            CoreMode::Dsac => Block::Dsac(DsacLayer::new(&mut b, c, shape.kernel, shape.stride, DEFAULT_RATE, None)?),
            CoreMode::Dapsc => Block::Dapsc(DapscLayer::new(
                &mut b,
                c,
                c,
                shape.kernel,
                shape.stride,
                DEFAULT_RATE,
                SE_RATIO,
                Activation::Swish,
                None,
            )?),
        }
    };
    let x = Tensor::<f32>::randn([shape.batch, c, shape.size, shape.size], 1.0, &mut seeded_rng(0, 2));
    let run = |backward: bool| -> Result<usize> {
        let mut g = store.bind(backward);
        let xv = g.tape.constant(x.clone());
        let y = match &block {
            Block::Plain(d) => d.forward(&mut g, xv, 1)?,
            Block::Dsac(d) => d.forward(&mut g, xv)?,
            Block::Dapsc(d) => d.forward(&mut g, xv)?,
        };
        let elems = g.tape.value(y).len();
        if backward {
            let l = g.tape.sum(y);
            g.tape.backward(l)?;
        }
        Ok(elems)
    };
    let iterations = iterations.max(1);
    run(true)?;
    let t = Instant::now();
    let mut elems = 0;
    for _ in 0..iterations {
        elems += run(false)?;
    }
    let fwd = elems as f64 / t.elapsed().as_secs_f64();
    let t = Instant::now();
    for _ in 0..iterations {
        run(true)?;
    }
    let bwd = elems as f64 / t.elapsed().as_secs_f64();
    let multiplies = core_multiplies(mode, &shape);
    let plain_multiplies = core_multiplies(CoreMode::Plain, &shape);
    Ok(BenchReport {
        block: mode,
        shape,
        multiplies,
        plain_multiplies,
        multiply_ratio_vs_plain: multiplies as f64 / plain_multiplies as f64,
        forward_elems_per_sec: fwd,
        backward_elems_per_sec: bwd,
        iterations,
    })
}
