//! Finite-difference checks of tape gradients in 64-bit mode, using the
//! fourth-order central stencil
//! `(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{
    Activation, Conv, CoreMode, DapscLayer, DsacLayer, GcMode, GlobalContextBlock, MbConv, MbConvSpec, SeBlock,
    SwitchFunction, SE_RATIO,
};
use crate::detector::{preset, BBox, Detector};
use crate::error::{Result, SacError};
use crate::kernels::{ConvSpec, Pad2d};
use crate::params::{seeded_rng, Builder, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::train::{build_targets, detection_loss, Dataset, ImageRecord, ObjectRecord};

pub const BLOCKS: [&str; 9] = ["conv", "pool", "gc", "se", "switch", "dsac", "dapsc", "mbconv", "model"];
pub const FD_EPS: f64 = 1e-3;
pub const POINTS_PER_TENSOR: usize = 6;
pub const MIN_POINTS: usize = 5;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub block: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub points: usize,
    /// Sampled entries whose stencil crossed a kink and were replaced.
    pub skipped: usize,
    pub tensors: usize,
    /// Tensors with fewer than `min(MIN_POINTS, len)` usable entries.
    pub undersampled: Vec<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.undersampled.is_empty()
    }
}

type LossFn<'a> = dyn Fn(&mut Graph<f64>, Var) -> Result<Var> + 'a;

/// Weighted sum `sum(y * r)` with a fixed random `r`, so every output entry matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = seeded_rng(seed, 99);
    let r = Tensor::uniform(g.tape.shape(y), -1.0, 1.0, &mut rng);
    let rv = g.tape.constant(r);
    let m = g.tape.mul(y, rv)?;
    Ok(g.tape.sum(m))
}

/// Loss value and kink signature of one forward pass.
fn evaluate(store: &ParamStore<f64>, x: &Tensor<f64>, f: &LossFn<'_>) -> Result<(f64, Vec<bool>)> {
    let mut g = store.bind(false);
    let xv = g.tape.constant(x.clone());
    let l = f(&mut g, xv)?;
    Ok((g.tape.value(l).data()[0], g.tape.kink_signature()))
}

/// Stencil over `f(x + k h)` for `k` in `[2, 1, -1, -2]`, retried with a
/// tenth of the step when an evaluation leaves the smooth piece `base`
/// belongs to; `None` if both steps cross a kink.
fn stencil(base: &[bool], mut f: impl FnMut(f64) -> Result<(f64, Vec<bool>)>) -> Result<Option<f64>> {
    'step: for h in [FD_EPS, FD_EPS / 10.0] {
        let mut v = [0.0; 4];
        for (slot, k) in v.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
            let (l, sig) = f(k * h)?;
            if sig != base {
                continue 'step;
            }
            *slot = l;
        }
        return Ok(Some((-v[0] + 8.0 * v[1] - 8.0 * v[2] + v[3]) / (12.0 * h)));
    }
    Ok(None)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares analytic and numerical gradients of `f` at `POINTS_PER_TENSOR`
/// sampled entries of the input and of every parameter.
pub fn check(
    block: &str,
    seed: u64,
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    check_input: bool,
    f: &LossFn<'_>,
) -> Result<GradReport> {
    let mut g = store.bind(true);
    let xv = g.tape.leaf(x.clone().with_grad());
    let loss = f(&mut g, xv)?;
    g.tape.backward(loss)?;
    let input_grad = g.tape.grad_tensor(xv);
    store.absorb_grads(&g);

    let mut rng: ChaCha8Rng = seeded_rng(seed, 7);
    let mut report = GradReport {
        block: block.to_string(),
        seed,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        points: 0,
        skipped: 0,
        tensors: 0,
        undersampled: Vec::new(),
    };
    let base = evaluate(store, x, f)?.1;
    let note = |report: &mut GradReport, name: &str, e: f64| {
        report.points += 1;
        if e > report.max_rel_error || report.worst_tensor.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst_tensor = name.to_string();
        }
    };

    if check_input {
        report.tensors += 1;
        let n = x.len();
        let mut taken = 0;
        for i in sample(&mut rng, n, n) {
            if taken == POINTS_PER_TENSOR {
                break;
            }
            let num = stencil(&base, |d| {
                let mut xp = x.clone();
                xp.data_mut()[i] += d;
                evaluate(store, &xp, f)
            })?;
            match num {
                Some(num) => {
                    taken += 1;
                    note(&mut report, "input", rel_err(input_grad.data()[i], num));
                }
                None => report.skipped += 1,
            }
        }
        if taken < MIN_POINTS.min(n) {
            report.undersampled.push("input".into());
        }
    }

    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        report.tensors += 1;
        let (n, grad) = {
            let p = store.by_name(&name).unwrap();
            (p.tensor.len(), p.tensor.grad.clone().unwrap_or_else(|| vec![0.0; p.tensor.len()]))
        };
        let mut taken = 0;
        for i in sample(&mut rng, n, n) {
            if taken == POINTS_PER_TENSOR {
                break;
            }
            let orig = store.by_name(&name).unwrap().tensor.data()[i];
            let num = stencil(&base, |d| {
                store.by_name_mut(&name).unwrap().tensor.data_mut()[i] = orig + d;
                evaluate(store, x, f)
            });
            store.by_name_mut(&name).unwrap().tensor.data_mut()[i] = orig;
            match num? {
                Some(num) => {
                    taken += 1;
                    note(&mut report, &name, rel_err(grad[i], num));
                }
                None => report.skipped += 1,
            }
        }
        if taken < MIN_POINTS.min(n) {
            report.undersampled.push(name);
        }
    }
    Ok(report)
}

/// Moves every parameter off its (often zero) initialization so all paths carry gradient.
fn jitter(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = seeded_rng(seed, 5);
    for p in store.iter_mut() {
        let noise = Tensor::<f64>::randn(p.tensor.shape(), std, &mut rng);
        for (v, e) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
    }
}

fn input(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut seeded_rng(seed, 3))
}

fn build<R>(seed: u64, f: impl FnOnce(&mut Builder<'_, f64>) -> Result<R>) -> Result<(ParamStore<f64>, R)> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed, 1);
    let r = f(&mut Builder::new(&mut store, &mut rng))?;
    jitter(&mut store, seed, 0.3);
    Ok((store, r))
}

fn mbconv_spec(c_in: usize, c_out: usize, kernel: usize, stride: usize, core: CoreMode, context: Option<GcMode>) -> MbConvSpec {
    MbConvSpec {
        c_in,
        c_out,
        kernel,
        stride,
        expand: 2,
        core,
        context,
        rate: 3,
        activation: Activation::Swish,
        se_ratio: SE_RATIO,
    }
}

/// Runs the finite-difference check for one named block.
pub fn run_block(block: &str, seed: u64) -> Result<GradReport> {
    match block {
        "conv" => {
            let spec = ConvSpec::default()
                .with_stride(2)
                .with_dilation(2)
                .with_groups(2)
                .with_padding(Pad2d::split(1, 2));
            let (mut s, c) = build(seed, |b| Conv::new(b, "conv", 4, 6, 3, spec, None, Some(crate::params::Init::Zeros)))?;
            let x = input([2, 4, 9, 8], seed);
            check(block, seed, &mut s, &x, true, &move |g, x| {
                let y = c.forward(g, x)?;
                probe(g, y, seed)
            })
        }
        "pool" => {
            let mut s = ParamStore::new();
            let x = input([2, 3, 7, 6], seed);
            check(block, seed, &mut s, &x, true, &move |g, x| {
                let p = g.tape.reflection_pad2d(x, 2)?;
                let a = g.tape.avg_pool2d(p, 5, 2, 0)?;
                let u = g.tape.upsample_nearest(a, 2)?;
                let m = g.tape.global_avg_pool(x);
                let l1 = probe(g, u, seed)?;
                let l2 = probe(g, m, seed + 1)?;
                g.tape.add(l1, l2)
            })
        }
        "gc" => {
            let (mut s, (global, local)) = build(seed, |b| {
                Ok((
                    GlobalContextBlock::new(b, "global", 4, GcMode::Global)?,
                    GlobalContextBlock::new(b, "local", 4, GcMode::Local)?,
                ))
            })?;
            let x = input([2, 4, 6, 6], seed);
            check(block, seed, &mut s, &x, true, &move |g, x| {
                let y = global.apply(g, x)?;
                let y = local.apply(g, y)?;
                probe(g, y, seed)
            })
        }
        "se" => {
            let (mut s, se) = build(seed, |b| SeBlock::new(b, "se", 8, SE_RATIO, Activation::Swish))?;
            let x = input([2, 8, 5, 5], seed);
            check(block, seed, &mut s, &x, true, &move |g, x| {
                let y = se.forward(g, x)?;
                probe(g, y, seed)
            })
        }
        "switch" => {
            let (mut s, (s1, s2)) = build(seed, |b| {
                Ok((SwitchFunction::new(b, "s1", 3, 1)?, SwitchFunction::new(b, "s2", 3, 2)?))
            })?;
            let x = input([2, 3, 6, 7], seed);
            check(block, seed, &mut s, &x, true, &move |g, x| {
                let a = s1.forward(g, x)?;
                let b = s2.forward(g, x)?;
                let la = probe(g, a, seed)?;
                let lb = probe(g, b, seed + 1)?;
                g.tape.add(la, lb)
            })
        }
        "dsac" => {
            let (mut s, (d1, d2)) = build(seed, |b| {
                Ok((
                    b.scoped("a", |b| DsacLayer::new(b, 4, 3, 1, 3, Some(GcMode::Global)))?,
                    b.scoped("b", |b| DsacLayer::new(b, 4, 5, 2, 3, Some(GcMode::Local)))?,
                ))
            })?;
            let x = input([2, 4, 8, 8], seed);
            check(block, seed, &mut s, &x, true, &move |g, x| {
                let a = d1.forward(g, x)?;
                let b = d2.forward(g, x)?;
                let la = probe(g, a, seed)?;
                let lb = probe(g, b, seed + 1)?;
                g.tape.add(la, lb)
            })
        }
        "dapsc" => {
            let (mut s, (d1, d2)) = build(seed, |b| {
                Ok((
                    b.scoped("a", |b| DapscLayer::new(b, 4, 6, 3, 1, 3, SE_RATIO, Activation::Swish, Some(GcMode::Global)))?,
                    b.scoped("b", |b| DapscLayer::new(b, 4, 4, 5, 2, 3, SE_RATIO, Activation::Swish, None))?,
                ))
            })?;
            let x = input([2, 4, 8, 8], seed);
            check(block, seed, &mut s, &x, true, &move |g, x| {
                let a = d1.forward(g, x)?;
                let b = d2.forward(g, x)?;
                let la = probe(g, a, seed)?;
                let lb = probe(g, b, seed + 1)?;
                g.tape.add(la, lb)
            })
        }
        "mbconv" => {
            let (mut s, blocks) = build(seed, |b| {
                Ok(vec![
                    b.scoped("plain", |b| MbConv::new(b, mbconv_spec(4, 4, 3, 1, CoreMode::Plain, None)))?,
                    b.scoped("dsac", |b| MbConv::new(b, mbconv_spec(4, 4, 3, 1, CoreMode::Dsac, Some(GcMode::Global))))?,
                    b.scoped("dapsc", |b| MbConv::new(b, mbconv_spec(4, 8, 5, 2, CoreMode::Dapsc, Some(GcMode::Local))))?,
                ])
            })?;
            let x = input([2, 4, 8, 8], seed);
            check(block, seed, &mut s, &x, true, &move |g, x| {
                let mut y = x;
                for b in &blocks {
                    y = b.forward(g, y)?;
                }
                probe(g, y, seed)
            })
        }
        "model" => model_check(seed),
        other => Err(SacError::Invalid(format!(
            "unknown block '{other}'; expected one of {}",
            BLOCKS.join(", ")
        ))),
    }
}

/// Full detector plus detection loss on a 16x16 image with one object.
fn model_check(seed: u64) -> Result<GradReport> {
    let cfg = preset("toy-grad")?.with_core(CoreMode::Dsac).with_context(Some(GcMode::Global));
    let mut model = Detector::<f64>::new(cfg, seed)?;
    jitter(&mut model.store, seed, 0.1);
    let size = model.config.input_size;
    let x = input([1, model.config.in_channels, size, size], seed);
    let ds = Dataset {
        records: vec![ImageRecord {
            id: 0,
            width: size as u32,
            height: size as u32,
            file: String::new(),
            objects: vec![ObjectRecord {
                class: 1,
                bbox: BBox::new(3.0, 4.0, 11.5, 12.0),
            }],
        }],
        images: vec![vec![0.0; x.len()]],
        channels: model.config.in_channels,
        size,
    };
    let targets = build_targets(&ds, &[0], &model.anchors(), model.config.num_classes);
    let mut store = model.store.clone();
    let focal = Default::default();
    let m = &model;
    check("model", seed, &mut store, &x, true, &move |g, x| {
        let (cls, reg) = m.forward(g, x)?;
        Ok(detection_loss(g, cls, reg, &targets, focal, 0.1, 1.0)?.0)
    })
}
