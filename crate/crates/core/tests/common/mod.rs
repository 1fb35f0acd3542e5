//! Naive references shared by the oracle tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sacnet::kernels::{ConvSpec, Pad2d};
use sacnet::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Case {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad: Pad2d,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let groups = rng.gen_range(1..=3);
    Case {
        n: rng.gen_range(1..=2),
        c_in: groups * rng.gen_range(1..=3),
        c_out: groups * rng.gen_range(1..=3),
        groups,
        h: rng.gen_range(1..=11),
        w: rng.gen_range(1..=11),
        k: [1, 3, 5][rng.gen_range(0..3)],
        stride: (rng.gen_range(1..=3), rng.gen_range(1..=3)),
        dilation: (rng.gen_range(1..=3), rng.gen_range(1..=3)),
        pad: Pad2d {
            top: rng.gen_range(0..=4),
            bottom: rng.gen_range(0..=4),
            left: rng.gen_range(0..=4),
            right: rng.gen_range(0..=4),
        },
    }
}

pub fn out_size(i: usize, before: usize, after: usize, k: usize, s: usize, d: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    let avail = i + before + after;
    (avail >= span).then(|| (avail - span) / s + 1)
}

/// Direct six-deep loop over the definition of grouped dilated cross-correlation.
pub fn naive_conv(c: &Case, x: &[f64], w: &[f64], b: &[f64]) -> Option<(Vec<f64>, [usize; 4])> {
    let oh = out_size(c.h, c.pad.top, c.pad.bottom, c.k, c.stride.0, c.dilation.0)?;
    let ow = out_size(c.w, c.pad.left, c.pad.right, c.k, c.stride.1, c.dilation.1)?;
    let cig = c.c_in / c.groups;
    let cog = c.c_out / c.groups;
    let mut y = vec![0.0; c.n * c.c_out * oh * ow];
    for n in 0..c.n {
        for oc in 0..c.c_out {
            let g = oc / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for icg in 0..cig {
                        let ic = g * cig + icg;
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (oy * c.stride.0 + ky * c.dilation.0) as isize - c.pad.top as isize;
                                let ix = (ox * c.stride.1 + kx * c.dilation.1) as isize - c.pad.left as isize;
                                if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                    continue;
                                }
                                let xv = x[((n * c.c_in + ic) * c.h + iy as usize) * c.w + ix as usize];
                                let wv = w[((oc * cig + icg) * c.k + ky) * c.k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((n * c.c_out + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Some((y, [c.n, c.c_out, oh, ow]))
}

pub fn spec_of(c: &Case) -> ConvSpec {
    ConvSpec {
        stride: c.stride,
        padding: c.pad,
        dilation: c.dilation,
        groups: c.groups,
    }
}

pub fn tensors(c: &Case, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Vec<f64>) {
    let x = Tensor::uniform([c.n, c.c_in, c.h, c.w], -1.0, 1.0, rng);
    let w = Tensor::uniform([c.c_out, c.c_in / c.groups, c.k, c.k], -1.0, 1.0, rng);
    let b = (0..c.c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (x, w, b)
}


/// Runs `count` valid random configurations through `ops::conv2d` and the
/// naive loop. Returns the worst absolute difference, or a description of
/// the first configuration where the two disagree on validity or shape.
pub fn conv_sweep(seed: u64, count: usize) -> Result<f64, String> {
    use rand::SeedableRng;
    use sacnet::ops::{conv2d, ConvParams};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut worst = 0f64;
    while checked < count {
        let c = random_case(&mut rng);
        let (x, w, b) = tensors(&c, &mut rng);
        let params = ConvParams {
            weight: w.clone(),
            bias: Some(b.clone()),
            spec: spec_of(&c),
        };
        match (naive_conv(&c, x.data(), w.data(), &b), conv2d(&x, &params)) {
            (Some((want, shape)), Ok(got)) => {
                if got.shape() != shape {
                    return Err(format!("{c:?}: shape {:?} vs {shape:?}", got.shape()));
                }
                let err = want.iter().zip(got.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
                checked += 1;
            }
            (None, Err(_)) => {}
            (None, Ok(_)) => return Err(format!("{c:?}: kernel accepted an empty output")),
            (Some(_), Err(e)) => return Err(format!("{c:?}: kernel rejected a valid config: {e}")),
        }
    }
    Ok(worst)
}

use sacnet::detector::{iou, BBox, Detection};
use sacnet::train::ObjectRecord;

/// Ranks every detection of `class` by score and checks it against every
/// object of that class in its image, taking the best unclaimed one.
pub fn brute_hits(dets: &[Vec<Detection>], gts: &[Vec<ObjectRecord>], class: usize, t: f64) -> Vec<bool> {
    let mut ranked: Vec<(usize, Detection)> = Vec::new();
    for (i, list) in dets.iter().enumerate() {
        for d in list {
            if d.class == class {
                ranked.push((i, *d));
            }
        }
    }
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::new();
    for (img, d) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[img].iter().enumerate() {
            let o = iou(&d.bbox, &g.bbox);
            if g.class == class && !claimed[img][j] && o >= t && best.map_or(true, |(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            claimed[img][j] = true;
        }
        hits.push(best.is_some());
    }
    hits
}

/// All-point interpolated AP from ranked hit flags, using an explicit
/// precision envelope at every recall step.
pub fn brute_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0;
    let points: Vec<(f64, f64)> = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += h as usize;
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &points {
        if r > prev {
            let envelope = points.iter().filter(|(r2, _)| *r2 >= r).map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev) * envelope;
            prev = r;
        }
    }
    ap
}

/// Mean AP at IoU `t` over classes that have ground truth.
pub fn brute_map(dets: &[Vec<Detection>], gts: &[Vec<ObjectRecord>], num_classes: usize, t: f64) -> f64 {
    let mut aps = Vec::new();
    for class in 0..num_classes {
        let n_gt = gts.iter().flatten().filter(|g| g.class == class).count();
        if n_gt > 0 {
            aps.push(brute_ap(&brute_hits(dets, gts, class, t), n_gt));
        }
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

fn object(class: usize, b: [f64; 4]) -> ObjectRecord {
    ObjectRecord { class, bbox: BBox::from(b) }
}

fn det(class: usize, b: [f64; 4], score: f64) -> Detection {
    Detection { bbox: BBox::from(b), class, score }
}

/// Two images, two classes, five objects and ten detections.
///
/// Class 0 ranks hit, miss, hit, duplicate, miss over three objects:
/// AP = (1 + 2/3) / 3. Class 1 ranks hit, miss, duplicate, hit, miss over
/// two objects: AP = 1/2 + 1/2 * 1/2. The mean is 47/72.
pub fn hand_instance() -> (Vec<Vec<Detection>>, Vec<Vec<ObjectRecord>>, f64) {
    let gts = vec![
        vec![object(0, [0.0, 0.0, 10.0, 10.0]), object(0, [20.0, 20.0, 30.0, 30.0]), object(1, [40.0, 0.0, 60.0, 20.0])],
        vec![object(0, [5.0, 5.0, 15.0, 15.0]), object(1, [30.0, 30.0, 50.0, 50.0])],
    ];
    let dets = vec![
        vec![
            det(0, [0.0, 0.0, 10.0, 10.0], 0.9),
            det(0, [40.0, 40.0, 50.0, 50.0], 0.8),
            det(0, [1.0, 1.0, 10.0, 10.0], 0.6),
            det(1, [41.0, 1.0, 60.0, 20.0], 0.85),
            det(1, [40.0, 0.0, 60.0, 20.0], 0.65),
        ],
        vec![
            det(0, [5.0, 5.0, 15.0, 15.0], 0.7),
            det(0, [21.0, 20.0, 30.0, 30.0], 0.5),
            det(1, [0.0, 0.0, 5.0, 5.0], 0.75),
            det(1, [32.0, 30.0, 50.0, 50.0], 0.55),
            det(1, [100.0, 100.0, 110.0, 110.0], 0.3),
        ],
    ];
    (dets, gts, 47.0 / 72.0)
}

use rand::SeedableRng;
use sacnet::blocks::{eval_block, Activation, DapscLayer, DsacLayer, SE_RATIO};
use sacnet::params::{Builder, ParamStore};
use sacnet::real::Real;

/// Adds `N(0, std)` noise to every parameter.
pub fn jitter<T: Real>(store: &mut ParamStore<T>, std: f64, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let noise = Tensor::<T>::randn(p.tensor.shape(), std, rng);
        for (v, n) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *v += *n;
        }
    }
}

/// Builds a layer and moves every parameter away from its initial value.
pub fn randomized<T: Real, L>(seed: u64, f: impl FnOnce(&mut Builder<'_, T>) -> L) -> (ParamStore<T>, L) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = f(&mut Builder::new(&mut store, &mut rng));
    jitter(&mut store, 0.5, &mut rng);
    (store, layer)
}

/// Forces every switch in `store` to the constant `value`.
pub fn set_switch<T: Real>(store: &mut ParamStore<T>, value: f64) {
    for p in store.iter_mut().filter(|p| p.name.contains("switch.")) {
        let fill = if p.name.ends_with("bias") { value } else { 0.0 };
        p.tensor.data_mut().iter_mut().for_each(|v| *v = T::lit(fill));
    }
}

/// Largest difference between a DSAC or DAPSC layer with its switch pinned
/// to 1 or 0 and the matching single branch, over strides 1 and 2.
pub fn switch_extreme_gap<T: Real>() -> f64 {
    let mut worst = 0f64;
    for stride in [1usize, 2] {
        let (mut store, dsac) = randomized::<T, _>(11 + stride as u64, |b| DsacLayer::new(b, 8, 3, stride, 3, None).unwrap());
        let (mut dstore, dapsc) = randomized::<T, _>(21 + stride as u64, |b| {
            DapscLayer::new(b, 8, 6, 5, stride, 3, SE_RATIO, Activation::Swish, None).unwrap()
        });
        let x = Tensor::<T>::randn([2, 8, 12, 11], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        for (s, rate) in [(1.0, 1), (0.0, 3)] {
            set_switch(&mut store, s);
            set_switch(&mut dstore, s);
            let blended = eval_block(&store, &x, |g, x| dsac.forward(g, x)).unwrap();
            let branch = eval_block(&store, &x, |g, x| dsac.dw.forward(g, x, rate)).unwrap();
            worst = worst.max(blended.max_abs_diff(&branch));
            let blended = eval_block(&dstore, &x, |g, x| dapsc.forward(g, x)).unwrap();
            let branch = eval_block(&dstore, &x, |g, x| dapsc.branch(g, x, rate)).unwrap();
            worst = worst.max(blended.max_abs_diff(&branch));
        }
    }
    worst
}
