mod common;

use common::{jitter, randomized};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacnet::blocks::CoreMode;
use sacnet::cli::max_output_diff;
use sacnet::convert::{convert_to_sac, is_converted, ConvertOptions};
use sacnet::detector::{
    anchor_count, decode, encode, generate_anchors, iou, nms, postprocess, preset, Anchor, BBox, Bifpn, Detection,
    Detector, LevelGeometry, PostprocessOptions,
};
use sacnet::ops::{self, ConvParams};
use sacnet::params::ParamStore;
use sacnet::tensor::Tensor;

fn levels_for(size: usize) -> Vec<LevelGeometry> {
    [8, 16, 32]
        .iter()
        .map(|&s| LevelGeometry { height: size / s, width: size / s, stride: s })
        .collect()
}

#[test]
fn toy_d0_has_252_anchors() {
    let model = Detector::<f32>::new(preset("toy-d0").unwrap(), 0).unwrap();
    assert_eq!(model.anchors().len(), 252);
    assert_eq!(model.config.level_strides(), vec![8, 16, 32]);
}

#[test]
fn anchor_enumeration_matches_count_formula() {
    let ratios = [0.5, 1.0, 2.0];
    for size in [32, 64, 96] {
        let levels = levels_for(size);
        let anchors = generate_anchors(&levels, &ratios, 4.0);
        let mut expected = Vec::new();
        for lv in &levels {
            for y in 0..lv.height {
                for x in 0..lv.width {
                    for r in ratios {
                        expected.push((lv.stride, x, y, r));
                    }
                }
            }
        }
        assert_eq!(anchors.len(), expected.len());
        assert_eq!(anchors.len(), anchor_count(&levels, 3));
        for (a, (s, x, y, r)) in anchors.iter().zip(expected) {
            let s = s as f64;
            assert_eq!(a.cx, (x as f64 + 0.5) * s);
            assert_eq!(a.cy, (y as f64 + 0.5) * s);
            assert!((a.w / a.h - r).abs() < 1e-12);
            assert!((a.w * a.h - 16.0 * s * s).abs() < 1e-9);
        }
    }
}

#[test]
fn encode_decode_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let a = Anchor {
            cx: rng.gen_range(0.0..64.0),
            cy: rng.gen_range(0.0..64.0),
            w: rng.gen_range(4.0..128.0),
            h: rng.gen_range(4.0..128.0),
        };
        let b = BBox::from_center(
            rng.gen_range(-10.0..74.0),
            rng.gen_range(-10.0..74.0),
            a.w * rng.gen_range(0.05..20.0),
            a.h * rng.gen_range(0.05..20.0),
        );
        let back = decode(&encode(&b, &a), &a);
        for (x, y) in <[f64; 4]>::from(back).iter().zip(<[f64; 4]>::from(b)) {
            assert!((x - y).abs() <= 1e-5, "{b:?} -> {back:?}");
        }
    }
}

/// Repeatedly keeps the best remaining box of each class and drops the
/// boxes it overlaps.
fn brute_nms(dets: &[Detection], t: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    let classes: std::collections::BTreeSet<usize> = dets.iter().map(|d| d.class).collect();
    for c in classes {
        let mut pool: Vec<Detection> = dets.iter().filter(|d| d.class == c).copied().collect();
        while !pool.is_empty() {
            let best = (0..pool.len()).max_by(|&i, &j| pool[i].score.total_cmp(&pool[j].score)).unwrap();
            let keep = pool.remove(best);
            pool.retain(|d| iou(&d.bbox, &keep.bbox) <= t);
            out.push(keep);
        }
    }
    out
}

#[test]
fn nms_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(0..30);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
                Detection {
                    bbox: BBox::new(x, y, x + rng.gen_range(2.0..20.0), y + rng.gen_range(2.0..20.0)),
                    class: rng.gen_range(0..3),
                    score: rng.gen_range(0.0..1.0),
                }
            })
            .collect();
        let t = rng.gen_range(0.2..0.8);
        assert_eq!(nms(&dets, t), brute_nms(&dets, t));
    }
}

fn conv_of(store: &ParamStore<f64>, conv: &sacnet::blocks::Conv) -> ConvParams<f64> {
    ConvParams {
        weight: store.get(conv.weight).clone(),
        bias: conv.bias.map(|b| store.get(b).data().to_vec()),
        spec: conv.spec,
    }
}

#[test]
fn bifpn_matches_primitive_recomposition() {
    let (store, fpn) = randomized::<f64, _>(3, |b| Bifpn::new(b, 4, 3, 2).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pyramid: Vec<Tensor<f64>> = [8, 4, 2].iter().map(|&s| Tensor::randn([2, 4, s, s], 1.0, &mut rng)).collect();

    let mut g = store.bind(false);
    let vars: Vec<_> = pyramid.iter().map(|t| g.tape.constant(t.clone())).collect();
    let got: Vec<Tensor<f64>> = fpn.forward(&mut g, &vars).unwrap().iter().map(|&v| g.tape.value(v).clone()).collect();

    let mut p = pyramid.clone();
    for pass in 0..2 {
        let mut td = p.clone();
        for l in (0..2).rev() {
            let sum = ops::add(&p[l], &ops::upsample_nearest(&td[l + 1], 2).unwrap()).unwrap();
            td[l] = ops::conv2d(&sum, &conv_of(&store, &fpn.top_down[pass][l])).unwrap();
        }
        let mut out = td.clone();
        for l in 1..3 {
            let sum = ops::add(&td[l], &ops::avg_pool2d(&out[l - 1], 2, 2, 0).unwrap()).unwrap();
            out[l] = ops::conv2d(&sum, &conv_of(&store, &fpn.bottom_up[pass][l - 1])).unwrap();
        }
        p = out;
    }
    for (a, b) in got.iter().zip(&p) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn bifpn_identity_convs_pass_a_lone_finest_level() {
    let (mut store, fpn) = randomized::<f64, _>(5, |b| Bifpn::new(b, 3, 3, 1).unwrap());
    for p in store.iter_mut() {
        let [o, i, kh, kw] = p.tensor.shape();
        let data = p.tensor.data_mut();
        data.iter_mut().for_each(|v| *v = 0.0);
        if p.name.ends_with("weight") {
            for c in 0..o.min(i) {
                data[((c * i + c) * kh + kh / 2) * kw + kw / 2] = 1.0;
            }
        }
    }
    let x = Tensor::<f64>::randn([1, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let mut g = store.bind(false);
    let vars = [
        g.tape.constant(x.clone()),
        g.tape.constant(Tensor::zeros([1, 3, 4, 4])),
        g.tape.constant(Tensor::zeros([1, 3, 2, 2])),
    ];
    let out = fpn.forward(&mut g, &vars).unwrap();
    assert_eq!(g.tape.value(out[0]).data(), x.data());
}

#[test]
fn zero_head_weights_give_bias_logits() {
    let mut model = Detector::<f64>::new(preset("toy-d0").unwrap(), 1).unwrap();
    for name in ["head.cls.weight", "head.box.weight"] {
        let p = model.store.by_name_mut(name).unwrap();
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let bias = model.store.by_name("head.cls.bias").unwrap().tensor.data().to_vec();
    let x = Tensor::<f64>::uniform([2, 3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let (logits, deltas) = model.predict(&x).unwrap();
    assert_eq!(logits.shape(), [2, 252, 3, 1]);
    assert_eq!(deltas.shape(), [2, 252, 4, 1]);
    for (i, &v) in logits.data().iter().enumerate() {
        // Rows are anchor-major: anchor a of a cell uses bias slots a*K..(a+1)*K.
        let per_cell = i % 9;
        assert_eq!(v, bias[per_cell]);
    }
    assert!(deltas.data().iter().all(|&d| d == 0.0));
}

#[test]
fn conversion_preserves_detector_outputs() {
    for mode in [CoreMode::Dsac, CoreMode::Dapsc] {
        let mut baseline = Detector::<f32>::new(preset("toy-d0").unwrap(), 3).unwrap();
        jitter(&mut baseline.store, 0.05, &mut ChaCha8Rng::seed_from_u64(3));
        let converted = convert_to_sac(&baseline, ConvertOptions::new(mode)).unwrap();
        assert!(is_converted(&converted.store));
        assert!(convert_to_sac(&converted, ConvertOptions::new(mode)).is_err());
        assert!(max_output_diff(&baseline, &converted, 4, 0).unwrap() <= 1e-6);
    }
}

#[test]
fn postprocess_decodes_and_truncates() {
    let anchors = vec![
        Anchor { cx: 10.0, cy: 10.0, w: 8.0, h: 8.0 },
        Anchor { cx: 40.0, cy: 40.0, w: 16.0, h: 16.0 },
        Anchor { cx: 41.0, cy: 40.0, w: 16.0, h: 16.0 },
    ];
    // Two classes; anchor 2 duplicates anchor 1 with a lower score.
    let logits = Tensor::<f64>::from_vec([1, 3, 2, 1], vec![3.0, -9.0, -9.0, 2.0, -9.0, 1.0]).unwrap();
    let deltas = Tensor::<f64>::from_vec([1, 3, 4, 1], vec![0.0; 12]).unwrap();
    let opts = PostprocessOptions::default();
    let dets = postprocess(&logits, &deltas, &anchors, 64.0, 64.0, &opts);
    assert_eq!(dets[0].len(), 2);
    assert_eq!(dets[0][0].bbox, BBox::new(6.0, 6.0, 14.0, 14.0));
    assert_eq!(dets[0][0].class, 0);
    assert_eq!(dets[0][1].class, 1);
    assert_eq!(dets[0][1].bbox, BBox::new(32.0, 32.0, 48.0, 48.0));
    let one = postprocess(&logits, &deltas, &anchors, 64.0, 64.0, &PostprocessOptions { max_detections: 1, ..opts });
    assert_eq!(one[0].len(), 1);
    assert!(one[0][0].score > 0.95);
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in prop::array::uniform4(0.0f64..50.0), b in prop::array::uniform4(0.0f64..50.0)) {
        let mk = |v: [f64; 4]| BBox::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]) + 0.5, v[1].max(v[3]) + 0.5);
        let (a, b) = (mk(a), mk(b));
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn every_preset_emits_one_row_per_anchor() {
    for name in ["toy-d0", "toy-d1", "toy-d2"] {
        let model = Detector::<f32>::new(preset(name).unwrap().with_core(CoreMode::Dsac), 0).unwrap();
        let x = Tensor::<f32>::zeros([1, 3, 64, 64]);
        let (l, _) = model.predict(&x).unwrap();
        assert_eq!(l.shape()[1], 252);
    }
}
