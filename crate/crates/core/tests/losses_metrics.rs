mod common;

use common::{brute_map, hand_instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacnet::detector::{iou, BBox, Detection};
use sacnet::params::ParamStore;
use sacnet::tape::{FocalParams, Tape, Target};
use sacnet::tensor::Tensor;
use sacnet::train::{
    assign_anchors, average_precision, box_loss, evaluate_map, focal_loss, AnchorLabel, LrSchedule, ObjectRecord, Sgd,
    SgdConfig, BOX_BETA,
};

const DEFAULT_FOCAL: FocalParams = FocalParams { alpha: 0.25, gamma: 1.5 };

#[test]
fn focal_single_positive_at_half() {
    let want = 0.25 * 0.5f64.powf(1.5) * 2f64.ln();
    let got = focal_loss(&[0.5], &[Target::Positive], DEFAULT_FOCAL);
    assert!((got - want).abs() < 1e-15);
    assert!(focal_loss(&[1.0], &[Target::Positive], DEFAULT_FOCAL) < 1e-15);
}

#[test]
fn focal_degenerates_to_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ce = FocalParams { alpha: 1.0, gamma: 0.0 };
    let half = FocalParams { alpha: 0.5, gamma: 0.0 };
    for _ in 0..1000 {
        let p: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let pos = focal_loss(&[p], &[Target::Positive], ce);
        assert!((pos + p.ln()).abs() < 1e-10);
        // With alpha 1/2 both targets weigh equally: half the binary cross-entropy.
        let neg = focal_loss(&[p], &[Target::Negative], half);
        assert!((neg + 0.5 * (1.0 - p).ln()).abs() < 1e-10);
    }
}

#[test]
fn focal_normalizes_by_positives_and_skips_ignored() {
    let p = [0.3, 0.8, 0.6, 0.1];
    let t = [Target::Positive, Target::Negative, Target::Ignore, Target::Positive];
    let term = |p: f64, pos: bool| {
        if pos {
            -0.25 * (1.0 - p).powf(1.5) * p.ln()
        } else {
            -0.75 * p.powf(1.5) * (1.0 - p).ln()
        }
    };
    let want = (term(0.3, true) + term(0.8, false) + term(0.1, true)) / 2.0;
    assert!((focal_loss(&p, &t, DEFAULT_FOCAL) - want).abs() < 1e-14);
    let only_neg = focal_loss(&[0.2], &[Target::Negative], DEFAULT_FOCAL);
    assert!((only_neg - term(0.2, false)).abs() < 1e-15);
}

#[test]
fn tape_focal_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z: Vec<f64> = (0..64).map(|_| rng.gen_range(-6.0..6.0)).collect();
    let targets: Vec<Target> = (0..64).map(|i| [Target::Positive, Target::Negative, Target::Ignore][i % 3]).collect();
    let probs: Vec<f64> = z.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
    let positives = targets.iter().filter(|t| **t == Target::Positive).count() as f64;
    let mut tape = Tape::<f64>::new();
    let zv = tape.leaf(Tensor::from_vec([1, 64, 1, 1], z).unwrap());
    let l = tape.focal_loss(zv, targets.clone(), DEFAULT_FOCAL, positives).unwrap();
    let got = tape.value(l).data()[0];
    assert!((got - focal_loss(&probs, &targets, DEFAULT_FOCAL)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn focal_decreases_in_true_class_probability(a in 0.001f64..0.999, b in 0.001f64..0.999) {
        prop_assume!((a - b).abs() > 1e-6);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let f = |p: f64| focal_loss(&[p], &[Target::Positive], DEFAULT_FOCAL);
        prop_assert!(f(lo) > f(hi));
        // A negative's true-class probability is 1 - p.
        let g = |pt: f64| focal_loss(&[1.0 - pt], &[Target::Negative], DEFAULT_FOCAL);
        prop_assert!(g(lo) > g(hi));
    }
}

#[test]
fn focal_monotone_on_grid() {
    let vals: Vec<f64> = (1..1000).map(|i| focal_loss(&[i as f64 / 1000.0], &[Target::Positive], DEFAULT_FOCAL)).collect();
    assert!(vals.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn box_loss_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 50;
    let pred: Vec<[f64; 4]> = (0..n).map(|_| [0; 4].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let target: Vec<[f64; 4]> = (0..n).map(|_| [0; 4].map(|_| rng.gen_range(-1.0..1.0))).collect();
    let pos: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let smooth = |d: f64| {
        let a = d.abs();
        if a < BOX_BETA {
            0.5 * a * a / BOX_BETA
        } else {
            a - 0.5 * BOX_BETA
        }
    };
    let mut total = 0.0;
    for i in 0..n {
        if pos[i] {
            total += (0..4).map(|j| smooth(pred[i][j] - target[i][j])).sum::<f64>();
        }
    }
    let want = total / pos.iter().filter(|p| **p).count() as f64;
    assert!((box_loss(&pred, &target, &pos, BOX_BETA) - want).abs() < 1e-12);
    assert_eq!(box_loss(&pred, &pred, &pos, BOX_BETA), 0.0);
    assert_eq!(box_loss(&pred, &target, &vec![false; n], BOX_BETA), 0.0);
}

#[test]
fn iou_matches_pixel_counting() {
    let (a, b) = (BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(1.0, 1.0, 3.0, 3.0));
    let res = 600;
    let cell = 3.0 / res as f64;
    let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..res {
        for j in 0..res {
            let (x, y) = ((i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell);
            let (ia, ib) = (inside(&a, x, y), inside(&b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    let counted = inter as f64 / union as f64;
    assert!((counted - 1.0 / 7.0).abs() < 1e-9);
    assert!((iou(&a, &b) - counted).abs() < 1e-9);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
}

/// Direct transcription of the labeling rule over a full IoU matrix.
fn brute_assign(anchors: &[BBox], gts: &[BBox]) -> Vec<AnchorLabel> {
    let m: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let mut labels: Vec<AnchorLabel> = m
        .iter()
        .map(|row| {
            let Some(best) = row.iter().copied().reduce(f64::max) else {
                return AnchorLabel::Negative;
            };
            let first = row.iter().position(|&v| v == best).unwrap();
            if best >= 0.5 {
                AnchorLabel::Positive(first)
            } else if best < 0.4 {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    let mut claimed = vec![false; anchors.len()];
    for g in 0..gts.len() {
        let col: Vec<f64> = m.iter().map(|row| row[g]).collect();
        let best = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let a = col.iter().position(|&v| v == best).unwrap();
        if !claimed[a] {
            claimed[a] = true;
            labels[a] = AnchorLabel::Positive(g);
        }
    }
    labels
}

#[test]
fn assignment_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let boxes = |n: usize, rng: &mut ChaCha8Rng| -> Vec<BBox> {
        (0..n)
            .map(|_| {
                let (x, y) = (rng.gen_range(0..12) as f64, rng.gen_range(0..12) as f64);
                BBox::new(x, y, x + rng.gen_range(2..8) as f64, y + rng.gen_range(2..8) as f64)
            })
            .collect()
    };
    let mut seen = [0usize; 3];
    for _ in 0..500 {
        let anchors = boxes(12, &mut rng);
        let gts = boxes(3, &mut rng);
        let got = assign_anchors(&anchors, &gts);
        assert_eq!(got, brute_assign(&anchors, &gts));
        for l in got {
            seen[match l {
                AnchorLabel::Positive(_) => 0,
                AnchorLabel::Negative => 1,
                AnchorLabel::Ignore => 2,
            }] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c > 0), "all three labels should occur: {seen:?}");
}

#[test]
fn sgd_three_steps_match_scalar_recurrence() {
    let mut store = ParamStore::<f64>::new();
    store.insert("p", vec![2], Tensor::from_vec([2, 1, 1, 1], vec![1.0, -0.5]).unwrap()).unwrap();
    let cfg = SgdConfig { momentum: 0.9, weight_decay: 4e-5 };
    let mut opt = Sgd::new(cfg, &store);
    let grads = [[0.3, -0.1], [0.2, 0.4], [-0.5, 0.05]];
    let lrs = [0.1, 0.05, 0.02];
    let (mut p, mut v) = ([1.0f64, -0.5], [0.0f64; 2]);
    for (g, lr) in grads.iter().zip(lrs) {
        store.iter_mut().next().unwrap().tensor.grad = Some(g.to_vec());
        opt.step(&mut store, lr);
        for i in 0..2 {
            let gp = g[i] + 4e-5 * p[i];
            v[i] = 0.9 * v[i] + gp;
            p[i] -= lr * v[i];
        }
    }
    assert_eq!(store.iter().next().unwrap().tensor.data(), &p);
}

#[test]
fn sgd_without_momentum_or_decay_is_plain_descent() {
    let mut store = ParamStore::<f64>::new();
    store.insert("p", vec![1], Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap()).unwrap();
    let mut opt = Sgd::new(SgdConfig { momentum: 0.0, weight_decay: 0.0 }, &store);
    store.iter_mut().next().unwrap().tensor.grad = Some(vec![1.0]);
    opt.step(&mut store, 0.1);
    assert_eq!(store.iter().next().unwrap().tensor.data(), &[0.9]);
    let s = LrSchedule { base: 0.2, warmup_steps: 4 };
    for (i, want) in [0.05, 0.1, 0.15, 0.2, 0.2].into_iter().enumerate() {
        assert!((s.at(i) - want).abs() < 1e-15);
    }
}

#[test]
fn map_matches_brute_force_on_hand_instance() {
    let (dets, gts, hand) = hand_instance();
    let report = evaluate_map(&dets, &gts, &[0.5], 2);
    let brute = brute_map(&dets, &gts, 2, 0.5);
    assert!((report.map50 - brute).abs() < 1e-12);
    assert!((brute - hand).abs() < 1e-12);
    assert!(report.per_class_ap50.iter().flatten().all(|ap| (0.0..=1.0).contains(ap)));
}

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

#[test]
fn map_is_invariant_to_every_input_order() {
    let (dets, gts, hand) = hand_instance();
    let first = permutations(&dets[0]);
    let second = permutations(&dets[1]);
    for a in &first {
        for b in second.iter().step_by(7) {
            let r = evaluate_map(&[a.clone(), b.clone()], &gts, &[0.5], 2);
            assert!((r.map50 - hand).abs() < 1e-12);
        }
    }
}

#[test]
fn map_trivial_cases() {
    let gt = vec![vec![ObjectRecord { class: 0, bbox: BBox::new(0.0, 0.0, 4.0, 4.0) }]];
    let hit = vec![vec![Detection { bbox: BBox::new(0.0, 0.0, 4.0, 4.0), class: 0, score: 0.5 }]];
    assert_eq!(evaluate_map(&hit, &gt, &[0.5], 1).map50, 1.0);
    assert_eq!(evaluate_map(&[vec![]], &gt, &[0.5], 1).map50, 0.0);
    assert_eq!(average_precision(&[], 0), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_instances_match_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = rng.gen_range(1..4);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..images {
            let g: Vec<ObjectRecord> = (0..rng.gen_range(0..4))
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0));
                    ObjectRecord { class: rng.gen_range(0..2), bbox: BBox::new(x, y, x + 10.0, y + 10.0) }
                })
                .collect();
            let d: Vec<Detection> = (0..rng.gen_range(0..6))
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0));
                    Detection { bbox: BBox::new(x, y, x + 10.0, y + 10.0), class: rng.gen_range(0..2), score: rng.gen_range(0.0..1.0) }
                })
                .collect();
            gts.push(g);
            dets.push(d);
        }
        prop_assume!(gts.iter().flatten().count() > 0);
        let r = evaluate_map(&dets, &gts, &[0.5], 2);
        prop_assert!((r.map50 - brute_map(&dets, &gts, 2, 0.5)).abs() < 1e-12);
    }
}
