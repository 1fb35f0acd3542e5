//! Convolution, pooling, padding and upsampling against naive loop references.

mod common;

use common::{conv_sweep, naive_conv, out_size, random_case, spec_of, tensors};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacnet::ops;
use sacnet::tape::Tape;
use sacnet::tensor::Tensor;

#[test]
fn conv_forward_matches_naive_loops_on_200_configs() {
    let worst = conv_sweep(2024, 200).unwrap();
    assert!(worst <= 1e-6, "max abs error {worst}");
}

#[test]
fn conv_gradients_match_naive_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    while checked < 40 {
        let c = random_case(&mut rng);
        let Some((_, os)) = naive_conv(&c, &vec![0.0; c.n * c.c_in * c.h * c.w], &vec![0.0; c.c_out * (c.c_in / c.groups) * c.k * c.k], &vec![0.0; c.c_out]) else {
            continue;
        };
        let (x, w, b) = tensors(&c, &mut rng);
        let gy = Tensor::<f64>::uniform(os, -1.0, 1.0, &mut rng);

        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone().with_grad());
        let wv = tape.leaf(w.clone().with_grad());
        let bv = tape.leaf(Tensor::from_vec([1, c.c_out, 1, 1], b.clone()).unwrap().with_grad());
        let y = tape.conv2d(xv, wv, Some(bv), spec_of(&c)).unwrap();
        let gyv = tape.constant(gy.clone());
        let m = tape.mul(y, gyv).unwrap();
        let l = tape.sum(m);
        tape.backward(l).unwrap();

        let cig = c.c_in / c.groups;
        let cog = c.c_out / c.groups;
        let [_, _, oh, ow] = os;
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; c.c_out];
        for n in 0..c.n {
            for oc in 0..c.c_out {
                let grp = oc / cog;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = gy.data()[((n * c.c_out + oc) * oh + oy) * ow + ox];
                        gb[oc] += go;
                        for icg in 0..cig {
                            let ic = grp * cig + icg;
                            for ky in 0..c.k {
                                for kx in 0..c.k {
                                    let iy = (oy * c.stride.0 + ky * c.dilation.0) as isize - c.pad.top as isize;
                                    let ix = (ox * c.stride.1 + kx * c.dilation.1) as isize - c.pad.left as isize;
                                    if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                        continue;
                                    }
                                    let xi = ((n * c.c_in + ic) * c.h + iy as usize) * c.w + ix as usize;
                                    let wi = ((oc * cig + icg) * c.k + ky) * c.k + kx;
                                    gx[xi] += w.data()[wi] * go;
                                    gw[wi] += x.data()[xi] * go;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (name, got, want) in [
            ("input", tape.grad(xv).unwrap(), &gx),
            ("weight", tape.grad(wv).unwrap(), &gw),
            ("bias", tape.grad(bv).unwrap(), &gb),
        ] {
            let err = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-9, "{c:?} {name}: {err}");
        }
        checked += 1;
    }
}

#[test]
fn avg_pool_matches_zero_padded_window_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..60 {
        let (n, ch, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=9), rng.gen_range(1..=9));
        let k = rng.gen_range(1..=5);
        let s = rng.gen_range(1..=3);
        let p = rng.gen_range(0..=k / 2);
        let x = Tensor::<f64>::uniform([n, ch, h, w], -1.0, 1.0, &mut rng);
        let (Some(oh), Some(ow)) = (out_size(h, p, p, k, s, 1), out_size(w, p, p, k, s, 1)) else {
            assert!(ops::avg_pool2d(&x, k, s, p).is_err());
            continue;
        };
        let y = ops::avg_pool2d(&x, k, s, p).unwrap();
        assert_eq!(y.shape(), [n, ch, oh, ow]);
        for b in 0..n {
            for c in 0..ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (oy * s + dy) as isize - p as isize;
                                let ix = (ox * s + dx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(b, c, iy as usize, ix as usize);
                                }
                            }
                        }
                        let want = acc / (k * k) as f64;
                        assert!((y.at(b, c, oy, ox) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

fn mirror(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * (len - 1) - i;
    }
    i as usize
}

#[test]
fn reflection_pad_mirrors_without_repeating_the_edge() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..40 {
        let (h, w) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let pad = rng.gen_range(1..h.min(w));
        let x = Tensor::<f64>::uniform([1, 2, h, w], -1.0, 1.0, &mut rng);
        let y = ops::reflection_pad2d(&x, pad).unwrap();
        assert_eq!(y.shape(), [1, 2, h + 2 * pad, w + 2 * pad]);
        for c in 0..2 {
            for oy in 0..h + 2 * pad {
                for ox in 0..w + 2 * pad {
                    let iy = mirror(oy as isize - pad as isize, h);
                    let ix = mirror(ox as isize - pad as isize, w);
                    assert_eq!(y.at(0, c, oy, ox), x.at(0, c, iy, ix));
                }
            }
        }
    }
    let x = Tensor::<f64>::zeros([1, 1, 2, 5]);
    assert!(ops::reflection_pad2d(&x, 2).is_err());
}

#[test]
fn upsample_and_global_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::<f64>::uniform([2, 3, 3, 4], -1.0, 1.0, &mut rng);
    let y = ops::upsample_nearest(&x, 2).unwrap();
    assert_eq!(y.shape(), [2, 3, 6, 8]);
    for n in 0..2 {
        for c in 0..3 {
            for i in 0..6 {
                for j in 0..8 {
                    assert_eq!(y.at(n, c, i, j), x.at(n, c, i / 2, j / 2));
                }
            }
        }
    }
    let m = ops::global_avg_pool(&x);
    for n in 0..2 {
        for c in 0..3 {
            let want: f64 = (0..3).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| x.at(n, c, i, j)).sum::<f64>() / 12.0;
            assert!((m.at(n, c, 0, 0) - want).abs() < 1e-15);
        }
    }
}
