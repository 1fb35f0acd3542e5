//! Raw forward/backward loops over contiguous NCHW buffers.
//!
//! Every kernel writes each output element from exactly one thread in a fixed
//! summation order, so results are bitwise reproducible for any thread count.

use rayon::prelude::*;

use crate::error::{Result, SacError};
use crate::real::Real;
use crate::tensor::Shape;

/// Per-side zero padding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2d {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Same `(before, after)` split on both axes.
    pub fn split(before: usize, after: usize) -> Self {
        Self {
            top: before,
            bottom: after,
            left: before,
            right: after,
        }
    }
}

/// Hyperparameters of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: Pad2d,
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: Pad2d::default(),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, p: Pad2d) -> Self {
        self.padding = p;
        self
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Validates shapes and returns the output shape.
    pub fn output_shape(&self, x: Shape, w: Shape) -> Result<Shape> {
        let [n, c_in, h, wd] = x;
        let [c_out, c_in_g, kh, kw] = w;
        let g = self.groups;
        if g == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(SacError::Invalid("conv2d: groups and stride must be positive".into()));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(SacError::Invalid("conv2d: dilation must be >= 1".into()));
        }
        if c_in % g != 0 {
            return Err(SacError::shape(
                "conv2d",
                format!("input channels C_in={c_in} not divisible by groups={g}"),
            ));
        }
        if c_out % g != 0 {
            return Err(SacError::shape(
                "conv2d",
                format!("output channels C_out={c_out} not divisible by groups={g}"),
            ));
        }
        if c_in / g != c_in_g {
            return Err(SacError::shape(
                "conv2d",
                format!(
                    "weight dim 1 (C_in/groups) is {c_in_g}, expected {} for C_in={c_in}, groups={g}",
                    c_in / g
                ),
            ));
        }
        let oh = out_extent(h, kh, self.stride.0, self.padding.top + self.padding.bottom, self.dilation.0)
            .ok_or_else(|| SacError::EmptyOutput {
                op: "conv2d",
                detail: format!("height {h}, kernel {kh}, dilation {}, padding {:?}", self.dilation.0, self.padding),
            })?;
        let ow = out_extent(wd, kw, self.stride.1, self.padding.left + self.padding.right, self.dilation.1)
            .ok_or_else(|| SacError::EmptyOutput {
                op: "conv2d",
                detail: format!("width {wd}, kernel {kw}, dilation {}, padding {:?}", self.dilation.1, self.padding),
            })?;
        Ok([n, c_out, oh, ow])
    }
}

/// `floor((i + pad_total - d*(k-1) - 1) / s) + 1`, or `None` when that is not positive.
pub fn out_extent(i: usize, k: usize, s: usize, pad_total: usize, d: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    let avail = i + pad_total;
    if avail < span {
        None
    } else {
        Some((avail - span) / s + 1)
    }
}

/// Output indices `o` in `[lo, hi)` for which `o*stride + offset` falls in `[0, len)`.
#[inline]
fn valid_range(out: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let room = len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = (hi as usize).min(out);
    let lo = lo as usize;
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    c_in_g: usize,
    c_out_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(xs: Shape, ws: Shape, os: Shape, spec: &ConvSpec) -> ConvDims {
    ConvDims {
        n: xs[0],
        c_in: xs[1],
        h: xs[2],
        w: xs[3],
        c_out: ws[0],
        c_in_g: ws[1],
        c_out_g: ws[0] / spec.groups,
        kh: ws[2],
        kw: ws[3],
        oh: os[2],
        ow: os[3],
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<(Vec<T>, Shape)> {
    let os = spec.output_shape(xs, ws)?;
    if let Some(b) = bias {
        if b.len() != ws[0] {
            return Err(SacError::shape(
                "conv2d",
                format!("bias length {} does not match C_out={}", b.len(), ws[0]),
            ));
        }
    }
    let d = conv_dims(xs, ws, os, spec);
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let plane = d.oh * d.ow;
    let mut out = vec![T::zero(); crate::tensor::numel(&os)];

    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let n = idx / d.c_out;
        let oc = idx % d.c_out;
        let g = oc / d.c_out_g;
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[oc]);
        }
        for icg in 0..d.c_in_g {
            let ic = g * d.c_in_g + icg;
            let src = &x[(n * d.c_in + ic) * d.h * d.w..][..d.h * d.w];
            let wk = &w[(oc * d.c_in_g + icg) * d.kh * d.kw..][..d.kh * d.kw];
            for ky in 0..d.kh {
                let (oy0, oy1) = valid_range(d.oh, sh, (ky * dh) as isize - pt, d.h);
                for kx in 0..d.kw {
                    let wv = wk[ky * d.kw + kx];
                    let offx = (kx * dw) as isize - pl;
                    let (ox0, ox1) = valid_range(d.ow, sw, offx, d.w);
                    for oy in oy0..oy1 {
                        let iy = (oy * sh + ky * dh) as isize - pt;
                        let row = &src[iy as usize * d.w..][..d.w];
                        let orow = &mut dst[oy * d.ow..][..d.ow];
                        for ox in ox0..ox1 {
                            let ix = (ox * sw) as isize + offx;
                            orow[ox] += wv * row[ix as usize];
                        }
                    }
                }
            }
        }
    });
    Ok((out, os))
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Real>(
    gout: &[T],
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    spec: &ConvSpec,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let os = spec.output_shape(xs, ws).expect("validated in forward");
    let d = conv_dims(xs, ws, os, spec);
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let oplane = d.oh * d.ow;

    let gx = need_x.then(|| {
        let mut gx = vec![T::zero(); x.len()];
        gx.par_chunks_mut(d.c_in * d.h * d.w)
            .enumerate()
            .for_each(|(n, gxn)| {
                for oc in 0..d.c_out {
                    let g = oc / d.c_out_g;
                    let go = &gout[(n * d.c_out + oc) * oplane..][..oplane];
                    for icg in 0..d.c_in_g {
                        let ic = g * d.c_in_g + icg;
                        let dst = &mut gxn[ic * d.h * d.w..][..d.h * d.w];
                        let wk = &w[(oc * d.c_in_g + icg) * d.kh * d.kw..][..d.kh * d.kw];
                        for ky in 0..d.kh {
                            let (oy0, oy1) = valid_range(d.oh, sh, (ky * dh) as isize - pt, d.h);
                            for kx in 0..d.kw {
                                let wv = wk[ky * d.kw + kx];
                                let offx = (kx * dw) as isize - pl;
                                let (ox0, ox1) = valid_range(d.ow, sw, offx, d.w);
                                for oy in oy0..oy1 {
                                    let iy = ((oy * sh + ky * dh) as isize - pt) as usize;
                                    let grow = &go[oy * d.ow..][..d.ow];
                                    let drow = &mut dst[iy * d.w..][..d.w];
                                    for ox in ox0..ox1 {
                                        let ix = ((ox * sw) as isize + offx) as usize;
                                        drow[ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        gx
    });

    let gw = need_w.then(|| {
        let mut gw = vec![T::zero(); w.len()];
        let kplane = d.kh * d.kw;
        gw.par_chunks_mut(d.c_in_g * kplane)
            .enumerate()
            .for_each(|(oc, gwo)| {
                let g = oc / d.c_out_g;
                for n in 0..d.n {
                    let go = &gout[(n * d.c_out + oc) * oplane..][..oplane];
                    for icg in 0..d.c_in_g {
                        let ic = g * d.c_in_g + icg;
                        let src = &x[(n * d.c_in + ic) * d.h * d.w..][..d.h * d.w];
                        for ky in 0..d.kh {
                            let (oy0, oy1) = valid_range(d.oh, sh, (ky * dh) as isize - pt, d.h);
                            for kx in 0..d.kw {
                                let offx = (kx * dw) as isize - pl;
                                let (ox0, ox1) = valid_range(d.ow, sw, offx, d.w);
                                let mut acc = T::zero();
                                for oy in oy0..oy1 {
                                    let iy = ((oy * sh + ky * dh) as isize - pt) as usize;
                                    let grow = &go[oy * d.ow..][..d.ow];
                                    let row = &src[iy * d.w..][..d.w];
                                    for ox in ox0..ox1 {
                                        let ix = ((ox * sw) as isize + offx) as usize;
                                        acc += grow[ox] * row[ix];
                                    }
                                }
                                gwo[icg * kplane + ky * d.kw + kx] += acc;
                            }
                        }
                    }
                }
            });
        gw
    });

    let gb = need_b.then(|| {
        (0..d.c_out)
            .map(|oc| {
                let mut acc = T::zero();
                for n in 0..d.n {
                    for v in &gout[(n * d.c_out + oc) * oplane..][..oplane] {
                        acc += *v;
                    }
                }
                acc
            })
            .collect()
    });

    (gx, gw, gb)
}

pub(crate) fn avg_pool_shape(xs: Shape, k: usize, s: usize, p: usize) -> Result<Shape> {
    if k == 0 || s == 0 {
        return Err(SacError::Invalid("avg_pool2d: kernel and stride must be >= 1".into()));
    }
    let [n, c, h, w] = xs;
    let oh = out_extent(h, k, s, 2 * p, 1);
    let ow = out_extent(w, k, s, 2 * p, 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok([n, c, oh, ow]),
        _ => Err(SacError::EmptyOutput {
            op: "avg_pool2d",
            detail: format!("input {h}x{w}, kernel {k}, stride {s}, padding {p}"),
        }),
    }
}

/// Windowed mean whose divisor is always `k*k`, padded zeros included.
pub(crate) fn avg_pool_forward<T: Real>(x: &[T], xs: Shape, k: usize, s: usize, p: usize) -> Result<(Vec<T>, Shape)> {
    let os = avg_pool_shape(xs, k, s, p)?;
    let [_, _, h, w] = xs;
    let [_, _, oh, ow] = os;
    let inv = T::one() / T::lit((k * k) as f64);
    let mut out = vec![T::zero(); crate::tensor::numel(&os)];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(pi, dst)| {
        let src = &x[pi * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += src[iy as usize * w + ix as usize];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    });
    Ok((out, os))
}

pub(crate) fn avg_pool_backward<T: Real>(gout: &[T], xs: Shape, os: Shape, k: usize, s: usize, p: usize) -> Vec<T> {
    let [_, _, h, w] = xs;
    let [_, _, oh, ow] = os;
    let inv = T::one() / T::lit((k * k) as f64);
    let mut gx = vec![T::zero(); crate::tensor::numel(&xs)];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(pi, dst)| {
        let go = &gout[pi * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[oy * ow + ox] * inv;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[iy as usize * w + ix as usize] += g;
                    }
                }
            }
        }
    });
    gx
}

/// Source index of a reflected coordinate (mirror without repeating the edge).
#[inline]
pub(crate) fn reflect_index(o: usize, pad: usize, len: usize) -> usize {
    let src = o as isize - pad as isize;
    if src < 0 {
        (-src) as usize
    } else if src as usize >= len {
        2 * (len - 1) - src as usize
    } else {
        src as usize
    }
}

pub(crate) fn reflection_pad_forward<T: Real>(x: &[T], xs: Shape, pad: usize) -> Result<(Vec<T>, Shape)> {
    let [n, c, h, w] = xs;
    if pad >= h || pad >= w {
        return Err(SacError::Invalid(format!(
            "reflection_pad2d: pad {pad} must be smaller than both spatial extents ({h}x{w})"
        )));
    }
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (pi, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x[pi * h * w..][..h * w];
        for oy in 0..oh {
            let iy = reflect_index(oy, pad, h);
            for ox in 0..ow {
                dst[oy * ow + ox] = src[iy * w + reflect_index(ox, pad, w)];
            }
        }
    }
    Ok((out, [n, c, oh, ow]))
}

pub(crate) fn reflection_pad_backward<T: Real>(gout: &[T], xs: Shape, pad: usize) -> Vec<T> {
    let [_, _, h, w] = xs;
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut gx = vec![T::zero(); crate::tensor::numel(&xs)];
    for (pi, dst) in gx.chunks_mut(h * w).enumerate() {
        let go = &gout[pi * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let iy = reflect_index(oy, pad, h);
            for ox in 0..ow {
                dst[iy * w + reflect_index(ox, pad, w)] += go[oy * ow + ox];
            }
        }
    }
    gx
}

pub(crate) fn upsample_nearest_forward<T: Real>(x: &[T], xs: Shape, f: usize) -> (Vec<T>, Shape) {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (pi, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x[pi * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / f) * w + ox / f];
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub(crate) fn upsample_nearest_backward<T: Real>(gout: &[T], xs: Shape, f: usize) -> Vec<T> {
    let [_, _, h, w] = xs;
    let (oh, ow) = (h * f, w * f);
    let mut gx = vec![T::zero(); crate::tensor::numel(&xs)];
    for (pi, dst) in gx.chunks_mut(h * w).enumerate() {
        let go = &gout[pi * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / f) * w + ox / f] += go[oy * ow + ox];
            }
        }
    }
    gx
}

/// Result shape of broadcasting `a` against `b` (each extent equal or 1).
pub(crate) fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = if a[i] == b[i] || b[i] == 1 {
            a[i]
        } else if a[i] == 1 {
            b[i]
        } else {
            return Err(SacError::shape(
                op,
                format!("cannot broadcast {a:?} against {b:?} (dimension {i})"),
            ));
        };
    }
    Ok(out)
}

#[inline]
fn bstrides(s: Shape) -> [usize; 4] {
    let full = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if s[i] == 1 { 0 } else { full[i] };
    }
    st
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast output in order.
pub(crate) fn for_each_broadcast(os: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = bstrides(a);
    let sb = bstrides(b);
    let mut o = 0;
    for n in 0..os[0] {
        for c in 0..os[1] {
            for h in 0..os[2] {
                let ia = n * sa[0] + c * sa[1] + h * sa[2];
                let ib = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..os[3] {
                    f(o, ia + w * sa[3], ib + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for out in 1..8 {
            for stride in 1..4 {
                for offset in -10isize..10 {
                    for len in 1..9 {
                        let want: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && i < len as isize
                            })
                            .collect();
                        let (lo, hi) = valid_range(out, stride, offset, len);
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, want, "out={out} stride={stride} offset={offset} len={len}");
                    }
                }
            }
        }
    }

    #[test]
    fn reflect_index_mirrors_without_edge() {
        let row: Vec<usize> = (0..5).map(|o| reflect_index(o, 1, 3)).collect();
        assert_eq!(row, vec![1, 0, 1, 2, 1]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        assert!(broadcast_shape("add", [1, 3, 4, 4], [1, 2, 4, 4]).is_err());
        assert_eq!(
            broadcast_shape("mul", [2, 3, 4, 4], [2, 1, 4, 4]).unwrap(),
            [2, 3, 4, 4]
        );
        assert_eq!(
            broadcast_shape("mul", [2, 3, 1, 1], [2, 3, 4, 4]).unwrap(),
            [2, 3, 4, 4]
        );
    }
}
