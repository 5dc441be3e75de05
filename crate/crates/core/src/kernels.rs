//! Dense CPU kernels on flat row-major slices.
//!
//! These are the raw loops behind the differentiable ops in
//! [`crate::ops`]. Shapes are validated by the callers.

use crate::parallel::{for_each_chunk, map_range};
use crate::tensor::Scalar;

/// Geometry of a 2-D convolution over an `N×C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
    /// One input channel per output channel (`cout == cin`).
    pub depthwise: bool,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        if self.depthwise {
            1
        } else {
            self.cin
        }
    }

    fn in_channel(&self, co: usize, cig: usize) -> usize {
        if self.depthwise {
            co
        } else {
            cig
        }
    }
}

/// Output index range `[lo, hi)` whose receptive tap `off` lands inside the
/// input of length `len`.
#[inline]
fn tap_range(off: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // need 0 <= o*stride + off - pad < len
    let lo = if pad > off {
        (pad - off).div_ceil(stride)
    } else {
        0
    };
    let top = len + pad;
    let hi = if top > off {
        ((top - off - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward<F: Scalar>(
    x: &[F],
    wt: &[F],
    bias: Option<&[F]>,
    g: &ConvGeom,
) -> Vec<F> {
    let plane = g.ho * g.wo;
    let in_plane = g.h * g.w;
    let cig_n = g.cin_per_group();
    let k = g.k;
    let mut out = vec![F::zero(); g.n * g.cout * plane];
    for_each_chunk(&mut out, plane, |idx, o| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        let b0 = bias.map_or(F::zero(), |b| b[co]);
        o.fill(b0);
        for cig in 0..cig_n {
            let ci = g.in_channel(co, cig);
            let xp = &x[(n * g.cin + ci) * in_plane..][..in_plane];
            let wbase = (co * cig_n + cig) * k * k;
            if k == 1 && g.stride == 1 && g.pad == 0 {
                let wv = wt[wbase];
                for (ov, &xv) in o.iter_mut().zip(xp) {
                    *ov += wv * xv;
                }
                continue;
            }
            for kh in 0..k {
                let (oh_lo, oh_hi) = tap_range(kh, g.pad, g.stride, g.h, g.ho);
                for kw in 0..k {
                    let (ow_lo, ow_hi) = tap_range(kw, g.pad, g.stride, g.w, g.wo);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let wv = wt[wbase + kh * k + kw];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let xrow = &xp[ih * g.w..][..g.w];
                        let orow = &mut o[oh * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let start = ow_lo + kw - g.pad;
                            let len = ow_hi - ow_lo;
                            for (ov, &xv) in orow[ow_lo..ow_hi].iter_mut().zip(&xrow[start..start + len]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                orow[ow] += wv * xrow[ow * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of the convolution with respect to its input.
pub(crate) fn conv2d_backward_input<F: Scalar>(gy: &[F], wt: &[F], g: &ConvGeom) -> Vec<F> {
    let plane = g.ho * g.wo;
    let in_plane = g.h * g.w;
    let cig_n = g.cin_per_group();
    let k = g.k;
    let mut gx = vec![F::zero(); g.n * g.cin * in_plane];
    for_each_chunk(&mut gx, in_plane, |idx, gxp| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        let contributors: Vec<(usize, usize)> = if g.depthwise {
            vec![(ci, 0)]
        } else {
            (0..g.cout).map(|co| (co, ci)).collect()
        };
        for (co, cig) in contributors {
            let gyp = &gy[(n * g.cout + co) * plane..][..plane];
            let wbase = (co * cig_n + cig) * k * k;
            for kh in 0..k {
                let (oh_lo, oh_hi) = tap_range(kh, g.pad, g.stride, g.h, g.ho);
                for kw in 0..k {
                    let (ow_lo, ow_hi) = tap_range(kw, g.pad, g.stride, g.w, g.wo);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let wv = wt[wbase + kh * k + kw];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let grow = &gyp[oh * g.wo..][..g.wo];
                        let xrow = &mut gxp[ih * g.w..][..g.w];
                        for ow in ow_lo..ow_hi {
                            xrow[ow * g.stride + kw - g.pad] += wv * grow[ow];
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradients of the convolution with respect to weight and bias.
pub(crate) fn conv2d_backward_params<F: Scalar>(
    gy: &[F],
    x: &[F],
    g: &ConvGeom,
) -> (Vec<F>, Vec<F>) {
    let plane = g.ho * g.wo;
    let in_plane = g.h * g.w;
    let cig_n = g.cin_per_group();
    let k = g.k;
    let per_co = cig_n * k * k;
    let mut gw = vec![F::zero(); g.cout * per_co];
    for_each_chunk(&mut gw, per_co, |co, gwc| {
        for n in 0..g.n {
            let gyp = &gy[(n * g.cout + co) * plane..][..plane];
            for cig in 0..cig_n {
                let ci = g.in_channel(co, cig);
                let xp = &x[(n * g.cin + ci) * in_plane..][..in_plane];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = tap_range(kh, g.pad, g.stride, g.h, g.ho);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = tap_range(kw, g.pad, g.stride, g.w, g.wo);
                        let mut acc = F::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let grow = &gyp[oh * g.wo..][..g.wo];
                            let xrow = &xp[ih * g.w..][..g.w];
                            for ow in ow_lo..ow_hi {
                                acc += grow[ow] * xrow[ow * g.stride + kw - g.pad];
                            }
                        }
                        gwc[(cig * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });
    let gb = map_range(g.cout, |co| {
        let mut acc = F::zero();
        for n in 0..g.n {
            for &v in &gy[(n * g.cout + co) * plane..][..plane] {
                acc += v;
            }
        }
        acc
    });
    (gw, gb)
}

/// Batched matrix product.
///
/// `a` is logically `batch×m×kk` (stored transposed as `batch×kk×m` when
/// `ta`), `b` is logically `batch×kk×n` (stored `batch×n×kk` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<F: Scalar>(
    a: &[F],
    b: &[F],
    batch: usize,
    m: usize,
    kk: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<F> {
    let mut out = vec![F::zero(); batch * m * n];
    let a_mat = m * kk;
    let b_mat = kk * n;
    for_each_chunk(&mut out, n, |row, orow| {
        let (bi, i) = (row / m, row % m);
        let am = &a[bi * a_mat..][..a_mat];
        let bm = &b[bi * b_mat..][..b_mat];
        match (ta, tb) {
            (false, false) => {
                let arow = &am[i * kk..][..kk];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &bm[p * n..][..n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            (false, true) => {
                let arow = &am[i * kk..][..kk];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &bm[j * kk..][..kk];
                    let mut acc = F::zero();
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    *o = acc;
                }
            }
            (true, false) => {
                for p in 0..kk {
                    let av = am[p * m + i];
                    let brow = &bm[p * n..][..n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            (true, true) => {
                for (j, o) in orow.iter_mut().enumerate() {
                    let mut acc = F::zero();
                    for p in 0..kk {
                        acc += am[p * m + i] * bm[j * kk + p];
                    }
                    *o = acc;
                }
            }
        }
    });
    out
}

/// Source taps for one output coordinate of a bilinear resize.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<F> {
    pub i0: usize,
    pub i1: usize,
    pub frac: F,
}

/// Half-pixel-centre sampling (`align_corners = false`), clamped at edges.
pub(crate) fn bilinear_taps<F: Scalar>(in_len: usize, factor: usize) -> Vec<Tap<F>> {
    let f = factor as f64;
    (0..in_len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                frac: F::from_f64(frac),
            }
        })
        .collect()
}

pub(crate) fn upsample_forward<F: Scalar>(
    x: &[F],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<F> {
    let rows = bilinear_taps::<F>(h, factor);
    let cols = bilinear_taps::<F>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![F::zero(); planes * oh * ow];
    for_each_chunk(&mut out, oh * ow, |p, o| {
        let xp = &x[p * h * w..][..h * w];
        for (y, ry) in rows.iter().enumerate() {
            let r0 = &xp[ry.i0 * w..][..w];
            let r1 = &xp[ry.i1 * w..][..w];
            let wy1 = ry.frac;
            let wy0 = F::one() - wy1;
            for (xo, cx) in cols.iter().enumerate() {
                let wx1 = cx.frac;
                let wx0 = F::one() - wx1;
                o[y * ow + xo] = wy0 * (wx0 * r0[cx.i0] + wx1 * r0[cx.i1])
                    + wy1 * (wx0 * r1[cx.i0] + wx1 * r1[cx.i1]);
            }
        }
    });
    out
}

pub(crate) fn upsample_backward<F: Scalar>(
    gy: &[F],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<F> {
    let rows = bilinear_taps::<F>(h, factor);
    let cols = bilinear_taps::<F>(w, factor);
    let ow = w * factor;
    let oplane = h * factor * ow;
    let mut gx = vec![F::zero(); planes * h * w];
    for_each_chunk(&mut gx, h * w, |p, gp| {
        let g = &gy[p * oplane..][..oplane];
        for (y, ry) in rows.iter().enumerate() {
            let wy1 = ry.frac;
            let wy0 = F::one() - wy1;
            for (xo, cx) in cols.iter().enumerate() {
                let v = g[y * ow + xo];
                let wx1 = cx.frac;
                let wx0 = F::one() - wx1;
                gp[ry.i0 * w + cx.i0] += wy0 * wx0 * v;
                gp[ry.i0 * w + cx.i1] += wy0 * wx1 * v;
                gp[ry.i1 * w + cx.i0] += wy1 * wx0 * v;
                gp[ry.i1 * w + cx.i1] += wy1 * wx1 * v;
            }
        }
    });
    gx
}

/// Per-channel mean and biased variance over `N×H×W`.
pub(crate) fn channel_moments<F: Scalar>(x: &[F], n: usize, c: usize, plane: usize) -> Vec<(F, F)> {
    let count = F::from_usize(n * plane);
    map_range(c, |ch| {
        let mut sum = F::zero();
        for ni in 0..n {
            for &v in &x[(ni * c + ch) * plane..][..plane] {
                sum += v;
            }
        }
        let mean = sum / count;
        let mut sq = F::zero();
        for ni in 0..n {
            for &v in &x[(ni * c + ch) * plane..][..plane] {
                let d = v - mean;
                sq += d * d;
            }
        }
        (mean, sq / count)
    })
}
