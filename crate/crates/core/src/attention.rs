//! Local-global fusion: sliding-window and patch-pooled global attention.
//!
//! Both attention blocks are a token mixer, `sigmoid(QKᵀ/√d)·V + I`, followed
//! by a channel mixer, `MLP(BN(O)) + O`. Attention weights come from an
//! elementwise sigmoid, so rows do not sum to one. A single head is used
//! and `d` is the channel count.
//!
//! Each query sums roughly half of every value token, so an attention
//! branch scales its input by about half the key count. Value projections
//! therefore start at zero: every block is an exact identity at
//! initialization and learns how much attention to mix in.

use std::rc::Rc;

use crate::autograd::{Var, GATHER_ZERO};
use crate::config::WindowSpec;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayoutBuilder};
use crate::ops;
use crate::tensor::Scalar;

/// Channel-mixer hidden width multiplier.
pub const MLP_EXPANSION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LgfbOptions {
    pub use_swsa: bool,
    pub use_egsa: bool,
    /// Dense 1×1 projections instead of depthwise 3×3.
    pub full_projections: bool,
}

impl Default for LgfbOptions {
    fn default() -> Self {
        Self {
            use_swsa: true,
            use_egsa: true,
            full_projections: false,
        }
    }
}

fn projection_layout(b: &mut LayoutBuilder, prefix: &str, c: usize, full: bool) {
    if full {
        b.conv(prefix, c, c, 1);
    } else {
        b.dwconv(prefix, c, 3);
    }
}

fn channel_mixer_layout(b: &mut LayoutBuilder, prefix: &str, c: usize) {
    b.bn(&format!("{prefix}.bn"), c);
    b.conv(&format!("{prefix}.mlp1"), c, c * MLP_EXPANSION, 1);
    b.conv(&format!("{prefix}.mlp2"), c * MLP_EXPANSION, c, 1);
}

pub fn swsa_layout(b: &mut LayoutBuilder, prefix: &str, c: usize, full: bool) {
    for p in ["q", "k", "v"] {
        projection_layout(b, &format!("{prefix}.{p}"), c, full);
    }
    b.zero_weight(&format!("{prefix}.v"));
    channel_mixer_layout(b, prefix, c);
}

pub fn egsa_layout(b: &mut LayoutBuilder, prefix: &str, c: usize, patch: usize, full: bool) {
    projection_layout(b, &format!("{prefix}.q"), c, full);
    b.conv(&format!("{prefix}.k"), c, c, patch);
    b.conv(&format!("{prefix}.v"), c, c, patch);
    b.zero_weight(&format!("{prefix}.v"));
    channel_mixer_layout(b, prefix, c);
}

pub fn lgfb_layout(b: &mut LayoutBuilder, prefix: &str, c: usize, spec: WindowSpec, opts: LgfbOptions) {
    if opts.use_swsa {
        swsa_layout(b, &format!("{prefix}.swsa"), c, opts.full_projections);
    }
    if opts.use_egsa {
        egsa_layout(b, &format!("{prefix}.egsa"), c, spec.stride(), opts.full_projections);
    }
}

/// `sigmoid(Q·Kᵀ/√d)·V` over batched token matrices `B×T×d`.
pub fn sigmoid_attention<'t, F: Scalar>(
    q: &Var<'t, F>,
    k: &Var<'t, F>,
    v: &Var<'t, F>,
) -> Result<Var<'t, F>> {
    let (&[bq, _, dq], &[bk, tk, dk], &[bv, tv, _]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::Shape(format!(
            "sigmoid_attention expects B×T×d tokens, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    };
    if bq != bk || bk != bv || dq != dk || tk != tv {
        return Err(Error::Shape(format!(
            "sigmoid_attention: incompatible Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let logits = ops::scale(&ops::matmul_nt(q, k)?, F::one() / F::from_usize(dq).sqrt());
    ops::matmul(&ops::sigmoid(&logits), v)
}

/// `sigmoid(Q·Kᵀ/√d)·V + I`.
pub fn sigmoid_attention_residual<'t, F: Scalar>(
    q: &Var<'t, F>,
    k: &Var<'t, F>,
    v: &Var<'t, F>,
    residual: &Var<'t, F>,
) -> Result<Var<'t, F>> {
    let o = sigmoid_attention(q, k, v)?;
    if o.shape() != residual.shape() {
        return Err(Error::Shape(format!(
            "residual {:?} does not match attention output {:?}",
            residual.shape(),
            o.shape()
        )));
    }
    ops::add(&o, residual)
}

fn project<'t, F: Scalar>(ctx: &Ctx<'t, F>, x: &Var<'t, F>, prefix: &str, full: bool) -> Result<Var<'t, F>> {
    if full {
        ctx.conv(x, prefix, 1, 0)
    } else {
        ctx.dwconv(x, prefix, 1, 1)
    }
}

/// `O + mlp2(gelu(mlp1(bn(O))))`.
pub fn channel_mixer<'t, F: Scalar>(ctx: &Ctx<'t, F>, o: &Var<'t, F>, prefix: &str) -> Result<Var<'t, F>> {
    let t = ctx.bn(o, &format!("{prefix}.bn"))?;
    let t = ops::gelu(&ctx.conv(&t, &format!("{prefix}.mlp1"), 1, 0)?);
    let t = ctx.conv(&t, &format!("{prefix}.mlp2"), 1, 0)?;
    ops::add(o, &t)
}

/// Token layout used by the sliding-window attention for one map size.
///
/// Window `(a, b)` covers padded rows `a·s .. a·s+w`; only the centre
/// `s×s` queries are evaluated, since the rest of each window's output is
/// discarded.
#[derive(Clone, Debug)]
pub struct WindowIndex {
    /// `(N·nh·nw)×s²×C` query tokens gathered from an `N×C×H×W` map.
    pub queries: Rc<Vec<u32>>,
    /// `(N·nh·nw)×w²×C` key/value tokens, zero outside the map.
    pub keys: Rc<Vec<u32>>,
    /// `N×C×H×W` map gathered back from `(N·nh·nw)×s²×C` outputs.
    pub scatter: Rc<Vec<u32>>,
    pub windows: usize,
}

impl WindowIndex {
    pub fn new(n: usize, c: usize, h: usize, w: usize, spec: WindowSpec) -> Result<Self> {
        spec.validate_for(h, w)?;
        let (win, s, pad) = (spec.window(), spec.stride(), spec.pad());
        let (nh, nw) = (h / s, w / s);
        let windows = n * nh * nw;
        let map_offset = |ni: usize, ch: usize, y: usize, x: usize| ((ni * c + ch) * h + y) * w + x;

        let mut queries = Vec::with_capacity(windows * s * s * c);
        let mut keys = Vec::with_capacity(windows * win * win * c);
        for ni in 0..n {
            for a in 0..nh {
                for b in 0..nw {
                    for i in 0..s {
                        for j in 0..s {
                            for ch in 0..c {
                                queries.push(map_offset(ni, ch, a * s + i, b * s + j) as u32);
                            }
                        }
                    }
                    for i in 0..win {
                        for j in 0..win {
                            let y = (a * s + i).checked_sub(pad).filter(|&y| y < h);
                            let x = (b * s + j).checked_sub(pad).filter(|&x| x < w);
                            for ch in 0..c {
                                keys.push(match (y, x) {
                                    (Some(y), Some(x)) => map_offset(ni, ch, y, x) as u32,
                                    _ => GATHER_ZERO,
                                });
                            }
                        }
                    }
                }
            }
        }
        let mut scatter = vec![0u32; n * c * h * w];
        for ni in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let win_id = (ni * nh + y / s) * nw + x / s;
                        let tok = (y % s) * s + x % s;
                        scatter[map_offset(ni, ch, y, x)] = ((win_id * s * s + tok) * c + ch) as u32;
                    }
                }
            }
        }
        Ok(Self {
            queries: Rc::new(queries),
            keys: Rc::new(keys),
            scatter: Rc::new(scatter),
            windows,
        })
    }
}

/// Sliding-window self-attention block.
pub fn swsa<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    x: &Var<'t, F>,
    spec: WindowSpec,
    prefix: &str,
    full_projections: bool,
) -> Result<Var<'t, F>> {
    let [n, c, h, w] = x.value().dims4()?;
    let idx = WindowIndex::new(n, c, h, w, spec)?;
    let q = project(ctx, x, &format!("{prefix}.q"), full_projections)?;
    let k = project(ctx, x, &format!("{prefix}.k"), full_projections)?;
    let v = project(ctx, x, &format!("{prefix}.v"), full_projections)?;
    let (s, win) = (spec.stride(), spec.window());
    let qt = ops::gather(&q, Rc::clone(&idx.queries), &[idx.windows, s * s, c])?;
    let kt = ops::gather(&k, Rc::clone(&idx.keys), &[idx.windows, win * win, c])?;
    let vt = ops::gather(&v, Rc::clone(&idx.keys), &[idx.windows, win * win, c])?;
    let out = sigmoid_attention(&qt, &kt, &vt)?;
    let out = ops::gather(&out, Rc::clone(&idx.scatter), &[n, c, h, w])?;
    let o = ops::add(&out, x)?;
    channel_mixer(ctx, &o, prefix)
}

/// Global attention from every pixel to `patch×patch`-pooled key/value tokens.
pub fn egsa<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    x: &Var<'t, F>,
    patch: usize,
    prefix: &str,
    full_projections: bool,
) -> Result<Var<'t, F>> {
    let [_, _, h, w] = x.value().dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "feature map {h}×{w} is not divisible by patch size {patch}"
        )));
    }
    let q = project(ctx, x, &format!("{prefix}.q"), full_projections)?;
    let k = ctx.conv(x, &format!("{prefix}.k"), patch, 0)?;
    let v = ctx.conv(x, &format!("{prefix}.v"), patch, 0)?;
    let out = sigmoid_attention(&ops::to_tokens(&q)?, &ops::to_tokens(&k)?, &ops::to_tokens(&v)?)?;
    let o = ops::add(&ops::from_tokens(&out, h, w)?, x)?;
    channel_mixer(ctx, &o, prefix)
}

/// SWSA followed by EGSA whose patch equals the SWSA stride.
pub fn lgfb<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    x: &Var<'t, F>,
    spec: WindowSpec,
    prefix: &str,
    opts: LgfbOptions,
) -> Result<Var<'t, F>> {
    let [_, _, h, w] = x.value().dims4()?;
    spec.validate_for(h, w)?;
    let mut y = x.clone();
    if opts.use_swsa {
        y = swsa(ctx, &y, spec, &format!("{prefix}.swsa"), opts.full_projections)?;
    }
    if opts.use_egsa {
        y = egsa(ctx, &y, spec.stride(), &format!("{prefix}.egsa"), opts.full_projections)?;
    }
    Ok(y)
}
