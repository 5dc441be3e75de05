//! Difference extraction between the two temporal feature maps of a stage.
//!
//! Both inputs go through the same preprocessing (depthwise-separable conv,
//! BN, GELU, squeeze-excitation, 1×1 to `c_d` channels). A shared 1×1
//! projection then yields `Q` and `K`; their per-pixel scaled dot product
//! `M` is inverted through `sigmoid(−M)` and gates the projected absolute
//! difference `V` channel-wise.

use crate::autograd::Var;
use crate::error::Result;
use crate::nn::{Ctx, LayoutBuilder};
use crate::ops;
use crate::tensor::Scalar;

pub fn layout(b: &mut LayoutBuilder, prefix: &str, cin: usize, c_d: usize, use_attention: bool) {
    preprocess_layout(b, &format!("{prefix}.pre"), cin, c_d);
    if use_attention {
        b.conv(&format!("{prefix}.qk"), c_d, c_d, 1);
    }
    b.conv_nobias(&format!("{prefix}.value"), c_d, c_d, 1);
}

pub fn preprocess_layout(b: &mut LayoutBuilder, prefix: &str, cin: usize, c_d: usize) {
    b.dwconv(&format!("{prefix}.dw"), cin, 3);
    b.conv(&format!("{prefix}.pw"), cin, cin, 1);
    b.bn(&format!("{prefix}.bn"), cin);
    b.se(&format!("{prefix}.se"), cin);
    b.conv(&format!("{prefix}.proj"), cin, c_d, 1);
}

/// `proj(se(gelu(bn(pw(dw(f))))))`: stage features to `c_d` channels.
pub fn edm_preprocess<'t, F: Scalar>(ctx: &Ctx<'t, F>, f: &Var<'t, F>, prefix: &str) -> Result<Var<'t, F>> {
    let x = ctx.dwconv(f, &format!("{prefix}.dw"), 1, 1)?;
    let x = ctx.conv(&x, &format!("{prefix}.pw"), 1, 0)?;
    let x = ops::gelu(&ctx.bn(&x, &format!("{prefix}.bn"))?);
    let x = ctx.se(&x, &format!("{prefix}.se"))?;
    ctx.conv(&x, &format!("{prefix}.proj"), 1, 0)
}

/// Intermediate tensors of the difference attention.
pub struct DiffAttentionState<'t, F: Scalar> {
    pub q: Var<'t, F>,
    pub k: Var<'t, F>,
    /// `N×1×H×W` scaled per-pixel dot products.
    pub m: Var<'t, F>,
    /// `sigmoid(−M)`.
    pub m_prime: Var<'t, F>,
    pub v: Var<'t, F>,
    /// `M' ⊗ V`.
    pub d: Var<'t, F>,
    pub d_k: usize,
}

pub fn difference_attention_state<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    f1p: &Var<'t, F>,
    f2p: &Var<'t, F>,
    prefix: &str,
) -> Result<DiffAttentionState<'t, F>> {
    f1p.value().same_shape(f2p.value(), "difference_attention")?;
    let q = ctx.conv(f1p, &format!("{prefix}.qk"), 1, 0)?;
    let k = ctx.conv(f2p, &format!("{prefix}.qk"), 1, 0)?;
    let d_k = q.shape()[1];
    let dot = ops::sum_channels(&ops::mul(&q, &k)?)?;
    let m = ops::scale(&dot, F::one() / F::from_usize(d_k).sqrt());
    let m_prime = ops::sigmoid(&ops::scale(&m, -F::one()));
    let v = value_projection(ctx, f1p, f2p, prefix)?;
    let d = ops::mul(&v, &m_prime)?;
    Ok(DiffAttentionState {
        q,
        k,
        m,
        m_prime,
        v,
        d,
        d_k,
    })
}

fn value_projection<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    f1p: &Var<'t, F>,
    f2p: &Var<'t, F>,
    prefix: &str,
) -> Result<Var<'t, F>> {
    let diff = ops::abs(&ops::sub(f1p, f2p)?);
    ctx.conv_nobias(&diff, &format!("{prefix}.value"), 1, 0)
}

/// `D = sigmoid(−QKᵀ/√d_k) ⊗ U(|f1p − f2p|)`, one mask value per pixel.
pub fn difference_attention<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    f1p: &Var<'t, F>,
    f2p: &Var<'t, F>,
    prefix: &str,
) -> Result<Var<'t, F>> {
    Ok(difference_attention_state(ctx, f1p, f2p, prefix)?.d)
}

/// Plain projected absolute difference, no mask.
pub fn manhattan_difference<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    f1p: &Var<'t, F>,
    f2p: &Var<'t, F>,
    prefix: &str,
) -> Result<Var<'t, F>> {
    f1p.value().same_shape(f2p.value(), "manhattan_difference")?;
    value_projection(ctx, f1p, f2p, prefix)
}

/// Full per-stage module on raw encoder features.
pub fn edm<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    f1: &Var<'t, F>,
    f2: &Var<'t, F>,
    prefix: &str,
    use_attention: bool,
) -> Result<Var<'t, F>> {
    f1.value().same_shape(f2.value(), "edm")?;
    let pre = format!("{prefix}.pre");
    let f1p = edm_preprocess(ctx, f1, &pre)?;
    let f2p = edm_preprocess(ctx, f2, &pre)?;
    if use_attention {
        difference_attention(ctx, &f1p, &f2p, prefix)
    } else {
        manhattan_difference(ctx, &f1p, &f2p, prefix)
    }
}
