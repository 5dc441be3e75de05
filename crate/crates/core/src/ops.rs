//! Differentiable primitives.
//!
//! Every function validates shapes, runs the forward kernel, and records a
//! backward closure on the tape when any input is tracked.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{
    broadcast_strides, for_each_index, gelu as gelu_scalar, sigmoid as sigmoid_scalar, Op, Var, GATHER_ZERO,
};
use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn check_same_tape<F: Scalar>(a: &Var<'_, F>, b: &Var<'_, F>) -> Result<()> {
    if !std::ptr::eq(a.tape(), b.tape()) {
        return shape_err("operands belong to different tapes");
    }
    Ok(())
}

fn conv_impl<'t, F: Scalar>(
    x: &Var<'t, F>,
    w: &Var<'t, F>,
    b: Option<&Var<'t, F>>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Result<Var<'t, F>> {
    check_same_tape(x, w)?;
    let [n, cin, h, wd] = x.value().dims4()?;
    let [cout, wcin, k, k2] = w.value().dims4()?;
    let what = if depthwise { "depthwise_conv2d" } else { "conv2d" };
    if k != k2 {
        return shape_err(format!("{what}: kernel must be square, got {k}×{k2}"));
    }
    if stride == 0 {
        return shape_err(format!("{what}: stride must be positive"));
    }
    if depthwise {
        if wcin != 1 || cout != cin {
            return shape_err(format!(
                "{what}: weight {:?} does not match {cin} input channels (expected {cin}×1×k×k)",
                w.shape()
            ));
        }
    } else if wcin != cin {
        return shape_err(format!(
            "{what}: input has {cin} channels but weight {:?} expects {wcin}",
            w.shape()
        ));
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return shape_err(format!(
            "{what}: kernel {k} larger than padded input {}×{}",
            h + 2 * pad,
            wd + 2 * pad
        ));
    }
    if let Some(b) = b {
        check_same_tape(x, b)?;
        if b.shape() != [cout] {
            return shape_err(format!("{what}: bias {:?} must have shape [{cout}]", b.shape()));
        }
    }
    let geom = ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (wd + 2 * pad - k) / stride + 1,
        depthwise,
    };
    let out = kernels::conv2d_forward(
        x.value().data(),
        w.value().data(),
        b.map(|b| b.value().data()),
        &geom,
    );
    let cin_g = if depthwise { 1 } else { cin };
    x.tape().count_flops(
        2 * (k * k * cin_g * cout * geom.ho * geom.wo * n) as u64,
        0,
        0,
    );
    let value = Tensor::new(&[n, cout, geom.ho, geom.wo], out)?;
    let parents = vec![x.id(), w.id(), b.and_then(|b| b.id())];
    Ok(x.tape().record(what, value, parents, || Op::Conv {
        x: x.value_rc(),
        w: w.value_rc(),
        geom,
    }))
}

/// Dense 2-D convolution. `weight` is `C_out×C_in×k×k`.
pub fn conv2d<'t, F: Scalar>(
    x: &Var<'t, F>,
    weight: &Var<'t, F>,
    bias: Option<&Var<'t, F>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, F>> {
    conv_impl(x, weight, bias, stride, pad, false)
}

/// Per-channel convolution. `weight` is `C×1×k×k`.
pub fn depthwise_conv2d<'t, F: Scalar>(
    x: &Var<'t, F>,
    weight: &Var<'t, F>,
    bias: Option<&Var<'t, F>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, F>> {
    conv_impl(x, weight, bias, stride, pad, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F: Scalar> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

impl<F: Scalar> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

pub fn batch_norm2d<'t, F: Scalar>(
    x: &Var<'t, F>,
    gamma: &Var<'t, F>,
    beta: &Var<'t, F>,
    stats: &mut RunningStats<F>,
    mode: BnMode,
) -> Result<Var<'t, F>> {
    check_same_tape(x, gamma)?;
    check_same_tape(x, beta)?;
    let [n, c, h, w] = x.value().dims4()?;
    for (t, what) in [
        (gamma.value(), "gamma"),
        (beta.value(), "beta"),
        (&stats.mean, "running mean"),
        (&stats.var, "running var"),
    ] {
        if t.shape() != [c] {
            return shape_err(format!("batch_norm2d: {what} {:?} must have shape [{c}]", t.shape()));
        }
    }
    let plane = h * w;
    let count = n * plane;
    let eps = F::from_f64(BN_EPS);
    let (mean, invstd): (Vec<F>, Vec<F>) = match mode {
        BnMode::Train => {
            let moments = kernels::channel_moments(x.value().data(), n, c, plane);
            let mom = F::from_f64(BN_MOMENTUM);
            let unbias = if count > 1 {
                F::from_usize(count) / F::from_usize(count - 1)
            } else {
                F::one()
            };
            for (ch, &(m, v)) in moments.iter().enumerate() {
                let rm = &mut stats.mean.data_mut()[ch];
                *rm = (F::one() - mom) * *rm + mom * m;
                let rv = &mut stats.var.data_mut()[ch];
                *rv = (F::one() - mom) * *rv + mom * v * unbias;
            }
            moments.iter().map(|&(m, v)| (m, F::one() / (v + eps).sqrt())).unzip()
        }
        BnMode::Eval => stats
            .mean
            .data()
            .iter()
            .zip(stats.var.data())
            .map(|(&m, &v)| (m, F::one() / (v + eps).sqrt()))
            .unzip(),
    };
    let xd = x.value().data();
    let mut xhat = vec![F::zero(); xd.len()];
    let mut y = vec![F::zero(); xd.len()];
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * plane;
            for i in off..off + plane {
                let v = (xd[i] - mean[ch]) * invstd[ch];
                xhat[i] = v;
                y[i] = gd[ch] * v + bd[ch];
            }
        }
    }
    x.tape().count_flops(0, 0, xd.len() as u64);
    let shape = x.shape().to_vec();
    let value = Tensor::new(&shape, y)?;
    let parents = vec![x.id(), gamma.id(), beta.id()];
    Ok(x.tape().record("batch_norm2d", value, parents, || Op::BatchNorm {
        xhat: Tensor::new(&shape, xhat).expect("same shape as input"),
        invstd,
        gamma: gamma.value_rc(),
        train: mode == BnMode::Train,
    }))
}

/// Result shape of broadcasting `a` with `b` (same rank, size-1 axes stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return shape_err(format!("cannot broadcast {a:?} with {b:?}: rank differs"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

fn binary<'t, F: Scalar>(
    a: &Var<'t, F>,
    b: &Var<'t, F>,
    label: &'static str,
    f: impl Fn(F, F) -> F,
    op: impl FnOnce() -> Op<F>,
) -> Result<Var<'t, F>> {
    check_same_tape(a, b)?;
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let (ad, bd) = (a.value().data(), b.value().data());
    let data: Vec<F> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let numel = shape.iter().product();
        let sa = broadcast_strides(a.shape(), &shape);
        let sb = broadcast_strides(b.shape(), &shape);
        let mut a_off = vec![0usize; numel];
        for_each_index(&shape, &sa, |i, off| a_off[i] = off);
        let mut out = vec![F::zero(); numel];
        for_each_index(&shape, &sb, |i, off| out[i] = f(ad[a_off[i]], bd[off]));
        out
    };
    a.tape().count_flops(0, 0, data.len() as u64);
    let value = Tensor::new(&shape, data)?;
    Ok(a.tape().record(label, value, vec![a.id(), b.id()], op))
}

pub fn add<'t, F: Scalar>(a: &Var<'t, F>, b: &Var<'t, F>) -> Result<Var<'t, F>> {
    binary(a, b, "add", |x, y| x + y, || Op::Add {
        a_shape: a.shape().to_vec(),
        b_shape: b.shape().to_vec(),
    })
}

pub fn sub<'t, F: Scalar>(a: &Var<'t, F>, b: &Var<'t, F>) -> Result<Var<'t, F>> {
    binary(a, b, "sub", |x, y| x - y, || Op::Sub {
        a_shape: a.shape().to_vec(),
        b_shape: b.shape().to_vec(),
    })
}

/// Hadamard product with broadcasting.
pub fn mul<'t, F: Scalar>(a: &Var<'t, F>, b: &Var<'t, F>) -> Result<Var<'t, F>> {
    binary(a, b, "mul", |x, y| x * y, || Op::Mul {
        a: a.value_rc(),
        b: b.value_rc(),
    })
}

fn unary<'t, F: Scalar>(
    x: &Var<'t, F>,
    label: &'static str,
    f: impl Fn(F) -> F,
    op: impl FnOnce() -> Op<F>,
) -> Var<'t, F> {
    let value = x.value().map(f);
    x.tape().count_flops(0, 0, value.numel() as u64);
    x.tape().record(label, value, vec![x.id()], op)
}

pub fn abs<'t, F: Scalar>(x: &Var<'t, F>) -> Var<'t, F> {
    unary(x, "abs", |v| v.abs(), || Op::Abs { x: x.value_rc() })
}

pub fn sigmoid<'t, F: Scalar>(x: &Var<'t, F>) -> Var<'t, F> {
    unary(x, "sigmoid", sigmoid_scalar, || Op::Sigmoid)
}

pub fn relu<'t, F: Scalar>(x: &Var<'t, F>) -> Var<'t, F> {
    unary(x, "relu", |v| v.max(F::zero()), || Op::Relu { x: x.value_rc() })
}

/// GELU, tanh approximation.
pub fn gelu<'t, F: Scalar>(x: &Var<'t, F>) -> Var<'t, F> {
    unary(x, "gelu", gelu_scalar::<F>, || Op::Gelu { x: x.value_rc() })
}

pub fn scale<'t, F: Scalar>(x: &Var<'t, F>, s: F) -> Var<'t, F> {
    unary(x, "scale", |v| v * s, || Op::Scale(s))
}

fn matmul_impl<'t, F: Scalar>(a: &Var<'t, F>, b: &Var<'t, F>, trans_b: bool) -> Result<Var<'t, F>> {
    check_same_tape(a, b)?;
    let (&[ba, m, k], &[bb, r, c]) = (a.shape(), b.shape()) else {
        return shape_err(format!(
            "matmul expects rank-3 batched operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    };
    let (kb, n) = if trans_b { (c, r) } else { (r, c) };
    if ba != bb {
        return shape_err(format!("matmul: batch sizes {ba} and {bb} differ"));
    }
    if k != kb {
        return shape_err(format!(
            "matmul: inner dimensions differ ({:?} · {:?}{})",
            a.shape(),
            b.shape(),
            if trans_b { "ᵀ" } else { "" }
        ));
    }
    let out = kernels::matmul(a.value().data(), b.value().data(), ba, m, k, n, false, trans_b);
    a.tape().count_flops(0, 2 * (ba * m * k * n) as u64, 0);
    let value = Tensor::new(&[ba, m, n], out)?;
    Ok(a.tape().record("matmul", value, vec![a.id(), b.id()], || Op::MatMul {
        a: a.value_rc(),
        b: b.value_rc(),
        dims: [ba, m, k, n],
        trans_b,
    }))
}

/// Batched product `B×M×K · B×K×N`.
pub fn matmul<'t, F: Scalar>(a: &Var<'t, F>, b: &Var<'t, F>) -> Result<Var<'t, F>> {
    matmul_impl(a, b, false)
}

/// Batched product with the second operand transposed: `B×M×K · (B×N×K)ᵀ`.
pub fn matmul_nt<'t, F: Scalar>(a: &Var<'t, F>, b: &Var<'t, F>) -> Result<Var<'t, F>> {
    matmul_impl(a, b, true)
}

/// `out[i] = x[index[i]]`, or zero where the index is [`GATHER_ZERO`].
pub(crate) fn gather<'t, F: Scalar>(
    x: &Var<'t, F>,
    index: Rc<Vec<u32>>,
    out_shape: &[usize],
) -> Result<Var<'t, F>> {
    if index.len() != out_shape.iter().product::<usize>() {
        return shape_err("gather: index length does not match output shape");
    }
    let src = x.value().data();
    let data = index
        .iter()
        .map(|&i| if i == GATHER_ZERO { F::zero() } else { src[i as usize] })
        .collect();
    let value = Tensor::new(out_shape, data)?;
    Ok(x.tape().record("gather", value, vec![x.id()], || Op::Gather {
        src_shape: x.shape().to_vec(),
        index,
    }))
}

/// `N×C×H×W` feature map to `N×(H·W)×C` token matrix.
pub fn to_tokens<'t, F: Scalar>(x: &Var<'t, F>) -> Result<Var<'t, F>> {
    let [n, c, h, w] = x.value().dims4()?;
    let plane = h * w;
    let index: Vec<u32> = (0..n * plane * c)
        .map(|i| {
            let (ni, rest) = (i / (plane * c), i % (plane * c));
            let (p, ch) = (rest / c, rest % c);
            ((ni * c + ch) * plane + p) as u32
        })
        .collect();
    gather(x, Rc::new(index), &[n, plane, c])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<'t, F: Scalar>(x: &Var<'t, F>, h: usize, w: usize) -> Result<Var<'t, F>> {
    let (&[n, plane, c], true) = (x.shape(), x.shape().get(1) == Some(&(h * w))) else {
        return shape_err(format!("from_tokens: {:?} is not N×{}×C", x.shape(), h * w));
    };
    let index: Vec<u32> = (0..n * c * plane)
        .map(|i| {
            let (ni, rest) = (i / (c * plane), i % (c * plane));
            let (ch, p) = (rest / plane, rest % plane);
            ((ni * plane + p) * c + ch) as u32
        })
        .collect();
    gather(x, Rc::new(index), &[n, c, h, w])
}

/// Bilinear upsampling by an integer factor (half-pixel centres, edge clamp).
pub fn bilinear_upsample<'t, F: Scalar>(x: &Var<'t, F>, factor: usize) -> Result<Var<'t, F>> {
    let [n, c, h, w] = x.value().dims4()?;
    if factor == 0 {
        return shape_err("bilinear_upsample: factor must be positive");
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let data = kernels::upsample_forward(x.value().data(), n * c, h, w, factor);
    x.tape().count_flops(0, 0, data.len() as u64);
    let value = Tensor::new(&[n, c, h * factor, w * factor], data)?;
    Ok(x.tape().record("bilinear_upsample", value, vec![x.id()], || Op::Upsample {
        in_shape: x.shape().to_vec(),
        factor,
    }))
}

/// Mean over `H×W`, keeping `N×C×1×1`.
pub fn global_avg_pool<'t, F: Scalar>(x: &Var<'t, F>) -> Result<Var<'t, F>> {
    let [n, c, h, w] = x.value().dims4()?;
    let plane = h * w;
    let inv = F::one() / F::from_usize(plane);
    let data = x
        .value()
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<F>() * inv)
        .collect();
    x.tape().count_flops(0, 0, (n * c * plane) as u64);
    let value = Tensor::new(&[n, c, 1, 1], data)?;
    Ok(x.tape().record("global_avg_pool", value, vec![x.id()], || Op::GlobalAvgPool {
        in_shape: x.shape().to_vec(),
    }))
}

/// Sum over the channel axis, keeping `N×1×H×W`.
pub fn sum_channels<'t, F: Scalar>(x: &Var<'t, F>) -> Result<Var<'t, F>> {
    let [n, c, h, w] = x.value().dims4()?;
    let plane = h * w;
    let xd = x.value().data();
    let mut data = vec![F::zero(); n * plane];
    for ni in 0..n {
        let o = &mut data[ni * plane..][..plane];
        for ch in 0..c {
            for (ov, &v) in o.iter_mut().zip(&xd[(ni * c + ch) * plane..][..plane]) {
                *ov += v;
            }
        }
    }
    x.tape().count_flops(0, 0, xd.len() as u64);
    let value = Tensor::new(&[n, 1, h, w], data)?;
    Ok(x.tape().record("sum_channels", value, vec![x.id()], || Op::SumChannels {
        in_shape: x.shape().to_vec(),
    }))
}

pub fn reshape<'t, F: Scalar>(x: &Var<'t, F>, shape: &[usize]) -> Result<Var<'t, F>> {
    let value = x.value().clone().reshape(shape)?;
    Ok(x.tape().record("reshape", value, vec![x.id()], || Op::Reshape {
        in_shape: x.shape().to_vec(),
    }))
}

pub fn sum<'t, F: Scalar>(x: &Var<'t, F>) -> Var<'t, F> {
    let value = Tensor::scalar(x.value().sum());
    x.tape().record("sum", value, vec![x.id()], || Op::Sum {
        in_shape: x.shape().to_vec(),
    })
}

pub fn mean<'t, F: Scalar>(x: &Var<'t, F>) -> Var<'t, F> {
    let value = Tensor::scalar(x.value().sum() / F::from_usize(x.value().numel()));
    x.tape().record("mean", value, vec![x.id()], || Op::Mean {
        in_shape: x.shape().to_vec(),
    })
}

/// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
pub fn bce_with_logits<'t, F: Scalar>(logits: &Var<'t, F>, target: &Var<'t, F>) -> Result<Var<'t, F>> {
    check_same_tape(logits, target)?;
    logits.value().same_shape(target.value(), "bce_with_logits")?;
    let total: F = logits
        .value()
        .data()
        .iter()
        .zip(target.value().data())
        .map(|(&z, &t)| z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln())
        .sum();
    let value = Tensor::scalar(total / F::from_usize(logits.value().numel()));
    Ok(logits
        .tape()
        .record("bce_with_logits", value, vec![logits.id(), target.id()], || Op::BceWithLogits {
            logits: logits.value_rc(),
            target: target.value_rc(),
        }))
}

/// Squeeze-and-excitation: `x ⊗ sigmoid(W₂·relu(W₁·avgpool(x)))`.
///
/// `reduce` and `expand` are `(weight, bias)` pairs of 1×1 convolutions.
pub fn se_block<'t, F: Scalar>(
    x: &Var<'t, F>,
    reduce: (&Var<'t, F>, &Var<'t, F>),
    expand: (&Var<'t, F>, &Var<'t, F>),
) -> Result<Var<'t, F>> {
    let [_, c, _, _] = x.value().dims4()?;
    let [hidden, rc, _, _] = reduce.0.value().dims4()?;
    let [ec, eh, _, _] = expand.0.value().dims4()?;
    if rc != c || eh != hidden || ec != c {
        return shape_err(format!(
            "se_block: weights {:?} / {:?} do not fit {c} channels",
            reduce.0.shape(),
            expand.0.shape()
        ));
    }
    let pooled = global_avg_pool(x)?;
    let h = relu(&conv2d(&pooled, reduce.0, Some(reduce.1), 1, 0)?);
    let gate = sigmoid(&conv2d(&h, expand.0, Some(expand.1), 1, 0)?);
    mul(x, &gate)
}
