//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every op whose inputs include at least one tracked
//! value. Values created with [`Tape::constant`] are never recorded, so a
//! forward pass over constant weights leaves the tape empty. Node ids grow
//! monotonically, which makes the record order a topological order.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Sentinel in a gather index meaning "write zero".
pub(crate) const GATHER_ZERO: u32 = u32::MAX;

/// FLOPs executed through a tape, split by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FlopTally {
    pub conv: u64,
    pub attention: u64,
    pub elementwise: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.conv + self.attention + self.elementwise
    }
}

pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    flops: Cell<FlopTally>,
}

struct Node<F: Scalar> {
    label: &'static str,
    value: Rc<Tensor<F>>,
    parents: Vec<Option<usize>>,
    op: Op<F>,
}

/// A value flowing through the tape.
///
/// Cloning is cheap: the tensor is reference counted.
#[derive(Clone)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: Option<usize>,
    value: Rc<Tensor<F>>,
}

/// Saved state needed to run one op backwards.
pub(crate) enum Op<F: Scalar> {
    Leaf,
    Conv {
        x: Rc<Tensor<F>>,
        w: Rc<Tensor<F>>,
        geom: ConvGeom,
    },
    BatchNorm {
        xhat: Tensor<F>,
        invstd: Vec<F>,
        gamma: Rc<Tensor<F>>,
        /// Batch statistics feed back into the input gradient in train mode.
        train: bool,
    },
    Add {
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Sub {
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Mul {
        a: Rc<Tensor<F>>,
        b: Rc<Tensor<F>>,
    },
    Abs {
        x: Rc<Tensor<F>>,
    },
    Sigmoid,
    Relu {
        x: Rc<Tensor<F>>,
    },
    Gelu {
        x: Rc<Tensor<F>>,
    },
    Scale(F),
    MatMul {
        a: Rc<Tensor<F>>,
        b: Rc<Tensor<F>>,
        dims: [usize; 4],
        trans_b: bool,
    },
    Gather {
        src_shape: Vec<usize>,
        index: Rc<Vec<u32>>,
    },
    Upsample {
        in_shape: Vec<usize>,
        factor: usize,
    },
    GlobalAvgPool {
        in_shape: Vec<usize>,
    },
    SumChannels {
        in_shape: Vec<usize>,
    },
    Reshape {
        in_shape: Vec<usize>,
    },
    Sum {
        in_shape: Vec<usize>,
    },
    Mean {
        in_shape: Vec<usize>,
    },
    BceWithLogits {
        logits: Rc<Tensor<F>>,
        target: Rc<Tensor<F>>,
    },
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(FlopTally::default()),
        }
    }

    /// A tracked leaf; gradients flow into it.
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<F>>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            label: "leaf",
            value: Rc::clone(&value),
            parents: Vec::new(),
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: Some(id),
            value,
        }
    }

    /// An untracked value. It never appears on the tape.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor<F>>) -> Var<'_, F> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    /// Number of recorded nodes (tracked leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flops(&self) -> FlopTally {
        self.flops.get()
    }

    pub(crate) fn count_flops(&self, conv: u64, attention: u64, elementwise: u64) {
        let mut t = self.flops.get();
        t.conv += conv;
        t.attention += attention;
        t.elementwise += elementwise;
        self.flops.set(t);
    }

    /// Wraps an op result, recording it only if some input is tracked.
    pub(crate) fn record(
        &self,
        label: &'static str,
        value: Tensor<F>,
        parents: Vec<Option<usize>>,
        op: impl FnOnce() -> Op<F>,
    ) -> Var<'_, F> {
        let value = Rc::new(value);
        if parents.iter().all(Option::is_none) {
            return self.constant_rc(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            label,
            value: Rc::clone(&value),
            parents,
            op: op(),
        });
        Var {
            tape: self,
            id: Some(id),
            value,
        }
    }

    /// Label and index of the first recorded node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.label))
    }

    /// Reverse sweep from a tracked scalar.
    pub fn backward(&self, loss: &Var<'_, F>) -> Result<Gradients<F>> {
        let Some(root) = loss.id else {
            return Err(Error::Backward("an untracked value".into()));
        };
        if loss.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "a non-scalar of shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let wanted: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = node.op.backward(&node.value, &g, &wanted)?;
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pid), Some(pg)) = (parent, pg) else { continue };
                match &mut grads[*pid] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Only leaves keep gradients; fill untouched leaves with zeros.
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if grads[id].is_none() && id <= root {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of tracked leaves after [`Tape::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: &Var<'_, F>) -> Option<&Tensor<F>> {
        var.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_, F>) -> Option<Tensor<F>> {
        var.id.and_then(|id| self.grads.get_mut(id)?.take())
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<F>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub(crate) fn id(&self) -> Option<usize> {
        self.id
    }
}

fn reduce_to_shape<F: Scalar>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let in_strides = broadcast_strides(shape, g.shape());
    let od = out.data_mut();
    for_each_index(g.shape(), &in_strides, |i, off| od[off] += g.data()[i]);
    out
}

/// Strides of `shape` viewed as broadcast to `target` (zero on size-1 axes).
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && target[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every flat index of `shape` together with its offset under `strides`.
pub(crate) fn for_each_index(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut base = 0usize;
    let mut flat = 0usize;
    for _ in 0..outer {
        for j in 0..inner {
            f(flat, base + j * inner_stride);
            flat += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

impl<F: Scalar> Op<F> {
    /// Gradients for each parent, given the output value and its gradient.
    fn backward(&self, y: &Tensor<F>, g: &Tensor<F>, wanted: &[bool]) -> Result<Vec<Option<Tensor<F>>>> {
        let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
        let out = match self {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, geom } => {
                let gx = want(0).then(|| {
                    Tensor::new(x.shape(), kernels::conv2d_backward_input(g.data(), w.data(), geom))
                });
                let (gw, gb) = if want(1) || want(2) {
                    let (gw, gb) = kernels::conv2d_backward_params(g.data(), x.data(), geom);
                    (
                        want(1).then(|| Tensor::new(w.shape(), gw)),
                        want(2).then(|| Tensor::new(&[geom.cout], gb)),
                    )
                } else {
                    (None, None)
                };
                vec![gx.transpose()?, gw.transpose()?, gb.transpose()?]
            }
            Op::BatchNorm {
                xhat,
                invstd,
                gamma,
                train,
            } => {
                let [n, c, h, w] = xhat.dims4()?;
                let plane = h * w;
                let m = F::from_usize(n * plane);
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for ni in 0..n {
                    for ch in 0..c {
                        let off = (ni * c + ch) * plane;
                        for i in off..off + plane {
                            sum_g[ch] += g.data()[i];
                            sum_gx[ch] += g.data()[i] * xhat.data()[i];
                        }
                    }
                }
                let gx = want(0).then(|| {
                    let mut gx = Tensor::zeros(xhat.shape());
                    let gd = gx.data_mut();
                    for ni in 0..n {
                        for ch in 0..c {
                            let k = gamma.data()[ch] * invstd[ch];
                            let off = (ni * c + ch) * plane;
                            for i in off..off + plane {
                                gd[i] = if *train {
                                    k * (g.data()[i] - sum_g[ch] / m - xhat.data()[i] * sum_gx[ch] / m)
                                } else {
                                    k * g.data()[i]
                                };
                            }
                        }
                    }
                    gx
                });
                let gg = want(1).then(|| Tensor::new(&[c], sum_gx.clone())).transpose()?;
                let gb = want(2).then(|| Tensor::new(&[c], sum_g.clone())).transpose()?;
                vec![gx, gg, gb]
            }
            Op::Add { a_shape, b_shape } => vec![
                want(0).then(|| reduce_to_shape(g, a_shape)),
                want(1).then(|| reduce_to_shape(g, b_shape)),
            ],
            Op::Sub { a_shape, b_shape } => vec![
                want(0).then(|| reduce_to_shape(g, a_shape)),
                want(1).then(|| reduce_to_shape(g, b_shape).map(|v| -v)),
            ],
            Op::Mul { a, b } => {
                let partial = |other: &Tensor<F>, shape: &[usize]| {
                    let strides = broadcast_strides(other.shape(), g.shape());
                    let mut full = Tensor::zeros(g.shape());
                    let fd = full.data_mut();
                    for_each_index(g.shape(), &strides, |i, off| {
                        fd[i] = g.data()[i] * other.data()[off];
                    });
                    reduce_to_shape(&full, shape)
                };
                vec![
                    want(0).then(|| partial(b, a.shape())),
                    want(1).then(|| partial(a, b.shape())),
                ]
            }
            Op::Abs { x } => vec![Some(zip_map(g, x, |gv, xv| {
                if xv > F::zero() {
                    gv
                } else if xv < F::zero() {
                    -gv
                } else {
                    F::zero()
                }
            }))],
            Op::Sigmoid => vec![Some(zip_map(g, y, |gv, yv| gv * yv * (F::one() - yv)))],
            Op::Relu { x } => vec![Some(zip_map(g, x, |gv, xv| {
                if xv > F::zero() {
                    gv
                } else {
                    F::zero()
                }
            }))],
            Op::Gelu { x } => vec![Some(zip_map(g, x, |gv, xv| gv * gelu_grad(xv)))],
            Op::Scale(s) => vec![Some(g.map(|v| v * *s))],
            Op::MatMul {
                a,
                b,
                dims: [batch, m, k, n],
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ga = want(0).then(|| {
                    // dA = dY · Bᵀ (or dY · B when B was stored transposed)
                    let d = kernels::matmul(g.data(), b.data(), batch, m, n, k, false, !trans_b);
                    Tensor::new(a.shape(), d)
                });
                let gb = want(1).then(|| {
                    if *trans_b {
                        // B stored n×k: dB = dYᵀ · A
                        let d = kernels::matmul(g.data(), a.data(), batch, n, m, k, true, false);
                        Tensor::new(b.shape(), d)
                    } else {
                        let d = kernels::matmul(a.data(), g.data(), batch, k, m, n, true, false);
                        Tensor::new(b.shape(), d)
                    }
                });
                vec![ga.transpose()?, gb.transpose()?]
            }
            Op::Gather { src_shape, index } => {
                let mut gx = Tensor::zeros(src_shape);
                let gd = gx.data_mut();
                for (&src, &v) in index.iter().zip(g.data()) {
                    if src != GATHER_ZERO {
                        gd[src as usize] += v;
                    }
                }
                vec![Some(gx)]
            }
            Op::Upsample { in_shape, factor } => {
                let [n, c, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
                let d = kernels::upsample_backward(g.data(), n * c, h, w, *factor);
                vec![Some(Tensor::new(in_shape, d)?)]
            }
            Op::GlobalAvgPool { in_shape } => {
                let plane = in_shape[2] * in_shape[3];
                let inv = F::one() / F::from_usize(plane);
                let gx = Tensor::from_fn(in_shape, |i| g.data()[i / plane] * inv);
                vec![Some(gx)]
            }
            Op::SumChannels { in_shape } => {
                let (c, plane) = (in_shape[1], in_shape[2] * in_shape[3]);
                let gx = Tensor::from_fn(in_shape, |i| {
                    let n = i / (c * plane);
                    g.data()[n * plane + i % plane]
                });
                vec![Some(gx)]
            }
            Op::Reshape { in_shape } => vec![Some(g.clone().reshape(in_shape)?)],
            Op::Sum { in_shape } => vec![Some(Tensor::full(in_shape, g.data()[0]))],
            Op::Mean { in_shape } => {
                let n = F::from_usize(in_shape.iter().product());
                vec![Some(Tensor::full(in_shape, g.data()[0] / n))]
            }
            Op::BceWithLogits { logits, target } => {
                let n = F::from_usize(logits.numel());
                let scale = g.data()[0] / n;
                vec![
                    want(0).then(|| zip_map(logits, target, |z, t| (sigmoid(z) - t) * scale)),
                    None,
                ]
            }
        };
        Ok(out)
    }
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map on equal shapes")
}
