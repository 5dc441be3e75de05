//! Reference implementations used only by tests. Each one is written the
//! slow, obvious way and shares no code with the crate.
#![allow(dead_code)]

use cdlite::autograd::{Tape, Var};
use cdlite::nn::{EntryKind, LayoutEntry};
use cdlite::ops;
use cdlite::{Tensor, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for primitives with a kink there.
pub fn random_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Direct nested-loop convolution over `N×C×H×W` input, `O×(C/groups)×k×k`
/// weights; `groups` is 1 or `C`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Tensor<f64> {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (o, k) = (ws[0], ws[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for ni in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    let chans: Vec<usize> = if depthwise { vec![oc] } else { (0..c).collect() };
                    for (wi, &ic) in chans.iter().enumerate() {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.get(&[ni, ic, iy as usize, ix as usize]) * w.get(&[oc, wi, ky, kx]);
                            }
                        }
                    }
                    out.set(&[ni, oc, oy, ox], acc);
                }
            }
        }
    }
    out
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

/// `sigmoid(q·kᵀ/√d)·v` over `T×d` token rows.
pub fn naive_sigmoid_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let mut row = vec![0.0; v[0].len()];
            for (kj, vj) in k.iter().zip(v) {
                let logit: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt();
                let a = 1.0 / (1.0 + (-logit).exp());
                for (r, x) in row.iter_mut().zip(vj) {
                    *r += a * x;
                }
            }
            row
        })
        .collect()
}

/// Pixel tokens of sample 0 of an `N×C×H×W` tensor.
pub fn tokens_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    (0..h * w).map(|p| (0..c).map(|ch| t.get(&[0, ch, p / w, p % w])).collect()).collect()
}

/// 8-connected components by recursive flood fill; sorted pixel sets,
/// sorted by first pixel.
pub fn flood_fill_partition(mask: &[u8], w: usize, h: usize) -> Vec<Vec<usize>> {
    fn fill(mask: &[u8], w: usize, h: usize, y: usize, x: usize, seen: &mut [bool], out: &mut Vec<usize>) {
        let p = y * w + x;
        if seen[p] || mask[p] == 0 {
            return;
        }
        seen[p] = true;
        out.push(p);
        for dy in [-1isize, 0, 1] {
            for dx in [-1isize, 0, 1] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    fill(mask, w, h, ny as usize, nx as usize, seen, out);
                }
            }
        }
    }
    let mut seen = vec![false; mask.len()];
    let mut parts = Vec::new();
    for p in 0..mask.len() {
        if mask[p] == 1 && !seen[p] {
            let mut region = Vec::new();
            fill(mask, w, h, p / w, p % w, &mut seen, &mut region);
            region.sort_unstable();
            parts.push(region);
        }
    }
    parts
}

/// Lattice points `(dy, dx)` with `dy² + dx² ≤ r²`.
pub fn disc_lattice_count(r: usize) -> usize {
    let r = r as i64;
    let mut n = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                n += 1;
            }
        }
    }
    n
}

/// Relative error between a finite-difference and an analytic directional
/// derivative, falling back to absolute error when both are tiny.
pub fn rel_err(numeric: f64, analytic: f64) -> f64 {
    let scale = numeric.abs().max(analytic.abs());
    if scale < 1e-9 {
        (numeric - analytic).abs()
    } else {
        (numeric - analytic).abs() / scale
    }
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

fn unit_direction(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    let mut dir: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(rng, s, -1.0, 1.0)).collect();
    let norm = dir.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    for t in &mut dir {
        *t = t.map(|v| v / norm);
    }
    dir
}

fn shifted(base: &[Tensor<f64>], dir: &[Tensor<f64>], eps: f64) -> Vec<Tensor<f64>> {
    base.iter()
        .zip(dir)
        .map(|(b, d)| Tensor::new(b.shape(), b.data().iter().zip(d.data()).map(|(x, y)| x + eps * y).collect()).unwrap())
        .collect()
}

/// Worst relative error of central differences against reverse-mode
/// gradients of `sum(f(inputs) ⊙ R)` along `directions` random unit
/// directions through all inputs jointly.
pub fn gradcheck<G>(inputs: &[Tensor<f64>], directions: usize, seed: u64, f: G) -> f64
where
    G: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let mut rng = rng(seed);
    let probe_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).shape().to_vec()
    };
    let weights = random_tensor(&mut rng, &probe_shape, -1.0, 1.0);
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars);
    let loss = ops::sum(&ops::mul(&out, &tape.constant(weights.clone())).unwrap());
    let grads = tape.backward(&loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get(v).unwrap().clone()).collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dir = unit_direction(&mut rng, &shapes);
        let num = (eval(&shifted(inputs, &dir, FD_STEP)) - eval(&shifted(inputs, &dir, -FD_STEP))) / (2.0 * FD_STEP);
        let ana: f64 = analytic
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        worst = worst.max(rel_err(num, ana));
    }
    worst
}

/// Replaces every trainable tensor with random values so no branch starts
/// at an exact zero; normalization scales stay near one.
pub fn randomize_params(store: &mut WeightStore<f64>, layout: &[LayoutEntry], seed: u64, spread: f64) {
    let mut rng = rng(seed);
    for e in layout.iter().filter(|e| e.kind == EntryKind::Param) {
        let t = store.get_mut(&e.name).unwrap();
        let is_bn_scale = e.name.contains(".bn") && e.name.ends_with(".weight");
        *t = Tensor::from_fn(&e.shape, |_| {
            let v = rng.random_range(-spread..spread);
            if is_bn_scale {
                1.0 + v
            } else {
                v
            }
        });
    }
}

/// Central-difference check of the full model's logits with respect to
/// every trainable weight, along random joint directions.
pub fn model_gradcheck(
    cfg: &cdlite::ModelConfig,
    store: &WeightStore<f64>,
    t1: &Tensor<f64>,
    t2: &Tensor<f64>,
    mode: cdlite::ops::BnMode,
    directions: usize,
    seed: u64,
) -> f64 {
    use cdlite::model::forward_logits;
    use cdlite::nn::{is_buffer_name, Ctx};

    let mut rng = rng(seed);
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).filter(|n| !is_buffer_name(n)).collect();
    let [n, _, h, w] = t1.dims4().unwrap();
    let weights = random_tensor(&mut rng, &[n, 1, h, w], -1.0, 1.0);
    let eval = |s: &WeightStore<f64>| -> f64 {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, s, mode);
        let out = forward_logits(&ctx, &tape.constant(t1.clone()), &tape.constant(t2.clone()), cfg).unwrap();
        out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let analytic = {
        let tape = Tape::new();
        let ctx = Ctx::training(&tape, store, mode);
        let out = forward_logits(&ctx, &tape.constant(t1.clone()), &tape.constant(t2.clone()), cfg).unwrap();
        let loss = ops::sum(&ops::mul(&out, &tape.constant(weights.clone())).unwrap());
        ctx.param_grads(&tape.backward(&loss).unwrap())
    };
    assert_eq!(analytic.len(), names.len(), "every weight must receive a gradient");
    let shapes: Vec<Vec<usize>> = names.iter().map(|n| store.get(n).unwrap().shape().to_vec()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dir = unit_direction(&mut rng, &shapes);
        let moved = |eps: f64| {
            let mut s = store.clone();
            for (name, d) in names.iter().zip(&dir) {
                let t = s.get_mut(name).unwrap();
                for (v, dv) in t.data_mut().iter_mut().zip(d.data()) {
                    *v += eps * dv;
                }
            }
            s
        };
        let num = (eval(&moved(FD_STEP)) - eval(&moved(-FD_STEP))) / (2.0 * FD_STEP);
        let ana: f64 = names
            .iter()
            .zip(&dir)
            .map(|(name, d)| analytic[name].data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        worst = worst.max(rel_err(num, ana));
    }
    worst
}
