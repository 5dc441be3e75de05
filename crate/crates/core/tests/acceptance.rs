//! Acceptance suite. Prints one PASS/FAIL line per criterion. A criterion
//! either passes, fails outright (a panic, which makes the process exit
//! nonzero), or returns a shortfall: a measured, documented failure to meet
//! the target that is printed as FAIL but does not abort the run. A bare
//! argument runs only the criteria whose title contains it.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use cdlite::accounting::{
    attention_matmul_flops, conv_flops, count_layout_params, count_params, dwsep_params, edm_preprocess_params,
    encoder_block_params, estimate_flops, refine_params,
};
use cdlite::attention::{self, sigmoid_attention, swsa_layout, WindowIndex};
use cdlite::autograd::{Tape, Var};
use cdlite::config::WindowSpec;
use cdlite::data::{generate, SyntheticSpec};
use cdlite::edm::difference_attention_state;
use cdlite::encoder::encode;
use cdlite::error::WeightFileError;
use cdlite::metrics::f1_to_iou;
use cdlite::model::{self, forward_logits};
use cdlite::nn::{init_store, Ctx, LayoutBuilder};
use cdlite::ops::{self, BnMode, RunningStats};
use cdlite::regions::{connected_components, region_stats, DEFAULT_FEW_THRESHOLD};
use cdlite::train::{train, Arm, TrainConfig, Trainer};
use cdlite::{Error, Model, ModelConfig, Tensor, WeightStore};
use rand::Rng;

use common::*;

/// `Ok(detail)` is a pass, `Err(analysis)` a documented shortfall.
type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("IoU implied by F1 matches the published table rows", iou_identity),
    ("convolution, windowed attention and labelling match naive oracles", oracle_equivalence),
    ("analytic gradients match central differences", gradient_suite),
    ("difference module invariants", edm_invariants),
    ("256x256 shape law for the three window presets", shape_law),
    ("toy training reaches F1 0.90 and single-sample loss decreases", toy_training),
    ("ablation flags move the parameter count in the documented direction", ablation_direction),
    ("parameter and FLOP accounting constants", accounting_constants),
    ("weight file round trip and tamper rejection", serialization),
    ("region analysis worked examples", region_examples),
];

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let (mut failed, mut short) = (0, 0);
    for (i, (title, check)) in CRITERIA.iter().enumerate() {
        if filter.as_ref().is_some_and(|f| !title.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(Ok(detail)) => println!("PASS criterion {}: {title} [{detail}] ({secs:.1}s)", i + 1),
            Ok(Err(analysis)) => {
                short += 1;
                println!("FAIL criterion {}: {title} [shortfall: {analysis}] ({secs:.1}s)", i + 1);
            }
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL criterion {}: {title} [{msg}] ({secs:.1}s)", i + 1);
            }
        }
    }
    if short > 0 {
        println!("{short} criteria fell short of their targets (measured, see notes)");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn iou_identity() -> Outcome {
    let rows = [
        ("SYSU", 83.97, 72.38),
        ("WHU", 94.81, 90.14),
        ("CDD", 97.63, 95.37),
        ("LEVIR+", 86.30, 75.90),
    ];
    let mut worst: f64 = 0.0;
    for (name, f1, iou) in rows {
        let got = 100.0 * f1_to_iou(f1 / 100.0);
        let err = (got - iou).abs();
        assert!(err <= 0.02, "{name}: F1 {f1} gives IoU {got:.4}, table says {iou}");
        worst = worst.max(err);
    }
    Ok(format!("worst deviation {worst:.4} points"))
}

fn tape_value<'t>(tape: &'t Tape<f64>, t: &Tensor<f64>) -> Var<'t, f64> {
    tape.constant(t.clone())
}

fn conv_oracle_cases() -> usize {
    let mut rng = rng(7);
    let mut cases = 0;
    for case in 0..64 {
        let depthwise = case % 2 == 1;
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let cout = if depthwise { c } else { rng.random_range(1..=5) };
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2);
        let h = rng.random_range(k.max(3)..=9);
        let w = rng.random_range(k.max(3)..=9);
        let x = random_tensor(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let wshape = [cout, if depthwise { 1 } else { c }, k, k];
        let wt = random_tensor(&mut rng, &wshape, -1.0, 1.0);
        let bias = rng.random_bool(0.5).then(|| random_tensor(&mut rng, &[cout], -1.0, 1.0));
        let tape = Tape::new();
        let (xv, wv) = (tape_value(&tape, &x), tape_value(&tape, &wt));
        let bv = bias.as_ref().map(|b| tape_value(&tape, b));
        let got = if depthwise {
            ops::depthwise_conv2d(&xv, &wv, bv.as_ref(), stride, pad)
        } else {
            ops::conv2d(&xv, &wv, bv.as_ref(), stride, pad)
        }
        .unwrap();
        let want = naive_conv(&x, &wt, bias.as_ref(), stride, pad, depthwise);
        assert_eq!(got.shape(), want.shape(), "conv case {case}: shape");
        let err = got.value().max_abs_diff(&want);
        assert!(err <= 1e-6, "conv case {case} (depthwise {depthwise}, k {k}, stride {stride}, pad {pad}): error {err:e}");
        cases += 1;
    }
    cases
}

fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn param(store: &WeightStore<f64>, name: &str) -> Tensor<f64> {
    store.get(name).unwrap_or_else(|| panic!("missing {name}")).clone()
}

/// One SWSA block with the window covering the whole map, against global
/// attention written out token by token, channel mixer included.
fn whole_map_swsa_error(full: bool) -> f64 {
    let (c, hw) = (4, 8);
    let mut b = LayoutBuilder::new();
    swsa_layout(&mut b, "blk", c, full);
    let layout = b.finish();
    let mut store = init_store(&layout, &mut rng(3)).cast::<f64>();
    randomize_params(&mut store, &layout, 4, 0.5);
    let mut r = rng(5);
    *store.get_mut("blk.bn.running_mean").unwrap() = random_tensor(&mut r, &[c], -0.5, 0.5);
    *store.get_mut("blk.bn.running_var").unwrap() = random_tensor(&mut r, &[c], 0.5, 2.0);
    let x = random_tensor(&mut r, &[1, c, hw, hw], -1.0, 1.0);

    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, &store, BnMode::Eval);
    let spec = WindowSpec::new(hw, hw).unwrap();
    let got = attention::swsa(&ctx, &tape.constant(x.clone()), spec, "blk", full).unwrap();

    let pp = if full { 0 } else { 1 };
    let proj = |name: &str| {
        naive_conv(
            &x,
            &param(&store, &format!("blk.{name}.weight")),
            Some(&param(&store, &format!("blk.{name}.bias"))),
            1,
            pp,
            !full,
        )
    };
    let (q, k, v) = (tokens_of(&proj("q")), tokens_of(&proj("k")), tokens_of(&proj("v")));
    let att = naive_sigmoid_attention(&q, &k, &v);
    let xt = tokens_of(&x);
    let g = param(&store, "blk.bn.weight");
    let beta = param(&store, "blk.bn.bias");
    let mean = param(&store, "blk.bn.running_mean");
    let var = param(&store, "blk.bn.running_var");
    let (w1, b1) = (param(&store, "blk.mlp1.weight"), param(&store, "blk.mlp1.bias"));
    let (w2, b2) = (param(&store, "blk.mlp2.weight"), param(&store, "blk.mlp2.bias"));
    let hidden = w1.shape()[0];
    let mut worst: f64 = 0.0;
    for (p, (a, xi)) in att.iter().zip(&xt).enumerate() {
        let o: Vec<f64> = a.iter().zip(xi).map(|(u, v)| u + v).collect();
        let nrm: Vec<f64> = (0..c)
            .map(|ch| (o[ch] - mean.data()[ch]) / (var.data()[ch] + 1e-5).sqrt() * g.data()[ch] + beta.data()[ch])
            .collect();
        let hid: Vec<f64> = (0..hidden)
            .map(|j| gelu_ref(b1.data()[j] + (0..c).map(|i| w1.get(&[j, i, 0, 0]) * nrm[i]).sum::<f64>()))
            .collect();
        for ch in 0..c {
            let want = o[ch] + b2.data()[ch] + (0..hidden).map(|j| w2.get(&[ch, j, 0, 0]) * hid[j]).sum::<f64>();
            worst = worst.max((got.value().get(&[0, ch, p / hw, p % hw]) - want).abs());
        }
    }
    worst
}

fn oracle_equivalence() -> Outcome {
    let cases = conv_oracle_cases();
    assert!(cases >= 50);

    let swsa_err = whole_map_swsa_error(false).max(whole_map_swsa_error(true));
    assert!(swsa_err <= 1e-10, "whole-map SWSA deviates from global attention by {swsa_err:e}");

    let mut r = rng(11);
    for m in 0..100 {
        let density = r.random_range(0.1..0.7);
        let mask: Vec<u8> = (0..32 * 32).map(|_| u8::from(r.random_bool(density))).collect();
        let labels = connected_components(&mask, 32, 32).unwrap();
        let mut parts = vec![Vec::new(); labels.count];
        for (p, &l) in labels.labels.iter().enumerate() {
            if l > 0 {
                parts[l as usize - 1].push(p);
            }
        }
        assert_eq!(parts, flood_fill_partition(&mask, 32, 32), "mask {m}: partitions differ");
    }
    Ok(format!("{cases} conv cases, SWSA error {swsa_err:.1e}, 100 masks"))
}

const DIRECTIONS: usize = 12;

fn grad_checks() -> Vec<(&'static str, f64)> {
    let c = 4;
    let mut lb = LayoutBuilder::new();
    swsa_layout(&mut lb, "s", c, false);
    attention::egsa_layout(&mut lb, "e", c, 2, false);
    let layout = lb.finish();
    let mut store = init_store(&layout, &mut rng(30)).cast::<f64>();
    randomize_params(&mut store, &layout, 31, 0.5);
    // The closures must work for every tape lifetime.
    let store: &'static WeightStore<f64> = Box::leak(Box::new(store));
    let mut r = rng(21);
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>| {
        out.push((name, gradcheck(&inputs, DIRECTIONS, out.len() as u64, f)));
    };

    let x = random_tensor(&mut r, &[2, 3, 6, 5], -1.0, 1.0);
    let w = random_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut r, &[4], -0.5, 0.5);
    check("conv2d", vec![x.clone(), w, b], &|v| ops::conv2d(&v[0], &v[1], Some(&v[2]), 2, 1).unwrap());
    let dw = random_tensor(&mut r, &[3, 1, 3, 3], -0.5, 0.5);
    let db = random_tensor(&mut r, &[3], -0.5, 0.5);
    check("depthwise_conv2d", vec![x.clone(), dw, db], &|v| {
        ops::depthwise_conv2d(&v[0], &v[1], Some(&v[2]), 1, 1).unwrap()
    });

    let gamma = random_tensor(&mut r, &[3], 0.5, 1.5);
    let beta = random_tensor(&mut r, &[3], -0.5, 0.5);
    check("batch_norm2d train", vec![x.clone(), gamma.clone(), beta.clone()], &|v| {
        let mut st = RunningStats::new(3);
        ops::batch_norm2d(&v[0], &v[1], &v[2], &mut st, BnMode::Train).unwrap()
    });
    let stats = RunningStats {
        mean: random_tensor(&mut r, &[3], -0.5, 0.5),
        var: random_tensor(&mut r, &[3], 0.5, 2.0),
    };
    check("batch_norm2d eval", vec![x.clone(), gamma, beta], &|v| {
        let mut st = stats.clone();
        ops::batch_norm2d(&v[0], &v[1], &v[2], &mut st, BnMode::Eval).unwrap()
    });

    let per_channel = random_tensor(&mut r, &[1, 3, 1, 1], -1.0, 1.0);
    let per_pixel = random_tensor(&mut r, &[2, 1, 6, 5], -1.0, 1.0);
    check("add broadcast", vec![x.clone(), per_channel.clone()], &|v| ops::add(&v[0], &v[1]).unwrap());
    check("sub broadcast", vec![per_pixel.clone(), x.clone()], &|v| ops::sub(&v[0], &v[1]).unwrap());
    check("mul broadcast", vec![x.clone(), per_pixel], &|v| ops::mul(&v[0], &v[1]).unwrap());

    let kinked = random_nonzero(&mut r, &[2, 3, 4, 4]);
    check("abs", vec![kinked.clone()], &|v| ops::abs(&v[0]));
    check("relu", vec![kinked], &|v| ops::relu(&v[0]));
    check("sigmoid", vec![x.clone()], &|v| ops::sigmoid(&v[0]));
    check("gelu", vec![x.clone()], &|v| ops::gelu(&v[0]));
    check("scale", vec![x.clone()], &|v| ops::scale(&v[0], -1.7));

    let a = random_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let bm = random_tensor(&mut r, &[2, 4, 5], -1.0, 1.0);
    let bt = random_tensor(&mut r, &[2, 5, 4], -1.0, 1.0);
    check("matmul", vec![a.clone(), bm], &|v| ops::matmul(&v[0], &v[1]).unwrap());
    check("matmul_nt", vec![a, bt], &|v| ops::matmul_nt(&v[0], &v[1]).unwrap());

    check("to_tokens", vec![x.clone()], &|v| ops::to_tokens(&v[0]).unwrap());
    let toks = random_tensor(&mut r, &[2, 30, 3], -1.0, 1.0);
    check("from_tokens", vec![toks], &|v| ops::from_tokens(&v[0], 6, 5).unwrap());
    let small = random_tensor(&mut r, &[1, 2, 3, 4], -1.0, 1.0);
    check("bilinear_upsample x2", vec![small.clone()], &|v| ops::bilinear_upsample(&v[0], 2).unwrap());
    check("bilinear_upsample x4", vec![small], &|v| ops::bilinear_upsample(&v[0], 4).unwrap());
    check("global_avg_pool", vec![x.clone()], &|v| ops::global_avg_pool(&v[0]).unwrap());
    check("sum_channels", vec![x.clone()], &|v| ops::sum_channels(&v[0]).unwrap());
    check("reshape", vec![x.clone()], &|v| ops::reshape(&v[0], &[6, 30]).unwrap());
    check("sum", vec![x.clone()], &|v| ops::sum(&v[0]));
    check("mean", vec![x.clone()], &|v| ops::mean(&v[0]));

    let logits = random_tensor(&mut r, &[2, 1, 4, 4], -3.0, 3.0);
    let target = Tensor::from_fn(&[2, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    check("bce_with_logits", vec![logits], &|v| {
        let t = v[0].tape().constant(target.clone());
        ops::bce_with_logits(&v[0], &t).unwrap()
    });

    let sx = random_tensor(&mut r, &[2, 8, 3, 3], -1.0, 1.0);
    let w1 = random_tensor(&mut r, &[2, 8, 1, 1], -0.7, 0.7);
    let b1 = random_tensor(&mut r, &[2], 0.1, 0.5);
    let w2 = random_tensor(&mut r, &[8, 2, 1, 1], -0.7, 0.7);
    let b2 = random_tensor(&mut r, &[8], -0.5, 0.5);
    check("se_block", vec![sx, w1, b1, w2, b2], &|v| {
        ops::se_block(&v[0], (&v[1], &v[2]), (&v[3], &v[4])).unwrap()
    });

    let q = random_tensor(&mut r, &[2, 5, 4], -1.0, 1.0);
    let k = random_tensor(&mut r, &[2, 7, 4], -1.0, 1.0);
    let vv = random_tensor(&mut r, &[2, 7, 3], -1.0, 1.0);
    check("sigmoid_attention", vec![q, k, vv], &|v| sigmoid_attention(&v[0], &v[1], &v[2]).unwrap());

    // Window gathers and patch pooling, through whole blocks.
    let fx = random_tensor(&mut r, &[2, c, 4, 4], -1.0, 1.0);
    let spec = WindowSpec::new(4, 2).unwrap();
    let idx = WindowIndex::new(2, c, 4, 4, spec).unwrap();
    assert!(idx.keys.iter().any(|&i| i as usize >= fx.numel()), "windows must reach into the padding");
    check("swsa block (overlapping windows)", vec![fx.clone()], &|v| {
        let ctx = Ctx::inference(v[0].tape(), store, BnMode::Train);
        attention::swsa(&ctx, &v[0], spec, "s", false).unwrap()
    });
    check("egsa block", vec![fx], &|v| {
        let ctx = Ctx::inference(v[0].tape(), store, BnMode::Train);
        attention::egsa(&ctx, &v[0], 2, "e", false).unwrap()
    });
    out
}

/// Small four-level-deep configuration for a 32×32 input.
fn gradcheck_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.encoder.stem_channels = 8;
    cfg.encoder.stage_depths = vec![1, 1, 2];
    cfg.c_d = 8;
    cfg.decoder.window_specs = vec![
        WindowSpec::new(3, 1).unwrap(),
        WindowSpec::new(4, 2).unwrap(),
        WindowSpec::new(6, 2).unwrap(),
    ];
    cfg.validate().unwrap();
    cfg
}

fn gradient_suite() -> Outcome {
    let checks = grad_checks();
    for (name, err) in &checks {
        assert!(*err <= FD_TOL, "{name}: relative error {err:e}");
    }
    let cfg = gradcheck_config();
    let layout = model::layout(&cfg);
    let mut store = model::init_weights(&cfg, 1).unwrap().cast::<f64>();
    randomize_params(&mut store, &layout, 2, 0.1);
    let mut r = rng(3);
    // Running statistics on the single-sample input; batch statistics need
    // two samples, since one sample leaves only 2×2 pixels per channel at
    // the deepest level and the normalization is then ill-conditioned.
    let mut model_err: f64 = 0.0;
    for (n, mode) in [(1, BnMode::Eval), (2, BnMode::Train)] {
        let t1 = random_tensor(&mut r, &[n, 3, 32, 32], 0.0, 1.0);
        let t2 = random_tensor(&mut r, &[n, 3, 32, 32], 0.0, 1.0);
        let err = model_gradcheck(&cfg, &store, &t1, &t2, mode, DIRECTIONS, 4);
        assert!(err <= FD_TOL, "composed model ({mode:?}, batch {n}): relative error {err:e}");
        model_err = model_err.max(err);
    }
    let worst = checks.iter().map(|c| c.1).fold(model_err, f64::max);
    Ok(format!(
        "{} primitives + composed model, {DIRECTIONS} directions each, worst {worst:.1e}",
        checks.len()
    ))
}

fn edm_invariants() -> Outcome {
    let cfg = ModelConfig::toy();
    let m = Model::<f32>::init(cfg.clone(), 42).unwrap().cast::<f64>();
    let mut r = rng(40);
    let t = random_tensor(&mut r, &[2, 3, 64, 64], 0.0, 1.0);
    let same = m.forward(&t, &t).unwrap();
    assert!(same.probabilities.data().iter().all(|&p| p == 0.5), "forward(T,T) is not 0.5 everywhere");
    assert!(same.binary.data().iter().all(|&b| b == 0.0), "forward(T,T) marks changes");

    let layout = model::layout(&cfg);
    let mut store = m.weights().clone();
    randomize_params(&mut store, &layout, 41, 0.3);
    let m = Model::new(cfg, store).unwrap();
    let t2 = random_tensor(&mut r, &[2, 3, 64, 64], 0.0, 1.0);
    let ab = m.forward(&t, &t2).unwrap();
    let ba = m.forward(&t2, &t).unwrap();
    assert!(ab.logits.data() == ba.logits.data(), "swapping temporals changes the logits");

    // Identity query/key projection, K = αQ at a single pixel.
    let d = 4;
    let mut b = LayoutBuilder::new();
    b.conv("edm.qk", d, d, 1);
    b.conv_nobias("edm.value", d, d, 1);
    let mut store = init_store(&b.finish(), &mut rng(42)).cast::<f64>();
    *store.get_mut("edm.qk.weight").unwrap() =
        Tensor::from_fn(&[d, d, 1, 1], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let q = Tensor::new(&[1, d, 1, 1], vec![0.3, -0.8, 0.5, 0.2]).unwrap();
    let qq: f64 = q.data().iter().map(|v| v * v).sum();
    let mut prev = f64::INFINITY;
    for alpha in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store, BnMode::Eval);
        let k = q.map(|v| alpha * v);
        let st = difference_attention_state(&ctx, &tape.constant(q.clone()), &tape.constant(k), "edm").unwrap();
        let mp = st.m_prime.value().data()[0];
        let want = 1.0 / (1.0 + (alpha * qq / (d as f64).sqrt()).exp());
        assert!((mp - want).abs() <= 1e-15, "alpha {alpha}: M' {mp} vs {want}");
        assert!(mp > 0.0 && mp < 1.0 && mp < prev, "M' not strictly decreasing at alpha {alpha}");
        prev = mp;
    }
    Ok("T,T -> 0.5, exact swap symmetry, 5-point mask sweep".to_string())
}

fn shape_law() -> Outcome {
    for name in ["sysu", "whu", "levir_plus"] {
        let cfg = ModelConfig::preset(name).unwrap();
        cfg.validate().unwrap();
        cfg.validate_input(256, 256).unwrap();
        let m = Model::<f32>::init(cfg.clone(), 42).unwrap();
        let mut r = rng(50);
        let t1 = Tensor::<f32>::uniform(&[1, 3, 256, 256], 0.0, 1.0, &mut r);
        let t2 = Tensor::<f32>::uniform(&[1, 3, 256, 256], 0.0, 1.0, &mut r);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, m.weights(), BnMode::Eval);
        let feats = encode(&ctx, &tape.constant(t1.clone()), &cfg).unwrap();
        let sides: Vec<usize> = feats.iter().map(|f| f.shape()[2]).collect();
        assert_eq!(sides, [64, 32, 16], "{name}: stage sizes");
        let logits = forward_logits(&ctx, &tape.constant(t1), &tape.constant(t2), &cfg).unwrap();
        assert_eq!(logits.shape(), [1, 1, 256, 256], "{name}: output shape");
        assert!(logits.value().all_finite(), "{name}: non-finite output");
    }
    Ok("sysu/cdd, whu, levir_plus: 64/32/16 -> 256x256".to_string())
}

/// Batch size used for the toy acceptance run.
const TOY_BATCH: usize = 8;

fn toy_training() -> Outcome {
    let cfg = ModelConfig::toy();
    let base = TrainConfig::default();
    let data = generate(&SyntheticSpec::default()).unwrap();

    let tc = TrainConfig {
        batch_size: TOY_BATCH,
        target_f1: Some(0.90),
        ..base.clone()
    };
    let outcome = train(&cfg, &tc, &data, |_| {}).unwrap();
    let best = outcome.best_val_f1();
    let epochs = outcome.trace.len();
    assert!(best >= 0.90, "best validation F1 {best:.4} after {epochs} epochs");
    let trained = format!("val F1 {best:.4} after {epochs} epochs (batch {TOY_BATCH})");

    let (t1, t2, gt) = data.batch::<f32>(&[0]);
    let mut trainer = Trainer::new(cfg.clone(), model::init_weights(&cfg, base.seed).unwrap(), &base).unwrap();
    let losses: Vec<f64> = (0..11).map(|_| trainer.step(&t1, &t2, &gt).unwrap()).collect();
    let shown: Vec<String> = losses.iter().map(|l| format!("{l:.3}")).collect();
    match losses.windows(2).position(|w| w[1] >= w[0]) {
        None => Ok(format!("{trained}; overfit losses {}", shown.join(" "))),
        Some(i) => Err(format!(
            "{trained}; single-sample loss at lr {} rose at step {}: {}",
            base.learning_rate,
            i + 1,
            shown.join(" ")
        )),
    }
}

fn ablation_direction() -> Outcome {
    let mut lines = Vec::new();
    for (label, base) in [("toy", ModelConfig::toy()), ("sysu", ModelConfig::sysu())] {
        let full = count_params(&base).total;
        for arm in [Arm::NoDpConv, Arm::FourStages] {
            let n = count_params(&arm.apply(&base)).total;
            assert!(n > full, "{label} {arm:?}: {n} is not above {full}");
        }
        for arm in [Arm::NoEdm, Arm::NoSwsa, Arm::NoEgsa] {
            let n = count_params(&arm.apply(&base)).total;
            assert!(n < full, "{label} {arm:?}: {n} is not below {full}");
        }
        lines.push(format!("{label} full {full}"));
    }
    Ok(lines.join(", "))
}

fn accounting_constants() -> Outcome {
    assert_eq!(encoder_block_params(8, false), 240);
    assert_eq!(dwsep_params(8), 152);
    assert_eq!(refine_params(16), 464);
    // 320 + 1056 + 552 + 528 + 64; the squeeze-excitation term is
    // 32·8+8 + 8·32+32 = 552.
    assert_eq!(edm_preprocess_params(32, 16), 2520);

    let toy = ModelConfig::toy();
    let report = count_params(&toy);
    assert_eq!(report.total, 76092);
    let layout = model::layout(&toy);
    assert_eq!(count_layout_params(&layout), report);
    assert_eq!(model::init_weights(&toy, 0).unwrap().num_params(), report.total);
    assert_eq!(count_layout_params(&[]).total, 0);

    assert_eq!(conv_flops(4, 4, 1, 2, 2, false), 128);
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::ones(&[1, 4, 2, 2]));
    let w = tape.constant(Tensor::<f64>::ones(&[4, 4, 1, 1]));
    let b = tape.constant(Tensor::<f64>::ones(&[4]));
    ops::conv2d(&x, &w, Some(&b), 1, 0).unwrap();
    assert_eq!(tape.flops().conv, 128);

    assert_eq!(attention_matmul_flops(4, 4, 4), 256);
    let tape = Tape::new();
    let t = tape.constant(Tensor::<f64>::ones(&[1, 4, 4]));
    sigmoid_attention(&t, &t, &t).unwrap();
    assert_eq!(tape.flops().attention, 256);

    for (cin, cout, k, dw) in [(3, 8, 3, false), (16, 16, 3, true), (32, 16, 1, false)] {
        assert_eq!(conv_flops(cin, cout, k, 32, 32, dw), 4 * conv_flops(cin, cout, k, 16, 16, dw));
    }
    let small = estimate_flops(&toy, 1, 64, 64).unwrap();
    let large = estimate_flops(&toy, 1, 128, 128).unwrap();
    let ratio = large.conv as f64 / small.conv as f64;
    assert!((3.99..=4.0).contains(&ratio), "conv FLOP ratio {ratio}");
    assert!(large.total() > small.total());
    Ok(format!("toy total 76092, toy 64x64 {} FLOPs", small.total()))
}

fn serialization() -> Outcome {
    let cfg = ModelConfig::toy();
    let layout = model::layout(&cfg);
    let store = model::init_weights(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.fkcd"), dir.path().join("b.fkcd"));
    cdlite::save_weights(&store, &a).unwrap();
    let loaded = cdlite::weights::load_weights_for(&a, &layout).unwrap();
    cdlite::save_weights(&loaded, &b).unwrap();
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(ba == bb, "re-saved file differs");
    let empty = WeightStore::<f32>::new();
    assert!(WeightStore::from_bytes(&empty.to_bytes()).unwrap().is_empty());

    let mut bad = ba.clone();
    let needle = b"[8,3,3,3]";
    let at = bad.windows(needle.len()).position(|w| w == needle).expect("stem kernel in header");
    bad[at..at + needle.len()].copy_from_slice(b"[3,8,3,3]");
    let tampered = dir.path().join("t.fkcd");
    std::fs::write(&tampered, &bad).unwrap();
    match cdlite::weights::load_weights_for(&tampered, &layout) {
        Err(Error::Weights(WeightFileError::ShapeMismatch { name, .. })) => {
            assert_eq!(name, "encoder.stem.conv1.weight");
        }
        other => panic!("tampered header gave {other:?}"),
    }
    let mut magic = ba.clone();
    magic[0] = b'X';
    assert!(matches!(WeightStore::from_bytes(&magic), Err(WeightFileError::BadMagic { .. })));
    assert!(matches!(
        WeightStore::from_bytes(&ba[..ba.len() - 3]),
        Err(WeightFileError::Truncated { .. })
    ));
    Ok(format!("{} bytes byte-identical, tamper -> ShapeMismatch", ba.len()))
}

fn region_examples() -> Outcome {
    let square = |w: usize, h: usize, y0: usize, x0: usize, side: usize| {
        let mut m = vec![0u8; w * h];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m[y * w + x] = 1;
            }
        }
        m
    };
    let s = region_stats(&square(10, 10, 3, 2, 4), 10, 10, DEFAULT_FEW_THRESHOLD).unwrap();
    assert_eq!(s.region_count, 1);
    assert_eq!((s.regions[0].area, s.regions[0].perimeter, s.regions[0].complexity), (16, 16, 1.0));
    let s = region_stats(&square(10, 10, 5, 5, 1), 10, 10, DEFAULT_FEW_THRESHOLD).unwrap();
    assert_eq!((s.regions[0].area, s.regions[0].perimeter, s.regions[0].complexity), (1, 4, 4.0));
    let s = region_stats(&[1u8; 100], 10, 10, DEFAULT_FEW_THRESHOLD).unwrap();
    assert_eq!(s.area_ratio, 1.0);
    assert_eq!((s.regions[0].area, s.regions[0].perimeter, s.regions[0].complexity), (100, 40, 0.4));
    Ok("square, pixel, full frame".to_string())
}
