//! Bottom-up fusion of the difference pyramid into a full-resolution map.
//!
//! The deepest level goes through an LGFB. Each shallower level is fused by
//! `refine(up2(x) + D_j)`, followed by an EGSA with the level's patch size
//! and then the level's LGFB. A bias-free 1×1 head produces one logit per
//! pixel at `H/4`, upsampled ×4 before the sigmoid.

use crate::attention::{self, LgfbOptions};
use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayoutBuilder};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Upsampling factor from level-1 resolution to the input.
pub const HEAD_UPSAMPLE: usize = 4;

pub(crate) fn lgfb_options(cfg: &ModelConfig) -> LgfbOptions {
    LgfbOptions {
        use_swsa: cfg.use_swsa,
        use_egsa: cfg.use_egsa,
        full_projections: cfg.full_projections,
    }
}

pub fn refine_layout(b: &mut LayoutBuilder, prefix: &str, c: usize) {
    b.dwconv(&format!("{prefix}.dw"), c, 3);
    b.conv(&format!("{prefix}.pw"), c, c, 1);
    b.bn(&format!("{prefix}.bn"), c);
}

pub fn layout(b: &mut LayoutBuilder, cfg: &ModelConfig) {
    let c = cfg.c_d;
    let opts = lgfb_options(cfg);
    for j in (1..=cfg.num_stages()).rev() {
        let p = format!("decoder.level{j}");
        let spec = cfg.window_for_level(j);
        if j < cfg.num_stages() {
            refine_layout(b, &format!("{p}.fuse"), c);
            if cfg.use_egsa {
                attention::egsa_layout(b, &format!("{p}.egsa"), c, spec.stride(), cfg.full_projections);
            }
        }
        attention::lgfb_layout(b, &format!("{p}.lgfb"), c, spec, opts);
    }
    b.conv_nobias("decoder.head", c, 1, 1);
}

/// `x + gelu(bn(pw(dw(x))))`.
pub fn dwsep_refine<'t, F: Scalar>(ctx: &Ctx<'t, F>, x: &Var<'t, F>, prefix: &str) -> Result<Var<'t, F>> {
    let t = ctx.dwconv(x, &format!("{prefix}.dw"), 1, 1)?;
    let t = ctx.conv(&t, &format!("{prefix}.pw"), 1, 0)?;
    let t = ops::gelu(&ctx.bn(&t, &format!("{prefix}.bn"))?);
    ops::add(x, &t)
}

/// Full-resolution change logits `N×1×H×W` from a pyramid listed shallowest
/// level first.
pub fn decode<'t, F: Scalar>(ctx: &Ctx<'t, F>, pyramid: &[Var<'t, F>], cfg: &ModelConfig) -> Result<Var<'t, F>> {
    let levels = cfg.num_stages();
    if pyramid.len() != levels {
        return Err(Error::Shape(format!(
            "decoder expects {levels} difference maps, got {}",
            pyramid.len()
        )));
    }
    let [n, c, h1, w1] = pyramid[0].value().dims4()?;
    if c != cfg.c_d {
        return Err(Error::Shape(format!("difference maps must have {} channels, got {c}", cfg.c_d)));
    }
    for (i, d) in pyramid.iter().enumerate() {
        let expect = [n, c, h1 >> i, w1 >> i];
        if d.shape() != expect || (h1 >> i) << i != h1 || (w1 >> i) << i != w1 {
            return Err(Error::Shape(format!(
                "difference map {} has shape {:?}, expected {expect:?}",
                i + 1,
                d.shape()
            )));
        }
    }
    let opts = lgfb_options(cfg);
    let mut x = attention::lgfb(
        ctx,
        &pyramid[levels - 1],
        cfg.window_for_level(levels),
        &format!("decoder.level{levels}.lgfb"),
        opts,
    )?;
    for j in (1..levels).rev() {
        let p = format!("decoder.level{j}");
        let spec = cfg.window_for_level(j);
        let up = ops::bilinear_upsample(&x, 2)?;
        x = dwsep_refine(ctx, &ops::add(&up, &pyramid[j - 1])?, &format!("{p}.fuse"))?;
        if cfg.use_egsa {
            x = attention::egsa(ctx, &x, spec.stride(), &format!("{p}.egsa"), cfg.full_projections)?;
        }
        x = attention::lgfb(ctx, &x, spec, &format!("{p}.lgfb"), opts)?;
    }
    let logits = ctx.conv_nobias(&x, "decoder.head", 1, 0)?;
    ops::bilinear_upsample(&logits, HEAD_UPSAMPLE)
}

/// Thresholded output of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap<F: Scalar> {
    pub logits: Tensor<F>,
    /// `sigmoid(logits)`, `N×1×H×W`.
    pub probabilities: Tensor<F>,
    /// `1` where the probability exceeds the threshold, else `0`.
    pub binary: Tensor<F>,
    pub threshold: f64,
}

impl<F: Scalar> ChangeMap<F> {
    pub fn from_logits(logits: Tensor<F>, threshold: f64) -> Self {
        let probabilities = logits.map(crate::autograd::sigmoid);
        let binary = binarize(&probabilities, threshold);
        Self {
            logits,
            probabilities,
            binary,
            threshold,
        }
    }

    /// Binary mask of sample `n` as `0/1` bytes, row-major.
    pub fn mask(&self, n: usize) -> Vec<u8> {
        let [_, _, h, w] = self.binary.dims4().expect("change maps are 4-d");
        self.binary.data()[n * h * w..(n + 1) * h * w]
            .iter()
            .map(|&v| u8::from(v > F::zero()))
            .collect()
    }

    /// Probability map of sample `n` quantized to `0..=255`.
    pub fn probability_bytes(&self, n: usize) -> Vec<u8> {
        let [_, _, h, w] = self.probabilities.dims4().expect("change maps are 4-d");
        self.probabilities.data()[n * h * w..(n + 1) * h * w]
            .iter()
            .map(|&p| (p.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Strict `p > threshold`.
pub fn binarize<F: Scalar>(probabilities: &Tensor<F>, threshold: f64) -> Tensor<F> {
    let t = F::from_f64(threshold);
    probabilities.map(|p| if p > t { F::one() } else { F::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::init_store;
    use crate::ops::BnMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> crate::weights::WeightStore<f64> {
        let mut b = LayoutBuilder::new();
        layout(&mut b, cfg);
        init_store(&b.finish(), &mut ChaCha8Rng::seed_from_u64(7)).cast()
    }

    #[test]
    fn zero_pyramid_decodes_to_half() {
        let cfg = ModelConfig::toy();
        let s = setup(&cfg);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &s, BnMode::Eval);
        let pyr: Vec<_> = (0..3)
            .map(|i| tape.constant(Tensor::zeros(&[1, cfg.c_d, 16 >> i, 16 >> i])))
            .collect();
        let logits = decode(&ctx, &pyr, &cfg).unwrap();
        assert_eq!(logits.shape(), [1, 1, 64, 64]);
        let map = ChangeMap::from_logits(logits.value().clone(), 0.5);
        assert!(map.probabilities.data().iter().all(|&p| p == 0.5));
        assert!(map.binary.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn refine_with_zero_pointwise_is_identity() {
        let mut b = LayoutBuilder::new();
        refine_layout(&mut b, "r", 4);
        let mut s = init_store(&b.finish(), &mut ChaCha8Rng::seed_from_u64(8)).cast::<f64>();
        s.get_mut("r.pw.weight").unwrap().data_mut().fill(0.0);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[1, 4, 3, 3], |_| r.random_range(-1.0..1.0));
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &s, BnMode::Eval);
        // gelu(bn(0)) = gelu(0) = 0 with zero bias and unit running stats.
        let y = dwsep_refine(&ctx, &tape.constant(x.clone()), "r").unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn binarize_is_strict_and_monotone() {
        let p = Tensor::<f64>::from_fn(&[1, 1, 1, 11], |i| i as f64 / 10.0);
        assert_eq!(binarize(&p, 0.5).data().iter().sum::<f64>(), 5.0);
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let on = binarize(&p, k as f64 / 10.0).data().iter().sum::<f64>();
            assert!(on <= prev);
            prev = on;
        }
    }

    #[test]
    fn wrong_pyramid_rejected() {
        let cfg = ModelConfig::toy();
        let s = setup(&cfg);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &s, BnMode::Eval);
        let two: Vec<_> = (0..2)
            .map(|i| tape.constant(Tensor::zeros(&[1, cfg.c_d, 16 >> i, 16 >> i])))
            .collect();
        assert!(decode(&ctx, &two, &cfg).is_err());
        let bad: Vec<_> = [16, 8, 8]
            .iter()
            .map(|&h| tape.constant(Tensor::zeros(&[1, cfg.c_d, h, h])))
            .collect();
        assert!(decode(&ctx, &bad, &cfg).is_err());
    }
}
