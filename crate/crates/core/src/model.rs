//! Full change-detection network: shared encoder, per-stage difference
//! modules, hierarchical decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::{self, ChangeMap};
use crate::edm;
use crate::encoder;
use crate::error::{Error, Result};
use crate::nn::{init_store, Ctx, LayoutBuilder, LayoutEntry};
use crate::ops::BnMode;
use crate::tensor::{Scalar, Tensor};
use crate::weights::WeightStore;

/// Every named tensor the configuration needs, in storage order.
pub fn layout(cfg: &ModelConfig) -> Vec<LayoutEntry> {
    let mut b = LayoutBuilder::new();
    encoder::layout(&mut b, cfg);
    for j in 1..=cfg.num_stages() {
        edm::layout(&mut b, &format!("edm{j}"), cfg.stage_channels(j), cfg.c_d, cfg.use_edm);
    }
    decoder::layout(&mut b, cfg);
    b.finish()
}

/// Fresh seeded weights.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<WeightStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_store(&layout(cfg), &mut rng))
}

/// Difference pyramid `D_1..D_n`, shallowest first.
pub fn difference_pyramid<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    t1: &Var<'t, F>,
    t2: &Var<'t, F>,
    cfg: &ModelConfig,
) -> Result<Vec<Var<'t, F>>> {
    if t1.shape() != t2.shape() {
        return Err(Error::Input(format!(
            "temporal images differ in shape: {:?} vs {:?}",
            t1.shape(),
            t2.shape()
        )));
    }
    let f1 = encoder::encode(ctx, t1, cfg)?;
    let f2 = encoder::encode(ctx, t2, cfg)?;
    f1.iter()
        .zip(&f2)
        .enumerate()
        .map(|(i, (a, b))| edm::edm(ctx, a, b, &format!("edm{}", i + 1), cfg.use_edm))
        .collect()
}

/// Full-resolution logits `N×1×H×W`.
pub fn forward_logits<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    t1: &Var<'t, F>,
    t2: &Var<'t, F>,
    cfg: &ModelConfig,
) -> Result<Var<'t, F>> {
    let [_, _, h, w] = t1.value().dims4()?;
    cfg.validate_input(h, w)?;
    let pyramid = difference_pyramid(ctx, t1, t2, cfg)?;
    decoder::decode(ctx, &pyramid, cfg)
}

/// Configuration plus weights at one precision.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar = f32> {
    config: ModelConfig,
    weights: WeightStore<F>,
}

impl<F: Scalar> Model<F> {
    /// Pairs a configuration with weights, checking names and shapes.
    pub fn new(config: ModelConfig, weights: WeightStore<F>) -> Result<Self> {
        config.validate()?;
        weights.validate(&layout(&config))?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightStore<F> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut WeightStore<F> {
        &mut self.weights
    }

    pub fn into_weights(self) -> WeightStore<F> {
        self.weights
    }

    /// Same weights at another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
        }
    }

    /// Inference with running normalization statistics.
    pub fn forward(&self, t1: &Tensor<F>, t2: &Tensor<F>) -> Result<ChangeMap<F>> {
        self.forward_with_mode(t1, t2, BnMode::Eval)
    }

    /// Inference with an explicit normalization mode; running statistics are
    /// not written back.
    pub fn forward_with_mode(&self, t1: &Tensor<F>, t2: &Tensor<F>, mode: BnMode) -> Result<ChangeMap<F>> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.weights, mode);
        let logits = forward_logits(&ctx, &tape.constant(t1.clone()), &tape.constant(t2.clone()), &self.config)?;
        Ok(ChangeMap::from_logits(logits.value().clone(), self.config.decoder.threshold))
    }
}

impl Model<f32> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = init_weights(&config, seed)?;
        Ok(Self { config, weights })
    }
}
