//! Toy-scale training on synthetic pairs.
//!
//! Loss is mean binary cross-entropy on the full-resolution logits. The
//! optimizer is Adam with decoupled weight decay.

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::count_params;
use crate::autograd::Tape;
use crate::config::ModelConfig;
use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{confusion, Confusion, MetricReport};
use crate::model::{self, init_weights, Model};
use crate::nn::Ctx;
use crate::ops::{self, BnMode};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Samples held out for validation.
    pub val_samples: usize,
    /// Seed for weight init and batch order.
    pub seed: u64,
    /// Stop once validation F1 reaches this value.
    #[serde(default)]
    pub target_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 5e-4,
            epochs: 60,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            val_samples: 50,
            seed: 42,
            target_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(Error::Config("learning rate, decay and eps must be non-negative".into()));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas ({b1}, {b2}) must lie in [0, 1)")));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over named `f32` tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    step: i32,
    moments: IndexMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            betas,
            eps,
            weight_decay,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.learning_rate, c.betas, c.eps, c.weight_decay)
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut WeightStore, grads: &IndexMap<String, Tensor<f32>>) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            p.same_shape(g, name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gd = f64::from(gv);
                *mv = (b1 * f64::from(*mv) + (1.0 - b1) * gd) as f32;
                *vv = (b2 * f64::from(*vv) + (1.0 - b2) * gd * gd) as f32;
                let mhat = f64::from(*mv) / c1;
                let vhat = f64::from(*vv) / c2;
                let mut x = f64::from(*pv);
                if wd > 0.0 {
                    x -= lr * wd * x;
                }
                x -= lr * mhat / (vhat.sqrt() + eps);
                *pv = x as f32;
            }
        }
        Ok(())
    }
}

/// Model weights plus optimizer state.
pub struct Trainer {
    pub config: ModelConfig,
    pub weights: WeightStore,
    pub optimizer: AdamW,
}

impl Trainer {
    pub fn new(config: ModelConfig, weights: WeightStore, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        weights.validate(&model::layout(&config))?;
        Ok(Self {
            config,
            weights,
            optimizer: AdamW::from_config(train),
        })
    }

    /// Forward, backward and update on one batch; returns the loss.
    pub fn step(&mut self, t1: &Tensor<f32>, t2: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
        let (loss, grads, stats) = {
            let tape = Tape::new();
            let ctx = Ctx::training(&tape, &self.weights, BnMode::Train);
            let logits = model::forward_logits(&ctx, &tape.constant(t1.clone()), &tape.constant(t2.clone()), &self.config)?;
            let loss = ops::bce_with_logits(&logits, &tape.constant(gt.clone()))?;
            let value = f64::from(loss.value().data()[0]);
            if !value.is_finite() {
                let (tensor, context) = match tape.first_non_finite() {
                    Some((i, label)) => (format!("{label} (tape node {i})"), "forward pass".to_string()),
                    None => ("loss".to_string(), "binary cross-entropy".to_string()),
                };
                return Err(Error::NonFinite { tensor, context });
            }
            let grads = ctx.param_grads(&tape.backward(&loss)?);
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::NonFinite {
                    tensor: name.clone(),
                    context: "parameter gradient".into(),
                });
            }
            (value, grads, ctx.take_stats())
        };
        self.optimizer.update(&mut self.weights, &grads)?;
        for (prefix, s) in stats {
            for (suffix, t) in [("running_mean", s.mean), ("running_var", s.var)] {
                let name = format!("{prefix}.{suffix}");
                *self
                    .weights
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))? = t;
            }
        }
        Ok(loss)
    }

    /// Confusion counts of the current weights on `indices`, evaluated with
    /// running statistics.
    pub fn evaluate(&self, data: &Dataset, indices: &[usize], batch: usize) -> Result<Confusion> {
        let m = Model::new(self.config.clone(), self.weights.clone())?;
        evaluate(&m, data, indices, batch)
    }
}

/// Micro-averaged confusion of a model over dataset samples.
pub fn evaluate(m: &Model, data: &Dataset, indices: &[usize], batch: usize) -> Result<Confusion> {
    let mut total = Confusion::default();
    for chunk in indices.chunks(batch.max(1)) {
        let (t1, t2, _) = data.batch::<f32>(chunk);
        let out = m.forward(&t1, &t2)?;
        for (k, &i) in chunk.iter().enumerate() {
            total += confusion(&out.mask(k), &data.samples[i].gt)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val: MetricReport,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: WeightStore,
    pub trace: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_val_f1(&self) -> f64 {
        self.trace.iter().map(|r| r.val_f1).fold(0.0, f64::max)
    }

    pub fn final_val_f1(&self) -> f64 {
        self.trace.last().map_or(0.0, |r| r.val_f1)
    }
}

/// Trains from seeded initial weights; `progress` sees every epoch record.
pub fn train(
    config: &ModelConfig,
    tc: &TrainConfig,
    data: &Dataset,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let [h, w] = [data.spec.image_size.0, data.spec.image_size.1];
    config.validate_input(h, w)?;
    let (mut order, val) = data.split(tc.val_samples)?;
    let mut trainer = Trainer::new(config.clone(), init_weights(config, tc.seed)?, tc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut trace = Vec::new();
    for epoch in 1..=tc.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(tc.batch_size) {
            let (t1, t2, gt) = data.batch::<f32>(chunk);
            loss_sum += trainer.step(&t1, &t2, &gt)? * chunk.len() as f64;
            seen += chunk.len();
        }
        let report = MetricReport::from(trainer.evaluate(data, &val, tc.batch_size)?);
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_f1: report.metrics.f1,
            val: report,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&rec);
        trace.push(rec);
        if tc.target_f1.is_some_and(|t| report.metrics.f1 >= t) {
            break;
        }
    }
    Ok(TrainOutcome {
        weights: trainer.weights,
        trace,
    })
}

/// One ablation setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    /// Plain projected absolute difference.
    NoEdm,
    NoSwsa,
    NoEgsa,
    /// Dense attention projections.
    NoDpConv,
    FourStages,
}

impl Arm {
    pub const TABLE: [Arm; 4] = [Arm::Full, Arm::NoEdm, Arm::NoSwsa, Arm::NoEgsa];

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Arm::Full => {}
            Arm::NoEdm => c.use_edm = false,
            Arm::NoSwsa => c.use_swsa = false,
            Arm::NoEgsa => c.use_egsa = false,
            Arm::NoDpConv => c.full_projections = true,
            Arm::FourStages if !c.use_four_stages => {
                c.use_four_stages = true;
                let last = *c.encoder.stage_depths.last().unwrap_or(&1);
                c.encoder.stage_depths.push(last);
                let top = c.decoder.window_specs[0];
                c.decoder.window_specs.insert(0, top);
            }
            Arm::FourStages => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub config: ModelConfig,
    pub params: usize,
    pub val_f1: f64,
    pub best_val_f1: f64,
    pub epochs_run: usize,
    pub dataset_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset_sha256: String,
    pub train: TrainConfig,
    pub rows: Vec<AblationRow>,
}

/// Trains every arm on the same dataset with the same seeds.
pub fn ablation_run(
    base: &ModelConfig,
    tc: &TrainConfig,
    spec: &SyntheticSpec,
    arms: &[Arm],
    mut progress: impl FnMut(Arm, &EpochRecord),
) -> Result<AblationReport> {
    let data = data::generate(spec)?;
    let hash = data.content_hash();
    let mut rows = Vec::new();
    for &arm in arms {
        let cfg = arm.apply(base);
        cfg.validate_input(spec.image_size.0, spec.image_size.1)?;
        let out = train(&cfg, tc, &data, |r| progress(arm, r))?;
        rows.push(AblationRow {
            arm,
            params: count_params(&cfg).total,
            val_f1: out.final_val_f1(),
            best_val_f1: out.best_val_f1(),
            epochs_run: out.trace.len(),
            dataset_sha256: hash.clone(),
            config: cfg,
        });
    }
    Ok(AblationReport {
        dataset_sha256: hash,
        train: tc.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_weights() {
        let mut store = WeightStore::new();
        store.insert("w".into(), Tensor::full(&[3], 1.5f32)).unwrap();
        let before = store.clone();
        let mut opt = AdamW::new(0.0, (0.9, 0.999), 1e-8, 0.01);
        let grads = IndexMap::from([("w".to_string(), Tensor::full(&[3], 2.0f32))]);
        for _ in 0..5 {
            opt.update(&mut store, &grads).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut store = WeightStore::new();
        store.insert("w".into(), Tensor::full(&[2], -0.25f32)).unwrap();
        let before = store.clone();
        let mut opt = AdamW::new(1e-2, (0.9, 0.999), 1e-8, 0.0);
        let grads = IndexMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        opt.update(&mut store, &grads).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = WeightStore::new();
        store.insert("w".into(), Tensor::full(&[1], 1.0f32)).unwrap();
        let mut opt = AdamW::new(0.1, (0.9, 0.999), 1e-8, 0.0);
        let grads = IndexMap::from([("w".to_string(), Tensor::full(&[1], 3.0f32))]);
        opt.update(&mut store, &grads).unwrap();
        assert!((store.get("w").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn arms_change_only_flags() {
        let base = ModelConfig::toy();
        assert_eq!(Arm::Full.apply(&base), base);
        assert!(!Arm::NoEdm.apply(&base).use_edm);
        let four = Arm::FourStages.apply(&base);
        assert!(four.validate().is_ok());
        assert_eq!(four.num_stages(), 4);
    }
}
