//! Named-parameter plumbing shared by every network component.
//!
//! Components describe their weights twice, side by side: once through a
//! [`LayoutBuilder`] (names and shapes, used for initialization, counting and
//! file validation) and once through a [`Ctx`] (lookup by name during the
//! forward pass).

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, BnMode, RunningStats};
use crate::tensor::{Scalar, Tensor};
use crate::weights::WeightStore;

/// SE bottleneck ratio.
pub const SE_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable weight.
    Param,
    /// Running normalization statistic.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
    /// Fan-in for initialization; zero for biases and normalization.
    pub fan_in: usize,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    FanIn,
    Zeros,
    Ones,
}

impl LayoutEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects the ordered list of named tensors a component needs.
#[derive(Default, Debug, Clone)]
pub struct LayoutBuilder {
    entries: Vec<LayoutEntry>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> Vec<LayoutEntry> {
        self.entries
    }

    fn push(&mut self, name: String, shape: Vec<usize>, kind: EntryKind, fan_in: usize, init: Init) {
        self.entries.push(LayoutEntry {
            name,
            shape,
            kind,
            fan_in,
            init,
        });
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.conv_nobias(prefix, cin, cout, k);
        self.push(format!("{prefix}.bias"), vec![cout], EntryKind::Param, 0, Init::Zeros);
    }

    pub fn conv_nobias(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.push(
            format!("{prefix}.weight"),
            vec![cout, cin, k, k],
            EntryKind::Param,
            cin * k * k,
            Init::FanIn,
        );
    }

    pub fn dwconv(&mut self, prefix: &str, c: usize, k: usize) {
        self.push(format!("{prefix}.weight"), vec![c, 1, k, k], EntryKind::Param, k * k, Init::FanIn);
        self.push(format!("{prefix}.bias"), vec![c], EntryKind::Param, 0, Init::Zeros);
    }

    pub fn bn(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.weight"), vec![c], EntryKind::Param, 0, Init::Ones);
        self.push(format!("{prefix}.bias"), vec![c], EntryKind::Param, 0, Init::Zeros);
        self.push(format!("{prefix}.running_mean"), vec![c], EntryKind::Buffer, 0, Init::Zeros);
        self.push(format!("{prefix}.running_var"), vec![c], EntryKind::Buffer, 0, Init::Ones);
    }

    /// Starts the kernel at `{prefix}.weight` from zero.
    pub fn zero_weight(&mut self, prefix: &str) {
        let name = format!("{prefix}.weight");
        if let Some(e) = self.entries.iter_mut().find(|e| e.name == name) {
            e.init = Init::Zeros;
        }
    }

    pub fn se(&mut self, prefix: &str, c: usize) {
        let hidden = (c / SE_RATIO).max(1);
        self.conv(&format!("{prefix}.reduce"), c, hidden, 1);
        self.conv(&format!("{prefix}.expand"), hidden, c, 1);
    }
}

/// Whether a stored tensor name refers to a running statistic.
pub fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Fresh weights for a layout: fan-in uniform for kernels, zero biases,
/// unit normalization scales.
pub fn init_store<R: Rng + ?Sized>(layout: &[LayoutEntry], rng: &mut R) -> WeightStore {
    let mut store = WeightStore::new();
    for e in layout {
        let t = match e.init {
            Init::Zeros => Tensor::zeros(&e.shape),
            Init::Ones => Tensor::ones(&e.shape),
            Init::FanIn => {
                let bound = 1.0 / (e.fan_in.max(1) as f64).sqrt();
                Tensor::uniform(&e.shape, -bound, bound, rng)
            }
        };
        store
            .insert(e.name.clone(), t)
            .expect("layout names are unique");
    }
    store
}

/// Forward-pass context: resolves parameter names to tape values and
/// collects running-statistic updates.
pub struct Ctx<'t, F: Scalar> {
    tape: &'t Tape<F>,
    weights: &'t WeightStore<F>,
    mode: BnMode,
    track: bool,
    vars: RefCell<HashMap<String, Var<'t, F>>>,
    stats: RefCell<IndexMap<String, RunningStats<F>>>,
}

impl<'t, F: Scalar> Ctx<'t, F> {
    /// Weights become constants; nothing is recorded.
    pub fn inference(tape: &'t Tape<F>, weights: &'t WeightStore<F>, mode: BnMode) -> Self {
        Self::new(tape, weights, mode, false)
    }

    /// Weights become tracked leaves.
    pub fn training(tape: &'t Tape<F>, weights: &'t WeightStore<F>, mode: BnMode) -> Self {
        Self::new(tape, weights, mode, true)
    }

    fn new(tape: &'t Tape<F>, weights: &'t WeightStore<F>, mode: BnMode, track: bool) -> Self {
        Self {
            tape,
            weights,
            mode,
            track,
            vars: RefCell::new(HashMap::new()),
            stats: RefCell::new(IndexMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, F>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self
            .weights
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing weight `{name}`")))?
            .clone();
        let v = if self.track {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn conv(&self, x: &Var<'t, F>, prefix: &str, stride: usize, pad: usize) -> Result<Var<'t, F>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        ops::conv2d(x, &w, Some(&b), stride, pad)
    }

    pub fn conv_nobias(&self, x: &Var<'t, F>, prefix: &str, stride: usize, pad: usize) -> Result<Var<'t, F>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        ops::conv2d(x, &w, None, stride, pad)
    }

    pub fn dwconv(&self, x: &Var<'t, F>, prefix: &str, stride: usize, pad: usize) -> Result<Var<'t, F>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        ops::depthwise_conv2d(x, &w, Some(&b), stride, pad)
    }

    pub fn bn(&self, x: &Var<'t, F>, prefix: &str) -> Result<Var<'t, F>> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let mut stats = self.current_stats(prefix)?;
        let y = ops::batch_norm2d(x, &gamma, &beta, &mut stats, self.mode)?;
        if self.mode == BnMode::Train {
            self.stats.borrow_mut().insert(prefix.to_string(), stats);
        }
        Ok(y)
    }

    fn current_stats(&self, prefix: &str) -> Result<RunningStats<F>> {
        if let Some(s) = self.stats.borrow().get(prefix) {
            return Ok(s.clone());
        }
        let get = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            self.weights
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))
        };
        Ok(RunningStats {
            mean: get("running_mean")?,
            var: get("running_var")?,
        })
    }

    pub fn se(&self, x: &Var<'t, F>, prefix: &str) -> Result<Var<'t, F>> {
        let p = |s: &str| self.param(&format!("{prefix}.{s}"));
        ops::se_block(
            x,
            (&p("reduce.weight")?, &p("reduce.bias")?),
            (&p("expand.weight")?, &p("expand.bias")?),
        )
    }

    /// Gradients of every parameter touched so far, by name.
    pub fn param_grads(&self, grads: &Gradients<F>) -> IndexMap<String, Tensor<F>> {
        let vars = self.vars.borrow();
        let mut names: Vec<&String> = vars.keys().collect();
        names.sort();
        names
            .into_iter()
            .filter_map(|n| grads.get(&vars[n]).map(|g| (n.clone(), g.clone())))
            .collect()
    }

    /// Names of every parameter looked up so far.
    pub fn touched(&self) -> Vec<String> {
        let mut v: Vec<String> = self.vars.borrow().keys().cloned().collect();
        v.sort();
        v
    }

    /// Running statistics updated during a train-mode pass.
    pub fn take_stats(&self) -> IndexMap<String, RunningStats<F>> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }
}
