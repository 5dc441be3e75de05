//! Browser demo over the change detector.
//!
//! Three operations back the page: generate a seeded synthetic pair,
//! detect changes with the toy model (fresh or uploaded weights), and
//! summarize the regions of a mask. [`Demo`] holds the state in plain Rust
//! so it runs natively under test; the `wasm_bindgen` wrappers only convert
//! errors to JS values.

use cdlite::data::{generate_sample, Sample, SyntheticSpec};
use cdlite::imageio::Image;
use cdlite::metrics::{confusion, diff_map, render_diff, MetricReport};
use cdlite::model::layout;
use cdlite::regions::region_stats;
use cdlite::{Model, ModelConfig, WeightStore};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Side length of the demo images.
pub const SIDE: usize = 64;

fn rgba(img: &Image) -> Vec<u8> {
    let rgb = img.to_rgb();
    rgb.data.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn mask_rgba(mask: &[u8]) -> Vec<u8> {
    mask.iter().flat_map(|&m| if m == 1 { [255; 4] } else { [0, 0, 0, 255] }).collect()
}

pub struct Demo {
    sample: Sample,
    model: Model,
    weights_label: String,
    prediction: Option<Vec<u8>>,
    diff: Option<Vec<u8>>,
}

impl Demo {
    pub fn new(seed: u64) -> Result<Self, String> {
        let model = Model::init(ModelConfig::toy(), 42).map_err(|e| e.to_string())?;
        Ok(Self {
            sample: Self::sample(seed, 0)?,
            model,
            weights_label: "untrained (seed 42)".into(),
            prediction: None,
            diff: None,
        })
    }

    fn sample(seed: u64, index: usize) -> Result<Sample, String> {
        let spec = SyntheticSpec {
            seed,
            image_size: (SIDE, SIDE),
            n_samples: index + 1,
            ..Default::default()
        };
        generate_sample(&spec, index).map_err(|e| e.to_string())
    }

    /// Replaces the current pair with sample `index` of the seeded spec.
    pub fn generate(&mut self, seed: u64, index: usize) -> Result<(), String> {
        self.sample = Self::sample(seed, index)?;
        self.prediction = None;
        self.diff = None;
        Ok(())
    }

    /// Installs toy-model weights from a weight file's bytes.
    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<usize, String> {
        let store = WeightStore::from_bytes(bytes).map_err(|e| e.to_string())?;
        store.validate(&layout(&ModelConfig::toy())).map_err(|e| e.to_string())?;
        let n = store.num_params();
        self.model = Model::new(ModelConfig::toy(), store).map_err(|e| e.to_string())?;
        self.weights_label = format!("uploaded ({n} parameters)");
        self.prediction = None;
        self.diff = None;
        Ok(n)
    }

    pub fn t1_rgba(&self) -> Vec<u8> {
        rgba(&self.sample.t1)
    }

    pub fn t2_rgba(&self) -> Vec<u8> {
        rgba(&self.sample.t2)
    }

    pub fn gt_rgba(&self) -> Vec<u8> {
        mask_rgba(&self.sample.gt)
    }

    /// Runs the model and returns a JSON summary; the TP/FP/FN colour map
    /// is kept for [`Demo::diff_rgba`].
    pub fn detect(&mut self, threshold: f64) -> Result<String, String> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(format!("threshold {threshold} must lie in (0, 1)"));
        }
        let mut m = self.model.clone();
        let mut cfg = m.config().clone();
        cfg.decoder.threshold = threshold;
        m = Model::new(cfg, m.into_weights()).map_err(|e| e.to_string())?;
        let out = m
            .forward(&self.sample.t1.to_tensor(), &self.sample.t2.to_tensor())
            .map_err(|e| e.to_string())?;
        let mask = out.mask(0);
        let outcomes = diff_map(&mask, &self.sample.gt).map_err(|e| e.to_string())?;
        let report = MetricReport::from(confusion(&mask, &self.sample.gt).map_err(|e| e.to_string())?);
        let rgb = render_diff(&outcomes);
        let summary = json!({ "weights": self.weights_label, "threshold": threshold, "report": report });
        self.prediction = Some(mask);
        self.diff = Some(rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect());
        Ok(summary.to_string())
    }

    pub fn diff_rgba(&self) -> Option<Vec<u8>> {
        self.diff.clone()
    }

    /// Region statistics of the last prediction, or of the ground truth.
    pub fn regions(&self, use_prediction: bool, few_threshold: usize) -> Result<String, String> {
        let mask = match (use_prediction, &self.prediction) {
            (false, _) => &self.sample.gt,
            (true, Some(p)) => p,
            (true, None) => return Err("run detection first".into()),
        };
        let stats = region_stats(mask, SIDE, SIDE, few_threshold).map_err(|e| e.to_string())?;
        serde_json::to_string(&stats).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
pub struct WebDemo(Demo);

fn js(e: String) -> JsValue {
    JsValue::from_str(&e)
}

#[wasm_bindgen]
impl WebDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<WebDemo, JsValue> {
        Demo::new(u64::from(seed)).map(WebDemo).map_err(js)
    }

    pub fn side(&self) -> usize {
        SIDE
    }

    pub fn generate(&mut self, seed: u32, index: u32) -> Result<(), JsValue> {
        self.0.generate(u64::from(seed), index as usize).map_err(js)
    }

    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<usize, JsValue> {
        self.0.load_weights(bytes).map_err(js)
    }

    pub fn t1(&self) -> Vec<u8> {
        self.0.t1_rgba()
    }

    pub fn t2(&self) -> Vec<u8> {
        self.0.t2_rgba()
    }

    pub fn gt(&self) -> Vec<u8> {
        self.0.gt_rgba()
    }

    /// JSON with the confusion counts and metrics against the ground truth.
    pub fn detect(&mut self, threshold: f64) -> Result<String, JsValue> {
        self.0.detect(threshold).map_err(js)
    }

    /// RGBA colour map of the last detection (white TP, green FP, red FN).
    pub fn diff(&self) -> Option<Vec<u8>> {
        self.0.diff_rgba()
    }

    pub fn regions(&self, use_prediction: bool, few_threshold: usize) -> Result<String, JsValue> {
        self.0.regions(use_prediction, few_threshold).map_err(js)
    }
}
