//! Pixel-level binary change-detection metrics.
//!
//! Positive class = changed. Counts from several images are summed before
//! computing ratios (micro-averaging).

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub r#fn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.r#fn
    }
}

impl Add for Confusion {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            r#fn: self.r#fn + o.r#fn,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn check_binary(mask: &[u8], what: &str) -> Result<()> {
    match mask.iter().position(|&v| v > 1) {
        Some(i) => Err(Error::Input(format!("{what} value {} at index {i} is not 0 or 1", mask[i]))),
        None => Ok(()),
    }
}

fn check_pair(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground truth")
}

/// Counts over two `0/1` masks of equal length.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<Confusion> {
    check_pair(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.r#fn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub oa: f64,
    pub f1: f64,
    pub iou: f64,
}

/// `num/den`, with `0/0` read as 1 when `vacuous` (nothing to find and
/// nothing claimed) and 0 otherwise.
fn ratio(num: u64, den: u64, vacuous: bool) -> f64 {
    if den == 0 {
        if vacuous {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &Confusion) -> Metrics {
    let nothing_positive = c.tp + c.fp + c.r#fn == 0;
    Metrics {
        precision: ratio(c.tp, c.tp + c.fp, nothing_positive),
        recall: ratio(c.tp, c.tp + c.r#fn, nothing_positive),
        oa: ratio(c.tp + c.tn, c.total(), true),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.r#fn, nothing_positive),
        iou: ratio(c.tp, c.tp + c.fp + c.r#fn, nothing_positive),
    }
}

/// IoU implied by an F1 score: `f1 / (2 − f1)`.
pub fn f1_to_iou(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

/// Counts plus the five metrics, as written to JSON reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub confusion: Confusion,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl From<Confusion> for MetricReport {
    fn from(confusion: Confusion) -> Self {
        Self {
            confusion,
            metrics: metrics(&confusion),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Outcome {
    Tp,
    Tn,
    Fp,
    Fn,
}

impl Outcome {
    /// Display colour: white, black, green, red.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Outcome::Tp => [255, 255, 255],
            Outcome::Tn => [0, 0, 0],
            Outcome::Fp => [0, 255, 0],
            Outcome::Fn => [255, 0, 0],
        }
    }
}

/// Per-pixel outcome of a prediction against ground truth.
pub fn diff_map(pred: &[u8], gt: &[u8]) -> Result<Vec<Outcome>> {
    check_pair(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| match (p, g) {
            (1, 1) => Outcome::Tp,
            (0, 0) => Outcome::Tn,
            (1, 0) => Outcome::Fp,
            _ => Outcome::Fn,
        })
        .collect())
}

/// Interleaved RGB rendering of a diff map.
pub fn render_diff(map: &[Outcome]) -> Vec<u8> {
    map.iter().flat_map(|o| o.rgb()).collect()
}
