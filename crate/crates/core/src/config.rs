//! Model configuration, JSON-serializable.
//!
//! Window specs are listed deepest level first: `[level3, level2, level1]`
//! (or `[level4, level3, level2, level1]` with four stages).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sliding-window geometry: `w×w` windows placed every `s` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct WindowSpec {
    window: usize,
    stride: usize,
}

impl WindowSpec {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("window stride must be at least 1".into()));
        }
        if window < stride {
            return Err(Error::Config(format!(
                "window size {window} smaller than stride {stride}"
            )));
        }
        if !(window - stride).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window {window} minus stride {stride} must be even so centre crops tile the map"
            )));
        }
        Ok(Self { window, stride })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Zero padding on each side so every `s×s` crop has a full window.
    pub fn pad(&self) -> usize {
        (self.window - self.stride) / 2
    }

    /// Checks the spec against a feature map of `h×w` pixels.
    pub fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(self.stride) || !w.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "feature map {h}×{w} is not divisible by window stride {}",
                self.stride
            )));
        }
        Ok(())
    }
}

impl TryFrom<[usize; 2]> for WindowSpec {
    type Error = Error;

    fn try_from([w, s]: [usize; 2]) -> Result<Self> {
        Self::new(w, s)
    }
}

impl From<WindowSpec> for [usize; 2] {
    fn from(s: WindowSpec) -> Self {
        [s.window, s.stride]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels after the ×4 stem; stage `j` has `stem_channels·2^(j−1)`.
    pub stem_channels: usize,
    /// Blocks per stage.
    pub stage_depths: Vec<usize>,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn default_input_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Deepest level first.
    pub window_specs: Vec<WindowSpec>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Unified difference-map channel count.
    pub c_d: usize,
    pub decoder: DecoderConfig,
    #[serde(default = "yes")]
    pub use_edm: bool,
    #[serde(default = "yes")]
    pub use_swsa: bool,
    #[serde(default = "yes")]
    pub use_egsa: bool,
    #[serde(default)]
    pub use_four_stages: bool,
    /// Dense 1×1 attention projections instead of depthwise 3×3 ones.
    #[serde(default)]
    pub full_projections: bool,
}

impl ModelConfig {
    fn with_windows(stem_channels: usize, depths: Vec<usize>, c_d: usize, windows: &[[usize; 2]]) -> Self {
        Self {
            encoder: EncoderConfig {
                stem_channels,
                stage_depths: depths,
                input_channels: 3,
            },
            c_d,
            decoder: DecoderConfig {
                window_specs: windows
                    .iter()
                    .map(|&p| WindowSpec::try_from(p).expect("preset window specs are valid"))
                    .collect(),
                threshold: 0.5,
            },
            use_edm: true,
            use_swsa: true,
            use_egsa: true,
            use_four_stages: false,
            full_projections: false,
        }
    }

    /// Small CPU-friendly model used for synthetic training (64×64 inputs).
    pub fn toy() -> Self {
        Self::with_windows(16, vec![1, 1, 2], 16, &[[4, 2], [4, 2], [8, 4]])
    }

    /// Full-size widths with overlapping windows `8,8,16` / strides `4,4,8`
    /// (the SYSU and CDD settings).
    pub fn sysu() -> Self {
        Self::with_windows(48, vec![2, 2, 14], 64, &[[8, 4], [8, 4], [16, 8]])
    }

    pub fn cdd() -> Self {
        Self::sysu()
    }

    /// Non-overlapping windows `4,4,8`.
    pub fn whu() -> Self {
        Self::with_windows(48, vec![2, 2, 14], 64, &[[4, 4], [4, 4], [8, 8]])
    }

    /// Non-overlapping windows `4,8,8`.
    pub fn levir_plus() -> Self {
        Self::with_windows(48, vec![2, 2, 14], 64, &[[4, 4], [8, 8], [8, 8]])
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "sysu" => Ok(Self::sysu()),
            "cdd" => Ok(Self::cdd()),
            "whu" => Ok(Self::whu()),
            "levir_plus" | "levir+" => Ok(Self::levir_plus()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (toy, sysu, cdd, whu, levir_plus)"
            ))),
        }
    }

    pub fn num_stages(&self) -> usize {
        if self.use_four_stages {
            4
        } else {
            3
        }
    }

    /// Channels of encoder stage `j` (1-based).
    pub fn stage_channels(&self, j: usize) -> usize {
        self.encoder.stem_channels << (j - 1)
    }

    /// Input side lengths must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        1 << (self.num_stages() + 1)
    }

    /// Window spec for level `j` (1-based, 1 = shallowest).
    pub fn window_for_level(&self, j: usize) -> WindowSpec {
        let specs = &self.decoder.window_specs;
        specs[specs.len() - j]
    }

    /// Structural checks independent of input size.
    pub fn validate(&self) -> Result<()> {
        let stages = self.num_stages();
        let e = &self.encoder;
        if e.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if e.stem_channels == 0 || !e.stem_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "stem_channels must be a positive multiple of 4, got {}",
                e.stem_channels
            )));
        }
        if e.stage_depths.len() != stages {
            return Err(Error::Config(format!(
                "stage_depths lists {} stages but the model uses {stages}",
                e.stage_depths.len()
            )));
        }
        if e.stage_depths.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.c_d == 0 {
            return Err(Error::Config("c_d must be positive".into()));
        }
        if self.decoder.window_specs.len() != stages {
            return Err(Error::Config(format!(
                "expected {stages} window specs (deepest first), got {}",
                self.decoder.window_specs.len()
            )));
        }
        let t = self.decoder.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("threshold {t} must lie in (0, 1)")));
        }
        Ok(())
    }

    /// Full validation for an `h×w` input.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        let d = self.required_divisor();
        if !h.is_multiple_of(d) || !w.is_multiple_of(d) || h == 0 || w == 0 {
            return Err(Error::Input(format!(
                "input size {h}×{w} must be divisible by {d}"
            )));
        }
        for j in 1..=self.num_stages() {
            let f = 1 << (j + 1);
            self.window_for_level(j)
                .validate_for(h / f, w / f)
                .map_err(|e| Error::Config(format!("level {j}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}
