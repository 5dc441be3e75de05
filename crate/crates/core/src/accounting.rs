//! Closed-form parameter and FLOP counts.
//!
//! Nothing here touches a weight store or runs a forward pass; the tests
//! cross-check both against the real thing. FLOP convention: one
//! multiply-accumulate is two FLOPs (bias additions are not counted),
//! attention matmuls count `2·m·k·n`, and every normalization, activation,
//! residual add, pooling, or interpolation costs one FLOP per element it
//! produces (pooling and channel sums: per element consumed). Pure index
//! shuffles are free.

use indexmap::IndexMap;
use serde::Serialize;

use crate::autograd::FlopTally;
use crate::config::{ModelConfig, WindowSpec};
use crate::decoder::HEAD_UPSAMPLE;
use crate::encoder::block_has_se;
use crate::error::Result;
use crate::nn::{is_buffer_name, LayoutEntry, SE_RATIO};

pub fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

pub fn dwconv_params(c: usize, k: usize) -> usize {
    c * k * k + c
}

pub fn bn_params(c: usize) -> usize {
    2 * c
}

pub fn se_params(c: usize) -> usize {
    let h = (c / SE_RATIO).max(1);
    conv_params(c, h, 1) + conv_params(h, c, 1)
}

pub fn encoder_block_params(c: usize, se: bool) -> usize {
    dwconv_params(c, 3) + if se { se_params(c) } else { 0 } + bn_params(c) + 2 * conv_params(c, c, 1)
}

/// Depthwise-separable 3×3 conv with biases.
pub fn dwsep_params(c: usize) -> usize {
    dwconv_params(c, 3) + conv_params(c, c, 1)
}

pub fn edm_preprocess_params(cin: usize, c_d: usize) -> usize {
    dwsep_params(cin) + bn_params(cin) + se_params(cin) + conv_params(cin, c_d, 1)
}

pub fn edm_params(cin: usize, c_d: usize, use_attention: bool) -> usize {
    let qk = if use_attention { conv_params(c_d, c_d, 1) } else { 0 };
    edm_preprocess_params(cin, c_d) + qk + c_d * c_d
}

fn projection_params(c: usize, full: bool) -> usize {
    if full {
        conv_params(c, c, 1)
    } else {
        dwconv_params(c, 3)
    }
}

pub fn channel_mixer_params(c: usize) -> usize {
    bn_params(c) + conv_params(c, 2 * c, 1) + conv_params(2 * c, c, 1)
}

pub fn swsa_params(c: usize, full: bool) -> usize {
    3 * projection_params(c, full) + channel_mixer_params(c)
}

pub fn egsa_params(c: usize, patch: usize, full: bool) -> usize {
    projection_params(c, full) + 2 * conv_params(c, c, patch) + channel_mixer_params(c)
}

pub fn refine_params(c: usize) -> usize {
    dwsep_params(c) + bn_params(c)
}

/// FLOPs of one convolution producing an `ho×wo` map per sample.
pub fn conv_flops(cin: usize, cout: usize, k: usize, ho: usize, wo: usize, depthwise: bool) -> u64 {
    let per_out = if depthwise { 1 } else { cin };
    (2 * k * k * per_out * cout * ho * wo) as u64
}

/// FLOPs of the two matmuls of one attention with `tq` queries, `tk` keys
/// and width `d`.
pub fn attention_matmul_flops(tq: usize, tk: usize, d: usize) -> u64 {
    2 * (2 * tq * tk * d) as u64
}

/// Trainable parameter counts grouped by module path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub total: usize,
    pub modules: IndexMap<String, usize>,
}

impl ParamReport {
    fn from_modules(modules: IndexMap<String, usize>) -> Self {
        Self {
            total: modules.values().sum(),
            modules,
        }
    }
}

/// Module path of a parameter: `encoder.stage2`, `edm1`, `decoder.level3`, ...
pub fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match (first, parts.next()) {
        ("encoder" | "decoder", Some(second)) => format!("{first}.{second}"),
        _ => first.to_string(),
    }
}

/// Analytic per-module parameter counts.
pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let mut m = IndexMap::new();
    let e = &cfg.encoder;
    let stem = e.stem_channels;
    m.insert(
        "encoder.stem".to_string(),
        conv_params(e.input_channels, stem / 2, 3) + bn_params(stem / 2) + conv_params(stem / 2, stem, 3) + bn_params(stem),
    );
    for j in 1..=cfg.num_stages() {
        let c = cfg.stage_channels(j);
        let down = if j > 1 {
            dwconv_params(c / 2, 3) + conv_params(c / 2, c, 1) + bn_params(c)
        } else {
            0
        };
        let blocks: usize = (0..e.stage_depths[j - 1]).map(|i| encoder_block_params(c, block_has_se(i))).sum();
        m.insert(format!("encoder.stage{j}"), down + blocks);
    }
    for j in 1..=cfg.num_stages() {
        m.insert(format!("edm{j}"), edm_params(cfg.stage_channels(j), cfg.c_d, cfg.use_edm));
    }
    let c = cfg.c_d;
    for j in (1..=cfg.num_stages()).rev() {
        let spec = cfg.window_for_level(j);
        let mut n = 0;
        if j < cfg.num_stages() {
            n += refine_params(c);
            if cfg.use_egsa {
                n += egsa_params(c, spec.stride(), cfg.full_projections);
            }
        }
        if cfg.use_swsa {
            n += swsa_params(c, cfg.full_projections);
        }
        if cfg.use_egsa {
            n += egsa_params(c, spec.stride(), cfg.full_projections);
        }
        m.insert(format!("decoder.level{j}"), n);
    }
    m.insert("decoder.head".to_string(), c);
    ParamReport::from_modules(m)
}

/// Parameter counts read off a layout, grouped like [`count_params`].
pub fn count_layout_params(layout: &[LayoutEntry]) -> ParamReport {
    let mut m: IndexMap<String, usize> = IndexMap::new();
    for e in layout.iter().filter(|e| !is_buffer_name(&e.name)) {
        *m.entry(module_of(&e.name)).or_default() += e.numel();
    }
    ParamReport::from_modules(m)
}

#[derive(Default)]
struct Counter {
    t: FlopTally,
    n: usize,
}

impl Counter {
    fn conv(&mut self, cin: usize, cout: usize, k: usize, ho: usize, wo: usize) {
        self.t.conv += conv_flops(cin, cout, k, ho, wo, false) * self.n as u64;
    }

    fn dwconv(&mut self, c: usize, k: usize, ho: usize, wo: usize) {
        self.t.conv += conv_flops(c, c, k, ho, wo, true) * self.n as u64;
    }

    /// Elementwise pass over `c×h×w` per sample.
    fn ew(&mut self, c: usize, h: usize, w: usize) {
        self.t.elementwise += (c * h * w * self.n) as u64;
    }

    fn matmul(&mut self, batch: usize, m: usize, k: usize, n: usize) {
        self.t.attention += (2 * batch * m * k * n) as u64;
    }

    fn se(&mut self, c: usize, h: usize, w: usize) {
        let hid = (c / SE_RATIO).max(1);
        self.ew(c, h, w); // pooling
        self.conv(c, hid, 1, 1, 1);
        self.ew(hid, 1, 1);
        self.conv(hid, c, 1, 1, 1);
        self.ew(c, 1, 1);
        self.ew(c, h, w); // gating
    }

    fn encoder(&mut self, cfg: &ModelConfig, h: usize, w: usize) {
        let e = &cfg.encoder;
        let s = e.stem_channels;
        let (h2, w2) = (h / 2, w / 2);
        self.conv(e.input_channels, s / 2, 3, h2, w2);
        self.ew(s / 2, h2, w2);
        self.ew(s / 2, h2, w2);
        self.conv(s / 2, s, 3, h / 4, w / 4);
        self.ew(s, h / 4, w / 4);
        for j in 1..=cfg.num_stages() {
            let c = cfg.stage_channels(j);
            let (hj, wj) = (h >> (j + 1), w >> (j + 1));
            if j > 1 {
                self.dwconv(c / 2, 3, hj, wj);
                self.conv(c / 2, c, 1, hj, wj);
                self.ew(c, hj, wj);
            }
            for i in 0..e.stage_depths[j - 1] {
                self.dwconv(c, 3, hj, wj);
                if block_has_se(i) {
                    self.se(c, hj, wj);
                }
                self.ew(c, hj, wj);
                self.conv(c, c, 1, hj, wj);
                self.ew(c, hj, wj);
                self.conv(c, c, 1, hj, wj);
                self.ew(c, hj, wj);
            }
        }
    }

    fn edm(&mut self, cin: usize, cd: usize, att: bool, h: usize, w: usize) {
        for _ in 0..2 {
            self.dwconv(cin, 3, h, w);
            self.conv(cin, cin, 1, h, w);
            self.ew(cin, h, w);
            self.ew(cin, h, w);
            self.se(cin, h, w);
            self.conv(cin, cd, 1, h, w);
        }
        if att {
            self.conv(cd, cd, 1, h, w);
            self.conv(cd, cd, 1, h, w);
            self.ew(cd, h, w); // q⊙k
            self.ew(cd, h, w); // channel sum
            self.ew(1, h, w); // 1/√d
            self.ew(1, h, w); // negate
            self.ew(1, h, w); // sigmoid
            self.ew(cd, h, w); // mask product
        }
        self.ew(cd, h, w);
        self.ew(cd, h, w);
        self.conv(cd, cd, 1, h, w);
    }

    fn projection(&mut self, c: usize, full: bool, h: usize, w: usize) {
        if full {
            self.conv(c, c, 1, h, w);
        } else {
            self.dwconv(c, 3, h, w);
        }
    }

    /// `sigmoid(QKᵀ/√d)·V`: `batch` groups of `tq` queries and `tk` keys.
    fn attention(&mut self, batch: usize, tq: usize, tk: usize, d: usize) {
        self.matmul(batch * self.n, tq, d, tk);
        self.t.elementwise += 2 * (batch * tq * tk * self.n) as u64;
        self.matmul(batch * self.n, tq, tk, d);
    }

    fn mixer(&mut self, c: usize, h: usize, w: usize) {
        self.ew(c, h, w); // token residual
        self.ew(c, h, w);
        self.conv(c, 2 * c, 1, h, w);
        self.ew(2 * c, h, w);
        self.conv(2 * c, c, 1, h, w);
        self.ew(c, h, w);
    }

    fn swsa(&mut self, c: usize, spec: WindowSpec, full: bool, h: usize, w: usize) {
        for _ in 0..3 {
            self.projection(c, full, h, w);
        }
        let s = spec.stride();
        let win = spec.window();
        self.attention((h / s) * (w / s), s * s, win * win, c);
        self.mixer(c, h, w);
    }

    fn egsa(&mut self, c: usize, p: usize, full: bool, h: usize, w: usize) {
        self.projection(c, full, h, w);
        self.conv(c, c, p, h / p, w / p);
        self.conv(c, c, p, h / p, w / p);
        self.attention(1, h * w, (h / p) * (w / p), c);
        self.mixer(c, h, w);
    }

    fn lgfb(&mut self, cfg: &ModelConfig, c: usize, spec: WindowSpec, h: usize, w: usize) {
        if cfg.use_swsa {
            self.swsa(c, spec, cfg.full_projections, h, w);
        }
        if cfg.use_egsa {
            self.egsa(c, spec.stride(), cfg.full_projections, h, w);
        }
    }

    fn decoder(&mut self, cfg: &ModelConfig, h: usize, w: usize) {
        let c = cfg.c_d;
        let top = cfg.num_stages();
        let level = |j: usize| (h >> (j + 1), w >> (j + 1));
        let (ht, wt) = level(top);
        self.lgfb(cfg, c, cfg.window_for_level(top), ht, wt);
        for j in (1..top).rev() {
            let (hj, wj) = level(j);
            let spec = cfg.window_for_level(j);
            self.ew(c, hj, wj); // upsample
            self.ew(c, hj, wj); // fusion add
            self.dwconv(c, 3, hj, wj);
            self.conv(c, c, 1, hj, wj);
            self.ew(c, hj, wj);
            self.ew(c, hj, wj);
            self.ew(c, hj, wj);
            if cfg.use_egsa {
                self.egsa(c, spec.stride(), cfg.full_projections, hj, wj);
            }
            self.lgfb(cfg, c, spec, hj, wj);
        }
        let (h1, w1) = level(1);
        self.conv(c, 1, 1, h1, w1);
        self.ew(1, h1 * HEAD_UPSAMPLE, w1 * HEAD_UPSAMPLE);
    }
}

/// Analytic FLOPs of one forward pass on a batch of `n` image pairs of
/// size `h×w`.
pub fn estimate_flops(cfg: &ModelConfig, n: usize, h: usize, w: usize) -> Result<FlopTally> {
    cfg.validate_input(h, w)?;
    let mut k = Counter { n, ..Default::default() };
    k.encoder(cfg, h, w);
    k.encoder(cfg, h, w);
    for j in 1..=cfg.num_stages() {
        k.edm(cfg.stage_channels(j), cfg.c_d, cfg.use_edm, h >> (j + 1), w >> (j + 1));
    }
    k.decoder(cfg, h, w);
    Ok(k.t)
}
