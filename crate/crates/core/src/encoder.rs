//! Weight-shared hierarchical encoder.
//!
//! Stem: two stride-2 3×3 convolutions (×4 downsampling). Each later stage
//! opens with a stride-2 depthwise conv plus a channel-doubling 1×1 conv,
//! then runs residual token-mixer/channel-mixer blocks. Stage `j` emits
//! `stem·2^(j−1)` channels at `H/2^(j+1) × W/2^(j+1)`.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayoutBuilder};
use crate::ops;
use crate::tensor::Scalar;

/// Whether block `index` (0-based) of a stage carries a squeeze-excitation
/// gate: every second block.
pub fn block_has_se(index: usize) -> bool {
    index % 2 == 1
}

pub fn layout(b: &mut LayoutBuilder, cfg: &ModelConfig) {
    let e = &cfg.encoder;
    let stem = e.stem_channels;
    b.conv("encoder.stem.conv1", e.input_channels, stem / 2, 3);
    b.bn("encoder.stem.bn1", stem / 2);
    b.conv("encoder.stem.conv2", stem / 2, stem, 3);
    b.bn("encoder.stem.bn2", stem);
    for j in 1..=cfg.num_stages() {
        let c = cfg.stage_channels(j);
        if j > 1 {
            let p = format!("encoder.stage{j}.down");
            b.dwconv(&format!("{p}.dw"), c / 2, 3);
            b.conv(&format!("{p}.pw"), c / 2, c, 1);
            b.bn(&format!("{p}.bn"), c);
        }
        for i in 0..e.stage_depths[j - 1] {
            block_layout(b, &format!("encoder.stage{j}.block{i}"), c, block_has_se(i));
        }
    }
}

pub fn block_layout(b: &mut LayoutBuilder, prefix: &str, c: usize, se: bool) {
    b.dwconv(&format!("{prefix}.dw"), c, 3);
    if se {
        b.se(&format!("{prefix}.se"), c);
    }
    b.bn(&format!("{prefix}.bn"), c);
    b.conv(&format!("{prefix}.mix1"), c, c, 1);
    b.conv(&format!("{prefix}.mix2"), c, c, 1);
}

/// `x + mix2(gelu(mix1(bn(token_mixer(x)))))`, token mixer = 3×3 depthwise
/// conv, optionally followed by SE.
pub fn encoder_block<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    x: &Var<'t, F>,
    prefix: &str,
    se: bool,
) -> Result<Var<'t, F>> {
    let mut t = ctx.dwconv(x, &format!("{prefix}.dw"), 1, 1)?;
    if se {
        t = ctx.se(&t, &format!("{prefix}.se"))?;
    }
    let t = ctx.bn(&t, &format!("{prefix}.bn"))?;
    let t = ops::gelu(&ctx.conv(&t, &format!("{prefix}.mix1"), 1, 0)?);
    let t = ctx.conv(&t, &format!("{prefix}.mix2"), 1, 0)?;
    ops::add(x, &t)
}

/// Feature pyramid of one temporal image, shallowest stage first.
pub fn encode<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    image: &Var<'t, F>,
    cfg: &ModelConfig,
) -> Result<Vec<Var<'t, F>>> {
    let [_, c, h, w] = image.value().dims4()?;
    if c != cfg.encoder.input_channels {
        return Err(Error::Shape(format!(
            "encoder expects {} input channels, got {c}",
            cfg.encoder.input_channels
        )));
    }
    let d = cfg.required_divisor();
    if h % d != 0 || w % d != 0 {
        return Err(Error::Input(format!(
            "input size {h}×{w} must be divisible by {d}"
        )));
    }
    let x = ctx.conv(image, "encoder.stem.conv1", 2, 1)?;
    let x = ops::gelu(&ctx.bn(&x, "encoder.stem.bn1")?);
    let x = ctx.conv(&x, "encoder.stem.conv2", 2, 1)?;
    let mut x = ctx.bn(&x, "encoder.stem.bn2")?;
    let mut pyramid = Vec::with_capacity(cfg.num_stages());
    for j in 1..=cfg.num_stages() {
        if j > 1 {
            let p = format!("encoder.stage{j}.down");
            x = ctx.dwconv(&x, &format!("{p}.dw"), 2, 1)?;
            x = ctx.conv(&x, &format!("{p}.pw"), 1, 0)?;
            x = ctx.bn(&x, &format!("{p}.bn"))?;
        }
        for i in 0..cfg.encoder.stage_depths[j - 1] {
            x = encoder_block(ctx, &x, &format!("encoder.stage{j}.block{i}"), block_has_se(i))?;
        }
        pyramid.push(x.clone());
    }
    Ok(pyramid)
}
