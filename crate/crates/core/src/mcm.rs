//! Landmark-guided cross-fusion over a spatial pyramid.
//!
//! A cross-fusion block lets landmark tokens query the image tokens,
//! passes the attended features through a normalized MLP and then mixes the
//! landmark stream back in through a learnable scalar gate `s` before a
//! 1x1 projection. Blocks run at successively 2x2-pooled resolutions and a
//! global average pool plus a linear head turns the last block into
//! logits.
//!
//! All grids are kept channel-major (`[D, P]`), so the token-major
//! products `X W^T` become `W X` here.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::params::{Affine, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TokenGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// `conv1x1(concat(fused, s * landmarks))`
    #[default]
    Concat,
    /// `conv1x1(fused + s * landmarks)`
    Add,
}

#[derive(Clone, Copy, Debug)]
pub struct CfbParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub fc1: Affine,
    pub fc2: Affine,
    pub gate: ParamId,
    pub out_conv: Affine,
    pub mode: FusionMode,
}

impl CfbParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize, mode: FusionMode, rng: &mut Rng) -> Self {
        let square = |store: &mut ParamStore, what: &str, rng: &mut Rng| {
            store.add(format!("{name}.{what}"), crate::params::fan_in_uniform(&[d, d], d, rng))
        };
        let w_q = square(store, "w_q", rng);
        let w_k = square(store, "w_k", rng);
        let w_v = square(store, "w_v", rng);
        let norm_gain = store.add(format!("{name}.norm.gain"), Tensor::full(&[d], 1.0));
        let norm_bias = store.add(format!("{name}.norm.bias"), Tensor::zeros(&[d]));
        let fc1 = Affine::linear(store, &format!("{name}.mlp.fc1"), d, 2 * d, rng);
        let fc2 = Affine::linear(store, &format!("{name}.mlp.fc2"), 2 * d, d, rng);
        let gate = store.add(format!("{name}.gate"), Tensor::zeros(&[1]));
        let c_in = match mode {
            FusionMode::Concat => 2 * d,
            FusionMode::Add => d,
        };
        let out_conv = Affine::conv(store, &format!("{name}.out_conv"), c_in, d, 1, 0.0, rng);
        Self {
            w_q,
            w_k,
            w_v,
            norm_gain,
            norm_bias,
            fc1,
            fc2,
            gate,
            out_conv,
            mode,
        }
    }
}

#[derive(Clone, Debug)]
pub struct McmParams {
    pub scales: Vec<CfbParams>,
    pub head: Affine,
}

impl McmParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        scales: usize,
        num_classes: usize,
        mode: FusionMode,
        rng: &mut Rng,
    ) -> Self {
        let blocks = (0..scales)
            .map(|k| CfbParams::init(store, &format!("{name}.scale{k}"), d, mode, rng))
            .collect();
        let head = Affine::linear(store, &format!("{name}.head"), d, num_classes, rng);
        Self { scales: blocks, head }
    }
}

/// Attention scores and their row-softmax.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub scores: Tensor,
    pub weights: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub output: Var,
    pub scores: Var,
    pub weights: Var,
}

impl AttentionVars {
    pub fn record(&self, tape: &Tape) -> AttentionRecord {
        AttentionRecord {
            scores: tape.value(self.scores).clone(),
            weights: tape.value(self.weights).clone(),
        }
    }
}

fn as_tokens(tape: &mut Tape, x: Var) -> Result<(Var, usize, usize, usize)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return dim_err(format!("expected a [D, H, W] grid, got {s:?}"));
    }
    let m = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    Ok((m, s[0], s[1], s[2]))
}

/// Single-head cross-attention: landmark queries over image keys/values,
/// scaled by `1/sqrt(D)`. Inputs and output are `[D, P]`.
pub fn cross_attention_on(
    tape: &mut Tape,
    b: &Bound,
    p: &CfbParams,
    lm: Var,
    img: Var,
) -> Result<AttentionVars> {
    let (ls, is) = (tape.shape(lm).to_vec(), tape.shape(img).to_vec());
    if ls.len() != 2 || ls != is {
        return dim_err(format!("cross attention: landmark {ls:?} vs image {is:?}"));
    }
    let d = ls[0];
    if tape.shape(b.get(p.w_q))[0] != d {
        return dim_err(format!(
            "cross attention: projections are {:?}, features have D = {d}",
            tape.shape(b.get(p.w_q))
        ));
    }
    let q = tape.matmul(b.get(p.w_q), lm)?;
    let k = tape.matmul(b.get(p.w_k), img)?;
    let v = tape.matmul(b.get(p.w_v), img)?;
    let raw = tape.matmul_t(q, true, k, false)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    let output = tape.matmul_t(v, false, weights, true)?;
    Ok(AttentionVars { output, scores, weights })
}

/// One block; `reintegrate = false` drops the gated landmark addend from
/// the graph entirely.
pub fn cfb_forward_on(
    tape: &mut Tape,
    b: &Bound,
    p: &CfbParams,
    lm: Var,
    img: Var,
    reintegrate: bool,
) -> Result<(Var, AttentionVars)> {
    if tape.shape(lm) != tape.shape(img) {
        return dim_err(format!(
            "cross-fusion block: landmark {:?} vs image {:?}",
            tape.shape(lm),
            tape.shape(img)
        ));
    }
    let (lm_t, d, h, w) = as_tokens(tape, lm)?;
    let (img_t, ..) = as_tokens(tape, img)?;
    let att = cross_attention_on(tape, b, p, lm_t, img_t)?;
    let mixed = tape.add(img_t, att.output)?;
    let normed = tape.token_norm(mixed)?;
    let normed = tape.mul_row_scale(normed, b.get(p.norm_gain))?;
    let normed = tape.add_row_bias(normed, b.get(p.norm_bias))?;
    let hidden = p.fc1.apply_linear(tape, b, normed)?;
    let hidden = tape.relu(hidden)?;
    let fused = p.fc2.apply_linear(tape, b, hidden)?;
    let pre = match (p.mode, reintegrate) {
        (FusionMode::Concat, true) => {
            let gated = tape.scale_by(lm_t, b.get(p.gate))?;
            tape.concat_channels(fused, gated)?
        }
        (FusionMode::Concat, false) => {
            let zeros = tape.constant(Tensor::zeros(&[d, h * w]));
            tape.concat_channels(fused, zeros)?
        }
        (FusionMode::Add, true) => {
            let gated = tape.scale_by(lm_t, b.get(p.gate))?;
            tape.add(fused, gated)?
        }
        (FusionMode::Add, false) => fused,
    };
    let out = p.out_conv.apply_linear(tape, b, pre)?;
    Ok((tape.reshape(out, &[d, h, w])?, att))
}

#[derive(Clone, Debug)]
pub struct McmOutput {
    pub logits: Var,
    pub features: Var,
    pub attention: Vec<AttentionVars>,
}

pub fn mcm_forward_on(
    tape: &mut Tape,
    b: &Bound,
    p: &McmParams,
    img: Var,
    lm: Var,
    reintegrate: bool,
) -> Result<McmOutput> {
    let scales = p.scales.len();
    let s = tape.shape(img).to_vec();
    let div = 1usize << (scales.saturating_sub(1));
    if s.len() != 3 || !s[1].is_multiple_of(div) || !s[2].is_multiple_of(div) {
        return dim_err(format!(
            "grid {s:?} cannot be pooled across {scales} scales"
        ));
    }
    let (mut img, mut lm) = (img, lm);
    let mut attention = Vec::with_capacity(scales);
    let mut last = img;
    for (k, block) in p.scales.iter().enumerate() {
        let (y, att) = cfb_forward_on(tape, b, block, lm, img, reintegrate)?;
        attention.push(att);
        last = y;
        if k + 1 < scales {
            img = tape.avgpool2(y)?;
            lm = tape.avgpool2(lm)?;
        }
    }
    let features = tape.mean_tokens(last)?;
    let logits = p.head.apply_linear(tape, b, features)?;
    let k = tape.shape(logits)[0];
    let logits = tape.reshape(logits, &[k])?;
    Ok(McmOutput { logits, features, attention })
}

/// Tape-free cross-attention on `P x D` grids.
pub fn cross_attention(
    x_lm: &TokenGrid,
    x_img_hat: &TokenGrid,
    p: &CfbParams,
    store: &ParamStore,
) -> Result<(TokenGrid, AttentionRecord)> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let lm = tape.constant(x_lm.tensor().clone());
    let img = tape.constant(x_img_hat.tensor().clone());
    if tape.shape(lm) != tape.shape(img) {
        return dim_err("cross attention: grids differ");
    }
    let (lm_t, d, h, w) = as_tokens(&mut tape, lm)?;
    let (img_t, ..) = as_tokens(&mut tape, img)?;
    let att = cross_attention_on(&mut tape, &b, p, lm_t, img_t)?;
    let out = tape.value(att.output).clone().reshape(vec![d, h, w])?;
    Ok((TokenGrid::from_tensor(out)?, att.record(&tape)))
}

pub fn cfb_forward(
    x_lm: &TokenGrid,
    x_img_hat: &TokenGrid,
    p: &CfbParams,
    store: &ParamStore,
) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let lm = tape.constant(x_lm.tensor().clone());
    let img = tape.constant(x_img_hat.tensor().clone());
    let (out, _) = cfb_forward_on(&mut tape, &b, p, lm, img, true)?;
    TokenGrid::from_tensor(tape.value(out).clone())
}

/// Returns `(logits, pooled features)`.
pub fn mcm_forward(
    x_img_hat: &TokenGrid,
    x_lm: &TokenGrid,
    p: &McmParams,
    store: &ParamStore,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let img = tape.constant(x_img_hat.tensor().clone());
    let lm = tape.constant(x_lm.tensor().clone());
    let out = mcm_forward_on(&mut tape, &b, p, img, lm, true)?;
    Ok((tape.value(out.logits).clone(), tape.value(out.features).clone()))
}
