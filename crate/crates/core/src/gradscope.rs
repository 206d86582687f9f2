//! Finite-difference checks of the tape over tiny configurations, grouped
//! into scopes: single primitives, the guidance module, one cross-fusion
//! block and the whole classifier under the combined loss.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{contract_err, Result};
use crate::gradcheck::{grad_check, grad_check_flat, GradCheckReport};
use crate::losses::{self, LossWeights};
use crate::mcm::{cfb_forward_on, CfbParams, FusionMode};
use crate::model::{Ablation, Model, ModelConfig, ModelInput};
use crate::params::{Bound, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::ssgm::{ssgm_forward_on, SsgmParams};
use crate::synth;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TokenGrid};

pub const TOLERANCE: f64 = 1e-4;
pub const MIN_PROBES: usize = 50;
const SEED: u64 = 0x6772_6164;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Primitives,
    Ssgm,
    Cfb,
    Full,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Primitives, Scope::Ssgm, Scope::Cfb, Scope::Full];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Primitives => "primitives",
            Scope::Ssgm => "ssgm",
            Scope::Cfb => "cfb",
            Scope::Full => "full",
        })
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Scope::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| format!("unknown scope `{s}` (primitives, ssgm, cfb, full)"))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScopeReport {
    pub scope: Scope,
    pub checks: Vec<CheckResult>,
}

impl ScopeReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn probes(&self) -> usize {
        self.checks.iter().map(|c| c.probes).sum()
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.max_rel_err() < TOLERANCE && self.probes() >= MIN_PROBES
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(-1.0, 1.0)).collect()).expect("finite")
}

fn one_hot_seg(channels: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = Rng::from_seed(seed);
    let mut g = TokenGrid::zeros(channels, side, side);
    for y in 0..side {
        for x in 0..side {
            g.set(rng.below(channels), y, x, 1.0);
        }
    }
    g.into_tensor()
}

/// Reduces `v` to a scalar through a fixed random weighting.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.shape(v), seed));
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn result(name: &str, r: GradCheckReport) -> CheckResult {
    CheckResult {
        name: name.into(),
        max_rel_err: r.max_rel_err,
        probes: r.probes,
    }
}

/// Checks the gradient with respect to every parameter in `store` and
/// every tensor in `inputs`, concatenated in that order.
fn check_store<F>(name: &str, store: &ParamStore, inputs: &[Tensor], build: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let n_params = store.num_scalars();
    let eval = |flat: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut s = store.clone();
        s.set_flat(&flat[..n_params])?;
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let mut off = n_params;
        let mut vars = Vec::with_capacity(inputs.len());
        for t in inputs {
            let mut x = Tensor::new(t.shape().to_vec(), flat[off..off + t.numel()].to_vec())?;
            x.requires_grad = with_grad;
            vars.push(tape.leaf(x));
            off += t.numel();
        }
        let out = build(&mut tape, &bound, &vars)?;
        let value = tape.scalar(out);
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(out)?;
        let mut g = Vec::with_capacity(flat.len());
        for &v in bound.vars().iter().chain(&vars) {
            let len = tape.value(v).numel();
            match grads.get(v) {
                Some(d) => g.extend_from_slice(d),
                None => g.extend(std::iter::repeat_n(0.0, len)),
            }
        }
        Ok((value, g))
    };
    let mut x0 = store.flatten();
    for t in inputs {
        x0.extend_from_slice(t.data());
    }
    let (_, analytic) = eval(&x0, true)?;
    let r = grad_check_flat(|x| Ok(eval(x, false)?.0), &x0, &analytic, MIN_PROBES, derive_seed(SEED, 7))?;
    Ok(result(name, r))
}

fn primitives() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut seed = SEED;
    let mut unary = |name: &str, shape: &[usize], f: &dyn Fn(&mut Tape, Var) -> Result<Var>| -> Result<()> {
        seed += 1;
        let x = random(shape, seed);
        let s = seed;
        let r = grad_check(
            |t, v| {
                let y = f(t, v)?;
                if t.value(y).numel() == 1 {
                    Ok(y)
                } else {
                    project(t, y, s ^ 0xff)
                }
            },
            &x,
            MIN_PROBES,
            seed,
        )?;
        out.push(result(name, r));
        Ok(())
    };
    let consts = |t: &mut Tape, shape: &[usize], s: u64| t.constant(random(shape, s));

    unary("matmul", &[6, 9], &|t, x| {
        let b = consts(t, &[9, 4], 11);
        t.matmul(x, b)
    })?;
    unary("matmul_t", &[9, 6], &|t, x| {
        let b = consts(t, &[4, 9], 12);
        t.matmul_t(x, true, b, true)
    })?;
    unary("mul_add", &[5, 11], &|t, x| {
        let c = consts(t, &[5, 11], 13);
        let m = t.mul(x, x)?;
        t.add(m, c)
    })?;
    unary("relu", &[60], &|t, x| t.relu(x))?;
    unary("softmax_rows", &[6, 10], &|t, x| t.softmax_rows(x))?;
    unary("spatial_norm", &[3, 4, 5], &|t, x| t.spatial_norm(x))?;
    unary("token_norm", &[5, 12], &|t, x| t.token_norm(x))?;
    unary("conv2d_input", &[2, 5, 6], &|t, x| {
        let w = consts(t, &[3, 2, 3, 3], 14);
        let b = consts(t, &[3], 15);
        t.conv2d(x, w, b, 1)
    })?;
    unary("conv2d_weight", &[3, 2, 3, 3], &|t, w| {
        let x = consts(t, &[2, 4, 5], 16);
        let b = consts(t, &[3], 17);
        t.conv2d(x, w, b, 1)
    })?;
    unary("conv2d_bias", &[3], &|t, b| {
        let x = consts(t, &[2, 4, 5], 18);
        let w = consts(t, &[3, 2, 3, 3], 19);
        t.conv2d(x, w, b, 1)
    })?;
    unary("avgpool2", &[3, 4, 6], &|t, x| t.avgpool2(x))?;
    unary("concat_channels", &[4, 15], &|t, x| {
        let b = consts(t, &[2, 15], 20);
        let c = t.concat_channels(x, b)?;
        t.concat_channels(b, c)
    })?;
    unary("mean_tokens", &[5, 12], &|t, x| t.mean_tokens(x))?;
    unary("scale_by", &[1], &|t, s| {
        let x = consts(t, &[5, 12], 21);
        t.scale_by(x, s)
    })?;
    unary("row_scale_bias", &[6], &|t, g| {
        let x = consts(t, &[6, 10], 22);
        let y = t.mul_row_scale(x, g)?;
        t.add_row_bias(y, g)
    })?;
    unary("linear", &[4, 9], &|t, w| {
        let x = consts(t, &[9, 7], 23);
        let b = consts(t, &[4], 24);
        t.linear(x, w, b)
    })?;
    unary("cross_entropy", &[7], &|t, z| t.cross_entropy(z, 3))?;

    // Repulsion loss with the gate frozen at the base point; the target is
    // chosen as the smallest logit so z_y is unambiguous.
    let z0 = random(&[7], seed + 100);
    let target = z0
        .data()
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    let (_, base) = losses::dare_loss(z0.data(), target)?;
    let r = grad_check(|t, z| Ok(t.dare_loss(z, target, Some(base.alpha))?.0), &z0, MIN_PROBES, seed + 100)?;
    out.push(result("dare_loss", r));
    Ok(out)
}

/// Tiny configuration shared by the module-level checks.
const D: usize = 8;
const SIDE: usize = 4;
const C_SEG: usize = 3;
const CLASSES: usize = 3;

fn ssgm() -> Result<Vec<CheckResult>> {
    let mut store = ParamStore::new();
    let mut rng = Rng::from_seed(SEED + 200);
    let p = SsgmParams::init(&mut store, "ssgm", C_SEG, D, D, &mut rng);
    let x = random(&[D, SIDE, SIDE], SEED + 201);
    let seg = one_hot_seg(C_SEG, SIDE, SEED + 202);
    let r = check_store("ssgm", &store, &[x], |t, b, v| {
        let s = t.constant(seg.clone());
        let y = ssgm_forward_on(t, b, &p, v[0], s)?;
        project(t, y, SEED + 203)
    })?;
    Ok(vec![r])
}

fn cfb() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (mode, name) in [(FusionMode::Concat, "cfb_concat"), (FusionMode::Add, "cfb_add")] {
        let mut store = ParamStore::new();
        let mut rng = Rng::from_seed(SEED + 300);
        let p = CfbParams::init(&mut store, "cfb", D, mode, &mut rng);
        // open the gate so the landmark path carries gradient
        store.get_mut(p.gate).data_mut()[0] = 0.7;
        let lm = random(&[D, SIDE, SIDE], SEED + 301);
        let img = random(&[D, SIDE, SIDE], SEED + 302);
        out.push(check_store(name, &store, &[lm, img], |t, b, v| {
            let (y, _) = cfb_forward_on(t, b, &p, v[0], v[1], true)?;
            project(t, y, SEED + 303)
        })?);
    }
    Ok(out)
}

/// Model and inputs of the full-network check.
pub fn tiny_full_model() -> Result<(Model, Vec<(ModelInput, usize)>)> {
    let cfg = ModelConfig {
        seg_channels: C_SEG,
        ..ModelConfig::tiny()
    };
    let mut model = Model::new(cfg.clone(), Ablation::default(), CLASSES, SEED + 400)?;
    for g in model.gates() {
        model.params.get_mut(g).data_mut()[0] = 0.5;
    }
    let mut batch = Vec::new();
    for i in 0..2u64 {
        let mut rng = Rng::from_seed(SEED + 410 + i);
        let side = cfg.image_size();
        let image = TokenGrid::new(
            3,
            side,
            side,
            (0..3 * side * side).map(|_| rng.range(-0.5, 0.5)).collect(),
        )?;
        let seg = TokenGrid::from_tensor(one_hot_seg(C_SEG, cfg.grid, SEED + 420 + i))?;
        let points: Vec<(f64, f64)> = (0..cfg.landmarks)
            .map(|_| (rng.range(0.0, cfg.grid as f64), rng.range(0.0, cfg.grid as f64)))
            .collect();
        let heatmaps = synth::render_landmark_heatmaps(&points, cfg.grid, cfg.grid, cfg.heatmap_sigma)?;
        batch.push((ModelInput { image, seg, heatmaps }, i as usize));
    }
    Ok((model, batch))
}

fn full() -> Result<Vec<CheckResult>> {
    let (model, batch) = tiny_full_model()?;
    let mut out = Vec::new();
    for (name, w) in [
        ("full_ce_only", LossWeights { lambda1: 1.0, lambda2: 0.0 }),
        ("full_combined", LossWeights::default()),
    ] {
        // gates frozen at the base point, one per sample
        let alphas = batch
            .iter()
            .map(|(input, y)| Ok(losses::dare_loss(&model.logits(input)?, *y)?.1.alpha))
            .collect::<Result<Vec<f64>>>()?;
        let n = batch.len() as f64;
        out.push(check_store(name, &model.params, &[], |t, b, _| {
            let mut total: Option<Var> = None;
            for ((input, y), &alpha) in batch.iter().zip(&alphas) {
                let logits = model.forward_on(t, b, input)?.logits;
                let ce = t.cross_entropy(logits, *y)?;
                let mut l = t.scale(ce, w.lambda1 / n)?;
                if w.lambda2 != 0.0 {
                    let (d, _) = t.dare_loss(logits, *y, Some(alpha))?;
                    let d = t.scale(d, w.lambda2 / n)?;
                    l = t.add(l, d)?;
                }
                total = Some(match total {
                    Some(acc) => t.add(acc, l)?,
                    None => l,
                });
            }
            Ok(total.expect("non-empty batch"))
        })?);
    }
    Ok(out)
}

pub fn run_gradcheck(scope: Scope) -> Result<ScopeReport> {
    let checks = match scope {
        Scope::Primitives => primitives()?,
        Scope::Ssgm => ssgm()?,
        Scope::Cfb => cfb()?,
        Scope::Full => full()?,
    };
    if checks.is_empty() {
        return contract_err("no checks ran");
    }
    Ok(ScopeReport { scope, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn every_scope_passes() {
        for s in Scope::ALL {
            let r = run_gradcheck(s).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
