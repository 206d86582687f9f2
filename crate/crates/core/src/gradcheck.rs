//! Central finite-difference comparison against tape gradients.

use serde::Serialize;

use crate::error::{contract_err, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
    pub worst_index: usize,
}

/// Chooses `probes` distinct coordinates out of `n` (all of them when
/// `probes >= n`).
pub fn probe_indices(n: usize, probes: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if probes < n {
        Rng::from_seed(seed).shuffle(&mut idx);
        idx.truncate(probes);
        idx.sort_unstable();
    }
    idx
}

/// Compares `analytic` with central differences of `f` around `x0` on
/// sampled coordinates.
pub fn grad_check_flat<F>(
    mut f: F,
    x0: &[f64],
    analytic: &[f64],
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if probes == 0 {
        return contract_err("grad_check needs at least one probe");
    }
    assert_eq!(x0.len(), analytic.len());
    let idx = probe_indices(x0.len(), probes, seed);
    let mut x = x0.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        probes: idx.len(),
        worst_index: idx[0],
    };
    for &i in &idx {
        x[i] = x0[i] + FD_STEP;
        let up = f(&x)?;
        x[i] = x0[i] - FD_STEP;
        let down = f(&x)?;
        x[i] = x0[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Checks the gradient of the scalar built by `f` from a single input.
pub fn grad_check<F>(f: F, x: &Tensor, probes: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |data: &[f64], with_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let mut t = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        t.requires_grad = with_grad;
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        if tape.value(out).numel() != 1 {
            return contract_err("grad_check function must return a scalar");
        }
        let value = tape.scalar(out);
        if !with_grad {
            return Ok((value, None));
        }
        let grads = tape.backward(out)?;
        let g = grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; data.len()]);
        Ok((value, Some(g)))
    };
    let (_, analytic) = eval(x.data(), true)?;
    let analytic = analytic.expect("requested gradient");
    grad_check_flat(|d| Ok(eval(d, false)?.0), x.data(), &analytic, probes, seed)
}
