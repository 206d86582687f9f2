//! Tape-free entry points for the primitive operators. Each call records a
//! throwaway tape so the numbers match the differentiable path exactly.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TokenGrid};

fn unary(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

fn binary(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let out = f(&mut tape, va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |t, a, b| t.matmul(a, b))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, x| t.softmax_rows(x))
}

pub fn spatial_norm(x: &TokenGrid) -> Result<TokenGrid> {
    TokenGrid::from_tensor(unary(x.tensor(), |t, x| t.spatial_norm(x))?)
}

pub fn conv2d(x: &TokenGrid, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.tensor().clone());
    let wv = tape.constant(kernel.clone());
    let bv = tape.constant(bias.clone());
    let out = tape.conv2d(xv, wv, bv, padding)?;
    TokenGrid::from_tensor(tape.value(out).clone())
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, x| t.relu(x))
}

pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(weight.clone());
    let bv = tape.constant(bias.clone());
    let out = tape.linear(xv, wv, bv)?;
    Ok(tape.value(out).clone())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |t, a, b| t.add(a, b))
}

pub fn scale(x: &Tensor, s: f64) -> Result<Tensor> {
    unary(x, |t, x| t.scale(x, s))
}

pub fn concat_channels(a: &TokenGrid, b: &TokenGrid) -> Result<TokenGrid> {
    TokenGrid::from_tensor(binary(a.tensor(), b.tensor(), |t, a, b| t.concat_channels(a, b))?)
}

pub fn avgpool2(x: &TokenGrid) -> Result<TokenGrid> {
    TokenGrid::from_tensor(unary(x.tensor(), |t, x| t.avgpool2(x))?)
}
