//! Named parameter storage.
//!
//! Parameters live in one flat, ordered store; model structs keep
//! [`ParamId`]s into it. Binding the store to an empty tape makes every
//! parameter a leaf whose tape position equals its id.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{contract_err, Result};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
}

/// Tape variables for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        self.frozen.push(false);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Pushes every parameter onto `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t)).collect())
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            match t.grad.as_mut() {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => t.grad = Some(vec![0.0; t.numel()]),
            }
        }
    }

    /// Adds the gradients of a backward pass into each parameter's slot.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            grads.accumulate_into(v, t);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| match &t.grad {
                Some(g) => g.clone(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return contract_err(format!(
                "flat vector has {} values, store has {}",
                flat.len(),
                self.num_scalars()
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces the value of `name`, which must exist with the same shape.
    pub fn load(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let Some(id) = self.id(name) else {
            return contract_err(format!("unknown parameter `{name}`"));
        };
        let t = &mut self.tensors[id.0];
        if t.shape() != value.shape() {
            return contract_err(format!(
                "parameter `{name}` has shape {:?}, file has {:?}",
                t.shape(),
                value.shape()
            ));
        }
        t.data_mut().copy_from_slice(value.data());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub total: usize,
    /// Counts keyed by the first two components of the dotted name.
    pub by_module: BTreeMap<String, usize>,
    pub by_param: BTreeMap<String, usize>,
}

pub fn count_params(store: &ParamStore) -> ParamCounts {
    let mut by_module = BTreeMap::new();
    let mut by_param = BTreeMap::new();
    for (name, t) in store.iter() {
        let module: Vec<&str> = name.split('.').take(2).collect();
        *by_module.entry(module.join(".")).or_insert(0) += t.numel();
        by_param.insert(name.to_string(), t.numel());
    }
    ParamCounts {
        total: store.num_scalars(),
        by_module,
        by_param,
    }
}

/// Zero-mean uniform in `+-sqrt(6 / fan_in)` (variance `2 / fan_in`).
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.range(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// A `(weight, bias)` pair for a convolution or a linear map.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    /// `[c_out, c_in, k, k]` convolution with fan-in init and the given
    /// constant bias.
    pub fn conv(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias_init: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[c_out, c_in, k, k], c_in * k * k, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::full(&[c_out], bias_init));
        Self { weight, bias }
    }

    /// `[d_out, d_in]` linear map with fan-in init and zero bias.
    pub fn linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[d_out, d_in], d_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias }
    }

    pub fn apply_conv(&self, tape: &mut Tape, b: &Bound, x: Var, pad: usize) -> Result<Var> {
        tape.conv2d(x, b.get(self.weight), b.get(self.bias), pad)
    }

    pub fn apply_linear(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, b.get(self.weight), b.get(self.bias))
    }
}
