//! Reverse-mode gradient tape.
//!
//! Every primitive evaluates eagerly and appends one node. Nodes only
//! reference earlier nodes, so the push order is a topological order and
//! `backward` walks it in reverse exactly once.
//!
//! Values are viewed as `rows x cols` matrices where `rows` is the first
//! extent; a `[C, H, W]` grid is therefore `C` rows of `H*W` tokens.

use crate::error::{contract_err, dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::losses::{self, DareDiagnostics};
use crate::tensor::Tensor;

/// Epsilon used by both normalizers.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { x: Var, s: Var },
    AddRowBias { x: Var, bias: Var },
    MulRowScale { x: Var, gain: Var },
    Relu(Var),
    SoftmaxRows(Var),
    NormRows { x: Var, inv_std: Vec<f64> },
    NormCols { x: Var, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    ConcatRows(Var, Var),
    AvgPool2 { x: Var, c: usize, h: usize, w: usize },
    MeanCols(Var),
    Reshape(Var),
    Sum(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Dare { logits: Var, target: usize, y_index: usize, factor: f64, sig: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::MulRowScale { .. } => "mul_row_scale",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::NormRows { .. } => "spatial_norm",
            Op::NormCols { .. } => "token_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConcatRows(..) => "concat_channels",
            Op::AvgPool2 { .. } => "avgpool2",
            Op::MeanCols(_) => "mean_tokens",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Dare { .. } => "dare_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) | Op::ConcatRows(a, b) => {
                vec![a, b]
            }
            Op::ScaleBy { x, s } => vec![x, s],
            Op::AddRowBias { x, bias } => vec![x, bias],
            Op::MulRowScale { x, gain } => vec![x, gain],
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::SoftmaxRows(x)
            | Op::NormRows { x, .. }
            | Op::NormCols { x, .. }
            | Op::AvgPool2 { x, .. }
            | Op::MeanCols(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::SumSquares(x) => vec![x],
            Op::CrossEntropy { logits, .. } | Op::Dare { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one optional buffer per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad` (allocating it if absent).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        let Some(g) = self.get(v) else { return };
        let slot = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, d) in slot.iter_mut().zip(g) {
            *s += d;
        }
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    t.rows_cols()
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Non-finite parameter values are not rejected here; the first op
    /// that reads them reports [`Error::NonFinite`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_grad())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `op(a) * op(b)` on the matrix views, with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = rows_cols(self.value(a));
        let (br, bc) = rows_cols(self.value(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return dim_err(format!(
                "matmul inner extents differ: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, self.data(a), ta, self.data(b), tb, 0.0, &mut out);
        self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb, m, k, n })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s))
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return dim_err(format!("scale_by needs a scalar, got {:?}", self.shape(s)));
        }
        let sv = self.scalar(s);
        let out = self.data(x).iter().map(|v| v * sv).collect();
        self.push(self.shape(x).to_vec(), out, Op::ScaleBy { x, s })
    }

    /// Adds `bias[r]` to every entry of row `r`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.value(x));
        if self.value(bias).numel() != r {
            return dim_err(format!(
                "bias of {} values for {r} rows",
                self.value(bias).numel()
            ));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for (row, &bv) in out.chunks_mut(c).zip(b) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        self.push(self.shape(x).to_vec(), out, Op::AddRowBias { x, bias })
    }

    /// Multiplies row `r` by `gain[r]`.
    pub fn mul_row_scale(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.value(x));
        if self.value(gain).numel() != r {
            return dim_err(format!(
                "gain of {} values for {r} rows",
                self.value(gain).numel()
            ));
        }
        let g = self.data(gain);
        let mut out = self.data(x).to_vec();
        for (row, &gv) in out.chunks_mut(c).zip(g) {
            row.iter_mut().for_each(|v| *v *= gv);
        }
        self.push(self.shape(x).to_vec(), out, Op::MulRowScale { x, gain })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.value(x));
        let mut out = vec![0.0; r * c];
        kernels::softmax_rows(self.data(x), r, c, &mut out);
        self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x))
    }

    /// Per-channel standardization over spatial positions (rows of the
    /// `[C, P]` view), no affine.
    pub fn spatial_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.value(x));
        let mut out = vec![0.0; r * c];
        let inv_std = kernels::standardize_rows(self.data(x), r, c, NORM_EPS, &mut out);
        self.push(self.shape(x).to_vec(), out, Op::NormRows { x, inv_std })
    }

    /// Per-token standardization over channels (columns of the `[C, P]`
    /// view), no affine.
    pub fn token_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.value(x));
        let mut out = vec![0.0; r * c];
        let inv_std = kernels::standardize_cols(self.data(x), r, c, NORM_EPS, &mut out);
        self.push(self.shape(x).to_vec(), out, Op::NormCols { x, inv_std })
    }

    /// Stride-1 cross-correlation of `x: [C_in, H, W]` with
    /// `w: [C_out, C_in, kh, kw]` plus `b: [C_out]`, zero padded.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return dim_err(format!("conv2d wants [C,H,W] and [O,C,kh,kw], got {xs:?}, {ws:?}"));
        }
        if ws[1] != xs[0] {
            return dim_err(format!("conv2d: kernel expects {} input channels, input has {}", ws[1], xs[0]));
        }
        if self.value(b).numel() != ws[0] {
            return dim_err(format!("conv2d: bias has {} values for {} outputs", self.value(b).numel(), ws[0]));
        }
        let geom = ConvGeom { c_in: xs[0], h: xs[1], w: xs[2], kh: ws[2], kw: ws[3], pad };
        if !geom.fits() {
            return dim_err(format!("conv2d: kernel {}x{} larger than padded input {:?}", ws[2], ws[3], xs));
        }
        let cols = kernels::im2col(self.data(x), geom);
        let (c_out, p) = (ws[0], geom.out_h() * geom.out_w());
        let mut out = vec![0.0; c_out * p];
        kernels::gemm(c_out, geom.patch_len(), p, 1.0, self.data(w), false, &cols, false, 0.0, &mut out);
        for (row, &bv) in out.chunks_mut(p).zip(self.data(b)) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        let shape = vec![c_out, geom.out_h(), geom.out_w()];
        self.push(shape, out, Op::Conv2d { x, w, b, geom, cols })
    }

    /// Stacks `a` on top of `b` along the first extent; the remaining
    /// extents must match.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1..] != sb[1..] {
            return dim_err(format!("concat_channels: {sa:?} vs {sb:?}"));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        self.push(shape, out, Op::ConcatRows(a, b))
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return dim_err(format!("avgpool2 needs [C,H,W] with even H and W, got {s:?}"));
        }
        let out = kernels::avgpool2(self.data(x), s[0], s[1], s[2]);
        self.push(
            vec![s[0], s[1] / 2, s[2] / 2],
            out,
            Op::AvgPool2 { x, c: s[0], h: s[1], w: s[2] },
        )
    }

    /// Mean over tokens: `[C, ...] -> [C]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.value(x));
        let out = self
            .data(x)
            .chunks(c)
            .map(|row| row.iter().sum::<f64>() / c as f64)
            .collect();
        self.push(vec![r], out, Op::MeanCols(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape(x)));
        }
        let out = self.data(x).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(x))
    }

    /// `weight * x + bias` on the matrix view of `x` (`[D]` or `[D, P]`).
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(weight, x)?;
        self.add_row_bias(y, bias)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().map(|v| v * v).sum();
        self.push(vec![1], vec![s], Op::SumSquares(x))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.data(logits);
        let loss = losses::cross_entropy(z, target)?;
        let probs = losses::softmax(z);
        self.push(vec![1], vec![loss], Op::CrossEntropy { logits, target, probs })
    }

    /// Repulsion loss; `alpha` pins the confidence gate, otherwise it is
    /// computed from the current logits. Either way the gate is a constant
    /// for differentiation.
    pub fn dare_loss(
        &mut self,
        logits: Var,
        target: usize,
        alpha: Option<f64>,
    ) -> Result<(Var, DareDiagnostics)> {
        let (loss, diag) = losses::dare_loss_gated(self.data(logits), target, alpha)?;
        let sig = losses::sigmoid(diag.z_y_prime - diag.z_x);
        let op = Op::Dare {
            logits,
            target,
            y_index: diag.y_index,
            factor: 1.0 + diag.alpha,
            sig,
        };
        Ok((self.push(vec![1], vec![loss], op)?, diag))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Intermediate buffers are dropped; only leaves are of interest
        // but keeping all is harmless for tests that inspect them.
        Ok(Gradients { grads })
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.ng(a) {
                    let da = acc(grads, a, m * k);
                    if ta {
                        kernels::gemm(k, n, m, 1.0, bd, tb, g, true, 1.0, da);
                    } else {
                        kernels::gemm(m, n, k, 1.0, g, false, bd, !tb, 1.0, da);
                    }
                }
                if self.ng(b) {
                    let db = acc(grads, b, k * n);
                    if tb {
                        kernels::gemm(n, m, k, 1.0, g, true, ad, ta, 1.0, db);
                    } else {
                        kernels::gemm(k, m, n, 1.0, ad, !ta, g, false, 1.0, db);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(v) {
                        let d = acc(grads, v, g.len());
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let bd = self.data(b);
                    let d = acc(grads, a, g.len());
                    for ((d, g), bv) in d.iter_mut().zip(g).zip(bd) {
                        *d += g * bv;
                    }
                }
                if self.ng(b) {
                    let ad = self.data(a);
                    let d = acc(grads, b, g.len());
                    for ((d, g), av) in d.iter_mut().zip(g).zip(ad) {
                        *d += g * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                let d = acc(grads, x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
            }
            Op::ScaleBy { x, s } => {
                let xd = self.data(x);
                if self.ng(x) {
                    let sv = self.scalar(s);
                    let d = acc(grads, x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += sv * g);
                }
                if self.ng(s) {
                    let dot: f64 = xd.iter().zip(g).map(|(a, b)| a * b).sum();
                    acc(grads, s, 1)[0] += dot;
                }
            }
            Op::AddRowBias { x, bias } => {
                if self.ng(x) {
                    let d = acc(grads, x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if self.ng(bias) {
                    let r = self.value(bias).numel();
                    let c = g.len() / r;
                    let d = acc(grads, bias, r);
                    for (dv, row) in d.iter_mut().zip(g.chunks(c)) {
                        *dv += row.iter().sum::<f64>();
                    }
                }
            }
            Op::MulRowScale { x, gain } => {
                let r = self.value(gain).numel();
                let c = g.len() / r;
                if self.ng(x) {
                    let gd = self.data(gain);
                    let d = acc(grads, x, g.len());
                    for ((drow, grow), &gv) in d.chunks_mut(c).zip(g.chunks(c)).zip(gd) {
                        drow.iter_mut().zip(grow).for_each(|(d, g)| *d += g * gv);
                    }
                }
                if self.ng(gain) {
                    let xd = self.data(x);
                    let d = acc(grads, gain, r);
                    for ((dv, grow), xrow) in d.iter_mut().zip(g.chunks(c)).zip(xd.chunks(c)) {
                        *dv += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Relu(x) => {
                let d = acc(grads, x, g.len());
                for ((d, g), &yv) in d.iter_mut().zip(g).zip(y) {
                    if yv > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = node.value.rows_cols();
                let d = acc(grads, x, g.len());
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, g), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (g - dot);
                    }
                }
            }
            Op::NormRows { x, ref inv_std } => {
                let (_, c) = node.value.rows_cols();
                let n = c as f64;
                let d = acc(grads, x, g.len());
                for (((drow, grow), yrow), &is) in
                    d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(inv_std)
                {
                    let mg = grow.iter().sum::<f64>() / n;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, g), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += is * (g - mg - yv * mgy);
                    }
                }
            }
            Op::NormCols { x, ref inv_std } => {
                let (r, c) = node.value.rows_cols();
                let n = r as f64;
                let mut mg = vec![0.0; c];
                let mut mgy = vec![0.0; c];
                for (grow, yrow) in g.chunks(c).zip(y.chunks(c)) {
                    for j in 0..c {
                        mg[j] += grow[j];
                        mgy[j] += grow[j] * yrow[j];
                    }
                }
                let d = acc(grads, x, g.len());
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    for j in 0..c {
                        drow[j] += inv_std[j] * (grow[j] - mg[j] / n - yrow[j] * mgy[j] / n);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, ref cols } => {
                let c_out = self.shape(w)[0];
                let p = geom.out_h() * geom.out_w();
                let kl = geom.patch_len();
                if self.ng(w) {
                    let dw = acc(grads, w, c_out * kl);
                    kernels::gemm(c_out, p, kl, 1.0, g, false, cols, true, 1.0, dw);
                }
                if self.ng(b) {
                    let db = acc(grads, b, c_out);
                    for (dv, row) in db.iter_mut().zip(g.chunks(p)) {
                        *dv += row.iter().sum::<f64>();
                    }
                }
                if self.ng(x) {
                    let mut dcols = vec![0.0; kl * p];
                    kernels::gemm(kl, c_out, p, 1.0, self.data(w), true, g, false, 0.0, &mut dcols);
                    let dx = acc(grads, x, geom.c_in * geom.h * geom.w);
                    kernels::col2im_add(&dcols, geom, dx);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(a).numel();
                if self.ng(a) {
                    let d = acc(grads, a, na);
                    d.iter_mut().zip(&g[..na]).for_each(|(d, g)| *d += g);
                }
                if self.ng(b) {
                    let d = acc(grads, b, g.len() - na);
                    d.iter_mut().zip(&g[na..]).for_each(|(d, g)| *d += g);
                }
            }
            Op::AvgPool2 { x, c, h, w } => {
                let (oh, ow) = (h / 2, w / 2);
                let d = acc(grads, x, c * h * w);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = 0.25 * g[(ch * oh + oy) * ow + ox];
                            let base = (ch * h + 2 * oy) * w + 2 * ox;
                            d[base] += gv;
                            d[base + 1] += gv;
                            d[base + w] += gv;
                            d[base + w + 1] += gv;
                        }
                    }
                }
            }
            Op::MeanCols(x) => {
                let (r, c) = rows_cols(self.value(x));
                let d = acc(grads, x, r * c);
                for (drow, &gv) in d.chunks_mut(c).zip(g) {
                    let v = gv / c as f64;
                    drow.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::Reshape(x) => {
                let d = acc(grads, x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::Sum(x) => {
                let n = self.value(x).numel();
                acc(grads, x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumSquares(x) => {
                let xd = self.data(x);
                let d = acc(grads, x, xd.len());
                d.iter_mut().zip(xd).for_each(|(d, v)| *d += 2.0 * v * g[0]);
            }
            Op::CrossEntropy { logits, target, ref probs } => {
                let d = acc(grads, logits, probs.len());
                for (i, (d, p)) in d.iter_mut().zip(probs).enumerate() {
                    let onehot = if i == target { 1.0 } else { 0.0 };
                    *d += g[0] * (p - onehot);
                }
            }
            Op::Dare { logits, target, y_index, factor, sig } => {
                let n = self.value(logits).numel();
                let d = acc(grads, logits, n);
                d[target] -= g[0] * sig;
                d[y_index] += g[0] * factor * sig;
            }
        }
    }
}
