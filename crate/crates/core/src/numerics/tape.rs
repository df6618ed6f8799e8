//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the tape in reverse and accumulates vector-Jacobian products into the
//! parents that require gradients. Nodes that do not depend on any
//! gradient-carrying leaf are never visited on the way back, so frozen
//! sub-networks cost nothing in the backward pass.

use std::collections::HashMap;
use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written backward pass.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one gradient per input (`None` when the
/// input does not need one).
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geometry: ConvGeometry },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { input: Var, batch: usize, rows: usize, cols: usize },
    Softmax { input: Var, width: usize },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    RepeatLeading { input: Var, times: usize },
    Sum(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was tracked.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the loss with respect to `var`, zeros when untracked.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input data; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Reuses the same node when the parameter
    /// appears more than once in the forward pass, so gradients accumulate.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&var) = self.params.get(&id) {
            return var;
        }
        let p = store.get(id);
        let var = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.params.insert(id, var);
        var
    }

    /// Tape node recorded for a parameter, if it was used.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Same-padded 2-D convolution over `[n, c_in, rows, cols]` with
    /// kernels `[c_out, c_in, k, k]` and optional bias `[c_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        if xs.len() != 4 || ks.len() != 4 {
            return Err(dim_err!("conv2d expects 4-d input and kernel, got {:?} and {:?}", xs, ks));
        }
        if ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(dim_err!("conv2d kernel must be square with odd size, got {:?}", ks));
        }
        if ks[1] != xs[1] {
            return Err(dim_err!("conv2d kernel expects {} input channels, input has {}", ks[1], xs[1]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(dim_err!("conv2d bias shape {:?} != [{}]", self.shape(b), ks[0]));
            }
        }
        let geometry = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ks[0],
            rows: xs[2],
            cols: xs[3],
            kernel: ks[2],
        };
        let out = kernels::conv2d_forward(
            &geometry,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = vec![geometry.batch, geometry.out_channels, geometry.rows, geometry.cols];
        let rg = self.rg(&[input, kernel]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::from_raw(shape, out), Op::Conv2d { input, kernel, bias, geometry }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            Tensor::from_raw(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(dim_err!("{} shape mismatch: {:?} vs {:?}", name, ta.shape(), tb.shape()));
        };
        Ok((value, self.rg(&[a, b])))
    }

    /// Element-wise sum. Shapes must match exactly or one side is a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.requires_grad(a);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        let rg = self.requires_grad(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.requires_grad(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.requires_grad(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Matrix product over the two trailing axes. Leading axes must match
    /// exactly (no broadcasting).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(dim_err!("matmul leading extents differ: {:?} vs {:?}", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {:?} vs {:?}", sa, sb));
        }
        let batch = sa[..sa.len() - 2].iter().product();
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), batch, m, k, n);
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Matmul { a, b, batch, m, k, n }, rg))
    }

    pub fn transpose_last2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(dim_err!("transpose needs at least 2 axes, got {:?}", s));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let out = kernels::transpose_last2(self.value(input).data(), batch, rows, cols);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([cols, rows]);
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::from_raw(shape, out), Op::TransposeLast2 { input, batch, rows, cols }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let width = *t.shape().last().expect("tensor has at least one axis");
        let out = Tensor::from_raw(t.shape().to_vec(), kernels::softmax_rows(t.data(), width));
        let rg = self.requires_grad(input);
        self.push(out, Op::Softmax { input, width }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(input).reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(v, Op::Reshape(input), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(dim_err!("concat shape mismatch: {:?} vs {:?} on axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_raw(shape, data), Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(dim_err!("narrow [{}, {}) on axis {} out of range for {:?}", start, start + len, axis, s));
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * extent + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.requires_grad(input);
        Ok(self.push(Tensor::from_raw(shape, data), Op::Narrow { input, axis, start }, rg))
    }

    /// Tiles `input` `times` times along a new leading axis. This is the
    /// explicit stand-in for batch broadcasting of per-sample parameters.
    pub fn repeat_leading(&mut self, input: Var, times: usize) -> Var {
        let t = self.value(input);
        let mut data = Vec::with_capacity(t.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(t.shape());
        let rg = self.requires_grad(input);
        self.push(Tensor::from_raw(shape, data), Op::RepeatLeading { input, times }, rg)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(var) {
            return;
        }
        let len = self.value(var).numel();
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
        contrib(slot);
    }

    /// Like [`Self::accumulate`] for a freshly computed buffer, which becomes
    /// the slot itself when nothing has arrived yet.
    fn accumulate_owned(&self, grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(slot) => add_into(slot, &contrib),
            empty => *empty = Some(contrib),
        }
    }

    /// Gradient flowing into a possibly scalar-broadcast operand.
    fn accumulate_broadcast(&self, grads: &mut [Option<Vec<f64>>], var: Var, upstream: &[f64], factor: impl Fn(usize) -> f64) {
        let len = self.value(var).numel();
        if len == upstream.len() {
            self.accumulate(grads, var, |s| {
                for (i, (d, g)) in s.iter_mut().zip(upstream).enumerate() {
                    *d += g * factor(i);
                }
            });
        } else {
            let total: f64 = upstream.iter().enumerate().map(|(i, g)| g * factor(i)).sum();
            self.accumulate(grads, var, |s| s[0] += total);
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geometry } => {
                let (di, dk, db) = kernels::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    self.requires_grad(*input),
                    self.requires_grad(*kernel),
                );
                if let Some(di) = di {
                    self.accumulate_owned(grads, *input, di);
                }
                if let Some(dk) = dk {
                    self.accumulate_owned(grads, *kernel, dk);
                }
                if let Some(b) = bias {
                    self.accumulate_owned(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, g, |_| 1.0);
                self.accumulate_broadcast(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, g, |_| 1.0);
                self.accumulate_broadcast(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                self.accumulate_broadcast(grads, *a, g, |i| pick(vb, i));
                self.accumulate_broadcast(grads, *b, g, |i| pick(va, i));
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |s| {
                    for (d, gv) in s.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |s| {
                for ((d, gv), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.accumulate(grads, *a, |s| {
                for ((d, gv), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => self.accumulate(grads, *a, |s| {
                for ((d, gv), y) in s.iter_mut().zip(g).zip(out.data()) {
                    if *y > 0.0 {
                        *d += gv;
                    }
                }
            }),
            Op::Matmul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.requires_grad(*a) {
                    let bt = kernels::transpose_last2(self.value(*b).data(), batch, k, n);
                    let da = kernels::matmul(g, &bt, batch, m, n, k);
                    self.accumulate_owned(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let at = kernels::transpose_last2(self.value(*a).data(), batch, m, k);
                    let db = kernels::matmul(&at, g, batch, k, m, n);
                    self.accumulate_owned(grads, *b, db);
                }
            }
            Op::TransposeLast2 { input, batch, rows, cols } => {
                let back = kernels::transpose_last2(g, *batch, *cols, *rows);
                self.accumulate_owned(grads, *input, back);
            }
            Op::Softmax { input, width } => self.accumulate(grads, *input, |s| {
                for ((srow, grow), yrow) in s
                    .chunks_exact_mut(*width)
                    .zip(g.chunks_exact(*width))
                    .zip(out.data().chunks_exact(*width))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gv - dot);
                    }
                }
            }),
            Op::Reshape(a) => self.accumulate(grads, *a, |s| add_into(s, g)),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let extent = self.shape(*p)[*axis];
                    self.accumulate(grads, *p, |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..extent * inner];
                            add_into(&mut s[o * extent * inner..][..extent * inner], src);
                        }
                    });
                    offset += extent;
                }
            }
            Op::Narrow { input, axis, start } => {
                let (outer, extent, inner) = split_axis(self.shape(*input), *axis);
                let len = out.shape()[*axis];
                self.accumulate(grads, *input, |s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * extent + start) * inner..][..len * inner];
                        add_into(dst, &g[o * len * inner..][..len * inner]);
                    }
                });
            }
            Op::RepeatLeading { input, times } => {
                let len = self.value(*input).numel();
                self.accumulate(grads, *input, |s| {
                    for t in 0..*times {
                        add_into(s, &g[t * len..(t + 1) * len]);
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |s| {
                for d in s.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.requires_grad(*v)).collect();
                let parts = op.backward(&values, out, g, &needs);
                for (v, part) in inputs.iter().zip(parts) {
                    if let Some(part) = part {
                        self.accumulate_owned(grads, *v, part);
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
