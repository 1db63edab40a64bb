//! Define-by-run reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Graph`] is a tape: every primitive applied through it appends a node
//! holding the output value plus whatever the backward rule needs. Node
//! inputs always precede the node, so the tape order is a topological order
//! and the backward pass is a single reverse sweep.
//!
//! Broadcasting is limited to `add`/`sub` with a right operand whose shape is
//! a suffix of the left operand's shape (bias-add), and to `scale`.

use crate::error::{Error, Result};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        shared_rhs: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum {
        a: Var,
        axis: usize,
    },
    Mean {
        a: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Square {
        a: Var,
    },
    Sqrt {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Variance stabilizer of [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Leaves that require grad but were unreachable from the loss report
    /// zeros; nodes that do not require grad report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !self.backward_done || !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        op_node: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if let Some(bad) = value.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op} produced non-finite value {} at flat index {bad}",
                value.data()[bad]
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: op_node,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------------
    // primitives

    /// Matrix product over the last two axes.
    ///
    /// `a` is `(..., n, k)`. `b` is either a shared `(k, p)` matrix or has the
    /// same leading batch axes as `a`, i.e. `(..., k, p)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let p = sb[sb.len() - 1];
        let (shared_rhs, batches, n) = if sb.len() == 2 {
            (true, 1, sa[..sa.len() - 1].iter().product::<usize>())
        } else if sb.len() == sa.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            (false, sa[..sa.len() - 2].iter().product(), sa[sa.len() - 2])
        } else {
            return Err(Error::dim("matmul", &sa, &sb));
        };
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(p);
        let mut out = vec![0.0; batches * n * p];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batches {
                let a_s = &av[bi * n * k..(bi + 1) * n * k];
                let b_s = if shared_rhs {
                    bv
                } else {
                    &bv[bi * k * p..(bi + 1) * k * p]
                };
                gemm(
                    n,
                    k,
                    p,
                    a_s,
                    (k, 1),
                    b_s,
                    (p, 1),
                    &mut out[bi * n * p..(bi + 1) * n * p],
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, shared_rhs }, &[a, b])
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b`, where `b` may be broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x + y);
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// `a - b`, where `b` may be broadcast over `a`'s leading axes.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("subtract", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x - y);
        self.push("subtract", value, Op::Sub { a, b }, &[a, b])
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "elementwise-multiply",
                self.shape(a),
                self.shape(b),
            ));
        }
        let value = self.zip_broadcast(a, b, |x, y| x * y);
        self.push("elementwise-multiply", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scalar-multiply", value, Op::Scale { a, factor }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu { a }, &[a])
    }

    /// Softmax along `axis`. Each slice is shifted by its maximum first.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| x[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    y[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= total;
                }
            }
        }
        let value = Tensor::new(shape, y)?;
        self.push("softmax-over-axis", value, Op::Softmax { a, axis }, &[a])
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// variance, then applies `gain` and `bias` (both shaped like that axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("rank >= 1");
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::dim("layer-normalize", &shape, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                y[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, y)?;
        self.push(
            "layer-normalize",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let name = if mean {
            "mean-over-axis"
        } else {
            "sum-over-axis"
        };
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "{name}: axis {axis} for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        let op = if mean {
            Op::Mean { a, axis }
        } else {
            Op::Sum { a, axis }
        };
        self.push(name, value, op, &[a])
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        self.sum(flat, 0)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} for shape {base:?}"
            )));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim("concat-over-axis", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat-over-axis",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::Contract(format!(
                "transpose needs rank >= 2, got {shape:?}"
            )));
        }
        let value = transpose_last2(self.value(a));
        self.push("transpose", value, Op::Transpose { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Embedding lookup: gathers rows of `table` (axis 0).
    ///
    /// The output shape is `ids_shape` followed by the table's trailing axes.
    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding-lookup", ids_shape, &[ids.len()]));
        }
        let rows = tshape[0];
        let width: usize = tshape[1..].iter().product();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                index: bad,
                extent: rows,
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        let mut shape = ids_shape.to_vec();
        shape.extend_from_slice(&tshape[1..]);
        let value = Tensor::new(shape, out)?;
        self.push(
            "embedding-lookup",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exponential", value, Op::Exp { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push("logarithm", value, Op::Log { a }, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, Op::Square { a }, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Numeric(format!(
                "square-root of negative value {bad}"
            )));
        }
        let value = self.value(a).map(f64::sqrt);
        self.push("square-root", value, Op::Sqrt { a }, &[a])
    }

    // ---------------------------------------------------------------------
    // backward

    /// Accumulates d`loss`/d`v` into every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; rebuild it with a new forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &upstream);
            self.grads[i] = Some(upstream);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&mut self, i: usize, dy: &[f64]) {
        // The op is moved out so input grads can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_rhs } => self.backprop_matmul(i, *a, *b, *shared_rhs, dy),
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = self.acc(*b) {
                    let nb = gb.len();
                    for (k, d) in dy.iter().enumerate() {
                        gb[k % nb] += sign * d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let bv = self.nodes[b.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(&bv) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = self.acc(*b) {
                    for ((g, d), x) in gb.iter_mut().zip(dy).zip(&av) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += factor * d);
                }
            }
            Op::Relu { a } => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(&y) {
                        if *y > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let y = self.nodes[i].value.data().to_vec();
                let (outer, len, inner) = split_axis(self.nodes[i].value.shape(), *axis);
                if let Some(ga) = self.acc(*a) {
                    for o in 0..outer {
                        for k in 0..inner {
                            let base = o * len * inner + k;
                            let dot: f64 = (0..len)
                                .map(|j| dy[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                ga[idx] += y[idx] * (dy[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.nodes[gain.0].value.numel();
                let g = self.nodes[gain.0].value.data().to_vec();
                let rows = inv_std.len();
                if let Some(gg) = self.acc(*gain) {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += dy[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(*bias) {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += dy[r * n + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    let nf = n as f64;
                    for r in 0..rows {
                        let row = r * n..(r + 1) * n;
                        let dxhat: Vec<f64> = (0..n).map(|j| dy[r * n + j] * g[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat
                            .iter()
                            .zip(&xhat[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in 0..n {
                            gx[r * n + j] +=
                                inv_std[r] / nf * (nf * dxhat[j] - s1 - xhat[r * n + j] * s2);
                        }
                    }
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let (outer, len, inner) = split_axis(self.nodes[a.0].value.shape(), *axis);
                let factor = if matches!(op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                if let Some(ga) = self.acc(*a) {
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (g, d) in dst.iter_mut().zip(&dy[o * inner..(o + 1) * inner]) {
                                *g += factor * d;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if let Some(gv) = self.acc(*v) {
                        for o in 0..outer {
                            let src = &dy
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (g, d) in gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *g += d;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Transpose { a } => {
                let upstream =
                    Tensor::new(self.nodes[i].value.shape().to_vec(), dy.to_vec()).expect("shape");
                let back = transpose_last2(&upstream);
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(back.data()).for_each(|(g, d)| *g += d);
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Gather { table, ids } => {
                let width: usize = self.nodes[table.0].value.shape()[1..].iter().product();
                if let Some(gt) = self.acc(*table) {
                    for (k, &row) in ids.iter().enumerate() {
                        for j in 0..width {
                            gt[row * width + j] += dy[k * width + j];
                        }
                    }
                }
            }
            Op::Exp { a } => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(&y) {
                        *g += d * y;
                    }
                }
            }
            Op::Log { a } => {
                let x = self.nodes[a.0].value.data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(&x) {
                        *g += d / x;
                    }
                }
            }
            Op::Square { a } => {
                let x = self.nodes[a.0].value.data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(&x) {
                        *g += 2.0 * x * d;
                    }
                }
            }
            Op::Sqrt { a } => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for ((g, d), y) in ga.iter_mut().zip(dy).zip(&y) {
                        *g += 0.5 * d / y;
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn backprop_matmul(&mut self, i: usize, a: Var, b: Var, shared_rhs: bool, dy: &[f64]) {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let k = sa[sa.len() - 1];
        let p = sb[sb.len() - 1];
        let (batches, n) = if shared_rhs {
            (1, self.nodes[a.0].value.numel() / k)
        } else {
            (sa[..sa.len() - 2].iter().product(), sa[sa.len() - 2])
        };
        debug_assert_eq!(dy.len(), self.nodes[i].value.numel());
        let av = self.nodes[a.0].value.data().to_vec();
        let bv = self.nodes[b.0].value.data().to_vec();
        if let Some(ga) = self.acc(a) {
            // dA = dY · Bᵀ
            for bi in 0..batches {
                let b_s = if shared_rhs {
                    &bv[..]
                } else {
                    &bv[bi * k * p..(bi + 1) * k * p]
                };
                gemm(
                    n,
                    p,
                    k,
                    &dy[bi * n * p..(bi + 1) * n * p],
                    (p, 1),
                    b_s,
                    (1, p),
                    &mut ga[bi * n * k..(bi + 1) * n * k],
                );
            }
        }
        if let Some(gb) = self.acc(b) {
            // dB = Aᵀ · dY
            for bi in 0..batches {
                let g_s = if shared_rhs {
                    &mut gb[..]
                } else {
                    &mut gb[bi * k * p..(bi + 1) * k * p]
                };
                gemm(
                    k,
                    n,
                    p,
                    &av[bi * n * k..(bi + 1) * n * k],
                    (1, k),
                    &dy[bi * n * p..(bi + 1) * n * p],
                    (p, 1),
                    g_s,
                );
            }
        }
    }
}

/// `c += a · b` for an `m×k` by `k×n` product; strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches, and `c`
    // is a distinct mutable slice with row stride `n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batches = t.numel() / (rows * cols);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batches {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[off + j * rows + i] = src[off + i * cols + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Tensor::new(new_shape, out).expect("transpose shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::eye(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2, 1], &[1.0, 1.0, 2.0, 0.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 6.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_broadcasts_suffix_only() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let wrong = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(g.add(x, wrong), Err(Error::Dimension { .. })));
        let y2 = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(g.mul(x, y2).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x, 0).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx, 0).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.param(Tensor::from_vec(vec![5.0]));
        let s = g.sum(x, 0).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0]));
        let s = g.sum(x, 0).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0]));
        assert!(matches!(g.log(x), Err(Error::Numeric(_))));
        let big = g.constant(Tensor::from_vec(vec![1000.0]));
        assert!(matches!(g.exp(big), Err(Error::Numeric(_))));
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            g.gather(table, &[0, 3], &[2]),
            Err(Error::Index {
                index: 3,
                extent: 3
            })
        ));
    }

    #[test]
    fn concat_backward_splits_upstream() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(vec![2, 1]));
        let b = g.param(Tensor::zeros(vec![2, 2]));
        let c = g.concat(&[a, b], 1).unwrap();
        let w = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let prod = g.mul(c, w).unwrap();
        let s = g.sum_all(prod).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
