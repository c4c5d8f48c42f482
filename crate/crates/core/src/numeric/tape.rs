//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every primitive appends one node holding its forward value and the inputs
//! it needs for the vector-Jacobian product. Nodes only ever reference earlier
//! nodes, so a single reverse sweep computes all gradients.

use rand::Rng;

use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { scalar: Var, x: Var },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, indices: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Dot(Var, Var),
    Pick { x: Var, index: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that feeds it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

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

    /// The single value of a one-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map(x, |v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Multiply every element of `x` by the one-element node `scalar`.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(scalar), self.shape(x)));
        }
        let s = self.scalar(scalar);
        let value = self.map(x, |v| v * s);
        Ok(self.push(value, Op::ScaleBy { scalar, x }, &[scalar, x]))
    }

    /// Matrix product with vector promotion: `[m,k]x[k,n]`, `[m,k]x[k]`,
    /// `[k]x[k,n]` and `[k]x[k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, ka, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let (kb, n, b_vec) = match sb.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        if ka != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = ka;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let shape = match (a_vec, b_vec) {
            (false, false) => vec![m, n],
            (false, true) => vec![m],
            (true, false) => vec![n],
            (true, true) => vec![],
        };
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [r, c] = *t.shape() else {
            return Err(Error::invalid(
                "transpose",
                format!("expected rank 2, got {:?}", t.shape()),
            ));
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor::from_parts(vec![c, r], out);
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenate along an existing axis. All other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Stack equally shaped inputs along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("stack", "no inputs"));
        };
        let mut shape = vec![1];
        shape.extend_from_slice(self.shape(first));
        let lifted = parts
            .iter()
            .map(|&p| self.reshape(p, &shape))
            .collect::<Result<Vec<_>>>()
            .map_err(|_| Error::invalid("stack", "inputs differ in size"))?;
        self.concat(&lifted, 0)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let src = self.shape(x).to_vec();
        if len == 0 || start + len > src[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} out of bounds for {src:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&src, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = src;
        shape[axis] = len;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::invalid("log", format!("non-positive input {bad}")));
        }
        let value = self.map(x, f64::ln);
        Ok(self.push(value, Op::Log(x), &[x]))
    }

    /// Absolute value. The derivative at zero is taken as +1.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::abs);
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for k in 0..inner {
                let idx = |i: usize| o * len * inner + i * inner + k;
                let max = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[idx(i)] /= sum;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for k in 0..inner {
                let idx = |i: usize| o * len * inner + i * inner + k;
                let max = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|i| (src[idx(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..len {
                    out[idx(i)] = src[idx(i)] - lse;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalize over the last axis to zero mean and unit variance. No affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm", format!("epsilon must be > 0, got {eps}")));
        }
        let t = self.value(x);
        let Some(&width) = t.shape().last() else {
            return Err(Error::invalid("layer_norm", "scalar input"));
        };
        let rows = t.numel() / width;
        let mut out = vec![0.0; t.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// Rows of a rank-2 table, producing `[indices.len(), cols]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [rows, cols] = *t.shape() else {
            return Err(Error::invalid(
                "gather",
                format!("expected rank-2 table, got {:?}", t.shape()),
            ));
        };
        if indices.is_empty() {
            return Err(Error::invalid("gather", "no indices"));
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(
                    "gather",
                    format!("row {i} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![indices.len(), cols], out);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. A rate of
    /// zero records nothing and returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean over one axis; the axis is removed.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for k in 0..inner {
                    out[o * inner + k] += t.data()[o * len * inner + i * inner + k];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), &[a, b]))
    }

    /// One element by flat index, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(Error::invalid(
                "pick",
                format!("index {index} out of range for {:?}", t.shape()),
            ));
        }
        let value = Tensor::scalar(t.data()[index]);
        Ok(self.push(value, Op::Pick { x, index }, &[x]))
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let shapes = self.nodes[..=root.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |buf| add_into(buf, gd));
                self.accumulate(grads, *b, |buf| add_into(buf, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |buf| add_into(buf, gd));
                self.accumulate(grads, *b, |buf| {
                    buf.iter_mut().zip(gd).for_each(|(o, g)| *o -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |buf| {
                    for ((o, g), y) in buf.iter_mut().zip(gd).zip(bv) {
                        *o += g * y;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for ((o, g), x) in buf.iter_mut().zip(gd).zip(av) {
                        *o += g * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |buf| {
                    buf.iter_mut().zip(gd).for_each(|(o, g)| *o += c * g)
                });
            }
            Op::ScaleBy { scalar, x } => {
                let xv = self.value(*x).data();
                let s = self.scalar(*scalar);
                let gs: f64 = gd.iter().zip(xv).map(|(g, x)| g * x).sum();
                self.accumulate(grads, *scalar, |buf| buf[0] += gs);
                self.accumulate(grads, *x, |buf| {
                    buf.iter_mut().zip(gd).for_each(|(o, g)| *o += s * g)
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &gd[i * n..(i + 1) * n];
                            buf[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, g) in buf[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * g;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                // g is [c, r]; input is [r, c]
                let (c, r) = (g.shape()[0], g.shape()[1]);
                self.accumulate(grads, *x, |buf| {
                    for j in 0..c {
                        for i in 0..r {
                            buf[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |buf| add_into(buf, gd)),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.accumulate(grads, p, |buf| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(
                                &mut buf[o * len * inner..(o + 1) * len * inner],
                                &gd[src..src + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*x), *axis);
                let len = g.shape()[*axis];
                self.accumulate(grads, *x, |buf| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        add_into(
                            &mut buf[dst..dst + len * inner],
                            &gd[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |buf| {
                    for ((o, g), y) in buf.iter_mut().zip(gd).zip(y) {
                        *o += g * y * (1.0 - y);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |buf| {
                    for ((o, g), &v) in buf.iter_mut().zip(gd).zip(xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += g * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |buf| {
                    for ((o, g), v) in buf.iter_mut().zip(gd).zip(xv) {
                        *o += g / v;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |buf| {
                    for ((o, g), v) in buf.iter_mut().zip(gd).zip(xv) {
                        *o += if *v >= 0.0 { *g } else { -g };
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                self.accumulate(grads, *x, |buf| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |i: usize| o * len * inner + i * inner + k;
                            let dot: f64 = (0..len).map(|i| gd[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                buf[idx(i)] += y[idx(i)] * (gd[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                self.accumulate(grads, *x, |buf| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |i: usize| o * len * inner + i * inner + k;
                            let gsum: f64 = (0..len).map(|i| gd[idx(i)]).sum();
                            for i in 0..len {
                                buf[idx(i)] += gd[idx(i)] - y[idx(i)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let width = *node.value.shape().last().expect("layer_norm has an axis");
                self.accumulate(grads, *x, |buf| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let (gr, yr) = (&gd[span.clone()], &y[span.clone()]);
                        let gmean = gr.iter().sum::<f64>() / width as f64;
                        let gymean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / width as f64;
                        for ((o, g), y) in buf[span].iter_mut().zip(gr).zip(yr) {
                            *o += inv * (g - gmean - y * gymean);
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let cols = node.value.shape()[1];
                self.accumulate(grads, *table, |buf| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut buf[i * cols..(i + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |buf| {
                    for ((o, g), m) in buf.iter_mut().zip(gd).zip(mask) {
                        *o += g * m;
                    }
                });
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let scale = 1.0 / len as f64;
                self.accumulate(grads, *x, |buf| {
                    for o in 0..outer {
                        for i in 0..len {
                            for k in 0..inner {
                                buf[o * len * inner + i * inner + k] += gd[o * inner + k] * scale;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::Dot(a, b) => {
                let g0 = gd[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |buf| {
                    buf.iter_mut().zip(bv).for_each(|(o, y)| *o += g0 * y)
                });
                self.accumulate(grads, *b, |buf| {
                    buf.iter_mut().zip(av).for_each(|(o, x)| *o += g0 * x)
                });
            }
            Op::Pick { x, index } => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |buf| buf[*index] += g0);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.scalar(y), 0.5);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(tape.shape(y), &[2, 2]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_rejects_scalar_and_bad_axis() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(1.0));
        assert!(tape.softmax(s, 0).is_err());
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.softmax(v, 1).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(w, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(w).data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]));
        let p = tape.softmax(x, 0).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn dot_gradient_is_bilinear() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let d = tape.dot(a, b).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.wrt(a).data(), &[3.0, 4.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_fails() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn reuse_accumulates_linearly() {
        // x used k times in a sum: gradient is k times the single-use gradient
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let single = tape.sum(sq);
        let g1 = tape.backward(single).unwrap().wrt(x);
        let mut acc = sq;
        for _ in 0..3 {
            let again = tape.mul(x, x).unwrap();
            acc = tape.add(acc, again).unwrap();
        }
        let total = tape.sum(acc);
        let g4 = tape.backward(total).unwrap().wrt(x);
        let expected: Vec<f64> = g1.data().iter().map(|v| 4.0 * v).collect();
        assert!(close(g4.data(), &expected, 1e-12));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let d = tape.dot(c, x).unwrap();
        let g = tape.backward(d).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 5.0, 7.0]).unwrap());
        let y = tape.layer_norm(x, 1e-5).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        assert!(tape.layer_norm(x, 0.0).is_err());
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let mut rng = rand::rng();
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let rows = tape.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(rows);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(table).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.gather(table, &[3]).is_err());
    }
}
