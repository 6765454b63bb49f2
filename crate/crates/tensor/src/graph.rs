//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order, so the record read
//! backwards is a valid reverse pass. Nodes that do not depend on any
//! `requires_grad` leaf are still evaluated but never receive a gradient;
//! that is how frozen parameters stay frozen.

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `b` is either rank 2 (shared across the leading axes of `a`) or has
    /// the same leading axes as `a`.
    Matmul { a: Var, b: Var, batched: bool },
    /// `b` broadcasts over the leading axes of `a`.
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Concat { parts: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    Narrow { a: Var, outer: usize, inner: usize, extent: usize, start: usize, len: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    MeanAxis { a: Var, axis: usize },
    Sum { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    CosineDistance { u: Var, v: Var },
}

#[derive(Debug)]
struct Node<T> {
    shape: Shape,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records a copy of `t`. It receives a gradient iff `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().clone(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, shape: impl Into<Shape>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(TensorError::Shape {
                op: "constant",
                message: format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    /// A constant copy of `a`'s current value, cut off from the reverse pass.
    pub fn detach(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node's value out as a plain (non-trainable) tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product over the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).clone(), self.shape(b).clone());
        let dim_err = || TensorError::Dimension { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.rank() < 2 || sb.rank() < 2 {
            return Err(dim_err());
        }
        let (m, k) = (sa.dims()[sa.rank() - 2], sa.dims()[sa.rank() - 1]);
        let (k2, n) = (sb.dims()[sb.rank() - 2], sb.dims()[sb.rank() - 1]);
        if k != k2 {
            return Err(dim_err());
        }
        let lead = &sa.dims()[..sa.rank() - 2];
        let batched = sb.rank() > 2;
        if batched && lead != &sb.dims()[..sb.rank() - 2] {
            return Err(dim_err());
        }
        let mut out_dims = lead.to_vec();
        out_dims.extend([m, n]);
        let out_shape = Shape::new(out_dims);
        let mut out = vec![T::zero(); out_shape.numel()];
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        if batched {
            let nb: usize = lead.iter().product();
            for i in 0..nb {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    (k, 1),
                    &bv[i * k * n..],
                    (n, 1),
                    T::zero(),
                    &mut out[i * m * n..],
                );
            }
        } else {
            let rows = sa.numel() / k;
            kernels::gemm(rows, k, n, av, (k, 1), bv, (n, 1), T::zero(), &mut out);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out_shape, out, rg, Op::Matmul { a, b, batched }))
    }

    /// `a + b`, where `b`'s shape equals a trailing part of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).clone(), self.shape(b).clone());
        if sb.rank() > sa.rank() || sa.dims()[sa.rank() - sb.rank()..] != *sb.dims() {
            return Err(TensorError::Dimension { op: "add", lhs: sa, rhs: sb });
        }
        let bv = &self.node(b).value;
        let nb = bv.len();
        let out: Vec<T> = self.node(a).value.iter().enumerate().map(|(i, &x)| x + bv[i % nb]).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(sa, out, rg, Op::Add { a, b }))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).clone(), self.shape(b).clone());
        if sa != sb {
            return Err(TensorError::Dimension { op: "mul", lhs: sa, rhs: sb });
        }
        let out = self.node(a).value.iter().zip(&self.node(b).value).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(sa, out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.node(a).value.iter().map(|&x| x * factor).collect();
        let (shape, rg) = (self.shape(a).clone(), self.requires_grad(a));
        self.push(shape, out, rg, Op::Scale { a, factor })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.node(a).value.iter().map(|&x| kernels::gelu(x)).collect();
        let (shape, rg) = (self.shape(a).clone(), self.requires_grad(a));
        self.push(shape, out, rg, Op::Gelu { a })
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).clone();
        if axis >= shape.rank() {
            return Err(TensorError::Shape {
                op: "softmax",
                message: format!("axis {axis} out of range for {shape}"),
            });
        }
        let (outer, len, inner) = shape.split_at_axis(axis);
        let x = &self.node(a).value;
        let mut out = vec![T::zero(); x.len()];
        let mut row = vec![T::zero(); len];
        let mut res = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                if inner == 1 {
                    kernels::softmax_row(&x[base..base + len], &mut out[base..base + len]);
                    continue;
                }
                for l in 0..len {
                    row[l] = x[base + l * inner];
                }
                kernels::softmax_row(&row, &mut res);
                for l in 0..len {
                    out[base + l * inner] = res[l];
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(shape, out, rg, Op::Softmax { a, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Parameter(format!("layer_norm epsilon must be positive, got {eps}")));
        }
        let shape = self.shape(x).clone();
        let d = shape.last().unwrap_or(1);
        for p in [gain, bias] {
            if self.shape(p).dims() != [d] {
                return Err(TensorError::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).clone(),
                });
            }
        }
        let rows = shape.numel() / d.max(1);
        let (xv, gv, bv) = (&self.node(x).value, &self.node(gain).value, &self.node(bias).value);
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(eps);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds }))
    }

    /// Joins `parts` along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Shape {
            op: "concat",
            message: "no parts given".into(),
        })?;
        let base = self.shape(*first).clone();
        if axis >= base.rank() {
            return Err(TensorError::Shape {
                op: "concat",
                message: format!("axis {axis} out of range for {base}"),
            });
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.rank() == base.rank()
                && s.dims().iter().zip(base.dims()).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Dimension { op: "concat", lhs: base, rhs: s.clone() });
            }
            lens.push(s.dims()[axis]);
        }
        let (outer, _, inner) = base.split_at_axis(axis);
        let mut dims = base.dims().to_vec();
        dims[axis] = lens.iter().sum();
        Ok(self.concat_layout(parts, Shape::new(dims), outer, inner, lens))
    }

    /// Stacks equal-shaped parts along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Shape {
            op: "stack",
            message: "no parts given".into(),
        })?;
        let base = self.shape(*first).clone();
        for &p in parts {
            if *self.shape(p) != base {
                return Err(TensorError::Dimension { op: "stack", lhs: base, rhs: self.shape(p).clone() });
            }
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(base.dims());
        Ok(self.concat_layout(parts, Shape::new(dims), 1, base.numel(), vec![1; parts.len()]))
    }

    fn concat_layout(&mut self, parts: &[Var], shape: Shape, outer: usize, inner: usize, lens: Vec<usize>) -> Var {
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(shape.numel());
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let chunk = len * inner;
                out.extend_from_slice(&self.node(p).value[o * chunk..(o + 1) * chunk]);
            }
        }
        debug_assert_eq!(out.len(), outer * total * inner);
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(shape, out, rg, Op::Concat { parts: parts.to_vec(), outer, inner, lens })
    }

    /// The sub-range `start..start + len` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).clone();
        if axis >= shape.rank() || start + len > shape.dims()[axis] || len == 0 {
            return Err(TensorError::Shape {
                op: "narrow",
                message: format!("range {start}..{} of axis {axis} invalid for {shape}", start + len),
            });
        }
        let mut dims = shape.dims().to_vec();
        dims[axis] = len;
        self.narrow_into(a, axis, start, len, Shape::new(dims))
    }

    /// Index `index` of `axis`, with that axis removed.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).clone();
        if axis >= shape.rank() || index >= shape.dims()[axis] {
            return Err(TensorError::Shape {
                op: "select",
                message: format!("index {index} of axis {axis} invalid for {shape}"),
            });
        }
        let mut dims = shape.dims().to_vec();
        dims.remove(axis);
        self.narrow_into(a, axis, index, 1, Shape::new(dims))
    }

    fn narrow_into(&mut self, a: Var, axis: usize, start: usize, len: usize, out_shape: Shape) -> Result<Var> {
        let (outer, extent, inner) = self.shape(a).split_at_axis(axis);
        let x = &self.node(a).value;
        let mut out = Vec::with_capacity(out_shape.numel());
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            out.extend_from_slice(&x[from..from + len * inner]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(out_shape, out, rg, Op::Narrow { a, outer, inner, extent, start, len }))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        if shape.numel() != self.shape(a).numel() {
            return Err(TensorError::Dimension { op: "reshape", lhs: self.shape(a).clone(), rhs: shape });
        }
        let value = self.node(a).value.clone();
        let rg = self.requires_grad(a);
        Ok(self.push(shape, value, rg, Op::Reshape { a }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).clone();
        let mut seen = vec![false; shape.rank()];
        let valid = perm.len() == shape.rank() && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Shape {
                op: "permute",
                message: format!("{perm:?} is not a permutation of the axes of {shape}"),
            });
        }
        let out_shape = Shape::new(perm.iter().map(|&p| shape.dims()[p]).collect::<Vec<_>>());
        let x = &self.node(a).value;
        let mut out = vec![T::zero(); x.len()];
        for_each_permuted(shape.dims(), perm, |dst, src| out[dst] = x[src]);
        let rg = self.requires_grad(a);
        Ok(self.push(out_shape, out, rg, Op::Permute { a, perm: perm.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).rank();
        if r < 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                message: format!("needs rank ≥ 2, got {}", self.shape(a)),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).clone();
        if axis >= shape.rank() {
            return Err(TensorError::Shape {
                op: "mean_axis",
                message: format!("axis {axis} out of range for {shape}"),
            });
        }
        let (outer, len, inner) = shape.split_at_axis(axis);
        let x = &self.node(a).value;
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let inv = T::one() / T::of(len as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut dims = shape.dims().to_vec();
        dims.remove(axis);
        let rg = self.requires_grad(a);
        Ok(self.push(Shape::new(dims), out, rg, Op::MeanAxis { a, axis }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.node(a).value.iter().copied().sum();
        let rg = self.requires_grad(a);
        self.push(Shape::scalar(), vec![total], rg, Op::Sum { a })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.shape(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).clone();
        if shape.rank() != 2 || shape.dims()[0] != labels.len() || shape.dims()[0] == 0 {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                message: format!("logits {shape} do not match {} labels", labels.len()),
            });
        }
        let (b, c) = (shape.dims()[0], shape.dims()[1]);
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(TensorError::Input {
                row,
                message: format!("label {label} outside {c} classes"),
            });
        }
        let x = &self.node(logits).value;
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let lse = kernels::log_sum_exp(row);
            total = total + lse - row[labels[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::of(b as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Shape::scalar(),
            vec![loss],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// `1 − cos(u, v)` for two equal-length vectors, as a scalar.
    pub fn cosine_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u).clone(), self.shape(v).clone());
        if su.rank() != 1 || su != sv {
            return Err(TensorError::Dimension { op: "cosine_distance", lhs: su, rhs: sv });
        }
        let d = kernels::cosine_distance(&self.node(u).value, &self.node(v).value)?;
        let rg = self.requires_grad(u) || self.requires_grad(v);
        Ok(self.push(Shape::scalar(), vec![d], rg, Op::CosineDistance { u, v }))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from the scalar `loss`. Afterwards every `requires_grad`
    /// node that `loss` depends on has a gradient (see [`grad`](Self::grad)).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss).numel() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                message: format!("loss must be a scalar, got {}", self.shape(loss)),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, batched } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k) = (sa.dims()[sa.rank() - 2], sa.dims()[sa.rank() - 1]);
                let n = sb.dims()[sb.rank() - 1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if *batched {
                    let nb = sa.numel() / (m * k).max(1);
                    if let Some(da) = sink(nodes, grads, *a) {
                        for t in 0..nb {
                            kernels::gemm(m, n, k, &g[t * m * n..], (n, 1), &bv[t * k * n..], (1, n), T::one(), &mut da[t * m * k..]);
                        }
                    }
                    if let Some(db) = sink(nodes, grads, *b) {
                        for t in 0..nb {
                            kernels::gemm(k, m, n, &av[t * m * k..], (1, k), &g[t * m * n..], (n, 1), T::one(), &mut db[t * k * n..]);
                        }
                    }
                } else {
                    let rows = g.len() / n.max(1);
                    if let Some(da) = sink(nodes, grads, *a) {
                        kernels::gemm(rows, n, k, g, (n, 1), bv, (1, n), T::one(), da);
                    }
                    if let Some(db) = sink(nodes, grads, *b) {
                        kernels::gemm(k, rows, n, av, (1, k), g, (n, 1), T::one(), db);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = sink(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
                if let Some(db) = sink(nodes, grads, *b) {
                    let nb = db.len();
                    for (j, &x) in g.iter().enumerate() {
                        db[j % nb] = db[j % nb] + x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = sink(nodes, grads, *a) {
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * bv[j];
                    }
                }
                if let Some(db) = sink(nodes, grads, *b) {
                    for j in 0..g.len() {
                        db[j] = db[j] + g[j] * av[j];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = sink(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *factor);
                }
            }
            Op::Gelu { a } => {
                let x = &nodes[a.0].value;
                if let Some(da) = sink(nodes, grads, *a) {
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * kernels::gelu_grad(x[j]);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let y = &node.value;
                let (outer, len, inner) = node.shape.split_at_axis(*axis);
                if let Some(da) = sink(nodes, grads, *a) {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + q;
                            let s: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                da[at(l)] = da[at(l)] + y[at(l)] * (g[at(l)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let d = node.shape.last().unwrap_or(1);
                let rows = mean.len();
                let (xv, gv) = (&nodes[x.0].value, &nodes[gain.0].value);
                let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
                if let Some(dg) = sink(nodes, grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat(r, j);
                        }
                    }
                }
                if let Some(db) = sink(nodes, grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] = db[j] + g[r * d + j];
                        }
                    }
                }
                if let Some(dx) = sink(nodes, grads, *x) {
                    let inv_d = T::one() / T::of(d as f64);
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat(r, j);
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            dx[r * d + j] = dx[r * d + j] + rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                        }
                    }
                }
            }
            Op::Concat { parts, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    let chunk = len * inner;
                    if let Some(dp) = sink(nodes, grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total * inner + offset..][..chunk];
                            dp[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(d, &x)| *d = *d + x);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { a, outer, inner, extent, start, len } => {
                if let Some(da) = sink(nodes, grads, *a) {
                    let chunk = len * inner;
                    for o in 0..*outer {
                        let dst = &mut da[(o * extent + start) * inner..][..chunk];
                        dst.iter_mut().zip(&g[o * chunk..(o + 1) * chunk]).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = sink(nodes, grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
            }
            Op::Permute { a, perm } => {
                let in_dims = nodes[a.0].shape.dims().to_vec();
                if let Some(da) = sink(nodes, grads, *a) {
                    for_each_permuted(&in_dims, perm, |dst, src| da[src] = da[src] + g[dst]);
                }
            }
            Op::MeanAxis { a, axis } => {
                let (outer, len, inner) = nodes[a.0].shape.split_at_axis(*axis);
                let inv = T::one() / T::of(len as f64);
                if let Some(da) = sink(nodes, grads, *a) {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut da[(o * len + l) * inner..][..inner];
                            dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(d, &x)| *d = *d + x * inv);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = sink(nodes, grads, *a) {
                    da.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = nodes[logits.0].shape.dims()[1];
                let scale = g[0] / T::of(labels.len() as f64);
                if let Some(dl) = sink(nodes, grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == y { T::one() } else { T::zero() };
                            dl[r * c + j] = dl[r * c + j] + scale * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            Op::CosineDistance { u, v } => {
                let (uv, vv) = (&nodes[u.0].value, &nodes[v.0].value);
                let (nu, nv) = (kernels::norm(uv), kernels::norm(vv));
                let cos = kernels::dot(uv, vv) / (nu * nv);
                // d(1 − cos)/du = −(v/(|u||v|) − cos·u/|u|²)
                if let Some(du) = sink(nodes, grads, *u) {
                    for j in 0..du.len() {
                        du[j] = du[j] - g[0] * (vv[j] / (nu * nv) - cos * uv[j] / (nu * nu));
                    }
                }
                if let Some(dv) = sink(nodes, grads, *v) {
                    for j in 0..dv.len() {
                        dv[j] = dv[j] - g[0] * (uv[j] / (nu * nv) - cos * vv[j] / (nv * nv));
                    }
                }
            }
        }
    }
}

/// Gradient buffer of an input, or None if it is frozen.
fn sink<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Calls `f(dst, src)` for every element, where `dst` indexes the permuted
/// layout and `src` the original one.
fn for_each_permuted(in_dims: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = in_dims.len();
    let in_strides = Shape::from(in_dims).strides();
    let out_dims: Vec<usize> = perm.iter().map(|&p| in_dims[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = in_dims.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
