use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::real::{gemm_acc, Trans};
use super::{Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanAxis { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so a node's inputs always have
/// smaller indices. A graph is meant to be built, differentiated and dropped
/// by a single thread; independent graphs can live on different threads.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffer for an input, or `None` if it does not need one.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that only evaluates; nothing is differentiable.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inputs of the operation that produced `v` (empty for leaves).
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present after a backward pass
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.val(a).dims2("matmul")?;
        let (k2, n) = self.val(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(
            m,
            k,
            n,
            self.val(a).data(),
            Trans::N,
            self.val(b).data(),
            Trans::N,
            &mut out,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, &[a, b], Op::MatMul(a, b)))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape(op, ta.shape(), tb.shape())?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.val(x);
        let t =
            Tensor::new(v.shape(), v.data().iter().map(|&e| e * s).collect()).expect("same shape");
        self.push(t, &[x], Op::Scale(x, s))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let t =
            Tensor::new(v.shape(), v.data().iter().map(|&e| e * e).collect()).expect("same shape");
        self.push(t, &[x], Op::Square(x))
    }

    /// Adds a rank-1 `bias` to every row (last axis) of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.val(x), self.val(bias));
        let (_, cols) = tx.rows_cols();
        if tb.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(cols.max(1)) {
            for (d, &b) in row.iter_mut().zip(tb.data()) {
                *d += b;
            }
        }
        let t = Tensor::new(tx.shape(), data)?;
        Ok(self.push(t, &[x, bias], Op::AddBias(x, bias)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.val(x).clone().reshape(shape)?;
        Ok(self.push(t, &[x], Op::Reshape(x)))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.val(x);
        let (r, c) = tx.dims2("transpose")?;
        let src = tx.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        Ok(self.push(t, &[x], Op::Transpose(x)))
    }

    /// Softmax over the last axis, computed as `exp(x - max)` normalized.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let (_, cols) = tx.rows_cols();
        let mut data = tx.data().to_vec();
        if cols > 0 {
            for row in data.chunks_exact_mut(cols) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let t = Tensor::new(tx.shape(), data).expect("same shape");
        self.push(t, &[x], Op::Softmax(x))
    }

    /// Normalizes each row over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let (rows, cols) = tx.rows_cols();
        for (t, _) in [(tg, "gamma"), (tb, "beta")] {
            if t.shape() != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: tx.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let n = T::from_f64(cols as f64);
        let mut xhat = tx.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); tx.numel()];
        if cols > 0 {
            for (row, orow) in xhat.chunks_exact_mut(cols).zip(out.chunks_exact_mut(cols)) {
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for ((h, o), (&g, &b)) in row
                    .iter_mut()
                    .zip(orow.iter_mut())
                    .zip(tg.data().iter().zip(tb.data()))
                {
                    *h = (*h - mean) * r;
                    *o = *h * g + b;
                }
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let keep = self.recording;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        Ok(self.push(t, &[x, gamma, beta], op))
    }

    /// Exact GELU, `x * Phi(x)` with `Phi` from the error function.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(FRAC_1_SQRT_2);
        let data = tx
            .data()
            .iter()
            .map(|&v| v * half * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        let t = Tensor::new(tx.shape(), data).expect("same shape");
        self.push(t, &[x], Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let s = tx.data().iter().copied().sum::<T>() / T::from_f64(tx.numel() as f64);
        self.push(Tensor::scalar(s), &[x], Op::Mean(x))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let tx = self.val(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                shape: shape.to_vec(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::from_f64(len as f64);
        let src = tx.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let t = Tensor::new(&new_shape, out)?;
        Ok(self.push(t, &[x], Op::MeanAxis { x, axis }))
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let (_, cols) = self.val(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.val(v);
            let (r, c) = t.dims2("concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.val(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(t, xs, Op::ConcatRows(xs.to_vec())))
    }

    /// Joins rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = xs.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let (rows, _) = self.val(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = self.val(v);
            let (r, c) = t.dims2("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.val(*first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.val(v).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(t, xs, Op::ConcatCols(xs.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.val(x);
        let (r, c) = tx.dims2("slice_rows")?;
        if start + len > r {
            return Err(TensorError::OutOfBounds {
                op: "slice_rows",
                start,
                len,
                dim: r,
            });
        }
        let t = Tensor::new(&[len, c], tx.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(t, &[x], Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.val(x);
        let (r, c) = tx.dims2("slice_cols")?;
        if start + len > c {
            return Err(TensorError::OutOfBounds {
                op: "slice_cols",
                start,
                len,
                dim: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for row in tx.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(&[r, len], data)?;
        Ok(self.push(t, &[x], Op::SliceCols { x, start }))
    }

    /// Back-propagates from a one-element `loss`, adding `dloss/dleaf` into
    /// the gradient of every leaf that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.val(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut leaf_grads);
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, &b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut Vec<(usize, Vec<T>)>,
    ) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => leaf_grads.push((i, g)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(da) = slot(nodes, grads, *a) {
                    gemm_acc(m, n, k, &g, Trans::N, tb.data(), Trans::T, da);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    gemm_acc(k, m, n, ta.data(), Trans::T, &g, Trans::N, db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(nodes, grads, v) {
                        d.iter_mut().zip(&g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(d) = slot(nodes, grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(&g).zip(vb) {
                        *d += g * y;
                    }
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    for ((d, &g), &x) in d.iter_mut().zip(&g).zip(va) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::Square(x) => {
                let vx = nodes[x.0].value.data();
                let two = T::from_f64(2.0);
                if let Some(d) = slot(nodes, grads, *x) {
                    for ((d, &g), &x) in d.iter_mut().zip(&g).zip(vx) {
                        *d += two * x * g;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d += g);
                }
                let cols = nodes[b.0].value.numel();
                if let Some(d) = slot(nodes, grads, *b) {
                    if cols > 0 {
                        for row in g.chunks_exact(cols) {
                            d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    d.iter_mut().zip(&g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                if let Some(d) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                if let Some(d) = slot(nodes, grads, *x) {
                    if cols > 0 {
                        for ((drow, grow), yrow) in d
                            .chunks_exact_mut(cols)
                            .zip(g.chunks_exact(cols))
                            .zip(y.chunks_exact(cols))
                        {
                            let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                            for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += y * (g - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = nodes[gamma.0].value.numel();
                let gam = nodes[gamma.0].value.data();
                if cols == 0 {
                    return;
                }
                if let Some(d) = slot(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((d, &g), &h) in d.iter_mut().zip(grow).zip(hrow) {
                            *d += g * h;
                        }
                    }
                }
                if let Some(d) = slot(nodes, grads, *beta) {
                    for grow in g.chunks_exact(cols) {
                        d.iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(d) = slot(nodes, grads, *x) {
                    let n = T::from_f64(cols as f64);
                    let mut dh = vec![T::zero(); cols];
                    for (((drow, grow), hrow), &r) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(xhat.chunks_exact(cols))
                        .zip(rstd)
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..cols {
                            dh[j] = grow[j] * gam[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for j in 0..cols {
                            drow[j] += r * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = nodes[x.0].value.data();
                let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
                if let Some(d) = slot(nodes, grads, *x) {
                    for ((d, &g), &v) in d.iter_mut().zip(&g).zip(vx) {
                        let xf = v.as_f64();
                        let deriv = std_normal_cdf(xf) + xf * inv_sqrt_2pi * (-0.5 * xf * xf).exp();
                        *d += g * T::from_f64(deriv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(nodes[x.0].value.numel() as f64);
                if let Some(d) = slot(nodes, grads, *x) {
                    let share = g[0] / n;
                    d.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::MeanAxis { x, axis } => {
                let shape = nodes[x.0].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let inv = T::one() / T::from_f64(len as f64);
                if let Some(d) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                d[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let n = nodes[v.0].value.numel();
                    if let Some(d) = slot(nodes, grads, v) {
                        d.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, &g)| *d += g);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(xs) => {
                let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                let mut col0 = 0;
                for &v in xs {
                    let w = nodes[v.0].value.shape()[1];
                    if let Some(d) = slot(nodes, grads, v) {
                        for r in 0..rows {
                            let src = &g[r * cols + col0..r * cols + col0 + w];
                            d[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &g)| *d += g);
                        }
                    }
                    col0 += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = nodes[x.0].value.shape()[1];
                if let Some(d) = slot(nodes, grads, *x) {
                    d[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, &g)| *d += g);
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.shape()[1];
                let len = node.value.shape()[1];
                if let Some(d) = slot(nodes, grads, *x) {
                    if len > 0 {
                        for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                            drow[*start..start + len]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, &g)| *d += g);
                        }
                    }
                }
            }
        }
    }
}
