use super::{Tensor, TensorError};
use crate::scalar::{MatRef, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Neg(Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Reduce {
        op: ReduceOp,
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    LogSumExpRows(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    AddBias(Var, Var),
    Reshape(Var),
    Clamp(Var, T, T),
    ModifiedElu(Var, T),
    SqDistRows(Var, Var),
    BatchNormTrain { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Append-only operation record. Insertion order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn rows_cols(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        _ => Err(TensorError::Rank { op, expected: 2, shape: shape.to_vec() }),
    }
}

fn first_nan<T: Scalar>(data: &[T]) -> Option<usize> {
    data.iter().position(|v| v.is_nan())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradient tracking follows `tensor.requires_grad()`.
    /// Any gradient already attached to `tensor` is dropped.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        self.nodes.push(Node { tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.tracks(v));
        self.nodes.push(Node { tensor: Tensor::from_parts(shape, data, requires_grad), op });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: sa.to_vec(),
                    right: sb.to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            T::one(),
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            T::zero(),
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        let n = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let out = (0..n)
            .map(|i| {
                let (x, y) = (pick(da, i), pick(db, i));
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        Ok(self.push(shape, out, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|&v| f(v)).collect();
        self.push(shape, out, op, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |v| -v)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Offset(a), |v| v + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |v| v.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(index) = self.value(a).data().iter().position(|&v| !(v > T::zero())) {
            return Err(TensorError::Domain { op: "log", index });
        }
        Ok(self.unary(a, Op::Log(a), |v| v.ln()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |v| v.max(lo).min(hi))
    }

    /// `t + 1` for `t ≥ 0`, `γ(eᵗ − 1) + 1` otherwise.
    pub fn modified_elu(&mut self, a: Var, gamma: T) -> Var {
        self.unary(a, Op::ModifiedElu(a, gamma), |t| {
            if t >= T::zero() {
                t + T::one()
            } else {
                gamma * (t.exp() - T::one()) + T::one()
            }
        })
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let shape = shape.into();
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape,
            });
        }
        let data = t.data().to_vec();
        Ok(self.push(shape, data, Op::Reshape(a), &[a]))
    }

    /// Reduces over `axis`, or over every element when `axis` is `None`.
    ///
    /// Max routes its gradient to the first maximal element.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        let t = self.value(a);
        let shape = t.shape();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, t.numel(), 1, Vec::new()),
            Some(ax) if ax < shape.len() => {
                let mut out_shape = shape.to_vec();
                out_shape.remove(ax);
                (
                    shape[..ax].iter().product(),
                    shape[ax],
                    shape[ax + 1..].iter().product(),
                    out_shape,
                )
            }
            Some(ax) => return Err(TensorError::Axis { op: "reduce", axis: ax, rank: shape.len() }),
        };
        if len == 0 || t.numel() == 0 {
            return Err(TensorError::EmptyInput { op: "reduce" });
        }
        let d = t.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if op == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let slot = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut s = T::zero();
                        for k in 0..len {
                            s += d[at(k)];
                        }
                        if op == ReduceOp::Mean {
                            s /= T::from_usize(len).unwrap();
                        }
                        out[slot] = s;
                    }
                    ReduceOp::Max => {
                        let mut best = 0;
                        for k in 1..len {
                            if d[at(k)] > d[at(best)] {
                                best = k;
                            }
                        }
                        out[slot] = d[at(best)];
                        argmax[slot] = at(best);
                    }
                }
            }
        }
        Ok(self.push(out_shape, out, Op::Reduce { op, input: a, outer, len, inner, argmax }, &[a]))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Max, a, axis)
    }

    /// Row-wise `max(v) + ln Σ exp(v − max(v))`; `[m×n] → [m]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (m, n) = rows_cols("log_sum_exp_rows", t.shape())?;
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "log_sum_exp_rows" });
        }
        if let Some(index) = first_nan(t.data()) {
            return Err(TensorError::Numeric { op: "log_sum_exp_rows", index });
        }
        let out = t.data().chunks(n).map(log_sum_exp).collect();
        Ok(self.push(vec![m], out, Op::LogSumExpRows(a), &[a]))
    }

    /// Row-wise softmax computed after shifting by the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (_, n) = rows_cols("softmax_rows", t.shape())?;
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "softmax_rows" });
        }
        if let Some(index) = first_nan(t.data()) {
            return Err(TensorError::Numeric { op: "softmax_rows", index });
        }
        let shape = t.shape().to_vec();
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - mx).exp()));
            let s: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.push(shape, out, Op::SoftmaxRows(a), &[a]))
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (_, n) = rows_cols("normalize_rows", t.shape())?;
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "normalize_rows" });
        }
        let shape = t.shape().to_vec();
        let mut out = Vec::with_capacity(t.numel());
        for (r, row) in t.data().chunks(n).enumerate() {
            let s: T = row.iter().copied().sum();
            if !(s > T::zero()) {
                return Err(TensorError::Domain { op: "normalize_rows", index: r });
            }
            out.extend(row.iter().map(|&v| v / s));
        }
        Ok(self.push(shape, out, Op::NormalizeRows(a), &[a]))
    }

    /// `x[m×n] + b[n]` added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = match (tx.shape(), tb.shape()) {
            ([_, n], [nb]) if n == nb => *n,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    left: tx.shape().to_vec(),
                    right: tb.shape().to_vec(),
                })
            }
        };
        let bias = tb.data();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(shape, out, Op::AddBias(x, b), &[x, b]))
    }

    /// Squared distance from each `mu[b, i, :]` to `y[b, :]`; `[B×M×D], [B×D] → [B×M]`.
    pub fn sq_dist_rows(&mut self, mu: Var, y: Var) -> Result<Var, TensorError> {
        let (tm, ty) = (self.value(mu), self.value(y));
        let (b, m, d) = match (tm.shape(), ty.shape()) {
            ([b, m, d], [b2, d2]) if b == b2 && d == d2 => (*b, *m, *d),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "sq_dist_rows",
                    left: tm.shape().to_vec(),
                    right: ty.shape().to_vec(),
                })
            }
        };
        let (dm, dy) = (tm.data(), ty.data());
        let mut out = Vec::with_capacity(b * m);
        for s in 0..b {
            let target = &dy[s * d..(s + 1) * d];
            for i in 0..m {
                let mean = &dm[(s * m + i) * d..(s * m + i + 1) * d];
                out.push(mean.iter().zip(target).map(|(&u, &v)| (u - v) * (u - v)).sum());
            }
        }
        Ok(self.push(vec![b, m], out, Op::SqDistRows(mu, y), &[mu, y]))
    }

    /// Batch normalization with biased batch statistics.
    ///
    /// Returns the output together with the batch mean and variance so the
    /// caller can update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>), TensorError> {
        let (batch, f) = self.bn_shapes("batch_norm_train", x, gamma, beta)?;
        if batch < 2 {
            return Err(TensorError::DegenerateBatch { op: "batch_norm_train", batch });
        }
        let d = self.value(x).data();
        let nb = T::from_usize(batch).unwrap();
        let mut mean = vec![T::zero(); f];
        for row in d.chunks(f) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nb);
        let mut var = vec![T::zero(); f];
        for row in d.chunks(f) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= nb);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNormTrain { x, gamma, beta, mean: mean.clone(), inv_std };
        Ok((self.push(shape, out, op, &[x, gamma, beta]), mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var, TensorError> {
        let (_, f) = self.bn_shapes("batch_norm_eval", x, gamma, beta)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_eval",
                left: vec![f],
                right: vec![running_mean.len(), running_var.len()],
            });
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<T> = running_var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let shape = self.shape(x).to_vec();
        let op = Op::BatchNormEval { x, gamma, beta, mean, inv_std };
        Ok(self.push(shape, out, op, &[x, gamma, beta]))
    }

    fn bn_shapes(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize), TensorError> {
        let sx = self.shape(x);
        match sx {
            [b, f] if self.shape(gamma) == [*f] && self.shape(beta) == [*f] => Ok((*b, *f)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                left: sx.to_vec(),
                right: self.shape(gamma).to_vec(),
            }),
        }
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> Vec<T> {
        let f = mean.len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(f) {
            for j in 0..f {
                row[j] = g[j] * (row[j] - mean[j]) * inv_std[j] + b[j];
            }
        }
        out
    }

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    ///
    /// The loss is seeded with 1. Nodes are visited once, newest first.
    /// Calling this twice without zeroing doubles every stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let root = self.value(loss);
        if root.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].tensor.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.tensor.data();
        let val = |v: Var| self.nodes[v.0].tensor.data();
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].tensor.requires_grad() {
                    let n = nodes[v.0].tensor.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = slot!(*a) {
                    T::gemm(
                        T::one(),
                        MatRef::row_major(g, m, n),
                        MatRef::transposed(val(*b), k, n),
                        T::one(),
                        ga,
                    );
                }
                if let Some(gb) = slot!(*b) {
                    T::gemm(
                        T::one(),
                        MatRef::transposed(val(*a), m, k),
                        MatRef::row_major(g, m, n),
                        T::one(),
                        gb,
                    );
                }
            }
            Op::Binary(kind, a, b) => {
                let (da, db) = (val(*a), val(*b));
                let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                for (input, other, sign) in [(*a, db, T::one()), (*b, da, -T::one())] {
                    let Some(gi) = slot!(input) else { continue };
                    let broadcast = gi.len() == 1 && g.len() > 1;
                    for (i, &gv) in g.iter().enumerate() {
                        let local = match kind {
                            Binary::Add => gv,
                            Binary::Sub => gv * sign,
                            Binary::Mul => gv * pick(other, i),
                        };
                        if broadcast {
                            gi[0] += local;
                        } else {
                            gi[i] += local;
                        }
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(s, &v)| *s -= v);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(s, &v)| *s += v * *c);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((s, &v), &y) in ga.iter_mut().zip(g).zip(out) {
                        *s += v * y;
                    }
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                if let Some(ga) = slot!(*a) {
                    for ((s, &v), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *s += v / xi;
                    }
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                if let Some(ga) = slot!(*a) {
                    for ((s, &v), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *s += v;
                        }
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                if let Some(ga) = slot!(*a) {
                    for ((s, &v), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi >= *lo && xi <= *hi {
                            *s += v;
                        }
                    }
                }
            }
            Op::ModifiedElu(a, gamma) => {
                let x = val(*a);
                if let Some(ga) = slot!(*a) {
                    for ((s, &v), &t) in ga.iter_mut().zip(g).zip(x) {
                        *s += if t >= T::zero() { v } else { v * *gamma * t.exp() };
                    }
                }
            }
            Op::Reduce { op, input, outer, len, inner, argmax } => {
                let Some(ga) = slot!(*input) else { return };
                match op {
                    ReduceOp::Max => {
                        for (slot_idx, &src) in argmax.iter().enumerate() {
                            ga[src] += g[slot_idx];
                        }
                    }
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let w = if *op == ReduceOp::Mean {
                            T::one() / T::from_usize(*len).unwrap()
                        } else {
                            T::one()
                        };
                        for o in 0..*outer {
                            for k in 0..*len {
                                for i in 0..*inner {
                                    ga[(o * len + k) * inner + i] += g[o * inner + i] * w;
                                }
                            }
                        }
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let n = x.len() / out.len();
                if let Some(ga) = slot!(*a) {
                    for (r, (gr, xr)) in ga.chunks_mut(n).zip(x.chunks(n)).enumerate() {
                        if !out[r].is_finite() {
                            continue;
                        }
                        for (s, &xi) in gr.iter_mut().zip(xr) {
                            *s += g[r] * (xi - out[r]).exp();
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) | Op::NormalizeRows(a) => {
                let n = *self.shape(*a).last().unwrap();
                let is_softmax = matches!(node.op, Op::SoftmaxRows(_));
                let x = val(*a);
                if let Some(ga) = slot!(*a) {
                    for (r, (gr, yr)) in ga.chunks_mut(n).zip(out.chunks(n)).enumerate() {
                        let gy = &g[r * n..(r + 1) * n];
                        let dot: T = gy.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        if is_softmax {
                            for ((s, &gv), &y) in gr.iter_mut().zip(gy).zip(yr) {
                                *s += y * (gv - dot);
                            }
                        } else {
                            let total: T = x[r * n..(r + 1) * n].iter().copied().sum();
                            for (s, &gv) in gr.iter_mut().zip(gy) {
                                *s += (gv - dot) / total;
                            }
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                let n = *self.shape(*b).first().unwrap();
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
                }
                if let Some(gb) = slot!(*b) {
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                }
            }
            Op::SqDistRows(mu, y) => {
                let (b, m, d) = {
                    let s = self.shape(*mu);
                    (s[0], s[1], s[2])
                };
                let (dm, dy) = (val(*mu), val(*y));
                let two = T::one() + T::one();
                if let Some(gm) = slot!(*mu) {
                    for s in 0..b {
                        for i in 0..m {
                            let w = two * g[s * m + i];
                            for j in 0..d {
                                let at = (s * m + i) * d + j;
                                gm[at] += w * (dm[at] - dy[s * d + j]);
                            }
                        }
                    }
                }
                if let Some(gy) = slot!(*y) {
                    for s in 0..b {
                        for i in 0..m {
                            let w = two * g[s * m + i];
                            for j in 0..d {
                                let at = (s * m + i) * d + j;
                                gy[s * d + j] -= w * (dm[at] - dy[s * d + j]);
                            }
                        }
                    }
                }
            }
            Op::BatchNormTrain { x, gamma, beta, mean, inv_std }
            | Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let train = matches!(node.op, Op::BatchNormTrain { .. });
                let f = mean.len();
                let dx = val(*x);
                let batch = dx.len() / f;
                let gam = val(*gamma);
                let mut sum_g = vec![T::zero(); f];
                let mut sum_gx = vec![T::zero(); f];
                for (gr, xr) in g.chunks(f).zip(dx.chunks(f)) {
                    for j in 0..f {
                        let xhat = (xr[j] - mean[j]) * inv_std[j];
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * xhat;
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(s, &v)| *s += v);
                }
                if let Some(gg) = slot!(*gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(s, &v)| *s += v);
                }
                if let Some(gx) = slot!(*x) {
                    let nb = T::from_usize(batch).unwrap();
                    for ((gxr, gr), xr) in gx.chunks_mut(f).zip(g.chunks(f)).zip(dx.chunks(f)) {
                        for j in 0..f {
                            let k = gam[j] * inv_std[j];
                            if train {
                                let xhat = (xr[j] - mean[j]) * inv_std[j];
                                gxr[j] += k * (gr[j] - sum_g[j] / nb - xhat * sum_gx[j] / nb);
                            } else {
                                gxr[j] += k * gr[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `max(v) + ln Σ exp(v − max(v))`.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph<f64> {
        Graph::new()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = g64();
        let i2 = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1]);
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = g64();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch { op: "matmul", left: vec![2, 3], right: vec![2, 3] }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = g64();
        let v = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(v);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let h = g.constant(Tensor::vector(vec![0.5]));
        let l = g.log(h).unwrap();
        let e = g.exp(l);
        assert!(close(g.value(e).data(), &[0.5], 1e-15));

        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(x), Some(&[6.0][..]));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = g64();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), Some(&[0.0, 0.0, 1.0][..]));
    }

    #[test]
    fn log_domain_error_carries_index() {
        let mut g = g64();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 0.0, -1.0]));
        assert_eq!(g.log(x).unwrap_err(), TensorError::Domain { op: "log", index: 2 });
    }

    #[test]
    fn scalar_broadcast_and_mismatch() {
        let mut g = g64();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = g.param(Tensor::scalar(2.0));
        let p = g.mul(x, c).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0, 6.0]);
        let s = g.sum(p, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(c), Some(&[6.0][..]));
        assert_eq!(g.grad(x), Some(&[2.0, 2.0, 2.0][..]));

        let y = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.add(x, y), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn reductions() {
        let mut g = g64();
        let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.sum(v, None).unwrap();
        assert_eq!(g.value(s).item(), Some(6.0));

        let m = g.constant(Tensor::from_rows(&[[1.0, 3.0], [3.0, 5.0]]).unwrap());
        let mean0 = g.mean(m, Some(0)).unwrap();
        assert_eq!(g.value(mean0).shape(), &[2]);
        assert_eq!(g.value(mean0).data(), &[2.0, 4.0]);
        let mean1 = g.mean(m, Some(1)).unwrap();
        assert_eq!(g.value(mean1).data(), &[2.0, 4.0]);

        assert!(matches!(g.sum(m, Some(2)), Err(TensorError::Axis { .. })));
        let empty = g.constant(Tensor::zeros(vec![0]));
        assert_eq!(g.sum(empty, None).unwrap_err(), TensorError::EmptyInput { op: "reduce" });
    }

    #[test]
    fn max_gradient_goes_to_first_maximum() {
        let mut g = g64();
        let x = g.param(Tensor::vector(vec![2.0, 2.0, 1.0]));
        let m = g.max(x, None).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x), Some(&[1.0, 0.0, 0.0][..]));
    }

    #[test]
    fn log_sum_exp_examples() {
        let mut g = g64();
        let a = g.constant(Tensor::from_rows(&[[0.0, 0.0], [1000.0, 1000.0]]).unwrap());
        let l = g.log_sum_exp_rows(a).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(close(g.value(l).data(), &[ln2, 1000.0 + ln2], 1e-12));

        // oracle: direct summation is safe at these magnitudes
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((direct - 3.407606).abs() < 1e-6);
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = g.log_sum_exp_rows(b).unwrap();
        assert!((g.value(l).data()[0] - direct).abs() < 1e-14);

        let bad = g.constant(Tensor::vector(vec![1.0, f64::NAN]));
        assert_eq!(
            g.log_sum_exp_rows(bad).unwrap_err(),
            TensorError::Numeric { op: "log_sum_exp_rows", index: 1 }
        );
    }

    #[test]
    fn softmax_examples() {
        let mut g = g64();
        let z = g.constant(Tensor::vector(vec![0.0; 5]));
        let s = g.softmax_rows(z).unwrap();
        assert!(close(g.value(s).data(), &[0.2; 5], 1e-15));

        let v = g.constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]));
        let s = g.softmax_rows(v).unwrap();
        assert!(close(g.value(s).data(), &[0.25, 0.75], 1e-15));

        let a = g.constant(Tensor::from_rows(&[[0.3, -1.2, 2.0]]).unwrap());
        let b = g.offset(a, 7.0);
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        assert!(close(g.value(sa).data(), g.value(sb).data(), 1e-15));
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut g = g64();
        let w = g.param(Tensor::from_rows(&[[0.5, -1.0], [2.0, 0.25]]).unwrap());
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let h = g.matmul(x, w).unwrap();
        let e = g.exp(h);
        let l = g.sum(e, None).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(l), Some(&[1.0][..]));
        let first = g.grad(w).unwrap().to_vec();
        g.backward(l).unwrap();
        let second = g.grad(w).unwrap();
        for (a, b) in first.iter().zip(second) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = g64();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn batch_norm_train_hand_example() {
        let mut g = g64();
        let x = g.constant(Tensor::from_rows(&[[0.0], [2.0]]).unwrap());
        let gamma = g.param(Tensor::vector(vec![1.0]));
        let beta = g.param(Tensor::vector(vec![0.0]));
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(mean, vec![1.0]);
        assert_eq!(var, vec![1.0]);
        assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-5));

        let one = g.constant(Tensor::from_rows(&[[3.0]]).unwrap());
        assert_eq!(
            g.batch_norm_train(one, gamma, beta, 1e-5).unwrap_err(),
            TensorError::DegenerateBatch { op: "batch_norm_train", batch: 1 }
        );
    }

    #[test]
    fn modified_elu_values() {
        let mut g = g64();
        let t = g.constant(Tensor::vector(vec![0.0, 2.0, -1.0]));
        let h = g.modified_elu(t, 1.0);
        let d = g.value(h).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 3.0);
        assert!((d[2] - (-1f64).exp()).abs() < 1e-15);
    }
}
