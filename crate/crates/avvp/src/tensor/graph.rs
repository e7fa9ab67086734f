//! Tape-based computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt per batch: leaves are inserted as constants or
//! parameters, forward operations append nodes in topological order, and
//! [`Graph::backward`] sweeps the tape once in reverse. Node values are
//! immutable once produced.

use crate::error::{AvvpError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { lhs: NodeId, rhs: NodeId },
    Transpose { input: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    /// Elementwise `mul * x + add`.
    Affine { input: NodeId, mul: f64, add: f64 },
    /// Matrix plus a row vector broadcast over rows.
    AddRow { matrix: NodeId, row: NodeId },
    Sigmoid { input: NodeId },
    Log { input: NodeId },
    Clamp { input: NodeId, lo: f64, hi: f64 },
    Softmax { input: NodeId, axis: usize },
    SumAxis { input: NodeId, axis: usize },
    SumAll { input: NodeId },
    /// Stack equally-shaped inputs along a new axis.
    Stack { inputs: Vec<NodeId>, axis: usize },
    /// Select the subtensor at `index` along `axis` (removes the axis).
    IndexAxis { input: NodeId, axis: usize, index: usize },
    /// Scaled dot-product attention: rows of `queries` attend over `context`.
    Attend { queries: NodeId, context: NodeId },
    /// Identity forward; multiplies the incoming gradient by `factor`.
    GradScale { input: NodeId, factor: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to the given node. Parameters that the loss
    /// does not reach hold all-zero gradients; non-trainable nodes the
    /// loss does not reach return `None`.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Insert a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Insert a trainable leaf.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, trainable: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite tensor on the tape");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, trainable });
        id
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AvvpError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let value = matmul_kernel(self.value(a), self.value(b), n, k, m);
        Ok(self.push(Op::MatMul { lhs: a, rhs: b }, value, false))
    }

    pub fn transpose(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input);
        if s.len() != 2 {
            return Err(AvvpError::Contract(format!("transpose expects rank 2, got {s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let x = self.value(input);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = x.data()[i * m + j];
            }
        }
        let value = Tensor::new(vec![m, n], data).expect("transpose shape");
        Ok(self.push(Op::Transpose { input }, value, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { lhs: a, rhs: b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { lhs: a, rhs: b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(AvvpError::ShapeMismatch {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("zip shape");
        Ok(self.push(op, value, false))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, input: NodeId, mul: f64, add: f64) -> NodeId {
        let value = self.value(input).map(|v| mul * v + add);
        self.push(Op::Affine { input, mul, add }, value, false)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        self.affine(input, factor, 0.0)
    }

    /// `matrix[i, :] + row` for every row `i`.
    pub fn add_row(&mut self, matrix: NodeId, row: NodeId) -> Result<NodeId> {
        let (sm, sr) = (self.shape(matrix), self.shape(row));
        if sm.len() != 2 || sr.len() != 1 || sm[1] != sr[0] {
            return Err(AvvpError::ShapeMismatch {
                op: "add_row",
                lhs: sm.to_vec(),
                rhs: sr.to_vec(),
            });
        }
        let (n, m) = (sm[0], sm[1]);
        let (x, r) = (self.value(matrix), self.value(row));
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] = x.data()[i * m + j] + r.data()[j];
            }
        }
        let value = Tensor::new(vec![n, m], data).expect("add_row shape");
        Ok(self.push(Op::AddRow { matrix, row }, value, false))
    }

    /// Elementwise logistic function, clamped into the open interval (0, 1).
    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(sigmoid_scalar);
        self.push(Op::Sigmoid { input }, value, false)
    }

    pub fn log(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(f64::ln);
        self.push(Op::Log { input }, value, false)
    }

    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(input).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp { input, lo, hi }, value, false)
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(AvvpError::AxisOutOfRange { axis, shape });
        }
        let value = softmax_kernel(self.value(input), axis);
        Ok(self.push(Op::Softmax { input, axis }, value, false))
    }

    /// Sum out `axis`, reducing the rank by one (scalars stay rank 1).
    pub fn sum_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(AvvpError::AxisOutOfRange { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let x = self.value(input);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += x.data()[(o * len + a) * inner + i];
                }
            }
        }
        let value = Tensor::new(out_shape, data).expect("sum_axis shape");
        Ok(self.push(Op::SumAxis { input, axis }, value, false))
    }

    /// Sum of all entries as a rank-1 scalar tensor.
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).data().iter().sum();
        self.push(Op::SumAll { input }, Tensor::scalar(s), false)
    }

    /// Stack equally-shaped tensors along a new axis.
    pub fn stack(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(inputs[0]).to_vec();
        if axis > first.len() {
            return Err(AvvpError::AxisOutOfRange { axis, shape: first });
        }
        for &id in inputs {
            if self.shape(id) != first {
                return Err(AvvpError::ShapeMismatch {
                    op: "stack",
                    lhs: first,
                    rhs: self.shape(id).to_vec(),
                });
            }
        }
        let mut out_shape = first.clone();
        out_shape.insert(axis, inputs.len());
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis..].iter().product();
        let mut data = vec![0.0; outer * inputs.len() * inner];
        for o in 0..outer {
            for (s, &id) in inputs.iter().enumerate() {
                let src = &self.value(id).data()[o * inner..(o + 1) * inner];
                let dst = (o * inputs.len() + s) * inner;
                data[dst..dst + inner].copy_from_slice(src);
            }
        }
        let value = Tensor::new(out_shape, data).expect("stack shape");
        Ok(self.push(Op::Stack { inputs: inputs.to_vec(), axis }, value, false))
    }

    /// Subtensor at `index` along `axis`; the axis is removed.
    pub fn index_axis(&mut self, input: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(AvvpError::AxisOutOfRange { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let x = self.value(input);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let src = (o * len + index) * inner;
            data[o * inner..(o + 1) * inner].copy_from_slice(&x.data()[src..src + inner]);
        }
        let value = Tensor::new(out_shape, data).expect("index_axis shape");
        Ok(self.push(Op::IndexAxis { input, axis, index }, value, false))
    }

    /// Scaled dot-product attention. Every row of `queries` attends over the
    /// rows of `context` (scores scaled by 1/sqrt(d)); the output mixes the
    /// context rows by the softmaxed scores. Reductions are summed in
    /// value-sorted order, which makes the result exactly equivariant under
    /// a shared permutation of query and context rows.
    pub fn attend(&mut self, queries: NodeId, context: NodeId) -> Result<NodeId> {
        let (sq, sc) = (self.shape(queries), self.shape(context));
        if sq.len() != 2 || sc.len() != 2 || sq[1] != sc[1] {
            return Err(AvvpError::ShapeMismatch {
                op: "attend",
                lhs: sq.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        let value = attend_kernel(self.value(queries), self.value(context));
        Ok(self.push(Op::Attend { queries, context }, value, false))
    }

    /// Identity on values; multiplies the flowing-back gradient by `factor`
    /// (gradient-scaling layer; `factor = -1` gives gradient reversal).
    pub fn grad_scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.value(input).clone();
        self.push(Op::GradScale { input, factor }, value, false)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Every node reachable from the
    /// loss is visited exactly once; parameters the loss does not reach
    /// receive zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(AvvpError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let adj = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(&self.nodes[i].op, &adj, &mut grads);
        }

        // Unused parameters get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
        match &mut grads[id.0] {
            Some(existing) => existing.add_in_place(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, op: &Op, adj: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { lhs, rhs } => {
                let (a, b) = (self.value(lhs), self.value(rhs));
                let (n, k) = (a.shape()[0], a.shape()[1]);
                let m = b.shape()[1];
                // dA[i,p] = sum_j adj[i,j] * B[p,j]
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += adj.data()[i * m + j] * b.data()[p * m + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB[p,j] = sum_i A[i,p] * adj[i,j]
                let mut db = vec![0.0; k * m];
                for p in 0..k {
                    for j in 0..m {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += a.data()[i * k + p] * adj.data()[i * m + j];
                        }
                        db[p * m + j] = s;
                    }
                }
                self.accumulate(grads, lhs, Tensor::new(vec![n, k], da).expect("dA"));
                self.accumulate(grads, rhs, Tensor::new(vec![k, m], db).expect("dB"));
            }
            Op::Transpose { input } => {
                let (m, n) = (adj.shape()[0], adj.shape()[1]);
                let mut dx = vec![0.0; n * m];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = adj.data()[i * n + j];
                    }
                }
                self.accumulate(grads, input, Tensor::new(vec![n, m], dx).expect("dT"));
            }
            Op::Add { lhs, rhs } => {
                self.accumulate(grads, lhs, adj.clone());
                self.accumulate(grads, rhs, adj.clone());
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.value(lhs), self.value(rhs));
                let da = zip_map(adj, b, |g, v| g * v);
                let db = zip_map(adj, a, |g, v| g * v);
                self.accumulate(grads, lhs, da);
                self.accumulate(grads, rhs, db);
            }
            Op::Affine { input, mul, .. } => {
                self.accumulate(grads, input, adj.map(|g| mul * g));
            }
            Op::AddRow { matrix, row } => {
                let (n, m) = (adj.shape()[0], adj.shape()[1]);
                let mut drow = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        drow[j] += adj.data()[i * m + j];
                    }
                }
                self.accumulate(grads, matrix, adj.clone());
                self.accumulate(grads, row, Tensor::vector(drow));
            }
            Op::Sigmoid { input } => {
                // Output is cached above this node on the tape; recompute it
                // from the input to stay independent of node bookkeeping.
                let x = self.value(input);
                let dx = zip_map(adj, x, |g, v| {
                    let y = sigmoid_scalar(v);
                    g * y * (1.0 - y)
                });
                self.accumulate(grads, input, dx);
            }
            Op::Log { input } => {
                let x = self.value(input);
                let dx = zip_map(adj, x, |g, v| g / v);
                self.accumulate(grads, input, dx);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(input);
                let dx = zip_map(adj, x, |g, v| if v > lo && v < hi { g } else { 0.0 });
                self.accumulate(grads, input, dx);
            }
            Op::Softmax { input, axis } => {
                let y = softmax_kernel(self.value(input), axis);
                let (outer, len, inner) = axis_split(y.shape(), axis);
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let mut dot = 0.0;
                        for a in 0..len {
                            dot += adj.data()[idx(a)] * y.data()[idx(a)];
                        }
                        for a in 0..len {
                            dx[idx(a)] = y.data()[idx(a)] * (adj.data()[idx(a)] - dot);
                        }
                    }
                }
                self.accumulate(
                    grads,
                    input,
                    Tensor::new(y.shape().to_vec(), dx).expect("dSoftmax"),
                );
            }
            Op::SumAxis { input, axis } => {
                let shape = self.shape(input).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            dx[(o * len + a) * inner + i] = adj.data()[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, input, Tensor::new(shape, dx).expect("dSumAxis"));
            }
            Op::SumAll { input } => {
                let g = adj.data()[0];
                let shape = self.shape(input).to_vec();
                self.accumulate(grads, input, Tensor::filled(shape, g));
            }
            Op::Stack { ref inputs, axis } => {
                let first = self.shape(inputs[0]).to_vec();
                let outer: usize = first[..axis].iter().product();
                let inner: usize = first[axis..].iter().product();
                for (s, &id) in inputs.iter().enumerate() {
                    let mut dx = vec![0.0; outer * inner];
                    for o in 0..outer {
                        let src = (o * inputs.len() + s) * inner;
                        dx[o * inner..(o + 1) * inner]
                            .copy_from_slice(&adj.data()[src..src + inner]);
                    }
                    self.accumulate(grads, id, Tensor::new(first.clone(), dx).expect("dStack"));
                }
            }
            Op::IndexAxis { input, axis, index } => {
                let shape = self.shape(input).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + index) * inner;
                    dx[dst..dst + inner].copy_from_slice(&adj.data()[o * inner..(o + 1) * inner]);
                }
                self.accumulate(grads, input, Tensor::new(shape, dx).expect("dIndexAxis"));
            }
            Op::Attend { queries, context } => {
                let (dq, dc) = attend_backward(self.value(queries), self.value(context), adj);
                self.accumulate(grads, queries, dq);
                self.accumulate(grads, context, dc);
            }
            Op::GradScale { input, factor } => {
                self.accumulate(grads, input, adj.map(|g| factor * g));
            }
        }
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

/// (outer, axis length, inner) factorization of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

fn matmul_kernel(a: &Tensor, b: &Tensor, n: usize, k: usize, m: usize) -> Tensor {
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * m + j];
            }
            data[i * m + j] = s;
        }
    }
    Tensor::new(vec![n, m], data).expect("matmul shape")
}

/// Logistic function kept strictly inside (0, 1) in f64.
fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // 1/(1+e^-x) rounds to 1.0 for x ≳ 36.7; pull it back to the
    // largest double below one so probabilities stay in the open interval.
    y.min(1.0 - 0.5 * f64::EPSILON)
}

fn softmax_kernel(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut data = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x.data()[idx(a)]);
            }
            let mut norm = 0.0;
            for a in 0..len {
                let e = (x.data()[idx(a)] - max).exp();
                data[idx(a)] = e;
                norm += e;
            }
            for a in 0..len {
                data[idx(a)] /= norm;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("softmax shape")
}

/// Sum in descending value order; invariant under permutation of the terms.
fn sorted_sum(terms: &mut Vec<f64>) -> f64 {
    terms.sort_unstable_by(|a, b| b.total_cmp(a));
    terms.iter().sum()
}

/// Attention weights for `attend`: softmax over rows of Q·Cᵀ/√d.
fn attend_weights(queries: &Tensor, context: &Tensor) -> Tensor {
    let (tq, d) = (queries.shape()[0], queries.shape()[1]);
    let tc = context.shape()[0];
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = vec![0.0; tq * tc];
    let mut terms = Vec::with_capacity(tc);
    for i in 0..tq {
        let row = &mut w[i * tc..(i + 1) * tc];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in 0..d {
                s += queries.data()[i * d + p] * context.data()[j * d + p];
            }
            *slot = s * scale;
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        for slot in row.iter_mut() {
            *slot = (*slot - max).exp();
        }
        terms.clear();
        terms.extend_from_slice(row);
        let norm = sorted_sum(&mut terms);
        for slot in row.iter_mut() {
            *slot /= norm;
        }
    }
    Tensor::new(vec![tq, tc], w).expect("attend weights shape")
}

fn attend_kernel(queries: &Tensor, context: &Tensor) -> Tensor {
    let (tq, d) = (queries.shape()[0], queries.shape()[1]);
    let tc = context.shape()[0];
    let w = attend_weights(queries, context);
    let mut out = vec![0.0; tq * d];
    let mut terms = Vec::with_capacity(tc);
    for i in 0..tq {
        for k in 0..d {
            terms.clear();
            for j in 0..tc {
                terms.push(w.data()[i * tc + j] * context.data()[j * d + k]);
            }
            out[i * d + k] = sorted_sum(&mut terms);
        }
    }
    Tensor::new(vec![tq, d], out).expect("attend shape")
}

fn attend_backward(queries: &Tensor, context: &Tensor, adj: &Tensor) -> (Tensor, Tensor) {
    let (tq, d) = (queries.shape()[0], queries.shape()[1]);
    let tc = context.shape()[0];
    let scale = 1.0 / (d as f64).sqrt();
    let w = attend_weights(queries, context);

    // dW = adj · Cᵀ, then through the row softmax: dS = W ⊙ (dW − ⟨dW, W⟩_row)
    let mut ds = vec![0.0; tq * tc];
    for i in 0..tq {
        let mut dot = 0.0;
        let mut dw_row = vec![0.0; tc];
        for j in 0..tc {
            let mut s = 0.0;
            for k in 0..d {
                s += adj.data()[i * d + k] * context.data()[j * d + k];
            }
            dw_row[j] = s;
            dot += s * w.data()[i * tc + j];
        }
        for j in 0..tc {
            ds[i * tc + j] = w.data()[i * tc + j] * (dw_row[j] - dot);
        }
    }

    // dQ = scale · dS · C
    let mut dq = vec![0.0; tq * d];
    for i in 0..tq {
        for k in 0..d {
            let mut s = 0.0;
            for j in 0..tc {
                s += ds[i * tc + j] * context.data()[j * d + k];
            }
            dq[i * d + k] = s * scale;
        }
    }

    // dC = scale · dSᵀ · Q (score path) + Wᵀ · adj (value path)
    let mut dc = vec![0.0; tc * d];
    for j in 0..tc {
        for k in 0..d {
            let mut s = 0.0;
            for i in 0..tq {
                s += ds[i * tc + j] * queries.data()[i * d + k] * scale
                    + w.data()[i * tc + j] * adj.data()[i * d + k];
            }
            dc[j * d + k] = s;
        }
    }

    (
        Tensor::new(vec![tq, d], dq).expect("dQ"),
        Tensor::new(vec![tc, d], dc).expect("dC"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[2, 1], &[2.0, 3.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(vec![4, 2], -1.0, 1.0, &mut rng);
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                oracle[i * 2 + j] = s;
            }
        }
        let mut g = Graph::new();
        let (na, nb) = (g.constant(a), g.constant(b));
        let c = g.matmul(na, nb).unwrap();
        for (got, want) in g.value(c).data().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12);
        }
        let _ = rng.random::<f64>();
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message should name shapes: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.constant(t(&[2], &[1000.0, 1000.0]));
        let s = g.softmax(b, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0f64.ln(), 3.0f64.ln()]));
        let s = g.softmax(a, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_contract_points() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, -40.0, 3.0f64.ln()]));
        let y = g.sigmoid(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0);
        assert!((v[2] - 0.75).abs() < 1e-15);

        // Large positive inputs stay strictly below one.
        let x = g.constant(t(&[2], &[40.0, 1e6]));
        let y = g.sigmoid(x);
        assert!(g.value(y).data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 8.0]);

        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum_axis(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let z = g.constant(t(&[2], &[1.0, -1.0]));
        let sc = g.scale(z, 0.0);
        assert_eq!(g.value(sc).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let p = g.parameter(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = g.sum_all(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_gives_two_p() {
        let mut g = Graph::new();
        let p = g.parameter(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let p = g.parameter(t(&[2], &[1.0, 2.0]));
        let y = g.affine(p, 2.0, 0.0);
        assert!(matches!(g.backward(y), Err(AvvpError::Contract(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.parameter(t(&[2], &[1.0, 2.0]));
        let unused = g.parameter(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = g.sum_all(used);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn stack_and_index_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[2, 3], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let s = g.stack(&[a, b], 1).unwrap();
        assert_eq!(g.value(s).shape(), &[2, 2, 3]);
        assert_eq!(g.value(s).at(&[0, 1, 2]), 9.0);
        let back = g.index_axis(s, 1, 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());
    }

    #[test]
    fn attend_single_row_returns_context_row() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 3], &[0.3, -0.2, 0.9]));
        let c = g.constant(t(&[1, 3], &[5.0, 6.0, 7.0]));
        let o = g.attend(q, c).unwrap();
        assert_eq!(g.value(o).data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn attend_orthonormal_two_rows() {
        // Context rows e1, e2; query e1, d = 2: scores (1/√2, 0).
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let c = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let o = g.attend(q, c).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let w1 = s.exp() / (s.exp() + 1.0);
        let v = g.value(o).data();
        assert!((v[0] - w1).abs() < 1e-15);
        assert!((v[1] - (1.0 - w1)).abs() < 1e-15);
        // Matches the hand-evaluated weights 0.6698 / 0.3302.
        assert!((w1 - 0.6698).abs() < 1e-4);
    }

    #[test]
    fn graph_evaluation_is_deterministic() {
        use rand::SeedableRng;
        let build = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let q = g.constant(Tensor::uniform(vec![4, 3], -1.0, 1.0, &mut rng));
            let c = g.constant(Tensor::uniform(vec![5, 3], -1.0, 1.0, &mut rng));
            let a = g.attend(q, c).unwrap();
            let s = g.softmax(a, 1).unwrap();
            let l = g.sum_all(s);
            g.value(l).data()[0].to_bits()
        };
        assert_eq!(build(), build());
    }
}
