//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every forward op appends a node to the tape; `backward` replays the nodes
//! in reverse insertion order and accumulates vector-Jacobian products into
//! the gradient buffer of every tensor that requires one. The tape is rebuilt
//! per training step, which keeps variable-length per-example graphs (token
//! sequences, occlusion passes) trivial to express.
//!
//! All arithmetic is `f64`. Any op that produces a NaN or infinity fails
//! immediately with an error naming the op.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { x: VarId, factor: f64 },
    Tanh { x: VarId },
    Relu { x: VarId },
    Ln { x: VarId },
    SoftmaxRows { x: VarId },
    CrossEntropy { logits: VarId, targets: Vec<usize> },
    MeanAxis { x: VarId, axis: usize },
    Gather { table: VarId, indices: Vec<usize> },
    SumSquares { x: VarId },
    Sum { x: VarId },
    ConcatLast { inputs: Vec<VarId> },
    GradReverse { x: VarId, lambda: f64 },
    Reshape { x: VarId },
    Transpose { x: VarId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Ln { .. } => "ln",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Gather { .. } => "gather",
            Op::SumSquares { .. } => "sum_squares",
            Op::Sum { .. } => "sum",
            Op::ConcatLast { .. } => "concat_last",
            Op::GradReverse { .. } => "grad_reverse",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
        }
    }
}

struct Node {
    op: Op,
    tensor: Tensor,
}

/// Append-only computation graph; insertion order is topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a graph input, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            tensor,
        });
        id
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> VarId {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn zero_all_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].tensor.requires_grad()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<VarId> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: op.name() });
        }
        let tensor = Tensor::new(shape, values)?.with_requires_grad(requires_grad);
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { op, tensor });
        Ok(id)
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (av, bv) = (ta.values(), tb.values());
        for i in 0..m {
            for kk in 0..k {
                let aik = av[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let rg = ta.requires_grad() || tb.requires_grad();
        self.push(Op::MatMul { a, b }, vec![m, n], out, rg)
    }

    fn elementwise(&mut self, op_name: &'static str, a: VarId, b: VarId) -> Result<(Vec<usize>, bool)> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape() != tb.shape() {
            return Err(CoreError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok((ta.shape().to_vec(), ta.requires_grad() || tb.requires_grad()))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (shape, rg) = self.elementwise("add", a, b)?;
        let out = zip_map(self.nodes[a.0].tensor.values(), self.nodes[b.0].tensor.values(), |x, y| x + y);
        self.push(Op::Add { a, b }, shape, out, rg)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (shape, rg) = self.elementwise("sub", a, b)?;
        let out = zip_map(self.nodes[a.0].tensor.values(), self.nodes[b.0].tensor.values(), |x, y| x - y);
        self.push(Op::Sub { a, b }, shape, out, rg)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (shape, rg) = self.elementwise("mul", a, b)?;
        let out = zip_map(self.nodes[a.0].tensor.values(), self.nodes[b.0].tensor.values(), |x, y| x * y);
        self.push(Op::Mul { a, b }, shape, out, rg)
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        let out: Vec<f64> = t.values().iter().map(|v| v * factor).collect();
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad());
        self.push(Op::Scale { x, factor }, shape, out, rg)
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        let out: Vec<f64> = t.values().iter().map(|v| libm::tanh(*v)).collect();
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad());
        self.push(Op::Tanh { x }, shape, out, rg)
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        let out: Vec<f64> = t.values().iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect();
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad());
        self.push(Op::Relu { x }, shape, out, rg)
    }

    /// Element-wise natural log; non-positive inputs surface as a numeric error.
    pub fn ln(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        let out: Vec<f64> = t.values().iter().map(|v| libm::log(*v)).collect();
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad());
        self.push(Op::Ln { x }, shape, out, rg)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        if t.shape().len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "softmax_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.values()[r * cols..(r + 1) * cols];
            softmax_into(row, &mut out[r * cols..(r + 1) * cols]);
        }
        let (shape, rg) = (t.shape().to_vec(), t.requires_grad());
        self.push(Op::SoftmaxRows { x }, shape, out, rg)
    }

    /// Mean negative log-likelihood of integer targets under row-wise softmax
    /// of `logits` (`[n, c]`). Returns a scalar.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let t = &self.nodes[logits.0].tensor;
        if t.shape().len() != 2 || t.shape()[0] != targets.len() {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if rows == 0 {
            return Err(CoreError::usage("cross_entropy on an empty batch"));
        }
        if let Some(bad) = targets.iter().find(|y| **y >= cols) {
            return Err(CoreError::usage(alloc::format!(
                "cross_entropy target {bad} out of range for {cols} classes"
            )));
        }
        let mut total = 0.0;
        for (r, y) in targets.iter().enumerate() {
            let row = &t.values()[r * cols..(r + 1) * cols];
            total += log_sum_exp(row) - row[*y];
        }
        let rg = t.requires_grad();
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![total / rows as f64],
            rg,
        )
    }

    /// Mean over one axis of a rank-2 tensor; the axis is removed.
    pub fn mean_axis(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        if t.shape().len() != 2 || axis > 1 {
            return Err(CoreError::ShapeMismatch {
                op: "mean_axis",
                lhs: t.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let out = if axis == 0 {
            let mut acc = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    acc[c] += t.values()[r * cols + c];
                }
            }
            acc.iter_mut().for_each(|v| *v /= rows as f64);
            acc
        } else {
            let mut acc = vec![0.0; rows];
            for r in 0..rows {
                for c in 0..cols {
                    acc[r] += t.values()[r * cols + c];
                }
            }
            acc.iter_mut().for_each(|v| *v /= cols as f64);
            acc
        };
        let len = out.len();
        let rg = t.requires_grad();
        self.push(Op::MeanAxis { x, axis }, vec![len], out, rg)
    }

    /// Row gather from a `[v, d]` table: `indices` (length `l`) → `[l, d]`.
    pub fn gather(&mut self, table: VarId, indices: &[usize]) -> Result<VarId> {
        let t = &self.nodes[table.0].tensor;
        if t.shape().len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if indices.is_empty() {
            return Err(CoreError::usage("gather with empty index list"));
        }
        if let Some(bad) = indices.iter().find(|i| **i >= v) {
            return Err(CoreError::data(alloc::format!(
                "gather index {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = vec![0.0; indices.len() * d];
        for (r, idx) in indices.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&t.values()[idx * d..(idx + 1) * d]);
        }
        let rg = t.requires_grad();
        self.push(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            vec![indices.len(), d],
            out,
            rg,
        )
    }

    /// Squared L2 norm of all elements. Returns a scalar.
    pub fn sum_squares(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        let total: f64 = t.values().iter().map(|v| v * v).sum();
        let rg = t.requires_grad();
        self.push(Op::SumSquares { x }, vec![1], vec![total], rg)
    }

    /// Sum of all elements. Returns a scalar.
    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        let total: f64 = t.values().iter().sum();
        let rg = t.requires_grad();
        self.push(Op::Sum { x }, vec![1], vec![total], rg)
    }

    /// Concatenation along the last axis. All inputs must share rank and
    /// leading dimensions.
    pub fn concat_last(&mut self, inputs: &[VarId]) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(CoreError::usage("concat_last with no inputs"));
        }
        let first = self.nodes[inputs[0].0].tensor.shape().to_vec();
        let rank = first.len();
        if rank == 0 {
            return Err(CoreError::usage("concat_last on rank-0 tensors"));
        }
        let lead = &first[..rank - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for id in inputs {
            let s = self.nodes[id.0].tensor.shape();
            if s.len() != rank || &s[..rank - 1] != lead {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[rank - 1]);
        }
        let outer: usize = lead.iter().product();
        let total_w: usize = widths.iter().sum();
        let mut out = vec![0.0; outer * total_w];
        for o in 0..outer {
            let mut at = 0;
            for (id, w) in inputs.iter().zip(&widths) {
                let src = &self.nodes[id.0].tensor.values()[o * w..(o + 1) * w];
                out[o * total_w + at..o * total_w + at + w].copy_from_slice(src);
                at += w;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_w);
        let rg = inputs.iter().any(|id| self.requires_grad(*id));
        self.push(
            Op::ConcatLast {
                inputs: inputs.to_vec(),
            },
            shape,
            out,
            rg,
        )
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `-lambda` in the backward pass.
    pub fn grad_reverse(&mut self, x: VarId, lambda: f64) -> Result<VarId> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(CoreError::usage("grad_reverse scale must be finite and >= 0"));
        }
        let t = &self.nodes[x.0].tensor;
        let (shape, out, rg) = (t.shape().to_vec(), t.values().to_vec(), t.requires_grad());
        self.push(Op::GradReverse { x, lambda }, shape, out, rg)
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        if shape.iter().product::<usize>() != t.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let (out, rg) = (t.values().to_vec(), t.requires_grad());
        self.push(Op::Reshape { x }, shape, out, rg)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].tensor;
        if t.shape().len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = t.values()[r * cols + c];
            }
        }
        let rg = t.requires_grad();
        self.push(Op::Transpose { x }, vec![cols, rows], out, rg)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulates `∂root/∂tensor` into the grad buffer of every tensor with
    /// `requires_grad`. Calling it again without resetting grads adds another
    /// round of contributions.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.tensor.len() != 1 {
            return Err(CoreError::NonScalarRoot {
                elements: root_node.tensor.len(),
            });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        scratch[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if scratch[i].is_none() || !self.nodes[i].tensor.requires_grad() {
                continue;
            }
            // Inputs always precede node i, so the incoming gradient for node
            // i is final here and input slots live strictly left of it.
            let (left, right) = scratch.split_at_mut(i);
            let g = right[0].as_ref().expect("checked above");
            if !g.iter().all(|v| v.is_finite()) {
                return Err(CoreError::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.backward_node(i, g, left)?;
        }

        for (i, slot) in scratch.into_iter().enumerate() {
            if let Some(g) = slot {
                if self.nodes[i].tensor.requires_grad() {
                    self.nodes[i].tensor.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let add_into = |scratch: &mut [Option<Vec<f64>>], id: VarId, delta: &[f64]| {
            match &mut scratch[id.0] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta.to_vec()),
            }
        };
        let needs = |this: &Self, id: VarId| this.nodes[id.0].tensor.requires_grad();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(self, *a) {
                    // dA = g · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += gij * tb.values()[kk * n + j];
                            }
                        }
                    }
                    add_into(scratch, *a, &da);
                }
                if needs(self, *b) {
                    // dB = Aᵀ · g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = ta.values()[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[kk * n + j] += aik * g[i * n + j];
                            }
                        }
                    }
                    add_into(scratch, *b, &db);
                }
            }
            Op::Add { a, b } => {
                if needs(self, *a) {
                    add_into(scratch, *a, g);
                }
                if needs(self, *b) {
                    add_into(scratch, *b, g);
                }
            }
            Op::Sub { a, b } => {
                if needs(self, *a) {
                    add_into(scratch, *a, g);
                }
                if needs(self, *b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(scratch, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if needs(self, *a) {
                    let d = zip_map(g, self.nodes[b.0].tensor.values(), |x, y| x * y);
                    add_into(scratch, *a, &d);
                }
                if needs(self, *b) {
                    let d = zip_map(g, self.nodes[a.0].tensor.values(), |x, y| x * y);
                    add_into(scratch, *b, &d);
                }
            }
            Op::Scale { x, factor } => {
                if needs(self, *x) {
                    let d: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    add_into(scratch, *x, &d);
                }
            }
            Op::Tanh { x } => {
                if needs(self, *x) {
                    let d = zip_map(g, node.tensor.values(), |gi, y| gi * (1.0 - y * y));
                    add_into(scratch, *x, &d);
                }
            }
            Op::Relu { x } => {
                if needs(self, *x) {
                    let d = zip_map(g, self.nodes[x.0].tensor.values(), |gi, v| {
                        if v > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    });
                    add_into(scratch, *x, &d);
                }
            }
            Op::Ln { x } => {
                if needs(self, *x) {
                    let d = zip_map(g, self.nodes[x.0].tensor.values(), |gi, v| gi / v);
                    add_into(scratch, *x, &d);
                }
            }
            Op::SoftmaxRows { x } => {
                if needs(self, *x) {
                    let y = node.tensor.values();
                    let cols = node.tensor.shape()[1];
                    let rows = node.tensor.shape()[0];
                    let mut d = vec![0.0; y.len()];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..cols {
                            d[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    add_into(scratch, *x, &d);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if needs(self, *logits) {
                    let t = &self.nodes[logits.0].tensor;
                    let (rows, cols) = (t.shape()[0], t.shape()[1]);
                    let scale = g[0] / rows as f64;
                    let mut d = vec![0.0; rows * cols];
                    let mut probs = vec![0.0; cols];
                    for (r, y) in targets.iter().enumerate() {
                        let row = &t.values()[r * cols..(r + 1) * cols];
                        softmax_into(row, &mut probs);
                        for c in 0..cols {
                            let indicator = if c == *y { 1.0 } else { 0.0 };
                            d[r * cols + c] = scale * (probs[c] - indicator);
                        }
                    }
                    add_into(scratch, *logits, &d);
                }
            }
            Op::MeanAxis { x, axis } => {
                if needs(self, *x) {
                    let t = &self.nodes[x.0].tensor;
                    let (rows, cols) = (t.shape()[0], t.shape()[1]);
                    let mut d = vec![0.0; rows * cols];
                    if *axis == 0 {
                        for r in 0..rows {
                            for c in 0..cols {
                                d[r * cols + c] = g[c] / rows as f64;
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                d[r * cols + c] = g[r] / cols as f64;
                            }
                        }
                    }
                    add_into(scratch, *x, &d);
                }
            }
            Op::Gather { table, indices } => {
                if needs(self, *table) {
                    let t = &self.nodes[table.0].tensor;
                    let d_cols = t.shape()[1];
                    let mut d = vec![0.0; t.len()];
                    for (r, idx) in indices.iter().enumerate() {
                        for c in 0..d_cols {
                            d[idx * d_cols + c] += g[r * d_cols + c];
                        }
                    }
                    add_into(scratch, *table, &d);
                }
            }
            Op::SumSquares { x } => {
                if needs(self, *x) {
                    let d: Vec<f64> = self.nodes[x.0]
                        .tensor
                        .values()
                        .iter()
                        .map(|v| 2.0 * v * g[0])
                        .collect();
                    add_into(scratch, *x, &d);
                }
            }
            Op::Sum { x } => {
                if needs(self, *x) {
                    let d = vec![g[0]; self.nodes[x.0].tensor.len()];
                    add_into(scratch, *x, &d);
                }
            }
            Op::ConcatLast { inputs } => {
                let out_shape = node.tensor.shape();
                let rank = out_shape.len();
                let outer: usize = out_shape[..rank - 1].iter().product();
                let total_w = out_shape[rank - 1];
                let mut at = 0;
                for id in inputs {
                    let w = self.nodes[id.0].tensor.shape()[rank - 1];
                    if needs(self, *id) {
                        let mut d = vec![0.0; outer * w];
                        for o in 0..outer {
                            d[o * w..(o + 1) * w]
                                .copy_from_slice(&g[o * total_w + at..o * total_w + at + w]);
                        }
                        add_into(scratch, *id, &d);
                    }
                    at += w;
                }
            }
            Op::GradReverse { x, lambda } => {
                if needs(self, *x) {
                    let d: Vec<f64> = g.iter().map(|v| -lambda * v).collect();
                    add_into(scratch, *x, &d);
                }
            }
            Op::Reshape { x } => {
                if needs(self, *x) {
                    add_into(scratch, *x, g);
                }
            }
            Op::Transpose { x } => {
                if needs(self, *x) {
                    let t = &self.nodes[x.0].tensor;
                    let (rows, cols) = (t.shape()[0], t.shape()[1]);
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] = g[c * rows + r];
                        }
                    }
                    add_into(scratch, *x, &d);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = libm::exp(v - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}
