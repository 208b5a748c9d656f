//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] is an append-only arena of nodes. Construction order is the
//! topological order: every op only references earlier nodes, so one reverse
//! sweep in [`Tape::backward`] visits each node exactly once. Nodes hold
//! their forward value plus whatever the local gradient rule needs.
//!
//! Persistent tensors (model parameters, adapter matrices) enter a tape
//! through [`Tape::leaf`], which stamps the tensor's `tape_id` so gradients
//! can be synced back after the backward sweep, or through
//! [`Tape::constant`] / [`Tape::frozen`] when no gradient may ever flow.
//! Every forward op validates its output is finite and errors otherwise.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{check_finite, dims2, matmul_2d, numel_of, softmax_row, TapeRef, Tensor};

pub type NodeId = usize;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Number of tapes constructed so far in this process. Lets tests assert
/// that a code path performed no gradient work at all.
pub fn tapes_created() -> u64 {
    TAPE_COUNTER.load(Ordering::Relaxed) - 1
}

enum Op {
    Leaf,
    /// [m,k] x [k,n]
    Matmul { a: NodeId, b: NodeId },
    /// [l,m,k] x [l,k,n], batched over the leading axis
    Bmm { a: NodeId, b: NodeId },
    Transpose2d { x: NodeId },
    Permute { x: NodeId, axes: Vec<usize> },
    Reshape { x: NodeId },
    BroadcastTo { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Gelu { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    SumLast { x: NodeId },
    SoftmaxTemp { x: NodeId, t: f64 },
    LogSoftmaxTemp { x: NodeId, t: f64 },
    /// Per-row normalization over the last axis with affine gamma/beta.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Row lookup: out[i] = table[ids[i]].
    Embedding { table: NodeId, ids: Vec<u32> },
    /// out[i, :] = x[rows[i], :] for 2D x.
    GatherRows { x: NodeId, rows: Vec<usize> },
    /// out[i] = x[i, cols[i]] for 2D x.
    PickPerRow { x: NodeId, cols: Vec<u32> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    frozen: bool,
    op: Op,
}

pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            uid: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a persistent tensor as a leaf, stamping its `tape_id` so
    /// the gradient can be synced back after `backward`.
    pub fn leaf(&mut self, t: &mut Tensor) -> NodeId {
        let id = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            false,
            Op::Leaf,
        );
        t.tape_id = Some(TapeRef {
            tape: self.uid,
            node: id,
        });
        id
    }

    /// Inserts a value that never takes gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            false,
            false,
            Op::Leaf,
        )
    }

    /// Inserts a frozen value. Like [`Tape::constant`] but additionally
    /// guarded: any attempt to accumulate a gradient into it is a hard
    /// contract error rather than silent tracking.
    pub fn frozen(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, true, Op::Leaf)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        frozen: bool,
        op: Op,
    ) -> NodeId {
        debug_assert_eq!(numel_of(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            frozen,
            op,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, context: &str) -> Result<NodeId> {
        check_finite(&data, context)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Matmul { a, b } | Op::Bmm { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.nodes[*x].requires_grad
                    || self.nodes[*gamma].requires_grad
                    || self.nodes[*beta].requires_grad
            }
            Op::Embedding { table, .. } => self.nodes[*table].requires_grad,
            Op::Transpose2d { x }
            | Op::Permute { x, .. }
            | Op::Reshape { x }
            | Op::BroadcastTo { x }
            | Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::SumLast { x }
            | Op::SoftmaxTemp { x, .. }
            | Op::LogSoftmaxTemp { x, .. }
            | Op::GatherRows { x, .. }
            | Op::PickPerRow { x, .. } => self.nodes[*x].requires_grad,
        };
        Ok(self.push(shape, data, requires_grad, false, op))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    /// Copies a node out as a plain tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::from_vec(self.nodes[id].shape.clone(), self.nodes[id].data.clone())
            .expect("tape nodes hold validated values")
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        if self.nodes[id].data.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar node, got shape {:?}",
                self.nodes[id].shape
            )));
        }
        Ok(self.nodes[id].data[0])
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(&self.nodes[a].shape)?;
        let (k2, n) = dims2(&self.nodes[b].shape)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let data = matmul_2d(&self.nodes[a].data, &self.nodes[b].data, m, k, n);
        self.push_op(vec![m, n], data, Op::Matmul { a, b }, "matmul")
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        let (&[l, m, k], &[l2, k2, n]) = match (sa.as_slice(), sb.as_slice()) {
            (x @ [_, _, _], y @ [_, _, _]) => (
                <&[usize; 3]>::try_from(x).unwrap(),
                <&[usize; 3]>::try_from(y).unwrap(),
            ),
            _ => {
                return Err(Error::shape(format!(
                    "bmm expects two 3D tensors, got {sa:?} and {sb:?}"
                )))
            }
        };
        if l != l2 || k != k2 {
            return Err(Error::shape(format!(
                "bmm shapes disagree: {sa:?} x {sb:?}"
            )));
        }
        let mut data = Vec::with_capacity(l * m * n);
        for i in 0..l {
            let slab = matmul_2d(
                &self.nodes[a].data[i * m * k..(i + 1) * m * k],
                &self.nodes[b].data[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            data.extend_from_slice(&slab);
        }
        self.push_op(vec![l, m, n], data, Op::Bmm { a, b }, "bmm")
    }

    pub fn transpose2d(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = dims2(&self.nodes[x].shape)?;
        let src = &self.nodes[x].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push_op(vec![c, r], data, Op::Transpose2d { x }, "transpose")
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::param(format!(
                "permute axes {axes:?} are not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(&self.nodes[x].data, &shape, axes);
        self.push_op(
            out_shape,
            data,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            "permute",
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel_of(&shape) != self.nodes[x].data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.nodes[x].shape,
                self.nodes[x].data.len()
            )));
        }
        let data = self.nodes[x].data.clone();
        self.push_op(shape, data, Op::Reshape { x }, "reshape")
    }

    /// NumPy-style broadcast of `x` up to `shape`.
    pub fn broadcast_to(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let src_shape = self.nodes[x].shape.clone();
        if src_shape.len() > shape.len() {
            return Err(Error::shape(format!(
                "cannot broadcast {src_shape:?} to lower-rank {shape:?}"
            )));
        }
        let padded = pad_left(&src_shape, shape.len());
        for (s, t) in padded.iter().zip(&shape) {
            if *s != *t && *s != 1 {
                return Err(Error::shape(format!(
                    "cannot broadcast {src_shape:?} to {shape:?}"
                )));
            }
        }
        let data = broadcast_data(&self.nodes[x].data, &padded, &shape);
        self.push_op(shape, data, Op::BroadcastTo { x }, "broadcast")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        context: &str,
    ) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(format!(
                "{context} operand shapes differ: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a].shape.clone();
        self.push_op(shape, data, op, context)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x].shape.clone();
        self.push_op(shape, data, Op::Scale { x, c }, "scale")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.nodes[x].shape.clone();
        self.push_op(shape, data, Op::Gelu { x }, "gelu")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[x].data.iter().sum();
        self.push_op(vec![], vec![s], Op::SumAll { x }, "sum")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].data.len() as f64;
        let s: f64 = self.nodes[x].data.iter().sum();
        self.push_op(vec![], vec![s / n], Op::MeanAll { x }, "mean")
    }

    /// Sum over the last axis: [.., v] -> [..] (scalar for rank-1 input).
    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        let v = *shape
            .last()
            .ok_or_else(|| Error::shape("sum_last needs at least one axis"))?;
        let out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let data: Vec<f64> = self.nodes[x]
            .data
            .chunks_exact(v)
            .map(|row| row.iter().sum())
            .collect();
        self.push_op(out_shape, data, Op::SumLast { x }, "sum_last")
    }

    /// Softmax of `x / t` over the last axis, max-stabilized.
    pub fn softmax_temp(&mut self, x: NodeId, t: f64) -> Result<NodeId> {
        let (shape, data) = self.rowwise_softmax_like(x, t, false)?;
        self.push_op(shape, data, Op::SoftmaxTemp { x, t }, "softmax")
    }

    /// Log-softmax of `x / t` over the last axis, max-stabilized.
    pub fn log_softmax_temp(&mut self, x: NodeId, t: f64) -> Result<NodeId> {
        let (shape, data) = self.rowwise_softmax_like(x, t, true)?;
        self.push_op(shape, data, Op::LogSoftmaxTemp { x, t }, "log_softmax")
    }

    fn rowwise_softmax_like(&self, x: NodeId, t: f64, log: bool) -> Result<(Vec<usize>, Vec<f64>)> {
        if t <= 0.0 {
            return Err(Error::param(format!(
                "temperature must be positive, got {t}"
            )));
        }
        let shape = self.nodes[x].shape.clone();
        let v = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax needs at least one axis"))?;
        let mut data = vec![0.0; self.nodes[x].data.len()];
        for (row_in, row_out) in self.nodes[x]
            .data
            .chunks_exact(v)
            .zip(data.chunks_exact_mut(v))
        {
            if log {
                log_softmax_row(row_in, t, row_out);
            } else {
                softmax_row(row_in, t, row_out);
            }
        }
        Ok((shape, data))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.nodes[x].shape.clone();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm needs at least one axis"))?;
        if self.nodes[gamma].shape != [d] || self.nodes[beta].shape != [d] {
            return Err(Error::shape(format!(
                "layer_norm affine params must be [{d}], got {:?} and {:?}",
                self.nodes[gamma].shape, self.nodes[beta].shape
            )));
        }
        let rows = self.nodes[x].data.len() / d;
        let mut out = vec![0.0; self.nodes[x].data.len()];
        let mut xhat = vec![0.0; self.nodes[x].data.len()];
        let mut inv_std = vec![0.0; rows];
        let g = &self.nodes[gamma].data;
        let b = &self.nodes[beta].data;
        for r in 0..rows {
            let row = &self.nodes[x].data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        self.push_op(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Embedding lookup: ids index rows of `table` ([vocab, d]).
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (vocab, d) = dims2(&self.nodes[table].shape)?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary size {vocab}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            let i = i as usize;
            data.extend_from_slice(&self.nodes[table].data[i * d..(i + 1) * d]);
        }
        self.push_op(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Row selection from a 2D node: out[i, :] = x[rows[i], :].
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = dims2(&self.nodes[x].shape)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::input(format!(
                "row index {bad} out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&self.nodes[x].data[i * c..(i + 1) * c]);
        }
        self.push_op(
            vec![rows.len(), c],
            data,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Per-row element pick from a 2D node: out[i] = x[i, cols[i]].
    pub fn pick_per_row(&mut self, x: NodeId, cols: &[u32]) -> Result<NodeId> {
        let (r, c) = dims2(&self.nodes[x].shape)?;
        if cols.len() != r {
            return Err(Error::shape(format!(
                "pick_per_row needs {r} column indices, got {}",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j as usize >= c) {
            return Err(Error::input(format!(
                "column index {bad} out of range for {c} columns"
            )));
        }
        let data: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| self.nodes[x].data[i * c + j as usize])
            .collect();
        self.push_op(
            vec![r],
            data,
            Op::PickPerRow {
                x,
                cols: cols.to_vec(),
            },
            "pick_per_row",
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Populates gradients for every
    /// `requires_grad` leaf on the tape (zeros where the loss does not
    /// depend on it); tensors bound with `requires_grad == false` get none.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.ran_backward {
            return Err(Error::contract(
                "backward may run only once per tape",));
        }
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.ran_backward = true;
        self.grads[loss] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }

        // Leaves the loss never reached still get a zero gradient so the
        // optimizer contract (grad populated for every trainable tensor)
        // holds uniformly.
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf)
                && self.nodes[i].requires_grad
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![0.0; self.nodes[i].data.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, into: NodeId, contribution: Vec<f64>) -> Result<()> {
        if self.nodes[into].frozen {
            return Err(Error::contract(
                "gradient reached a frozen tensor",));
        }
        if !self.nodes[into].requires_grad {
            return Ok(());
        }
        match &mut self.grads[into] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(&contribution) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&mut self, i: NodeId, g: &[f64]) -> Result<()> {
        // Ops are moved out and back to appease the borrow checker cheaply:
        // only enum payload pointers move, not tensor data.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_inner(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn propagate_inner(&mut self, i: NodeId, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = dims2(&self.nodes[*a].shape).unwrap();
                let n = self.nodes[*b].shape[1];
                if self.wants_grad(*a) {
                    // dA = dC . B^T
                    let bt = transpose_flat(&self.nodes[*b].data, k, n);
                    let da = matmul_2d(g, &bt, m, n, k);
                    self.accumulate(*a, da)?;
                }
                if self.wants_grad(*b) {
                    // dB = A^T . dC
                    let at = transpose_flat(&self.nodes[*a].data, m, k);
                    let db = matmul_2d(&at, g, k, m, n);
                    self.accumulate(*b, db)?;
                }
            }
            Op::Bmm { a, b } => {
                let (l, m, k) = (
                    self.nodes[*a].shape[0],
                    self.nodes[*a].shape[1],
                    self.nodes[*a].shape[2],
                );
                let n = self.nodes[*b].shape[2];
                if self.wants_grad(*a) {
                    let mut da = Vec::with_capacity(l * m * k);
                    for s in 0..l {
                        let bt = transpose_flat(&self.nodes[*b].data[s * k * n..(s + 1) * k * n], k, n);
                        da.extend(matmul_2d(&g[s * m * n..(s + 1) * m * n], &bt, m, n, k));
                    }
                    self.accumulate(*a, da)?;
                }
                if self.wants_grad(*b) {
                    let mut db = Vec::with_capacity(l * k * n);
                    for s in 0..l {
                        let at = transpose_flat(&self.nodes[*a].data[s * m * k..(s + 1) * m * k], m, k);
                        db.extend(matmul_2d(&at, &g[s * m * n..(s + 1) * m * n], k, m, n));
                    }
                    self.accumulate(*b, db)?;
                }
            }
            Op::Transpose2d { x } => {
                if self.wants_grad(*x) {
                    let (c, r) = dims2(&self.nodes[i].shape).unwrap();
                    self.accumulate(*x, transpose_flat(g, c, r))?;
                }
            }
            Op::Permute { x, axes } => {
                if self.wants_grad(*x) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (pos, &a) in axes.iter().enumerate() {
                        inverse[a] = pos;
                    }
                    let dg = permute_data(g, &self.nodes[i].shape, &inverse);
                    self.accumulate(*x, dg)?;
                }
            }
            Op::Reshape { x } => {
                if self.wants_grad(*x) {
                    self.accumulate(*x, g.to_vec())?;
                }
            }
            Op::BroadcastTo { x } => {
                if self.wants_grad(*x) {
                    let padded = pad_left(&self.nodes[*x].shape, self.nodes[i].shape.len());
                    let reduced = reduce_to_shape(g, &self.nodes[i].shape, &padded);
                    self.accumulate(*x, reduced)?;
                }
            }
            Op::Add { a, b } => {
                if self.wants_grad(*a) {
                    self.accumulate(*a, g.to_vec())?;
                }
                if self.wants_grad(*b) {
                    self.accumulate(*b, g.to_vec())?;
                }
            }
            Op::Sub { a, b } => {
                if self.wants_grad(*a) {
                    self.accumulate(*a, g.to_vec())?;
                }
                if self.wants_grad(*b) {
                    self.accumulate(*b, g.iter().map(|&v| -v).collect())?;
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(*a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[*b].data).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(*a, da)?;
                }
                if self.wants_grad(*b) {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[*a].data).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(*b, db)?;
                }
            }
            Op::Scale { x, c } => {
                if self.wants_grad(*x) {
                    self.accumulate(*x, g.iter().map(|&v| v * c).collect())?;
                }
            }
            Op::Gelu { x } => {
                if self.wants_grad(*x) {
                    let dg: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*x].data)
                        .map(|(&gv, &xv)| gv * gelu_bwd(xv))
                        .collect();
                    self.accumulate(*x, dg)?;
                }
            }
            Op::SumAll { x } => {
                if self.wants_grad(*x) {
                    self.accumulate(*x, vec![g[0]; self.nodes[*x].data.len()])?;
                }
            }
            Op::MeanAll { x } => {
                if self.wants_grad(*x) {
                    let n = self.nodes[*x].data.len();
                    self.accumulate(*x, vec![g[0] / n as f64; n])?;
                }
            }
            Op::SumLast { x } => {
                if self.wants_grad(*x) {
                    let v = *self.nodes[*x].shape.last().unwrap();
                    let mut dg = Vec::with_capacity(self.nodes[*x].data.len());
                    for &gv in g {
                        dg.extend(std::iter::repeat(gv).take(v));
                    }
                    self.accumulate(*x, dg)?;
                }
            }
            Op::SoftmaxTemp { x, t } => {
                if self.wants_grad(*x) {
                    let v = *self.nodes[i].shape.last().unwrap();
                    let s = &self.nodes[i].data;
                    let mut dg = vec![0.0; s.len()];
                    for r in 0..s.len() / v {
                        let srow = &s[r * v..(r + 1) * v];
                        let grow = &g[r * v..(r + 1) * v];
                        let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        for j in 0..v {
                            dg[r * v + j] = srow[j] * (grow[j] - dot) / t;
                        }
                    }
                    self.accumulate(*x, dg)?;
                }
            }
            Op::LogSoftmaxTemp { x, t } => {
                if self.wants_grad(*x) {
                    let v = *self.nodes[i].shape.last().unwrap();
                    let y = &self.nodes[i].data;
                    let mut dg = vec![0.0; y.len()];
                    for r in 0..y.len() / v {
                        let yrow = &y[r * v..(r + 1) * v];
                        let grow = &g[r * v..(r + 1) * v];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..v {
                            dg[r * v + j] = (grow[j] - yrow[j].exp() * gsum) / t;
                        }
                    }
                    self.accumulate(*x, dg)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let rows = xhat.len() / d;
                if self.wants_grad(*gamma) {
                    let mut dgamma = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dgamma[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(*gamma, dgamma)?;
                }
                if self.wants_grad(*beta) {
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dbeta[j] += g[r * d + j];
                        }
                    }
                    self.accumulate(*beta, dbeta)?;
                }
                if self.wants_grad(*x) {
                    let gamma_data = self.nodes[*gamma].data.clone();
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let mut mean_gy = 0.0;
                        let mut mean_gy_xhat = 0.0;
                        for j in 0..d {
                            let gy = g[r * d + j] * gamma_data[j];
                            mean_gy += gy;
                            mean_gy_xhat += gy * xhat[r * d + j];
                        }
                        mean_gy /= d as f64;
                        mean_gy_xhat /= d as f64;
                        for j in 0..d {
                            let gy = g[r * d + j] * gamma_data[j];
                            dx[r * d + j] =
                                (gy - mean_gy - xhat[r * d + j] * mean_gy_xhat) * inv_std[r];
                        }
                    }
                    self.accumulate(*x, dx)?;
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants_grad(*table) {
                    let d = self.nodes[*table].shape[1];
                    let mut dt = vec![0.0; self.nodes[*table].data.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (o, &gv) in dst.iter_mut().zip(&g[row * d..(row + 1) * d]) {
                            *o += gv;
                        }
                    }
                    self.accumulate(*table, dt)?;
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants_grad(*x) {
                    let c = self.nodes[*x].shape[1];
                    let mut dx = vec![0.0; self.nodes[*x].data.len()];
                    for (out_row, &src_row) in rows.iter().enumerate() {
                        let dst = &mut dx[src_row * c..(src_row + 1) * c];
                        for (o, &gv) in dst.iter_mut().zip(&g[out_row * c..(out_row + 1) * c]) {
                            *o += gv;
                        }
                    }
                    self.accumulate(*x, dx)?;
                }
            }
            Op::PickPerRow { x, cols } => {
                if self.wants_grad(*x) {
                    let c = self.nodes[*x].shape[1];
                    let mut dx = vec![0.0; self.nodes[*x].data.len()];
                    for (row, &col) in cols.iter().enumerate() {
                        dx[row * c + col as usize] += g[row];
                    }
                    self.accumulate(*x, dx)?;
                }
            }
        }
        Ok(())
    }

    /// Copies the gradient computed for `t`'s bound node back into `t.grad`
    /// (accumulating if a gradient is already present).
    pub fn sync_grad(&self, t: &mut Tensor) -> Result<()> {
        let r = t.tape_id.ok_or_else(|| {
            Error::contract("sync_grad on a tensor that was never bound to a tape")
        })?;
        if r.tape != self.uid {
            return Err(Error::contract(
                "sync_grad with a handle from a different tape",));
        }
        if !self.ran_backward {
            return Err(Error::contract("sync_grad before backward"));
        }
        if let Some(g) = &self.grads[r.node] {
            check_finite(g, "gradient")?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn transpose_flat(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    padded
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0;
        for d in 0..out_shape.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            src += coord * in_strides[axes[d]];
        }
        *slot = data[src];
    }
    out
}

fn broadcast_data(data: &[f64], padded_src: &[usize], target: &[usize]) -> Vec<f64> {
    let src_strides = strides_of(padded_src);
    let out_strides = strides_of(target);
    let mut out = vec![0.0; numel_of(target)];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0;
        for d in 0..target.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            if padded_src[d] != 1 {
                src += coord * src_strides[d];
            }
        }
        *slot = data[src];
    }
    out
}

/// Sums `grad` (of shape `from`) down to `padded_to` (same rank, with 1s on
/// broadcast axes), returning the reduced flat data.
fn reduce_to_shape(grad: &[f64], from: &[usize], padded_to: &[usize]) -> Vec<f64> {
    let from_strides = strides_of(from);
    let to_strides = strides_of(padded_to);
    let mut out = vec![0.0; numel_of(padded_to)];
    for (flat, &gv) in grad.iter().enumerate() {
        let mut rem = flat;
        let mut dst = 0;
        for d in 0..from.len() {
            let coord = rem / from_strides[d];
            rem %= from_strides[d];
            if padded_to[d] != 1 {
                dst += coord * to_strides[d];
            }
        }
        out[dst] += gv;
    }
    out
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

fn log_softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        max = max.max(v / temperature);
    }
    let mut sum = 0.0;
    for &v in row {
        sum += (v / temperature - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v / temperature - lse;
    }
}
