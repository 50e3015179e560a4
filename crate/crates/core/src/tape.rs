//! Reverse-mode differentiation over a dynamic tape.
//!
//! A `Tape` records ops during the forward pass in topological order (inputs
//! always precede consumers) and replays them in reverse to accumulate
//! gradients. One training step owns one tape; tapes are rebuilt per forward
//! pass. `backward` never mutates the tape, so repeated calls over the same
//! frozen tape return identical gradients.
//!
//! exp / softplus / sigmoid clamp their inputs to |x| <= 40 so downstream
//! values stay finite on any input the rest of the crate produces.

use crate::error::{CoreError, Result};
use crate::tensor::{matmul_raw, Tensor};

pub type NodeId = usize;

const EXP_CLAMP: f64 = 40.0;
const LN_FLOOR: f64 = 1e-12;

/// A recorded operation: inputs by node id plus whatever context backward
/// needs that is not already a node value.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// matrix + broadcast row vector
    AddRow { a: NodeId, row: NodeId },
    /// matrix ⊙ broadcast row vector
    MulRow { a: NodeId, row: NodeId },
    /// k·x + c with scalar constants
    Affine { a: NodeId, k: f64 },
    /// x − s with a scalar node broadcast
    SubScalar { a: NodeId, s: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Sqrt { a: NodeId },
    Relu { a: NodeId },
    Abs { a: NodeId },
    SmoothL1 { a: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    Softplus { a: NodeId },
    ClampProb { a: NodeId, lo: f64, hi: f64 },
    /// 1/x elementwise, inputs clamped away from zero.
    Recip { a: NodeId },
    SoftmaxRows { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    MeanRows { a: NodeId, idxs: Vec<usize> },
    GatherRows { a: NodeId, idxs: Vec<usize> },
    ConcatCols { parts: Vec<NodeId> },
    ReverseRows { a: NodeId },
    Reshape { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Selective-scan recurrence over (abar, bbar, c, d, x', residual, h0).
    /// `traj` holds the post-step hidden states (T · d · n) when grads are on.
    Scan {
        abar: NodeId,
        bbar: NodeId,
        cseq: NodeId,
        dskip: NodeId,
        xprime: NodeId,
        residual: NodeId,
        h0: NodeId,
        n: usize,
        d: usize,
        traj: Vec<f64>,
    },
    /// Per-row softmax attention restricted to a band of rows. `weights`
    /// holds the softmax rows (flattened by band width) when grads are on.
    BandedAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bands: Vec<(usize, usize)>,
        scale: f64,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires: bool,
    op: Op,
}

/// Gradient map produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for a node, or an explicit zero tensor of its shape.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape with gradient recording enabled.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// Forward-only tape: ops run but save no backward context.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, requires: requires && self.grad_enabled, op });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires
    }

    /// Record a leaf. Tracks gradients iff the tensor is flagged.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let req = t.requires_grad;
        self.push(t, req, Op::Leaf)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    // ── elementwise and shape ops ───────────────────────────────────────

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::dim(format!(
                "{what}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, req, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, req, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, req, Op::Mul { a, b }))
    }

    fn row_broadcast_check(&self, a: NodeId, row: NodeId, what: &str) -> Result<()> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(CoreError::dim(format!(
                "{what}: row {:?} does not broadcast over {:?}",
                rv.shape(),
                av.shape()
            )));
        }
        Ok(())
    }

    /// matrix + row vector, broadcast over rows. The only broadcast allowed.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast_check(a, row, "add_row")?;
        let data = row_broadcast(self.value(a), self.value(row), |x, r| x + r);
        let req = self.requires(a) || self.requires(row);
        Ok(self.push(data, req, Op::AddRow { a, row }))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.row_broadcast_check(a, row, "mul_row")?;
        let data = row_broadcast(self.value(a), self.value(row), |x, r| x * r);
        let req = self.requires(a) || self.requires(row);
        Ok(self.push(data, req, Op::MulRow { a, row }))
    }

    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> NodeId {
        let data = map(self.value(a), |x| k * x + c);
        let req = self.requires(a);
        self.push(data, req, Op::Affine { a, k })
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.affine(a, k, 0.0)
    }

    /// Elementwise x − s where s is a scalar node.
    pub fn sub_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s).scalar_value()?;
        let data = map(self.value(a), |x| x - sv);
        let req = self.requires(a) || self.requires(s);
        Ok(self.push(data, req, Op::SubScalar { a, s }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let data = matmul_raw(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(data, req, Op::MatMul { a, b }))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| x.clamp(-EXP_CLAMP, EXP_CLAMP).exp());
        let req = self.requires(a);
        self.push(data, req, Op::Exp { a })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| x.max(LN_FLOOR).ln());
        let req = self.requires(a);
        self.push(data, req, Op::Ln { a })
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| x.max(LN_FLOOR).sqrt());
        let req = self.requires(a);
        self.push(data, req, Op::Sqrt { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| x.max(0.0));
        let req = self.requires(a);
        self.push(data, req, Op::Relu { a })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| x.abs());
        let req = self.requires(a);
        self.push(data, req, Op::Abs { a })
    }

    /// smooth-L1 (Huber with delta 1): 0.5x² inside |x|<1, |x|−0.5 outside.
    pub fn smooth_l1(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| {
            if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 }
        });
        let req = self.requires(a);
        self.push(data, req, Op::SmoothL1 { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| x.tanh());
        let req = self.requires(a);
        self.push(data, req, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| sigmoid(x.clamp(-EXP_CLAMP, EXP_CLAMP)));
        let req = self.requires(a);
        self.push(data, req, Op::Sigmoid { a })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| softplus(x.clamp(-EXP_CLAMP, EXP_CLAMP)));
        let req = self.requires(a);
        self.push(data, req, Op::Softplus { a })
    }

    pub fn clamp_prob(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let data = map(self.value(a), |x| x.clamp(lo, hi));
        let req = self.requires(a);
        self.push(data, req, Op::ClampProb { a, lo, hi })
    }

    /// Elementwise reciprocal; magnitudes below 1e−12 are clamped.
    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let data = map(self.value(a), |x| {
            let c = if x.abs() < LN_FLOOR { LN_FLOOR.copysign(x) } else { x };
            1.0 / c
        });
        let req = self.requires(a);
        self.push(data, req, Op::Recip { a })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(v.numel());
        for r in 0..rows {
            data.extend_from_slice(&softmax(v.row_slice(r)));
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        let req = self.requires(a);
        self.push(out, req, Op::SoftmaxRows { a })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let req = self.requires(a);
        self.push(Tensor::scalar(s), req, Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let req = self.requires(a);
        self.push(Tensor::scalar(s), req, Op::Mean { a })
    }

    /// Mean of the selected rows → 1×d.
    pub fn mean_rows(&mut self, a: NodeId, idxs: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a);
        if idxs.is_empty() {
            return Err(CoreError::contract("mean_rows: empty index set"));
        }
        if idxs.iter().any(|&i| i >= v.rows()) {
            return Err(CoreError::dim("mean_rows: index out of range"));
        }
        let d = v.cols();
        let mut acc = vec![0.0; d];
        for &i in &idxs {
            for (a, &x) in acc.iter_mut().zip(v.row_slice(i)) {
                *a += x;
            }
        }
        let k = idxs.len() as f64;
        acc.iter_mut().for_each(|x| *x /= k);
        let req = self.requires(a);
        Ok(self.push(Tensor::from_parts(vec![1, d], acc), req, Op::MeanRows { a, idxs }))
    }

    /// Select rows by index → k×d. Duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: NodeId, idxs: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a);
        if idxs.iter().any(|&i| i >= v.rows()) {
            return Err(CoreError::dim("gather_rows: index out of range"));
        }
        let d = v.cols();
        let mut data = Vec::with_capacity(idxs.len() * d);
        for &i in &idxs {
            data.extend_from_slice(v.row_slice(i));
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::from_parts(vec![idxs.len(), d], data),
            req,
            Op::GatherRows { a, idxs },
        ))
    }

    /// Concatenate along the feature axis. All parts share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat_cols: no parts"));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(CoreError::dim("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            req,
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    /// Reverse row order (time reversal).
    pub fn reverse_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (rows, d) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(v.numel());
        for r in (0..rows).rev() {
            data.extend_from_slice(v.row_slice(r));
        }
        let req = self.requires(a);
        self.push(Tensor::from_parts(vec![rows, d], data), req, Op::ReverseRows { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        let req = self.requires(a);
        Ok(self.push(v, req, Op::Reshape { a }))
    }

    /// Per-row layer normalization with learned gain/shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.cols();
        if d == 0 {
            return Err(CoreError::dim("layer_norm: zero-length rows"));
        }
        if eps <= 0.0 {
            return Err(CoreError::contract("layer_norm: eps must be > 0"));
        }
        self.row_broadcast_check(x, gamma, "layer_norm gamma")?;
        self.row_broadcast_check(x, beta, "layer_norm beta")?;
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let rows = v.rows();
        let mut data = Vec::with_capacity(v.numel());
        for r in 0..rows {
            let row = v.row_slice(r);
            let (mu, rstd) = row_moments(row, eps);
            for (j, &xv) in row.iter().enumerate() {
                data.push(g[j] * (xv - mu) * rstd + b[j]);
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::from_parts(vec![rows, d], data),
            req,
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    /// Selective-scan recurrence:
    ///   H_t = abar_t ⊙ H_{t−1} + x'_t ⊗ bbar_t
    ///   y_t = H_t · c_t + dskip ⊙ x'_t + residual_t
    /// where H is d×n (n state channels per model channel), abar/bbar/c are
    /// T×n, x'/residual are T×d, dskip is 1×d. Returns the output node and
    /// the final hidden state (plain tensor, not a node).
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &mut self,
        abar: NodeId,
        bbar: NodeId,
        cseq: NodeId,
        dskip: NodeId,
        xprime: NodeId,
        residual: NodeId,
        h0: NodeId,
    ) -> Result<(NodeId, Tensor)> {
        let (t_len, n) = {
            let a = self.value(abar);
            (a.rows(), a.cols())
        };
        if t_len == 0 {
            return Err(CoreError::EmptySequence("scan: T = 0".into()));
        }
        let d = self.value(xprime).cols();
        for (id, sh, what) in [
            (bbar, vec![t_len, n], "bbar"),
            (cseq, vec![t_len, n], "cseq"),
            (dskip, vec![1, d], "dskip"),
            (xprime, vec![t_len, d], "xprime"),
            (residual, vec![t_len, d], "residual"),
            (h0, vec![d, n], "h0"),
        ] {
            if self.value(id).shape() != sh.as_slice() {
                return Err(CoreError::dim(format!(
                    "scan: {what} has shape {:?}, expected {:?}",
                    self.value(id).shape(),
                    sh
                )));
            }
        }
        for id in [abar, bbar, cseq, dskip, xprime, residual, h0] {
            if !self.value(id).all_finite() {
                return Err(CoreError::contract("scan: non-finite input"));
            }
        }
        let req = [abar, bbar, cseq, dskip, xprime, residual, h0]
            .iter()
            .any(|&i| self.requires(i));
        let save_traj = self.grad_enabled && req;

        let (y, h_final, traj) = scan_core(
            self.value(abar).data(),
            self.value(bbar).data(),
            self.value(cseq).data(),
            self.value(dskip).data(),
            self.value(xprime).data(),
            self.value(residual).data(),
            self.value(h0).data(),
            t_len,
            n,
            d,
            save_traj,
        );
        let out = Tensor::from_parts(vec![t_len, d], y);
        let final_state = Tensor::from_parts(vec![d, n], h_final);
        let id = self.push(
            out,
            req,
            Op::Scan { abar, bbar, cseq, dskip, xprime, residual, h0, n, d, traj },
        );
        Ok((id, final_state))
    }

    /// Softmax attention where row t attends only to rows in `bands[t]`
    /// (half-open). All of q, k, v are T×dh.
    pub fn banded_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bands: Vec<(usize, usize)>,
    ) -> Result<NodeId> {
        let (t_len, dh) = {
            let qv = self.value(q);
            (qv.rows(), qv.cols())
        };
        self.binary_same_shape(q, k, "banded_attention q/k")?;
        self.binary_same_shape(q, v, "banded_attention q/v")?;
        if bands.len() != t_len {
            return Err(CoreError::dim("banded_attention: bands.len != T"));
        }
        for (t, &(lo, hi)) in bands.iter().enumerate() {
            if lo > t || hi <= t || hi > t_len {
                return Err(CoreError::contract(format!(
                    "banded_attention: band ({lo},{hi}) at row {t} must contain t and stay in range"
                )));
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        let save_w = self.grad_enabled && req;

        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; t_len * dh];
        let mut weights: Vec<f64> = Vec::new();
        let mut scores: Vec<f64> = Vec::new();
        for (t, &(lo, hi)) in bands.iter().enumerate() {
            scores.clear();
            for j in lo..hi {
                let mut s = 0.0;
                for c in 0..dh {
                    s += qd[t * dh + c] * kd[j * dh + c];
                }
                scores.push(s * scale);
            }
            let w = softmax(&scores);
            let orow = &mut out[t * dh..(t + 1) * dh];
            for (wi, j) in w.iter().zip(lo..hi) {
                for c in 0..dh {
                    orow[c] += wi * vd[j * dh + c];
                }
            }
            if save_w {
                weights.extend_from_slice(&w);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![t_len, dh], out),
            req,
            Op::BandedAttention { q, k, v, bands, scale, weights },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar loss node. Returns gradients for every
    /// node that requires them; gradient-tracked leaves unreachable from the
    /// loss get explicit zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(CoreError::contract(
                "backward on an inference tape",
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(CoreError::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires {
                continue;
            }
            let gy = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &gy, &mut grads)?;
        }

        // Tracked-but-unreached leaves get zeros so optimizers see every slot.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, gy.clone());
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *b, map(gy, |x| -x));
            }
            Op::Mul { a, b } => {
                self.accum(grads, *a, zip_map(gy, self.value(*b), |g, y| g * y));
                self.accum(grads, *b, zip_map(gy, self.value(*a), |g, x| g * x));
            }
            Op::AddRow { a, row } => {
                self.accum(grads, *a, gy.clone());
                self.accum(grads, *row, col_sums(gy));
            }
            Op::MulRow { a, row } => {
                let r = self.value(*row);
                self.accum(grads, *a, row_broadcast(gy, r, |g, rv| g * rv));
                let prod = zip_map(gy, self.value(*a), |g, x| g * x);
                self.accum(grads, *row, col_sums(&prod));
            }
            Op::Affine { a, k } => {
                self.accum(grads, *a, map(gy, |g| k * g));
            }
            Op::SubScalar { a, s } => {
                self.accum(grads, *a, gy.clone());
                let total: f64 = gy.data().iter().sum();
                self.accum(grads, *s, Tensor::scalar(-total));
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = dY · Bᵀ
                let (m, k_dim, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; m * k_dim];
                for i in 0..m {
                    for p in 0..k_dim {
                        let brow = bv.row_slice(p);
                        let gyrow = gy.row_slice(i);
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gyrow[j] * brow[j];
                        }
                        da[i * k_dim + p] = s;
                    }
                }
                // dB = Aᵀ · dY
                let mut db = vec![0.0; k_dim * n];
                for i in 0..m {
                    let arow = av.row_slice(i);
                    let gyrow = gy.row_slice(i);
                    for (p, &apv) in arow.iter().enumerate() {
                        if apv == 0.0 {
                            continue;
                        }
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        for (dst, &g) in dbrow.iter_mut().zip(gyrow.iter()) {
                            *dst += apv * g;
                        }
                    }
                }
                self.accum(grads, *a, Tensor::from_parts(vec![m, k_dim], da));
                self.accum(grads, *b, Tensor::from_parts(vec![k_dim, n], db));
            }
            Op::Exp { a } => {
                let inside = zip_map3(gy, self.value(id), self.value(*a), |g, y, x| {
                    if x.abs() < EXP_CLAMP { g * y } else { 0.0 }
                });
                self.accum(grads, *a, inside);
            }
            Op::Ln { a } => {
                let g = zip_map(gy, self.value(*a), |g, x| {
                    if x > LN_FLOOR { g / x } else { 0.0 }
                });
                self.accum(grads, *a, g);
            }
            Op::Sqrt { a } => {
                let g = zip_map(gy, self.value(id), |g, y| g * 0.5 / y.max(LN_FLOOR.sqrt()));
                self.accum(grads, *a, g);
            }
            Op::Relu { a } => {
                let g = zip_map(gy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.accum(grads, *a, g);
            }
            Op::Abs { a } => {
                let g = zip_map(gy, self.value(*a), |g, x| g * sign(x));
                self.accum(grads, *a, g);
            }
            Op::SmoothL1 { a } => {
                let g = zip_map(gy, self.value(*a), |g, x| {
                    if x.abs() < 1.0 { g * x } else { g * sign(x) }
                });
                self.accum(grads, *a, g);
            }
            Op::Tanh { a } => {
                let g = zip_map(gy, self.value(id), |g, y| g * (1.0 - y * y));
                self.accum(grads, *a, g);
            }
            Op::Sigmoid { a } => {
                let g = zip_map3(gy, self.value(id), self.value(*a), |g, y, x| {
                    if x.abs() < EXP_CLAMP { g * y * (1.0 - y) } else { 0.0 }
                });
                self.accum(grads, *a, g);
            }
            Op::Softplus { a } => {
                let g = zip_map(gy, self.value(*a), |g, x| {
                    if x.abs() < EXP_CLAMP { g * sigmoid(x) } else { 0.0 }
                });
                self.accum(grads, *a, g);
            }
            Op::ClampProb { a, lo, hi } => {
                let g = zip_map(gy, self.value(*a), |g, x| {
                    if x > *lo && x < *hi { g } else { 0.0 }
                });
                self.accum(grads, *a, g);
            }
            Op::Recip { a } => {
                let g = zip_map(gy, self.value(id), |g, y| -g * y * y);
                self.accum(grads, *a, g);
            }
            Op::SoftmaxRows { a } => {
                let y = self.value(id);
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = y.row_slice(r);
                    let gr = gy.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *a, Tensor::from_parts(vec![rows, cols], dx));
            }
            Op::Sum { a } => {
                let g = gy.scalar_value()?;
                let v = self.value(*a);
                self.accum(
                    grads,
                    *a,
                    Tensor::from_parts(v.shape().to_vec(), vec![g; v.numel()]),
                );
            }
            Op::Mean { a } => {
                let v = self.value(*a);
                let g = gy.scalar_value()? / v.numel() as f64;
                self.accum(
                    grads,
                    *a,
                    Tensor::from_parts(v.shape().to_vec(), vec![g; v.numel()]),
                );
            }
            Op::MeanRows { a, idxs } => {
                let v = self.value(*a);
                let d = v.cols();
                let mut dx = vec![0.0; v.numel()];
                let k = idxs.len() as f64;
                for &i in idxs {
                    for j in 0..d {
                        dx[i * d + j] += gy.data()[j] / k;
                    }
                }
                self.accum(grads, *a, Tensor::from_parts(v.shape().to_vec(), dx));
            }
            Op::GatherRows { a, idxs } => {
                let v = self.value(*a);
                let d = v.cols();
                let mut dx = vec![0.0; v.numel()];
                for (r, &i) in idxs.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += gy.data()[r * d + j];
                    }
                }
                self.accum(grads, *a, Tensor::from_parts(v.shape().to_vec(), dx));
            }
            Op::ConcatCols { parts } => {
                let rows = gy.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        let row = gy.row_slice(r);
                        dp.extend_from_slice(&row[offset..offset + w]);
                    }
                    self.accum(grads, p, Tensor::from_parts(vec![rows, w], dp));
                    offset += w;
                }
            }
            Op::ReverseRows { a } => {
                let (rows, d) = (gy.rows(), gy.cols());
                let mut dx = Vec::with_capacity(gy.numel());
                for r in (0..rows).rev() {
                    dx.extend_from_slice(gy.row_slice(r));
                }
                self.accum(grads, *a, Tensor::from_parts(vec![rows, d], dx));
            }
            Op::Reshape { a } => {
                let v = self.value(*a);
                let g = Tensor::from_parts(v.shape().to_vec(), gy.data().to_vec());
                self.accum(grads, *a, g);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let g = self.value(*gamma).data();
                let (rows, d) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let row = xv.row_slice(r);
                    let (mu, rstd) = row_moments(row, *eps);
                    let gyrow = gy.row_slice(r);
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mu) * rstd).collect();
                    let dyhat: Vec<f64> = gyrow.iter().zip(g).map(|(gv, gm)| gv * gm).collect();
                    let m1: f64 = dyhat.iter().sum::<f64>() / d as f64;
                    let m2: f64 = dyhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dyhat[j] - m1 - xhat[j] * m2);
                        dgamma[j] += gyrow[j] * xhat[j];
                        dbeta[j] += gyrow[j];
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(vec![rows, d], dx));
                self.accum(grads, *gamma, Tensor::from_parts(vec![1, d], dgamma));
                self.accum(grads, *beta, Tensor::from_parts(vec![1, d], dbeta));
            }
            Op::Scan { abar, bbar, cseq, dskip, xprime, residual, h0, n, d, traj } => {
                if traj.is_empty() {
                    return Err(CoreError::contract(
                        "scan backward without saved trajectory",
                    ));
                }
                let (n, d) = (*n, *d);
                let t_len = self.value(*abar).rows();
                let av = self.value(*abar).data();
                let bv = self.value(*bbar).data();
                let cv = self.value(*cseq).data();
                let dv = self.value(*dskip).data();
                let xv = self.value(*xprime).data();
                let h0v = self.value(*h0).data();
                let gyd = gy.data();

                let mut da = vec![0.0; t_len * n];
                let mut db = vec![0.0; t_len * n];
                let mut dc = vec![0.0; t_len * n];
                let mut dd = vec![0.0; d];
                let mut dx = vec![0.0; t_len * d];
                let dres = gyd.to_vec();
                let mut gh = vec![0.0; d * n]; // grad wrt H_t for current t

                for t in (0..t_len).rev() {
                    let h_t = &traj[t * d * n..(t + 1) * d * n];
                    let h_prev: &[f64] = if t == 0 {
                        h0v
                    } else {
                        &traj[(t - 1) * d * n..t * d * n]
                    };
                    // y_t = H_t · c_t + dskip ⊙ x'_t (+ residual, handled above)
                    for c in 0..d {
                        let g = gyd[t * d + c];
                        dd[c] += g * xv[t * d + c];
                        dx[t * d + c] += g * dv[c];
                        for j in 0..n {
                            dc[t * n + j] += g * h_t[c * n + j];
                            gh[c * n + j] += g * cv[t * n + j];
                        }
                    }
                    // H_t = abar_t ⊙ H_{t−1} + x'_t ⊗ bbar_t
                    for c in 0..d {
                        let xval = xv[t * d + c];
                        for j in 0..n {
                            let g = gh[c * n + j];
                            da[t * n + j] += g * h_prev[c * n + j];
                            db[t * n + j] += g * xval;
                            dx[t * d + c] += g * bv[t * n + j];
                            gh[c * n + j] = g * av[t * n + j];
                        }
                    }
                }
                self.accum(grads, *abar, Tensor::from_parts(vec![t_len, n], da));
                self.accum(grads, *bbar, Tensor::from_parts(vec![t_len, n], db));
                self.accum(grads, *cseq, Tensor::from_parts(vec![t_len, n], dc));
                self.accum(grads, *dskip, Tensor::from_parts(vec![1, d], dd));
                self.accum(grads, *xprime, Tensor::from_parts(vec![t_len, d], dx));
                self.accum(grads, *residual, Tensor::from_parts(vec![t_len, d], dres));
                self.accum(grads, *h0, Tensor::from_parts(vec![d, n], gh));
            }
            Op::BandedAttention { q, k, v, bands, scale, weights } => {
                if weights.is_empty() {
                    return Err(CoreError::contract(
                        "attention backward without saved weights",
                    ));
                }
                let dh = self.value(*q).cols();
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let vd = self.value(*v).data();
                let gyd = gy.data();
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut woff = 0;
                for (t, &(lo, hi)) in bands.iter().enumerate() {
                    let width = hi - lo;
                    let w = &weights[woff..woff + width];
                    woff += width;
                    let gout = &gyd[t * dh..(t + 1) * dh];
                    // dv_j += w_j · gout ; dw_j = gout · v_j
                    let mut dw = vec![0.0; width];
                    for (i, j) in (lo..hi).enumerate() {
                        let vrow = &vd[j * dh..(j + 1) * dh];
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dv[j * dh + c] += w[i] * gout[c];
                            dot += gout[c] * vrow[c];
                        }
                        dw[i] = dot;
                    }
                    let s: f64 = dw.iter().zip(w).map(|(a, b)| a * b).sum();
                    for (i, j) in (lo..hi).enumerate() {
                        let ds = w[i] * (dw[i] - s) * scale;
                        for c in 0..dh {
                            dq[t * dh + c] += ds * kd[j * dh + c];
                            dk[j * dh + c] += ds * qd[t * dh + c];
                        }
                    }
                }
                let sh = self.value(*q).shape().to_vec();
                self.accum(grads, *q, Tensor::from_parts(sh.clone(), dq));
                self.accum(grads, *k, Tensor::from_parts(sh.clone(), dk));
                self.accum(grads, *v, Tensor::from_parts(sh, dv));
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id].requires {
            return;
        }
        match &mut grads[id] {
            Some(existing) => {
                for (dst, src) in existing.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

// ── shared numeric kernels ──────────────────────────────────────────────

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + eps).sqrt())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn zip_map3(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn row_broadcast(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, d) = (a.rows(), a.cols());
    let r = row.data();
    let mut out = Vec::with_capacity(a.numel());
    for i in 0..rows {
        for (j, &x) in a.row_slice(i).iter().enumerate() {
            out.push(f(x, r[j]));
        }
    }
    Tensor::from_parts(vec![rows, d], out)
}

fn col_sums(t: &Tensor) -> Tensor {
    let (rows, d) = (t.rows(), t.cols());
    let mut out = vec![0.0; d];
    for i in 0..rows {
        for (j, &x) in t.row_slice(i).iter().enumerate() {
            out[j] += x;
        }
    }
    Tensor::from_parts(vec![1, d], out)
}

/// The raw scan recurrence kernel shared by the taped op and the untimed
/// benchmark paths. Returns (y, final state, optional trajectory).
#[allow(clippy::too_many_arguments)]
pub fn scan_core(
    abar: &[f64],
    bbar: &[f64],
    cseq: &[f64],
    dskip: &[f64],
    xprime: &[f64],
    residual: &[f64],
    h0: &[f64],
    t_len: usize,
    n: usize,
    d: usize,
    save_traj: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut h = h0.to_vec();
    let mut y = vec![0.0; t_len * d];
    let mut traj = if save_traj { Vec::with_capacity(t_len * d * n) } else { Vec::new() };
    for t in 0..t_len {
        let arow = &abar[t * n..(t + 1) * n];
        let brow = &bbar[t * n..(t + 1) * n];
        let crow = &cseq[t * n..(t + 1) * n];
        for c in 0..d {
            let xval = xprime[t * d + c];
            let hrow = &mut h[c * n..(c + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                hrow[j] = arow[j] * hrow[j] + brow[j] * xval;
                acc += crow[j] * hrow[j];
            }
            y[t * d + c] = acc + dskip[c] * xval + residual[t * d + c];
        }
        if save_traj {
            traj.extend_from_slice(&h);
        }
    }
    (y, h, traj)
}
