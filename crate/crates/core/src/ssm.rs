//! Selective state-space sequence layer.
//!
//! One layer takes a normalized input sequence x' (T×d), projects it to
//! input-dependent step sizes Δ, input maps B, and output maps C, discretizes
//! the (diagonal) transition, and runs the linear-time recurrence
//!
//!   h_t = Ābar_t ⊙ h_{t−1} + B̄bar_t ⊗ x'_t,    y_t = h_t · C_t + D ⊙ x'_t + x_t
//!
//! with Ābar = exp(Δ ⊙ diag(A)) and B̄bar = Δ ⊙ B. The transition diagonal is
//! taken from a HiPPO-LegS matrix shifted by λ·I. Blocks stack layers of
//! layer-norm → projections → scan, optionally running each layer in both
//! time directions and merging the concatenated outputs back to width d.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Parameters of one scan direction of one layer.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// Transition diagonal, 1×n. Negative entries at init keep decay < 1.
    pub a_diag: Tensor,
    pub w_delta: Tensor, // d×n
    pub b_delta: Tensor, // 1×n
    pub w_b: Tensor,     // d×n
    pub b_b: Tensor,     // 1×n
    pub w_c: Tensor,     // d×n
    pub b_c: Tensor,     // 1×n
    pub d_skip: Tensor,  // 1×d
    pub n: usize,
    pub d: usize,
}

/// Running hidden state of one scan direction: n state channels per model
/// channel, plus the index of the last processed step.
#[derive(Clone, Debug)]
pub struct SsmState {
    pub h: Tensor, // d×n
    pub t: usize,
}

impl SsmState {
    pub fn zeros(d: usize, n: usize) -> Self {
        SsmState { h: Tensor::zeros(vec![d, n]), t: 0 }
    }

    pub fn reset(&mut self) {
        self.h = Tensor::zeros(self.h.shape().to_vec());
        self.t = 0;
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MambaBlockConfig {
    pub layers: usize,
    pub n: usize,
    pub d: usize,
    pub bidirectional: bool,
    pub lambda_shift: f64,
}

impl Default for MambaBlockConfig {
    fn default() -> Self {
        MambaBlockConfig { layers: 2, n: 32, d: 64, bidirectional: true, lambda_shift: 0.1 }
    }
}

/// HiPPO-LegS transition matrix (0-indexed):
///   entry(i, k) = −√(2i+1)·√(2k+1)  for i > k
///   entry(i, i) = −(i+1)
///   entry(i, k) = 0                 for i < k
pub fn hippo_init(n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(CoreError::dim("hippo_init: N must be >= 1"));
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..i {
            data[i * n + k] = -((2 * i + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt();
        }
        data[i * n + i] = -((i + 1) as f64);
    }
    Tensor::new(vec![n, n], data)
}

/// A + λ·I: raise every diagonal entry by `lambda_shift`.
pub fn crash_aware_shift(a: &Tensor, lambda_shift: f64) -> Result<Tensor> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(CoreError::dim(format!(
            "crash_aware_shift: expected square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.rows();
    let mut data = a.data().to_vec();
    for i in 0..n {
        data[i * n + i] += lambda_shift;
    }
    Tensor::new(vec![n, n], data)
}

/// Per-step discretization with the diagonal approximation:
///   Ābar[t] = exp(δ_t ⊙ diag(A)),   B̄bar[t] = δ_t ⊙ B_t.
pub fn discretize(a: &Tensor, delta: &Tensor, bp: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.rows() != a.cols() {
        return Err(CoreError::dim("discretize: A must be square"));
    }
    let n = a.rows();
    if delta.cols() != n || bp.shape() != delta.shape() {
        return Err(CoreError::dim(format!(
            "discretize: delta {:?} / B {:?} must be T×{n}",
            delta.shape(),
            bp.shape()
        )));
    }
    if delta.data().iter().any(|&v| v <= 0.0) {
        return Err(CoreError::contract(
            "discretize: delta must be positive elementwise",
        ));
    }
    let t_len = delta.rows();
    let diag: Vec<f64> = (0..n).map(|i| a.at(i, i)).collect();
    let mut abar = Vec::with_capacity(t_len * n);
    let mut bbar = Vec::with_capacity(t_len * n);
    for t in 0..t_len {
        for j in 0..n {
            let dv = delta.at(t, j);
            abar.push((dv * diag[j]).exp());
            bbar.push(dv * bp.at(t, j));
        }
    }
    Ok((
        Tensor::from_parts(vec![t_len, n], abar),
        Tensor::from_parts(vec![t_len, n], bbar),
    ))
}

impl SsmParams {
    /// Fresh parameters: HiPPO diagonal shifted by λ, uniform(±1/√d)
    /// projections, zero biases, identity skip.
    pub fn init(n: usize, d: usize, lambda_shift: f64, rng: &mut Rng) -> Result<Self> {
        let a = crash_aware_shift(&hippo_init(n)?, lambda_shift)?;
        let a_diag = Tensor::row((0..n).map(|i| a.at(i, i)).collect());
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = |rows: usize, cols: usize| {
            Tensor::from_parts(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.range(-bound, bound)).collect(),
            )
        };
        Ok(SsmParams {
            w_delta: mat(d, n),
            w_b: mat(d, n),
            w_c: mat(d, n),
            b_delta: Tensor::zeros(vec![1, n]),
            b_b: Tensor::zeros(vec![1, n]),
            b_c: Tensor::zeros(vec![1, n]),
            d_skip: Tensor::ones(vec![1, d]),
            a_diag,
            n,
            d,
        })
    }

    /// Register every tensor on a tape. `trainable` controls grad tracking.
    pub fn leaf(&self, tape: &mut Tape, trainable: bool) -> SsmParamNodes {
        let mut lf = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            tape.leaf(t)
        };
        SsmParamNodes {
            a_diag: lf(&self.a_diag),
            w_delta: lf(&self.w_delta),
            b_delta: lf(&self.b_delta),
            w_b: lf(&self.w_b),
            b_b: lf(&self.b_b),
            w_c: lf(&self.w_c),
            b_c: lf(&self.b_c),
            d_skip: lf(&self.d_skip),
            n: self.n,
            d: self.d,
        }
    }
}

/// Node ids of one direction's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SsmParamNodes {
    pub a_diag: NodeId,
    pub w_delta: NodeId,
    pub b_delta: NodeId,
    pub w_b: NodeId,
    pub b_b: NodeId,
    pub w_c: NodeId,
    pub b_c: NodeId,
    pub d_skip: NodeId,
    pub n: usize,
    pub d: usize,
}

/// Output of a taped scan: the output node, the final state, and (when
/// requested) the state captured after `capture_at + 1` steps — used by
/// sliding-window inference to hand off state mid-window.
pub struct ScanOutput {
    pub y: NodeId,
    pub state: SsmState,
    pub captured: Option<SsmState>,
    /// Mean |C_t[n]| over the span, per state channel; with the state
    /// magnitude this scores each channel's output contribution (drives
    /// selective retention at state resets).
    pub c_abs_mean: Vec<f64>,
}

/// One direction of one layer on a tape: projections → softplus(Δ) →
/// discretize → recurrence, plus the residual input added to the output.
pub fn selective_scan_on_tape(
    tape: &mut Tape,
    xprime: NodeId,
    residual: NodeId,
    p: &SsmParamNodes,
    init: &SsmState,
    capture_at: Option<usize>,
) -> Result<ScanOutput> {
    let t_len = tape.value(xprime).rows();
    if t_len == 0 {
        return Err(CoreError::EmptySequence("selective_scan: T = 0".into()));
    }
    if !tape.value(xprime).all_finite() {
        return Err(CoreError::contract("selective_scan: NaN in inputs"));
    }
    if !init.h.all_finite() {
        return Err(CoreError::contract("selective_scan: non-finite init state"));
    }
    let dr = tape.matmul(xprime, p.w_delta)?;
    let dr = tape.add_row(dr, p.b_delta)?;
    let delta = tape.softplus(dr);
    let bp = tape.matmul(xprime, p.w_b)?;
    let bp = tape.add_row(bp, p.b_b)?;
    let cp = tape.matmul(xprime, p.w_c)?;
    let cp = tape.add_row(cp, p.b_c)?;
    let da = tape.mul_row(delta, p.a_diag)?;
    let abar = tape.exp(da);
    let bbar = tape.mul(delta, bp)?;
    let h0 = tape.constant(init.h.clone());
    let (y, h_final) = tape.scan(abar, bbar, cp, p.d_skip, xprime, residual, h0)?;
    let c_abs_mean: Vec<f64> = {
        let cv = tape.value(cp);
        (0..p.n)
            .map(|j| (0..t_len).map(|t| cv.at(t, j).abs()).sum::<f64>() / t_len as f64)
            .collect()
    };
    let captured = capture_at.map(|idx| {
        // Rebuild the prefix state cheaply from the recurrence inputs.
        let (_, h_mid, _) = crate::tape::scan_core(
            &tape.value(abar).data()[..(idx + 1) * p.n],
            &tape.value(bbar).data()[..(idx + 1) * p.n],
            &tape.value(cp).data()[..(idx + 1) * p.n],
            tape.value(p.d_skip).data(),
            &tape.value(xprime).data()[..(idx + 1) * p.d],
            &tape.value(residual).data()[..(idx + 1) * p.d],
            init.h.data(),
            idx + 1,
            p.n,
            p.d,
            false,
        );
        SsmState { h: Tensor::from_parts(vec![p.d, p.n], h_mid), t: init.t + idx + 1 }
    });
    Ok(ScanOutput {
        y,
        state: SsmState { h: h_final, t: init.t + t_len },
        captured,
        c_abs_mean,
    })
}

/// Plain (untaped) selective scan. `residual` is the pre-norm input added to
/// the output; pass zeros to get the inner scan alone.
pub fn selective_scan(
    xprime: &Tensor,
    residual: &Tensor,
    params: &SsmParams,
    init: &SsmState,
) -> Result<(Tensor, SsmState)> {
    let mut tape = Tape::inference();
    let x = tape.constant(xprime.clone());
    let r = tape.constant(residual.clone());
    let p = params.leaf(&mut tape, false);
    let out = selective_scan_on_tape(&mut tape, x, r, &p, init, None)?;
    Ok((tape.value(out.y).clone(), out.state))
}

/// Forward and time-reversed scans concatenated on the feature axis → T×2d.
pub fn bidirectional_scan(x: &Tensor, fwd: &SsmParams, bwd: &SsmParams) -> Result<Tensor> {
    if fwd.d != bwd.d {
        return Err(CoreError::dim(format!(
            "bidirectional_scan: model dims differ ({} vs {})",
            fwd.d, bwd.d
        )));
    }
    let mut tape = Tape::inference();
    let xid = tape.constant(x.clone());
    let pf = fwd.leaf(&mut tape, false);
    let pb = bwd.leaf(&mut tape, false);
    let d = fwd.d;
    let f = selective_scan_on_tape(&mut tape, xid, xid, &pf, &SsmState::zeros(d, fwd.n), None)?;
    let xr = tape.reverse_rows(xid);
    let b = selective_scan_on_tape(&mut tape, xr, xr, &pb, &SsmState::zeros(d, bwd.n), None)?;
    let brev = tape.reverse_rows(b.y);
    let cat = tape.concat_cols(&[f.y, brev])?;
    Ok(tape.value(cat).clone())
}

/// Parameters of one stacked layer: pre-norm, one or two scan directions,
/// and (bidirectional only) the 2d→d merge projection.
#[derive(Clone, Debug)]
pub struct MambaLayerParams {
    pub gamma: Tensor, // 1×d
    pub beta: Tensor,  // 1×d
    pub fwd: SsmParams,
    pub bwd: Option<SsmParams>,
    pub w_merge: Option<Tensor>, // 2d×d
    pub b_merge: Option<Tensor>, // 1×d
}

impl MambaLayerParams {
    pub fn init(cfg: &MambaBlockConfig, rng: &mut Rng) -> Result<Self> {
        let fwd = SsmParams::init(cfg.n, cfg.d, cfg.lambda_shift, rng)?;
        let (bwd, w_merge, b_merge) = if cfg.bidirectional {
            let bwd = SsmParams::init(cfg.n, cfg.d, cfg.lambda_shift, rng)?;
            let bound = 1.0 / (2.0 * cfg.d as f64).sqrt();
            let w = Tensor::from_parts(
                vec![2 * cfg.d, cfg.d],
                (0..2 * cfg.d * cfg.d).map(|_| rng.range(-bound, bound)).collect(),
            );
            (Some(bwd), Some(w), Some(Tensor::zeros(vec![1, cfg.d])))
        } else {
            (None, None, None)
        };
        Ok(MambaLayerParams {
            gamma: Tensor::ones(vec![1, cfg.d]),
            beta: Tensor::zeros(vec![1, cfg.d]),
            fwd,
            bwd,
            w_merge,
            b_merge,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MambaLayerNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
    pub fwd: SsmParamNodes,
    pub bwd: Option<SsmParamNodes>,
    pub w_merge: Option<NodeId>,
    pub b_merge: Option<NodeId>,
}

fn leaf_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> NodeId {
    let mut t = t.clone();
    t.requires_grad = trainable;
    tape.leaf(t)
}

impl MambaLayerParams {
    pub fn leaf(&self, tape: &mut Tape, trainable: bool) -> MambaLayerNodes {
        MambaLayerNodes {
            gamma: leaf_tensor(tape, &self.gamma, trainable),
            beta: leaf_tensor(tape, &self.beta, trainable),
            fwd: self.fwd.leaf(tape, trainable),
            bwd: self.bwd.as_ref().map(|p| p.leaf(tape, trainable)),
            w_merge: self.w_merge.as_ref().map(|t| leaf_tensor(tape, t, trainable)),
            b_merge: self.b_merge.as_ref().map(|t| leaf_tensor(tape, t, trainable)),
        }
    }
}

/// Per-layer carried state; the backward direction restarts at zero for every
/// call (future context is only available inside the current span).
#[derive(Clone, Debug)]
pub struct LayerState {
    pub fwd: SsmState,
}

impl LayerState {
    pub fn zeros(cfg: &MambaBlockConfig) -> Self {
        LayerState { fwd: SsmState::zeros(cfg.d, cfg.n) }
    }
}

pub struct BlockOutput {
    pub y: NodeId,
    pub states: Vec<LayerState>,
    /// Forward states captured mid-sequence, one per layer, when requested.
    pub captured: Option<Vec<LayerState>>,
    /// Per layer: forward-direction mean |C| per state channel.
    pub chan_scores: Vec<Vec<f64>>,
}

/// Stacked layers on a tape. `init` carries forward-direction state between
/// chunks of one long sequence; `capture_at` additionally captures the
/// forward state after `capture_at + 1` steps of every layer.
pub fn mamba_block_on_tape(
    tape: &mut Tape,
    x: NodeId,
    cfg: &MambaBlockConfig,
    layers: &[MambaLayerNodes],
    init: Option<&[LayerState]>,
    capture_at: Option<usize>,
) -> Result<BlockOutput> {
    if cfg.layers == 0 || layers.len() != cfg.layers {
        return Err(CoreError::contract(format!(
            "mamba_block: cfg.layers = {} but {} layer params given",
            cfg.layers,
            layers.len()
        )));
    }
    if tape.value(x).cols() != cfg.d {
        return Err(CoreError::dim(format!(
            "mamba_block: input width {} != cfg.d {}",
            tape.value(x).cols(),
            cfg.d
        )));
    }
    if let Some(states) = init {
        if states.len() != cfg.layers {
            return Err(CoreError::contract("mamba_block: state count mismatch"));
        }
    }
    let t_len = tape.value(x).rows();
    let mut cur = x;
    let mut out_states = Vec::with_capacity(cfg.layers);
    let mut out_captured: Vec<LayerState> = Vec::new();
    let mut chan_scores = Vec::with_capacity(cfg.layers);
    for (li, lp) in layers.iter().enumerate() {
        let state0 = match init {
            Some(states) => states[li].fwd.clone(),
            None => SsmState::zeros(cfg.d, cfg.n),
        };
        let xprime = tape.layer_norm(cur, lp.gamma, lp.beta, 1e-5)?;
        let y = match (&lp.bwd, lp.w_merge, lp.b_merge) {
            (Some(bwd), Some(w_merge), Some(b_merge)) => {
                let zeros = tape.constant(Tensor::zeros(vec![t_len, cfg.d]));
                let f = selective_scan_on_tape(tape, xprime, zeros, &lp.fwd, &state0, capture_at)?;
                let xr = tape.reverse_rows(xprime);
                let b = selective_scan_on_tape(
                    tape,
                    xr,
                    zeros,
                    bwd,
                    &SsmState::zeros(cfg.d, cfg.n),
                    None,
                )?;
                let brev = tape.reverse_rows(b.y);
                let cat = tape.concat_cols(&[f.y, brev])?;
                let merged = tape.matmul(cat, w_merge)?;
                let merged = tape.add_row(merged, b_merge)?;
                out_states.push(LayerState { fwd: f.state });
                chan_scores.push(f.c_abs_mean);
                if let Some(c) = f.captured {
                    out_captured.push(LayerState { fwd: c });
                }
                tape.add(merged, cur)?
            }
            _ => {
                let f = selective_scan_on_tape(tape, xprime, cur, &lp.fwd, &state0, capture_at)?;
                out_states.push(LayerState { fwd: f.state });
                chan_scores.push(f.c_abs_mean);
                if let Some(c) = f.captured {
                    out_captured.push(LayerState { fwd: c });
                }
                f.y
            }
        };
        cur = y;
    }
    let captured = if capture_at.is_some() { Some(out_captured) } else { None };
    Ok(BlockOutput { y: cur, states: out_states, captured, chan_scores })
}

/// Plain (untaped) block forward.
pub fn mamba_block(
    x: &Tensor,
    cfg: &MambaBlockConfig,
    layers: &[MambaLayerParams],
) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xid = tape.constant(x.clone());
    let nodes: Vec<MambaLayerNodes> = layers.iter().map(|l| l.leaf(&mut tape, false)).collect();
    let out = mamba_block_on_tape(&mut tape, xid, cfg, &nodes, None, None)?;
    Ok(tape.value(out.y).clone())
}
