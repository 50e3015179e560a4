//! Temporal localization head: multi-scale banded attention over the
//! encoded track, per-frame crash probabilities, peak detection, and
//! sub-frame boundary refinement.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Validity threshold on peak confidence.
pub const P_MIN: f64 = 0.5;

/// Attention window widths in seconds, sorted ascending.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionScales {
    pub scales_s: Vec<f64>,
}

impl Default for AttentionScales {
    fn default() -> Self {
        AttentionScales { scales_s: vec![0.2, 1.0, 5.0] }
    }
}

impl AttentionScales {
    pub fn new(scales_s: Vec<f64>) -> Result<Self> {
        if scales_s.is_empty() || scales_s.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::contract("attention scales must be positive"));
        }
        if scales_s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::contract("attention scales must be sorted ascending"));
        }
        Ok(AttentionScales { scales_s })
    }
}

/// Frame-level probabilities plus the detected and refined crash time.
#[derive(Clone, Debug)]
pub struct TemporalPrediction {
    pub track_times: Vec<f64>,
    pub track_probs: Vec<f64>,
    /// Peak time; absent when no valid peak was found.
    pub t_coarse_s: Option<f64>,
    /// t_coarse + delta_offset; absent when invalid.
    pub t_refined_s: Option<f64>,
    pub delta_offset_s: f64,
    pub confidence: f64,
    pub valid: bool,
}

impl TemporalPrediction {
    pub fn invalid(track_times: Vec<f64>, track_probs: Vec<f64>, confidence: f64) -> Self {
        TemporalPrediction {
            track_times,
            track_probs,
            t_coarse_s: None,
            t_refined_s: None,
            delta_offset_s: 0.0,
            confidence,
            valid: false,
        }
    }
}

/// One attention sub-head per scale (no output projection).
#[derive(Clone, Debug)]
pub struct ScaleAttention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleAttentionNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
}

/// Band (half-open index range) per row: the frames within `scale/2` seconds
/// of each frame's timestamp. Timestamps must be sorted.
pub fn bands_for_scale(timestamps: &[f64], scale_s: f64) -> Vec<(usize, usize)> {
    let n = timestamps.len();
    let half = scale_s / 2.0;
    let mut bands = Vec::with_capacity(n);
    let (mut lo, mut hi) = (0usize, 0usize);
    for t in 0..n {
        let ts = timestamps[t];
        while timestamps[lo] < ts - half {
            lo += 1;
        }
        if hi < t + 1 {
            hi = t + 1;
        }
        while hi < n && timestamps[hi] <= ts + half {
            hi += 1;
        }
        bands.push((lo.min(t), hi.max(t + 1)));
    }
    bands
}

pub struct AttentionOutcome {
    pub out: NodeId,
    /// Scales whose bands degenerated to self-only attention everywhere
    /// (scale below the frame spacing).
    pub degenerate_scales: Vec<usize>,
}

/// One banded sub-head per scale, outputs averaged, residual added.
pub fn multi_scale_attention(
    tape: &mut Tape,
    x: NodeId,
    timestamps: &[f64],
    scales: &AttentionScales,
    params: &[ScaleAttentionNodes],
) -> Result<AttentionOutcome> {
    let t_len = tape.value(x).rows();
    if t_len == 0 {
        return Err(CoreError::EmptySequence("multi_scale_attention: T = 0".into()));
    }
    if timestamps.len() != t_len {
        return Err(CoreError::dim("multi_scale_attention: timestamp count mismatch"));
    }
    if params.len() != scales.scales_s.len() {
        return Err(CoreError::contract("multi_scale_attention: params per scale"));
    }
    let mut degenerate = Vec::new();
    let mut heads = Vec::with_capacity(params.len());
    for (si, (scale, p)) in scales.scales_s.iter().zip(params).enumerate() {
        let bands = bands_for_scale(timestamps, *scale);
        if bands.iter().all(|&(lo, hi)| hi - lo == 1) {
            degenerate.push(si);
        }
        let q = tape.matmul(x, p.wq)?;
        let k = tape.matmul(x, p.wk)?;
        let v = tape.matmul(x, p.wv)?;
        heads.push(tape.banded_attention(q, k, v, bands)?);
    }
    let mut acc = heads[0];
    for &h in &heads[1..] {
        acc = tape.add(acc, h)?;
    }
    let avg = tape.scale(acc, 1.0 / heads.len() as f64);
    let out = tape.add(avg, x)?;
    Ok(AttentionOutcome { out, degenerate_scales: degenerate })
}

/// Two-layer perceptron (tanh hidden) with a sigmoid output per frame.
#[derive(Clone, Debug)]
pub struct ProbMlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn frame_probabilities(tape: &mut Tape, x: NodeId, mlp: &ProbMlpNodes) -> Result<NodeId> {
    let h = tape.matmul(x, mlp.w1)?;
    let h = tape.add_row(h, mlp.b1)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, mlp.w2)?;
    let o = tape.add_row(o, mlp.b2)?;
    Ok(tape.sigmoid(o))
}

/// Global maximum with earliest-time tie-breaking. Valid iff confidence
/// reaches `p_min`.
pub fn detect_peak(times: &[f64], probs: &[f64], p_min: f64) -> Result<(usize, f64, f64, bool)> {
    if times.is_empty() || times.len() != probs.len() {
        return Err(CoreError::contract("detect_peak: empty or misaligned track"));
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    let confidence = probs[best];
    Ok((best, times[best], confidence, confidence >= p_min))
}

/// Local frame interval around index k (mean of adjacent gaps).
pub fn local_interval(times: &[f64], k: usize) -> f64 {
    let n = times.len();
    if n < 2 {
        return 1.0;
    }
    let left = if k > 0 { Some(times[k] - times[k - 1]) } else { None };
    let right = if k + 1 < n { Some(times[k + 1] - times[k]) } else { None };
    match (left, right) {
        (Some(l), Some(r)) => 0.5 * (l + r),
        (Some(l), None) => l,
        (None, Some(r)) => r,
        (None, None) => 1.0,
    }
}

/// Parabolic-vertex refinement from the three probabilities around the peak.
/// Offsets are clamped to half the local frame interval; a peak at the track
/// edge is clamped toward the interior.
pub fn refine_parabolic(times: &[f64], probs: &[f64], k: usize) -> f64 {
    let interval = local_interval(times, k);
    let half = interval / 2.0;
    let n = times.len();
    let offset = if k == 0 || k + 1 >= n {
        0.0
    } else {
        let (pl, pc, pr) = (probs[k - 1], probs[k], probs[k + 1]);
        let denom = pl - 2.0 * pc + pr;
        if denom.abs() < 1e-12 {
            0.0
        } else {
            ((pl - pr) / (2.0 * denom)) * interval
        }
    };
    clamp_toward_interior(offset, k, n, half)
}

fn clamp_toward_interior(offset: f64, k: usize, n: usize, half: f64) -> f64 {
    let mut o = offset.clamp(-half, half);
    if k == 0 {
        o = o.max(0.0);
    }
    if k + 1 >= n {
        o = o.min(0.0);
    }
    o
}

/// Refinement network parameters: a small perceptron over the ±2-frame
/// feature/probability neighborhood of the peak, emitting an offset through
/// tanh scaled to half the local frame interval.
#[derive(Clone, Debug)]
pub struct RefineMlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Neighborhood row indices (±2 frames, edge-replicated).
pub fn refine_window(k: usize, n: usize) -> Vec<usize> {
    (-2i64..=2)
        .map(|d| (k as i64 + d).clamp(0, n as i64 - 1) as usize)
        .collect()
}

/// Offset node on the tape: tanh(MLP(neighborhood)) · interval/2.
pub fn refine_offset_on_tape(
    tape: &mut Tape,
    head_in: NodeId,
    probs: NodeId,
    k: usize,
    interval: f64,
    mlp: &RefineMlpNodes,
) -> Result<NodeId> {
    let n = tape.value(head_in).rows();
    let idxs = refine_window(k, n);
    let feats = tape.gather_rows(head_in, idxs.clone())?;
    let w = tape.value(feats).numel();
    let flat = tape.reshape(feats, vec![1, w])?;
    let pwin = tape.gather_rows(probs, idxs)?;
    let pflat = tape.reshape(pwin, vec![1, 5])?;
    let inp = tape.concat_cols(&[flat, pflat])?;
    let h = tape.matmul(inp, mlp.w1)?;
    let h = tape.add_row(h, mlp.b1)?;
    let h = tape.tanh(h);
    let o = tape.matmul(h, mlp.w2)?;
    let o = tape.add_row(o, mlp.b2)?;
    let o = tape.tanh(o);
    Ok(tape.scale(o, interval / 2.0))
}

/// Inference-time boundary refinement: the trained network when available,
/// otherwise parabolic interpolation. Edge peaks clamp toward the interior.
pub struct RefineInputs<'a> {
    pub times: &'a [f64],
    pub probs: &'a [f64],
    pub head_in: &'a Tensor,
    pub k: usize,
}

pub fn refine_boundary(
    inputs: &RefineInputs<'_>,
    mlp_params: Option<(&Tensor, &Tensor, &Tensor, &Tensor)>,
) -> Result<f64> {
    let n = inputs.times.len();
    if inputs.k >= n {
        return Err(CoreError::contract("refine_boundary: peak index out of range"));
    }
    match mlp_params {
        Some((w1, b1, w2, b2)) => {
            let interval = local_interval(inputs.times, inputs.k);
            let mut tape = Tape::inference();
            let head_in = tape.constant(inputs.head_in.clone());
            let probs = tape.constant(Tensor::col(inputs.probs.to_vec()));
            let nodes = RefineMlpNodes {
                w1: tape.constant(w1.clone()),
                b1: tape.constant(b1.clone()),
                w2: tape.constant(w2.clone()),
                b2: tape.constant(b2.clone()),
            };
            let off = refine_offset_on_tape(&mut tape, head_in, probs, inputs.k, interval, &nodes)?;
            let o = tape.value(off).scalar_value()?;
            Ok(clamp_toward_interior(o, inputs.k, n, interval / 2.0))
        }
        None => Ok(refine_parabolic(inputs.times, inputs.probs, inputs.k)),
    }
}
