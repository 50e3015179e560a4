//! Losses and the three-phase training procedure: contrastive encoder
//! pretraining, supervised fine-tuning (including threshold learning), and
//! compression-aware consistency training.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{CrashLocalizer, ParamNodes};
use crate::pipeline::FeatureSequence;
use crate::sampler::Tier;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const PROB_CLAMP_LO: f64 = 1e-7;
pub const PROB_CLAMP_HI: f64 = 1.0 - 1e-7;
/// Abort threshold: a step loss beyond this is treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e3;
/// Contrastive margin between class mean embeddings.
pub const CONTRASTIVE_MARGIN: f64 = 1.0;
/// Crash window for contrastive labels: [t_gt − 1 s, t_gt + 2 s].
pub const CRASH_WINDOW_BEFORE_S: f64 = 1.0;
pub const CRASH_WINDOW_AFTER_S: f64 = 2.0;
/// Extra weight on non-crash videos' frames in the supervised BCE.
pub const CLEAN_NEGATIVE_WEIGHT: f64 = 4.0;
/// Scale on the no-event smooth-peak penalty (relative to λ2).
pub const FALSE_ALARM_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha_t: f64,
    pub beta_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 2.0, lambda3: 0.1, alpha_t: 0.7, beta_t: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Contrastive,
    Supervised,
    CompressionAware,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Contrastive => "contrastive",
            Phase::Supervised => "supervised",
            Phase::CompressionAware => "compression",
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(CoreError::contract("lr must be >= 0"));
        }
        if self.batch == 0 {
            return Err(CoreError::contract("batch must be >= 1"));
        }
        Ok(())
    }
}

// ── plain loss formulas ─────────────────────────────────────────────────

/// Mean binary cross-entropy with probabilities clamped to
/// [1e−7, 1 − 1e−7].
pub fn loss_bce(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(CoreError::contract(format!(
            "loss_bce: {} probs vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut acc = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP_LO, PROB_CLAMP_HI);
        acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(acc / probs.len() as f64)
}

/// α·|e| + β·smooth_L1(e) with e = t̂ − t_gt.
pub fn loss_temporal(t_hat: f64, t_gt: f64, w: &LossWeights) -> f64 {
    let e = t_hat - t_gt;
    let sl1 = if e.abs() < 1.0 { 0.5 * e * e } else { e.abs() - 0.5 };
    w.alpha_t * e.abs() + w.beta_t * sl1
}

/// λ1·L_BCE + λ2·L_temp + λ3·L_reg. When the track has no valid peak the
/// caller substitutes the soft-argmax time for t̂ (see
/// [`soft_argmax_plain`]) to keep the path differentiable during training.
pub fn loss_total(bce: f64, temp: f64, reg: f64, w: &LossWeights) -> f64 {
    w.lambda1 * bce + w.lambda2 * temp + w.lambda3 * reg
}

/// Soft-argmax of a probability track at the given temperature.
pub fn soft_argmax_plain(times: &[f64], probs: &[f64], temperature: f64) -> f64 {
    let m = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = probs.iter().map(|&p| ((p - m) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    times.iter().zip(&exps).map(|(&t, &e)| t * e).sum::<f64>() / z
}

/// Deviation-weighted mean absolute temporal error with bounded monotone
/// weights wᵢ = 1 + |eᵢ| / (1 + |eᵢ|).
pub fn weighted_temporal_loss(preds: &[f64], gts: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(CoreError::contract("weighted_temporal_loss: empty or misaligned lists"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&p, &g) in preds.iter().zip(gts) {
        let e = (p - g).abs();
        let w = 1.0 + e / (1.0 + e);
        num += w * e;
        den += w;
    }
    Ok(num / den)
}

/// Mean squared parameter magnitude over every model tensor.
pub fn regularization_value(model: &CrashLocalizer) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in model.tensors() {
        total += t.data().iter().map(|v| v * v).sum::<f64>();
        count += t.numel();
    }
    total / count as f64
}

// ── taped loss builders ─────────────────────────────────────────────────

pub struct TapedLoss {
    pub total: NodeId,
    pub bce: NodeId,
    pub temp: Option<NodeId>,
    pub reg_or_consist: NodeId,
}

/// BCE over a T×1 probability node, optionally weighted per frame.
pub fn bce_on_tape(
    tape: &mut Tape,
    probs: NodeId,
    labels: &[f64],
    weights: Option<NodeId>,
) -> Result<NodeId> {
    let t_len = tape.value(probs).rows();
    if labels.len() != t_len {
        return Err(CoreError::contract("bce_on_tape: label count mismatch"));
    }
    let p = tape.clamp_prob(probs, PROB_CLAMP_LO, PROB_CLAMP_HI);
    let ln_p = tape.ln(p);
    let q = tape.affine(p, -1.0, 1.0);
    let ln_q = tape.ln(q);
    let y = tape.constant(Tensor::col(labels.to_vec()));
    let ny = tape.affine(y, -1.0, 1.0);
    let a = tape.mul(y, ln_p)?;
    let b = tape.mul(ny, ln_q)?;
    let s = tape.add(a, b)?;
    let neg = tape.scale(s, -1.0);
    match weights {
        Some(w) => {
            let num = tape.mul(w, neg)?;
            let num = tape.sum(num);
            let den = tape.sum(w);
            let inv = tape.recip(den);
            tape.mul(num, inv)
        }
        None => Ok(tape.mean(neg)),
    }
}

/// Soft-argmax time of a T×1 probability node (optionally gated).
pub fn soft_argmax_on_tape(
    tape: &mut Tape,
    probs: NodeId,
    times: &[f64],
    gate: Option<NodeId>,
    temperature: f64,
) -> Result<NodeId> {
    let t_len = tape.value(probs).rows();
    if times.len() != t_len {
        return Err(CoreError::contract("soft_argmax: times mismatch"));
    }
    let p_eff = match gate {
        Some(g) => tape.mul(probs, g)?,
        None => probs,
    };
    let row = tape.reshape(p_eff, vec![1, t_len])?;
    let scaled = tape.scale(row, 1.0 / temperature);
    let sm = tape.softmax_rows(scaled);
    let tv = tape.constant(Tensor::row(times.to_vec()));
    let weighted = tape.mul(sm, tv)?;
    Ok(tape.sum(weighted))
}

/// α·|e| + β·smooth_L1(e) on scalar nodes.
pub fn temporal_on_tape(tape: &mut Tape, t_hat: NodeId, t_gt: f64, w: &LossWeights) -> Result<NodeId> {
    let gt = tape.constant(Tensor::scalar(t_gt));
    let e = tape.sub(t_hat, gt)?;
    let a = tape.abs(e);
    let s = tape.smooth_l1(e);
    let a = tape.scale(a, w.alpha_t);
    let s = tape.scale(s, w.beta_t);
    tape.add(a, s)
}

/// Mean squared magnitude across every trainable parameter node.
pub fn regularization_on_tape(
    tape: &mut Tape,
    model: &CrashLocalizer,
    nodes: &ParamNodes,
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    let mut count = 0usize;
    for name in model.param_names() {
        let id = nodes.get(name);
        count += tape.value(id).numel();
        let sq = tape.mul(id, id)?;
        let s = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / count as f64))
}

/// Quantile-gate weights ω = 1 + g_med + g_high per frame from segment
/// percentile ranks; the gradient path that trains the threshold quantiles.
pub fn omega_on_tape(
    tape: &mut Tape,
    model: &CrashLocalizer,
    nodes: &ParamNodes,
    ranks: &[f64],
) -> Result<NodeId> {
    let u_med = nodes.get("thresholds.u_med");
    let u_high = nodes.get("thresholds.u_high");
    let q_med = tape.sigmoid(u_med);
    let s_high = tape.sigmoid(u_high);
    // q_high = q_med + (1 − q_med)·σ(u_high), always ordered.
    let one_minus = tape.affine(q_med, -1.0, 1.0);
    let gap = tape.mul(one_minus, s_high)?;
    let q_high = tape.add(q_med, gap)?;

    let r = tape.constant(Tensor::col(ranks.to_vec()));
    let temp = model.cfg.gate_temp;
    let dm = tape.sub_scalar(r, q_med)?;
    let dm = tape.scale(dm, 1.0 / temp);
    let g_med = tape.sigmoid(dm);
    let dh = tape.sub_scalar(r, q_high)?;
    let dh = tape.scale(dh, 1.0 / temp);
    let g_high = tape.sigmoid(dh);
    let g = tape.add(g_med, g_high)?;
    Ok(tape.affine(g, 1.0, 1.0))
}

// ── prepared data ───────────────────────────────────────────────────────

/// One video, preprocessed for the training loops: standardized sequences
/// with motion channels, per-track labels, and segment ranks.
#[derive(Clone)]
pub struct PreparedVideo {
    pub id: String,
    pub t_gt: Option<f64>,
    pub duration_s: f64,
    /// Coarse-rate track over the whole video.
    pub coarse: FeatureSequence,
    pub coarse_labels: Vec<f64>,
    pub coarse_ranks: Vec<f64>,
    /// Mid/fine-rate windows around the crash (crash videos only).
    pub med_window: Option<(FeatureSequence, Vec<f64>)>,
    pub fine_window: Option<(FeatureSequence, Vec<f64>)>,
    /// Hard-negative windows at the motion-variance argmax away from the
    /// crash: all-zero labels, trained on the mid and fine tiers so dense
    /// refinement passes learn to reject benign high-motion regions.
    pub neg_med_window: Option<(FeatureSequence, Vec<f64>)>,
    pub neg_fine_window: Option<(FeatureSequence, Vec<f64>)>,
    /// Full-rate preprocessed sequence; clean videos slice dynamic
    /// hard-negative windows out of it at the model's current false-alarm
    /// peak.
    pub full: FeatureSequence,
    pub rates: crate::sampler::TierRates,
    /// Plan-compressed track (for the compression-aware phase).
    pub compressed: Option<(FeatureSequence, Vec<f64>)>,
}

pub fn frame_labels(times: &[f64], t_gt: f64) -> Vec<f64> {
    times
        .iter()
        .map(|&t| {
            if t >= t_gt - CRASH_WINDOW_BEFORE_S && t <= t_gt + CRASH_WINDOW_AFTER_S {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Crash-window span for the mid-tier training track, seconds around t_gt.
const MED_WINDOW_S: f64 = 8.0;
/// Crash-window span for the fine-tier training track.
const FINE_WINDOW_S: f64 = 3.0;

/// Build the training view of one corpus video. The sequences are
/// preprocessed exactly as the model's inference paths preprocess them.
pub fn prepare_video(
    loaded: &crate::synthgen::LoadedVideo,
    model: &CrashLocalizer,
    rates: crate::sampler::TierRates,
    duration_adaptive: bool,
    plan_thresholds: Option<&crate::sampler::Thresholds>,
) -> Result<PreparedVideo> {
    let t_gt = loaded.record.crash_time_s;
    let duration_s = loaded.record.duration_s;
    let std = model.preprocess(&loaded.features)?;

    let low_rate = if duration_adaptive {
        crate::sampler::duration_adaptive_low_rate(duration_s / 60.0)
    } else {
        rates.low
    };
    let coarse_idx = {
        let mut v = crate::sampler::sample_indices(&std.timestamps, 0.0, duration_s, low_rate);
        v.sort_unstable();
        v.dedup();
        v
    };
    let coarse = std.select(&coarse_idx)?;
    let coarse_labels = match t_gt {
        Some(tc) => frame_labels(&coarse.timestamps, tc),
        None => vec![0.0; coarse.len()],
    };
    let ranks = loaded.profile.segment_ranks();
    let coarse_ranks: Vec<f64> = coarse
        .timestamps
        .iter()
        .map(|&t| ranks[loaded.profile.segment_of(t)])
        .collect();

    let window = |center: f64, half: f64, rate: f64| -> Result<Option<(FeatureSequence, Vec<f64>)>> {
        let lo = (center - half).max(0.0);
        let hi = (center + half).min(duration_s);
        let mut idx = crate::sampler::sample_indices(&std.timestamps, lo, hi, rate);
        idx.sort_unstable();
        idx.dedup();
        if idx.len() < 4 {
            return Ok(None);
        }
        let seq = std.select(&idx)?;
        let labels = match t_gt {
            Some(tc) => frame_labels(&seq.timestamps, tc),
            None => vec![0.0; seq.len()],
        };
        Ok(Some((seq, labels)))
    };
    // Crash videos train the mid/fine tiers around the crash.
    let (med_window, fine_window) = match t_gt {
        Some(tc) => (
            window(tc, MED_WINDOW_S, rates.med)?,
            window(tc, FINE_WINDOW_S, rates.high.min(std.source_fps))?,
        ),
        None => (None, None),
    };
    // Static hard-negative windows for crash videos, at the variance argmax
    // away from the crash (the distractor's usual home). Clean videos get
    // dynamic windows at train time instead.
    let neg_center = t_gt.and_then(|tc| {
        let mut best: Option<usize> = None;
        for (i, &v) in loaded.profile.frame_v.iter().enumerate() {
            let t = loaded.features.timestamps[i];
            if (t - tc).abs() < 10.0 {
                continue;
            }
            if best.is_none_or(|b| v > loaded.profile.frame_v[b]) {
                best = Some(i);
            }
        }
        best.map(|i| loaded.features.timestamps[i])
    });
    let (neg_med_window, neg_fine_window) = match neg_center {
        Some(c) => {
            let zero_labels = |w: Option<(FeatureSequence, Vec<f64>)>| {
                w.map(|(seq, _)| {
                    let n = seq.len();
                    (seq, vec![0.0; n])
                })
            };
            (
                zero_labels(window(c, MED_WINDOW_S, rates.med)?),
                zero_labels(window(c, FINE_WINDOW_S, rates.high.min(std.source_fps))?),
            )
        }
        None => (None, None),
    };

    let compressed = match plan_thresholds {
        Some(th) => {
            let plan = crate::sampler::build_plan_with(
                &loaded.profile,
                th,
                duration_s / 60.0,
                rates,
                duration_adaptive,
            );
            let comp = crate::sampler::compress_tokens(&std, &plan)?;
            let labels = match t_gt {
                Some(tc) => frame_labels(&comp.timestamps, tc),
                None => vec![0.0; comp.len()],
            };
            Some((comp, labels))
        }
        None => None,
    };

    Ok(PreparedVideo {
        id: loaded.record.id.clone(),
        t_gt,
        duration_s,
        coarse,
        coarse_labels,
        coarse_ranks,
        med_window,
        fine_window,
        neg_med_window,
        neg_fine_window,
        full: std,
        rates,
        compressed,
    })
}

/// Positive-class balance weights folded into the per-frame gate: keeps the
/// handful of crash frames from drowning in the negatives.
fn class_balance(labels: &[f64]) -> Vec<f64> {
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return vec![1.0; labels.len()];
    }
    let w = (neg as f64 / pos as f64).min(10.0);
    labels.iter().map(|&y| if y > 0.5 { w } else { 1.0 }).collect()
}

// ── optimizer ───────────────────────────────────────────────────────────

/// Momentum SGD with global-norm gradient clipping.
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    velocity: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(lr: f64, model: &CrashLocalizer) -> Self {
        Optimizer {
            lr,
            momentum: 0.9,
            clip_norm: 5.0,
            velocity: model.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn step(&mut self, model: &mut CrashLocalizer, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(CoreError::contract("optimizer: gradient count mismatch"));
        }
        let mut norm_sq = 0.0;
        for g in grads {
            norm_sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let norm = norm_sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        for ((v, g), p) in self.velocity.iter_mut().zip(grads).zip(model.tensors_mut()) {
            for ((vv, &gv), pv) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vv = self.momentum * *vv + gv * scale;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

// ── logging ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LogRow {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_bce: f64,
    pub loss_temp: f64,
    pub loss_reg_or_consist: f64,
    pub lr: f64,
    pub seed: u64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from(
        "phase,epoch,step,loss_total,loss_bce,loss_temp,loss_reg_or_consist,lr,seed\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.phase, r.epoch, r.step, r.loss_total, r.loss_bce, r.loss_temp,
            r.loss_reg_or_consist, r.lr, r.seed
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── per-video losses ────────────────────────────────────────────────────

struct StepOut {
    grads: Vec<Tensor>,
    total: f64,
    bce: f64,
    temp: f64,
    reg_or_consist: f64,
}

fn collect_grads(
    tape: &Tape,
    model: &CrashLocalizer,
    nodes: &ParamNodes,
    loss: NodeId,
) -> Result<Vec<Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(model
        .param_names()
        .iter()
        .map(|n| {
            let id = nodes.get(n);
            grads.get_or_zeros(id, tape.value(id).shape())
        })
        .collect())
}

/// Supervised loss for one video: weighted BCE on the coarse track (plus
/// crash-window tracks for the mid/fine tiers), the temporal loss through a
/// gated soft-argmax plus the refinement offset, and the regularizer.
///
/// `fixed_peak` pins the refinement window's index (the gradient-check
/// harness supplies it so argmax flips cannot poison finite differences);
/// training passes `None` and uses the current argmax.
pub fn supervised_loss_on_tape(
    tape: &mut Tape,
    model: &CrashLocalizer,
    nodes: &ParamNodes,
    item: &PreparedVideo,
    w: &LossWeights,
    fixed_peak: Option<usize>,
) -> Result<TapedLoss> {
    let omega = omega_on_tape(tape, model, nodes, &item.coarse_ranks)?;
    let mut balance = class_balance(&item.coarse_labels);
    if item.t_gt.is_none() {
        // Clean videos are few; their all-negative supervision carries the
        // false-alarm suppression and gets a matching weight boost.
        balance.iter_mut().for_each(|w| *w *= CLEAN_NEGATIVE_WEIGHT);
    }
    let bal = tape.constant(Tensor::col(balance));
    let gate = tape.mul(omega, bal)?;

    let coarse = model.forward_track(tape, nodes, &item.coarse, Tier::Low, None, None)?;
    let mut bce = bce_on_tape(tape, coarse.probs, &item.coarse_labels, Some(gate))?;
    let mut n_bce = 1.0;

    // Smooth maximum over one or more probability tracks: the false-alarm
    // penalty for no-event videos (mean BCE barely feels one confident
    // frame, the peak is what raises the alarm).
    let smooth_peak_sq = |tape: &mut Tape, prob_nodes: &[NodeId]| -> Result<NodeId> {
        let mut rows = Vec::with_capacity(prob_nodes.len());
        for &p in prob_nodes {
            let t_len = tape.value(p).rows();
            rows.push(tape.reshape(p, vec![1, t_len])?);
        }
        let row = if rows.len() == 1 { rows[0] } else { tape.concat_cols(&rows)? };
        let scaled = tape.scale(row, 1.0 / model.cfg.soft_temp);
        let sm = tape.softmax_rows(scaled);
        let weighted = tape.mul(sm, row)?;
        let peak = tape.sum(weighted);
        tape.mul(peak, peak)
    };

    let mut temp_terms: Vec<NodeId> = Vec::new();
    if let Some(t_gt) = item.t_gt {
        let t_hat = soft_argmax_on_tape(
            tape,
            coarse.probs,
            &item.coarse.timestamps,
            Some(omega),
            model.cfg.soft_temp,
        )?;
        // Refinement offset rides on the soft peak during training.
        let k = match fixed_peak {
            Some(k) => k,
            None => {
                let probs_v = tape.value(coarse.probs).data().to_vec();
                crate::head::detect_peak(&item.coarse.timestamps, &probs_v, 0.0)?.0
            }
        };
        let interval = crate::head::local_interval(&item.coarse.timestamps, k);
        let refine = model.refine_nodes(nodes);
        let off = crate::head::refine_offset_on_tape(
            tape,
            coarse.head_in,
            coarse.probs,
            k,
            interval,
            &refine,
        )?;
        let t_ref = tape.add(t_hat, off)?;
        temp_terms.push(temporal_on_tape(tape, t_ref, t_gt, w)?);
    } else {
        // Clean video: refine the model's own false-alarm peak with the mid
        // and fine tiers — exactly what inference would do — and suppress
        // the smooth maximum of the fused tracks.
        let probs_v = tape.value(coarse.probs).data().to_vec();
        let k = crate::head::detect_peak(&item.coarse.timestamps, &probs_v, 0.0)?.0;
        let center = item.coarse.timestamps[k];
        let mut tracks = vec![coarse.probs];
        for (tier, rate, half) in [
            (Tier::Med, item.rates.med, MED_WINDOW_S),
            (Tier::High, item.rates.high.min(item.full.source_fps), FINE_WINDOW_S),
        ] {
            let lo = (center - half).max(0.0);
            let hi = (center + half).min(item.duration_s);
            let mut idx = crate::sampler::sample_indices(&item.full.timestamps, lo, hi, rate);
            idx.sort_unstable();
            idx.dedup();
            if idx.len() < 4 {
                continue;
            }
            let seq = item.full.select(&idx)?;
            let fwd = model.forward_track(tape, nodes, &seq, tier, None, None)?;
            let wb = vec![CLEAN_NEGATIVE_WEIGHT; seq.len()];
            let wb = tape.constant(Tensor::col(wb));
            let labels = vec![0.0; seq.len()];
            let b = bce_on_tape(tape, fwd.probs, &labels, Some(wb))?;
            bce = tape.add(bce, b)?;
            n_bce += 1.0;
            tracks.push(fwd.probs);
        }
        let fa = smooth_peak_sq(tape, &tracks)?;
        temp_terms.push(tape.scale(fa, FALSE_ALARM_SCALE));
    }

    for (window, tier, positive) in [
        (&item.med_window, Tier::Med, true),
        (&item.fine_window, Tier::High, true),
        (&item.neg_med_window, Tier::Med, false),
        (&item.neg_fine_window, Tier::High, false),
    ] {
        let Some((seq, labels)) = window else { continue };
        let fwd = model.forward_track(tape, nodes, seq, tier, None, None)?;
        let mut wb = class_balance(labels);
        if !positive || item.t_gt.is_none() {
            wb.iter_mut().for_each(|w| *w *= CLEAN_NEGATIVE_WEIGHT);
        }
        let wb = tape.constant(Tensor::col(wb));
        let b = bce_on_tape(tape, fwd.probs, labels, Some(wb))?;
        bce = tape.add(bce, b)?;
        n_bce += 1.0;
        match item.t_gt {
            Some(t_gt) if positive => {
                let t_hat_w = soft_argmax_on_tape(
                    tape,
                    fwd.probs,
                    &seq.timestamps,
                    None,
                    model.cfg.soft_temp,
                )?;
                temp_terms.push(temporal_on_tape(tape, t_hat_w, t_gt, w)?);
            }
            _ => temp_terms.push(smooth_peak_sq(tape, &[fwd.probs])?),
        }
    }
    let bce_mean = tape.scale(bce, 1.0 / n_bce);

    let temp_node = if temp_terms.is_empty() {
        None
    } else {
        let mut acc = temp_terms[0];
        for &t in &temp_terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Some(tape.scale(acc, 1.0 / temp_terms.len() as f64))
    };

    let reg = regularization_on_tape(tape, model, nodes)?;
    let mut total = tape.scale(bce_mean, w.lambda1);
    if let Some(t) = temp_node {
        let lt = tape.scale(t, w.lambda2);
        total = tape.add(total, lt)?;
    }
    let lr_ = tape.scale(reg, w.lambda3);
    total = tape.add(total, lr_)?;
    Ok(TapedLoss { total, bce: bce_mean, temp: temp_node, reg_or_consist: reg })
}

fn supervised_step(
    model: &CrashLocalizer,
    item: &PreparedVideo,
    w: &LossWeights,
) -> Result<StepOut> {
    let mut tape = Tape::new();
    let nodes = model.leaf_params(&mut tape, true);
    let loss = supervised_loss_on_tape(&mut tape, model, &nodes, item, w, None)?;
    let grads = collect_grads(&tape, model, &nodes, loss.total)?;
    Ok(StepOut {
        grads,
        total: tape.value(loss.total).scalar_value()?,
        bce: tape.value(loss.bce).scalar_value()?,
        temp: loss.temp.map(|t| tape.value(t).scalar_value()).transpose()?.unwrap_or(0.0),
        reg_or_consist: tape.value(loss.reg_or_consist).scalar_value()?,
    })
}

/// Contrastive loss for one crash video: pull frames toward their class
/// mean, push class means apart by the margin.
fn contrastive_step(model: &CrashLocalizer, item: &PreparedVideo) -> Result<Option<StepOut>> {
    let Some(t_gt) = item.t_gt else { return Ok(None) };
    let times = &item.coarse.timestamps;
    let mut pre = Vec::new();
    let mut crash = Vec::new();
    let mut post = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        if t < t_gt - CRASH_WINDOW_BEFORE_S {
            pre.push(i);
        } else if t <= t_gt + CRASH_WINDOW_AFTER_S {
            crash.push(i);
        } else {
            post.push(i);
        }
    }
    if pre.is_empty() || crash.is_empty() || post.is_empty() {
        return Ok(None);
    }

    let mut tape = Tape::new();
    let nodes = model.leaf_params(&mut tape, true);
    let fwd = model.forward_track(&mut tape, &nodes, &item.coarse, Tier::Low, None, None)?;
    let embed = fwd.embed;

    let classes = [pre, crash, post];
    let mut means = Vec::new();
    let mut intra: Option<NodeId> = None;
    for idxs in &classes {
        let mean = tape.mean_rows(embed, idxs.clone())?;
        // Mean squared distance of member frames to the class mean.
        let members = tape.gather_rows(embed, idxs.clone())?;
        let ones = tape.constant(Tensor::col(vec![1.0; idxs.len()]));
        let bmean = tape.matmul(ones, mean)?;
        let diff = tape.sub(members, bmean)?;
        let sq = tape.mul(diff, diff)?;
        let m = tape.mean(sq);
        intra = Some(match intra {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
        means.push(mean);
    }
    let intra = tape.scale(intra.unwrap(), 1.0 / 3.0);

    let mut inter: Option<NodeId> = None;
    for i in 0..means.len() {
        for j in (i + 1)..means.len() {
            let diff = tape.sub(means[i], means[j])?;
            let sq = tape.mul(diff, diff)?;
            let d2 = tape.sum(sq);
            let d = tape.sqrt(d2);
            // hinge: max(0, margin − d)²
            let neg = tape.affine(d, -1.0, CONTRASTIVE_MARGIN);
            let h = tape.relu(neg);
            let h2 = tape.mul(h, h)?;
            inter = Some(match inter {
                Some(a) => tape.add(a, h2)?,
                None => h2,
            });
        }
    }
    let inter = tape.scale(inter.unwrap(), 1.0 / 3.0);
    let total = tape.add(intra, inter)?;

    let grads = collect_grads(&tape, model, &nodes, total)?;
    Ok(Some(StepOut {
        grads,
        total: tape.value(total).scalar_value()?,
        bce: 0.0,
        temp: 0.0,
        reg_or_consist: tape.value(inter).scalar_value()?,
    }))
}

/// Compression-aware loss: predictions on the full-rate and plan-compressed
/// tracks, with an |t̂_full − t̂_compressed| consistency term.
fn compression_step(
    model: &CrashLocalizer,
    item: &PreparedVideo,
    w: &LossWeights,
) -> Result<Option<StepOut>> {
    let Some((comp, comp_labels)) = &item.compressed else { return Ok(None) };
    let mut tape = Tape::new();
    let nodes = model.leaf_params(&mut tape, true);

    let full = model.forward_track(&mut tape, &nodes, &item.coarse, Tier::Low, None, None)?;
    let compressed = model.forward_track(&mut tape, &nodes, comp, Tier::Low, None, None)?;

    let bal = tape.constant(Tensor::col(class_balance(comp_labels)));
    let bce = bce_on_tape(&mut tape, compressed.probs, comp_labels, Some(bal))?;

    let t_full = soft_argmax_on_tape(
        &mut tape,
        full.probs,
        &item.coarse.timestamps,
        None,
        model.cfg.soft_temp,
    )?;
    let t_comp =
        soft_argmax_on_tape(&mut tape, compressed.probs, &comp.timestamps, None, model.cfg.soft_temp)?;
    let dcons = tape.sub(t_full, t_comp)?;
    let consist = tape.abs(dcons);

    let mut temp_val = 0.0;
    let mut total = tape.scale(bce, w.lambda1);
    if let Some(t_gt) = item.t_gt {
        let temp = temporal_on_tape(&mut tape, t_comp, t_gt, w)?;
        temp_val = tape.value(temp).scalar_value()?;
        let lt = tape.scale(temp, w.lambda2);
        total = tape.add(total, lt)?;
    }
    let lc = tape.scale(consist, w.lambda3);
    total = tape.add(total, lc)?;

    let grads = collect_grads(&tape, model, &nodes, total)?;
    Ok(Some(StepOut {
        grads,
        total: tape.value(total).scalar_value()?,
        bce: tape.value(bce).scalar_value()?,
        temp: temp_val,
        reg_or_consist: tape.value(consist).scalar_value()?,
    }))
}

// ── phase drivers ───────────────────────────────────────────────────────

fn run_epochs<F>(
    model: &mut CrashLocalizer,
    items: &[PreparedVideo],
    cfg: &TrainConfig,
    per_item: F,
) -> Result<(Vec<LogRow>, usize)>
where
    F: Fn(&CrashLocalizer, &PreparedVideo) -> Result<Option<StepOut>> + Sync,
{
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.lr, model);
    let mut log = Vec::new();
    let mut skipped = 0usize;
    let mut shuffle_rng = crate::rng::Rng::stream(cfg.seed, "shuffle");
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut step = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let model_ref = &*model;
            let outs: Vec<Result<Option<StepOut>>> =
                crate::par::map_ordered(chunk, |&i| per_item(model_ref, &items[i]));
            let mut batch_grads: Option<Vec<Tensor>> = None;
            let mut used = 0usize;
            let mut sums = (0.0, 0.0, 0.0, 0.0);
            for out in outs {
                match out? {
                    None => skipped += 1,
                    Some(s) => {
                        used += 1;
                        sums.0 += s.total;
                        sums.1 += s.bce;
                        sums.2 += s.temp;
                        sums.3 += s.reg_or_consist;
                        match &mut batch_grads {
                            None => batch_grads = Some(s.grads),
                            Some(acc) => {
                                for (a, g) in acc.iter_mut().zip(&s.grads) {
                                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                                        *av += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            let mut grads = batch_grads.unwrap();
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let loss_total = sums.0 * inv;
            if !loss_total.is_finite() || loss_total > DIVERGENCE_BOUND {
                return Err(CoreError::Divergence(format!(
                    "loss {loss_total} at phase {} epoch {epoch} step {step}",
                    cfg.phase
                )));
            }
            opt.step(model, &grads)?;
            log.push(LogRow {
                phase: cfg.phase,
                epoch,
                step,
                loss_total,
                loss_bce: sums.1 * inv,
                loss_temp: sums.2 * inv,
                loss_reg_or_consist: sums.3 * inv,
                lr: cfg.lr,
                seed: cfg.seed,
            });
            step += 1;
        }
    }
    Ok((log, skipped))
}

/// Contrastive encoder pretraining on crash videos.
pub fn phase_contrastive(
    model: &mut CrashLocalizer,
    items: &[PreparedVideo],
    cfg: &TrainConfig,
) -> Result<Vec<LogRow>> {
    let (log, _skipped) = run_epochs(model, items, cfg, |m, it| contrastive_step(m, it))?;
    Ok(log)
}

/// Supervised fine-tuning; marks the refinement network and thresholds as
/// trained on completion (when any step ran).
pub fn phase_supervised(
    model: &mut CrashLocalizer,
    items: &[PreparedVideo],
    cfg: &TrainConfig,
    w: &LossWeights,
) -> Result<Vec<LogRow>> {
    let (log, _) = run_epochs(model, items, cfg, |m, it| supervised_step(m, it, w).map(Some))?;
    if !log.is_empty() {
        model.refine_trained = true;
        model.thresholds_learned = true;
    }
    Ok(log)
}

/// Compression-aware consistency training.
pub fn phase_compression_aware(
    model: &mut CrashLocalizer,
    items: &[PreparedVideo],
    cfg: &TrainConfig,
    w: &LossWeights,
) -> Result<Vec<LogRow>> {
    let (log, _) = run_epochs(model, items, cfg, |m, it| compression_step(m, it, w))?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        // Perfect predictions (clamped) → ≈ 0.
        let l = loss_bce(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(l < 1e-6);
        // p = 0.5 everywhere → ln 2.
        let l = loss_bce(&[0.5; 8], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // p = 0.9, y = 1 → −ln 0.9.
        let l = loss_bce(&[0.9], &[1.0]).unwrap();
        assert!((l - 0.10536051565782628).abs() < 1e-12);
        assert!(loss_bce(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn temporal_examples() {
        let w = LossWeights::default();
        assert_eq!(loss_temporal(3.0, 3.0, &w), 0.0);
        // e = 0.5 → 0.7·0.5 + 0.3·0.125 = 0.3875
        assert!((loss_temporal(3.5, 3.0, &w) - 0.3875).abs() < 1e-12);
        // e = 2 → 0.7·2 + 0.3·1.5 = 1.85
        assert!((loss_temporal(5.0, 3.0, &w) - 1.85).abs() < 1e-12);
        // Symmetric in the sign of e.
        assert_eq!(loss_temporal(1.0, 3.0, &w), loss_temporal(5.0, 3.0, &w));
    }

    #[test]
    fn total_is_linear_in_lambdas() {
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..Default::default() };
        assert_eq!(loss_total(0.7, 1.3, 0.2, &zero), 0.0);
        let w = LossWeights::default();
        let composed = loss_total(0.10536051565782628, 0.3875, 0.0, &w);
        assert!((composed - (0.10536051565782628 + 2.0 * 0.3875)).abs() < 1e-12);
        // Doubling a λ doubles that term's contribution.
        let w2 = LossWeights { lambda2: 4.0, ..w };
        let diff = loss_total(0.1, 0.5, 0.3, &w2) - loss_total(0.1, 0.5, 0.3, &w);
        assert!((diff - 2.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn weighted_temporal_examples() {
        assert_eq!(weighted_temporal_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // errors [1, 1] equals a single error of 1 (normalization).
        let a = weighted_temporal_loss(&[2.0, 5.0], &[1.0, 4.0]).unwrap();
        let b = weighted_temporal_loss(&[2.0], &[1.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
        // Permutation invariance.
        let c = weighted_temporal_loss(&[2.0, 7.0], &[1.0, 4.0]).unwrap();
        let d = weighted_temporal_loss(&[7.0, 2.0], &[4.0, 1.0]).unwrap();
        assert!((c - d).abs() < 1e-12);
        assert!(weighted_temporal_loss(&[], &[]).is_err());
        // Monotone-increasing weights emphasize larger deviations.
        let small = weighted_temporal_loss(&[1.5, 1.5], &[1.0, 1.0]).unwrap();
        let mixed = weighted_temporal_loss(&[1.5, 4.0], &[1.0, 1.0]).unwrap();
        assert!(mixed > small);
    }

    #[test]
    fn soft_argmax_tracks_the_peak() {
        let times: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let mut probs = vec![0.05; 50];
        probs[33] = 0.95;
        let t = soft_argmax_plain(&times, &probs, 0.1);
        assert!((t - 33.0).abs() < 0.3, "soft argmax {t}");
    }

    #[test]
    fn taped_losses_match_plain_formulas() {
        let probs = vec![0.8, 0.2, 0.6, 0.4];
        let labels = vec![1.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::col(probs.clone()).with_grad());
        let bce = bce_on_tape(&mut tape, p, &labels, None).unwrap();
        let plain = loss_bce(&probs, &labels).unwrap();
        assert!((tape.value(bce).scalar_value().unwrap() - plain).abs() < 1e-12);

        let w = LossWeights::default();
        let mut tape2 = Tape::new();
        let th = tape2.leaf(Tensor::scalar(4.5).with_grad());
        let temp = temporal_on_tape(&mut tape2, th, 3.0, &w).unwrap();
        assert!(
            (tape2.value(temp).scalar_value().unwrap() - loss_temporal(4.5, 3.0, &w)).abs() < 1e-12
        );
    }

    #[test]
    fn optimizer_zero_lr_is_identity() {
        let mut model = CrashLocalizer::new(crate::model::ModelConfig::tiny(5)).unwrap();
        let before: Vec<Vec<f64>> = model.tensors().iter().map(|t| t.data().to_vec()).collect();
        let grads: Vec<Tensor> = model
            .tensors()
            .iter()
            .map(|t| Tensor::ones(t.shape().to_vec()))
            .collect();
        let mut opt = Optimizer::new(0.0, &model);
        opt.step(&mut model, &grads).unwrap();
        for (t, b) in model.tensors().iter().zip(&before) {
            assert_eq!(t.data(), b.as_slice());
        }
    }

    #[test]
    fn gradient_clipping_bounds_update_norm() {
        let mut model = CrashLocalizer::new(crate::model::ModelConfig::tiny(6)).unwrap();
        let before: Vec<Vec<f64>> = model.tensors().iter().map(|t| t.data().to_vec()).collect();
        let grads: Vec<Tensor> = model
            .tensors()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), vec![100.0; t.numel()]).unwrap())
            .collect();
        let mut opt = Optimizer::new(1.0, &model);
        opt.step(&mut model, &grads).unwrap();
        let mut update_sq = 0.0;
        for (t, b) in model.tensors().iter().zip(&before) {
            for (a, x) in t.data().iter().zip(b) {
                update_sq += (a - x) * (a - x);
            }
        }
        assert!((update_sq.sqrt() - 5.0).abs() < 1e-9, "clipped norm {}", update_sq.sqrt());
    }
}
