//! The assembled localizer: feature adapter, three multi-resolution
//! encoders sharing one localization head, learned sampling-threshold
//! quantiles, checkpointing, and the tier orchestration used by the
//! pipeline module.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::head::{
    self, detect_peak, frame_probabilities, multi_scale_attention,
    AttentionScales, ProbMlpNodes, RefineInputs, RefineMlpNodes, ScaleAttentionNodes,
    TemporalPrediction,
};
use crate::io;
use crate::pipeline::{
    fuse_tracks, FeatureSequence, PipelineOutcome, WindowConfig,
};
use crate::rng::Rng;
use crate::sampler::{sample_indices, SamplingPlan, Thresholds, Tier};
use crate::ssm::{LayerState, MambaBlockConfig, MambaLayerNodes, SsmParamNodes};
#[cfg(test)]
use crate::ssm::SsmState;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub n_coarse: usize,
    pub n_mid: usize,
    pub n_fine: usize,
    pub bidirectional: bool,
    pub lambda_shift: f64,
    pub head_hidden: usize,
    pub refine_hidden: usize,
    pub scales_s: Vec<f64>,
    pub p_min: f64,
    /// Coarse-probability triggers for tier-2 / tier-3 refinement.
    pub trig_med: f64,
    pub trig_high: f64,
    /// Soft-argmax temperature used during training.
    pub soft_temp: f64,
    /// Quantile-gate temperature for threshold learning.
    pub gate_temp: f64,
    /// Motion-variance blend weight for the head's motion channel fallback.
    pub alpha: f64,
    /// Standardize each video over its own rows before the adapter (the
    /// frozen corpus statistics then stay at identity). When false the
    /// adapter's fitted corpus statistics carry the normalization.
    pub per_video_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: crate::synthgen::DEFAULT_FEATURE_DIM,
            d_model: 64,
            layers: 2,
            n_coarse: 16,
            n_mid: 32,
            n_fine: 64,
            bidirectional: true,
            lambda_shift: 0.1,
            head_hidden: 32,
            refine_hidden: 16,
            scales_s: vec![0.2, 1.0, 5.0],
            p_min: head::P_MIN,
            trig_med: 0.3,
            trig_high: 0.6,
            soft_temp: 0.1,
            gate_temp: 0.05,
            alpha: 0.7,
            per_video_norm: true,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Smaller dimensions for gradient-check and unit-test work.
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            feature_dim: 6,
            d_model: 8,
            layers: 1,
            n_coarse: 4,
            n_mid: 4,
            n_fine: 8,
            head_hidden: 8,
            refine_hidden: 4,
            seed,
            ..Default::default()
        }
    }

    pub fn tier_state_dim(&self, tier: Tier) -> usize {
        match tier {
            Tier::Low => self.n_coarse,
            Tier::Med => self.n_mid,
            Tier::High => self.n_fine,
        }
    }

    pub fn block_config(&self, tier: Tier) -> MambaBlockConfig {
        MambaBlockConfig {
            layers: self.layers,
            n: self.tier_state_dim(tier),
            d: self.d_model,
            bidirectional: self.bidirectional,
            lambda_shift: self.lambda_shift,
        }
    }

    /// Head input width: encoder output plus the motion channel.
    pub fn head_dim(&self) -> usize {
        self.d_model + 1
    }

    fn tier_name(tier: Tier) -> &'static str {
        match tier {
            Tier::Low => "coarse",
            Tier::Med => "mid",
            Tier::High => "fine",
        }
    }
}

/// Node ids of every registered parameter on one tape.
pub struct ParamNodes {
    map: HashMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    /// Assemble from externally created leaves (gradient-check harnesses).
    pub fn from_pairs(names: &[String], ids: &[NodeId]) -> Self {
        ParamNodes {
            map: names.iter().cloned().zip(ids.iter().copied()).collect(),
        }
    }
}

/// Everything one tier forward pass produces.
pub struct TrackForward {
    pub probs: NodeId,
    pub embed: NodeId,
    pub head_in: NodeId,
    pub states: Vec<LayerState>,
    pub captured: Option<Vec<LayerState>>,
    pub chan_scores: Vec<Vec<f64>>,
    pub degenerate_scales: Vec<usize>,
}

/// Plain (values-only) track inference result.
pub struct TrackResult {
    pub times: Vec<f64>,
    pub probs: Vec<f64>,
    pub head_in: Tensor,
    pub states: Vec<LayerState>,
    pub captured: Option<Vec<LayerState>>,
    pub chan_scores: Vec<Vec<f64>>,
    pub rate_hint: f64,
}

pub struct CrashLocalizer {
    pub cfg: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    pub refine_trained: bool,
    pub thresholds_learned: bool,
}

impl CrashLocalizer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut rng = Rng::stream(cfg.seed, "init");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let push = |name: String, t: Tensor, names: &mut Vec<String>, tensors: &mut Vec<Tensor>| {
            names.push(name);
            tensors.push(t);
        };

        let uniform = |rows: usize, cols: usize, bound: f64, rng: &mut Rng| {
            Tensor::from_parts(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.range(-bound, bound)).collect(),
            )
        };

        // Adapter. The mean/scale buffers hold corpus-level standardization
        // statistics fitted at training time (frozen, never optimized).
        let fb = 1.0 / (cfg.feature_dim as f64).sqrt();
        push("adapter.mean".into(), Tensor::zeros(vec![1, cfg.feature_dim]), &mut names, &mut tensors);
        push("adapter.scale".into(), Tensor::ones(vec![1, cfg.feature_dim]), &mut names, &mut tensors);
        push("adapter.w".into(), uniform(cfg.feature_dim, cfg.d_model, fb, &mut rng), &mut names, &mut tensors);
        push("adapter.b".into(), Tensor::zeros(vec![1, cfg.d_model]), &mut names, &mut tensors);

        // Tier encoders.
        for tier in [Tier::Low, Tier::Med, Tier::High] {
            let bcfg = cfg.block_config(tier);
            let tn = ModelConfig::tier_name(tier);
            for li in 0..cfg.layers {
                let lp = crate::ssm::MambaLayerParams::init(&bcfg, &mut rng)?;
                let base = format!("enc.{tn}.{li}");
                push(format!("{base}.gamma"), lp.gamma, &mut names, &mut tensors);
                push(format!("{base}.beta"), lp.beta, &mut names, &mut tensors);
                for (dir, p) in [("fwd", Some(&lp.fwd)), ("bwd", lp.bwd.as_ref())] {
                    if let Some(p) = p {
                        push(format!("{base}.{dir}.a_diag"), p.a_diag.clone(), &mut names, &mut tensors);
                        push(format!("{base}.{dir}.w_delta"), p.w_delta.clone(), &mut names, &mut tensors);
                        push(format!("{base}.{dir}.b_delta"), p.b_delta.clone(), &mut names, &mut tensors);
                        push(format!("{base}.{dir}.w_b"), p.w_b.clone(), &mut names, &mut tensors);
                        push(format!("{base}.{dir}.b_b"), p.b_b.clone(), &mut names, &mut tensors);
                        push(format!("{base}.{dir}.w_c"), p.w_c.clone(), &mut names, &mut tensors);
                        push(format!("{base}.{dir}.b_c"), p.b_c.clone(), &mut names, &mut tensors);
                        push(format!("{base}.{dir}.d_skip"), p.d_skip.clone(), &mut names, &mut tensors);
                    }
                }
                if let (Some(w), Some(b)) = (lp.w_merge, lp.b_merge) {
                    push(format!("{base}.w_merge"), w, &mut names, &mut tensors);
                    push(format!("{base}.b_merge"), b, &mut names, &mut tensors);
                }
            }
        }

        // Head: attention per scale, probability MLP, refinement MLP.
        let dh = cfg.head_dim();
        let hb = 1.0 / (dh as f64).sqrt();
        for si in 0..cfg.scales_s.len() {
            push(format!("head.attn{si}.wq"), uniform(dh, dh, hb, &mut rng), &mut names, &mut tensors);
            push(format!("head.attn{si}.wk"), uniform(dh, dh, hb, &mut rng), &mut names, &mut tensors);
            push(format!("head.attn{si}.wv"), uniform(dh, dh, hb, &mut rng), &mut names, &mut tensors);
        }
        let hh = cfg.head_hidden;
        push("head.mlp.w1".into(), uniform(dh, hh, hb, &mut rng), &mut names, &mut tensors);
        push("head.mlp.b1".into(), Tensor::zeros(vec![1, hh]), &mut names, &mut tensors);
        push("head.mlp.w2".into(), uniform(hh, 1, 1.0 / (hh as f64).sqrt(), &mut rng), &mut names, &mut tensors);
        push("head.mlp.b2".into(), Tensor::zeros(vec![1, 1]), &mut names, &mut tensors);
        let rin = 5 * dh + 5;
        let rh = cfg.refine_hidden;
        push("head.refine.w1".into(), uniform(rin, rh, 1.0 / (rin as f64).sqrt(), &mut rng), &mut names, &mut tensors);
        push("head.refine.b1".into(), Tensor::zeros(vec![1, rh]), &mut names, &mut tensors);
        push("head.refine.w2".into(), uniform(rh, 1, 1.0 / (rh as f64).sqrt(), &mut rng), &mut names, &mut tensors);
        push("head.refine.b2".into(), Tensor::zeros(vec![1, 1]), &mut names, &mut tensors);

        // Learned sampling-threshold quantiles, sigmoid-reparameterized so
        // 0 < q_med < q_high < 1 holds after every optimizer step.
        let logit = |p: f64| (p / (1.0 - p)).ln();
        push("thresholds.u_med".into(), Tensor::scalar(logit(0.8)), &mut names, &mut tensors);
        push("thresholds.u_high".into(), Tensor::scalar(logit(0.75)), &mut names, &mut tensors);

        let index: HashMap<String, usize> =
            names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(CrashLocalizer {
            cfg,
            names,
            tensors,
            index,
            refine_trained: false,
            thresholds_learned: false,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Buffers that never receive gradients (standardization statistics).
    pub fn is_frozen(name: &str) -> bool {
        matches!(name, "adapter.mean" | "adapter.scale")
    }

    /// Register every parameter on a tape in declaration order.
    pub fn leaf_params(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        let mut map = HashMap::with_capacity(self.names.len());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let mut t = t.clone();
            t.requires_grad = trainable && !Self::is_frozen(name);
            map.insert(name.clone(), tape.leaf(t));
        }
        ParamNodes { map }
    }

    /// Fit the adapter's standardization buffers over raw feature rows
    /// pooled across the given sequences. Zero-variance columns keep unit
    /// scale.
    pub fn fit_adapter_stats(&mut self, sequences: &[&FeatureSequence]) -> Result<()> {
        let f = self.cfg.feature_dim;
        let mut mean = vec![0.0; f];
        let mut count = 0usize;
        for seq in sequences {
            if seq.dim() != f {
                return Err(CoreError::dim("fit_adapter_stats: feature dim mismatch"));
            }
            for r in 0..seq.len() {
                for (j, &v) in seq.features.row_slice(r).iter().enumerate() {
                    mean[j] += v;
                }
            }
            count += seq.len();
        }
        if count == 0 {
            return Err(CoreError::EmptySequence("fit_adapter_stats: no rows".into()));
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; f];
        for seq in sequences {
            for r in 0..seq.len() {
                for (j, &v) in seq.features.row_slice(r).iter().enumerate() {
                    var[j] += (v - mean[j]) * (v - mean[j]);
                }
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|&v| {
                let v = v / count as f64;
                if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }
            })
            .collect();
        *self.param_mut("adapter.mean") = Tensor::new(vec![1, f], mean)?;
        *self.param_mut("adapter.scale") = Tensor::new(vec![1, f], scale)?;
        Ok(())
    }

    fn layer_nodes(&self, nodes: &ParamNodes, tier: Tier) -> Vec<MambaLayerNodes> {
        let tn = ModelConfig::tier_name(tier);
        let n = self.cfg.tier_state_dim(tier);
        (0..self.cfg.layers)
            .map(|li| {
                let base = format!("enc.{tn}.{li}");
                let dir = |d: &str| SsmParamNodes {
                    a_diag: nodes.get(&format!("{base}.{d}.a_diag")),
                    w_delta: nodes.get(&format!("{base}.{d}.w_delta")),
                    b_delta: nodes.get(&format!("{base}.{d}.b_delta")),
                    w_b: nodes.get(&format!("{base}.{d}.w_b")),
                    b_b: nodes.get(&format!("{base}.{d}.b_b")),
                    w_c: nodes.get(&format!("{base}.{d}.w_c")),
                    b_c: nodes.get(&format!("{base}.{d}.b_c")),
                    d_skip: nodes.get(&format!("{base}.{d}.d_skip")),
                    n,
                    d: self.cfg.d_model,
                };
                MambaLayerNodes {
                    gamma: nodes.get(&format!("{base}.gamma")),
                    beta: nodes.get(&format!("{base}.beta")),
                    fwd: dir("fwd"),
                    bwd: if self.cfg.bidirectional { Some(dir("bwd")) } else { None },
                    w_merge: self.cfg.bidirectional.then(|| nodes.get(&format!("{base}.w_merge"))),
                    b_merge: self.cfg.bidirectional.then(|| nodes.get(&format!("{base}.b_merge"))),
                }
            })
            .collect()
    }

    fn attn_nodes(&self, nodes: &ParamNodes) -> Vec<ScaleAttentionNodes> {
        (0..self.cfg.scales_s.len())
            .map(|si| ScaleAttentionNodes {
                wq: nodes.get(&format!("head.attn{si}.wq")),
                wk: nodes.get(&format!("head.attn{si}.wk")),
                wv: nodes.get(&format!("head.attn{si}.wv")),
            })
            .collect()
    }

    fn mlp_nodes(&self, nodes: &ParamNodes) -> ProbMlpNodes {
        ProbMlpNodes {
            w1: nodes.get("head.mlp.w1"),
            b1: nodes.get("head.mlp.b1"),
            w2: nodes.get("head.mlp.w2"),
            b2: nodes.get("head.mlp.b2"),
        }
    }

    pub fn refine_nodes(&self, nodes: &ParamNodes) -> RefineMlpNodes {
        RefineMlpNodes {
            w1: nodes.get("head.refine.w1"),
            b1: nodes.get("head.refine.b1"),
            w2: nodes.get("head.refine.w2"),
            b2: nodes.get("head.refine.b2"),
        }
    }

    /// Motion channel for a sequence: the attached scores when present,
    /// otherwise the feature-difference blend computed in place.
    pub fn motion_channel(&self, seq: &FeatureSequence) -> Vec<f64> {
        if let Some(m) = &seq.motion {
            return m.clone();
        }
        let n = seq.len();
        let d = seq.dim();
        let mut v = Vec::with_capacity(n);
        v.push(0.0);
        for t in 1..n {
            let prev = seq.features.row_slice(t - 1);
            let cur = seq.features.row_slice(t);
            let fd = cur.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d as f64;
            v.push(self.cfg.alpha * fd);
        }
        v
    }

    /// One tier forward pass over an already-standardized sequence.
    pub fn forward_track(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        seq: &FeatureSequence,
        tier: Tier,
        init: Option<&[LayerState]>,
        capture_at: Option<usize>,
    ) -> Result<TrackForward> {
        if seq.dim() != self.cfg.feature_dim {
            return Err(CoreError::dim(format!(
                "forward_track: feature dim {} != model {}",
                seq.dim(),
                self.cfg.feature_dim
            )));
        }
        let x = tape.constant(seq.features.clone());
        let neg_mean = tape.scale(nodes.get("adapter.mean"), -1.0);
        let centered = tape.add_row(x, neg_mean)?;
        let xs = tape.mul_row(centered, nodes.get("adapter.scale"))?;
        let proj = tape.matmul(xs, nodes.get("adapter.w"))?;
        let proj = tape.add_row(proj, nodes.get("adapter.b"))?;
        let bcfg = self.cfg.block_config(tier);
        let layers = self.layer_nodes(nodes, tier);
        let block = crate::ssm::mamba_block_on_tape(tape, proj, &bcfg, &layers, init, capture_at)?;
        // Log-scaled motion keeps the absolute-magnitude signal in the same
        // numeric range as the (whitened) encoder features.
        let motion: Vec<f64> = self
            .motion_channel(seq)
            .iter()
            .map(|&v| ((v.max(0.0) + 1e-6) / 1e-3).ln())
            .collect();
        let v_col = tape.constant(Tensor::col(motion));
        let head_in = tape.concat_cols(&[block.y, v_col])?;
        let scales = AttentionScales::new(self.cfg.scales_s.clone())?;
        let attn = multi_scale_attention(tape, head_in, &seq.timestamps, &scales, &self.attn_nodes(nodes))?;
        let probs = frame_probabilities(tape, attn.out, &self.mlp_nodes(nodes))?;
        Ok(TrackForward {
            probs,
            embed: block.y,
            head_in: attn.out,
            states: block.states,
            captured: block.captured,
            chan_scores: block.chan_scores,
            degenerate_scales: attn.degenerate_scales,
        })
    }

    /// Values-only tier inference.
    pub fn infer_track(
        &self,
        seq: &FeatureSequence,
        tier: Tier,
        init: Option<&[LayerState]>,
        capture_at: Option<usize>,
    ) -> Result<TrackResult> {
        let mut tape = Tape::inference();
        let nodes = self.leaf_params(&mut tape, false);
        let fwd = self.forward_track(&mut tape, &nodes, seq, tier, init, capture_at)?;
        Ok(TrackResult {
            times: seq.timestamps.clone(),
            probs: tape.value(fwd.probs).data().to_vec(),
            head_in: tape.value(fwd.head_in).clone(),
            states: fwd.states,
            captured: fwd.captured,
            chan_scores: fwd.chan_scores,
            rate_hint: estimate_rate(&seq.timestamps),
        })
    }

    /// Learned quantile levels (q_med, q_high) with order preserved.
    pub fn threshold_quantiles(&self) -> (f64, f64) {
        let sig = |x: f64| 1.0 / (1.0 + (-x.clamp(-40.0, 40.0)).exp());
        let q_med = sig(self.param("thresholds.u_med").data()[0]);
        let q_high = q_med + (1.0 - q_med) * sig(self.param("thresholds.u_high").data()[0]);
        (q_med, q_high)
    }

    /// Plan thresholds for a profile: learned quantiles when trained,
    /// percentile initialization otherwise.
    pub fn thresholds_for(&self, profile: &crate::sampler::MotionProfile) -> Result<Thresholds> {
        if self.thresholds_learned {
            let (qm, qh) = self.threshold_quantiles();
            crate::sampler::thresholds_from_quantiles(profile, qm, qh)
        } else {
            crate::sampler::init_thresholds(profile)
        }
    }

    // ── orchestration ──────────────────────────────────────────────────

    /// Input preprocessing shared by all orchestration paths: optional
    /// per-video standardization, then the motion channel attached once over
    /// the full sequence so window/tier selections all see consistent
    /// values.
    pub fn preprocess(&self, video: &FeatureSequence) -> Result<FeatureSequence> {
        let mut std = if self.cfg.per_video_norm {
            let motion = video.motion.clone();
            let (mut s, _) = crate::pipeline::standardize_features(video)?;
            s.motion = motion;
            s
        } else {
            video.clone()
        };
        if std.motion.is_none() {
            let m = self.motion_channel(&std);
            std = std.with_motion(m)?;
        }
        Ok(std)
    }

    pub fn hierarchical_process(
        &self,
        video: &FeatureSequence,
        plan: &SamplingPlan,
    ) -> Result<PipelineOutcome> {
        let std = self.preprocess(video)?;
        let span = (std.timestamps[0], std.duration_s);
        let run = self.process_span(&std, plan, span, None, None, 0.0, 0.0)?;
        self.finish_outcome(run, plan)
    }

    pub fn sliding_window_infer(
        &self,
        video: &FeatureSequence,
        wcfg: &WindowConfig,
        plan: &SamplingPlan,
    ) -> Result<PipelineOutcome> {
        wcfg.validate()?;
        if video.duration_s <= wcfg.window_s {
            return self.hierarchical_process(video, plan);
        }
        let std = self.preprocess(video)?;
        let duration = std.duration_s;
        let att_margin = self.cfg.scales_s.iter().cloned().fold(0.0, f64::max) / 2.0;
        // Trailing margin trimmed from each window's contribution: covers
        // both head-attention context and the backward scan's decay tail,
        // while leaving the overlap's coverage intact.
        let end_margin = if wcfg.overlap_s > att_margin {
            (0.9 * (wcfg.overlap_s - att_margin)).min(45.0)
        } else {
            0.0
        };
        let starts = crate::pipeline::window_starts(duration, wcfg);

        let mut carried: Option<Vec<LayerState>> = None;
        let mut next_reset = wcfg.reset_interval_s;
        let mut runs: Vec<SpanRun> = Vec::new();
        for (wi, &lo) in starts.iter().enumerate() {
            let hi = (lo + wcfg.window_s).min(duration);
            if wcfg.resets_enabled && lo >= next_reset {
                if let Some(states) = carried.as_mut() {
                    if let Some(last) = runs.last() {
                        retain_top_channels(states, &last.chan_scores);
                    }
                }
                next_reset += wcfg.reset_interval_s;
            }
            let capture_time = if wi + 1 < starts.len() { Some(starts[wi + 1]) } else { None };
            // Margins only exist when the overlap can cover them.
            let lead = if wi == 0 || end_margin == 0.0 { 0.0 } else { att_margin };
            let tail = if wi + 1 == starts.len() { 0.0 } else { end_margin };
            let run = self.process_span(
                &std,
                plan,
                (lo, hi),
                carried.as_deref(),
                capture_time,
                lead,
                tail,
            )?;
            carried = run.captured.clone().or(carried);
            runs.push(run);
        }

        let merged = SpanRun::merge(runs);
        self.finish_outcome(merged, plan)
    }

    /// Process [t0, t1): coarse screening plus MED/HIGH refinements, with
    /// `lead`/`tail` margins trimmed from the contributed track.
    #[allow(clippy::too_many_arguments)]
    fn process_span(
        &self,
        std: &FeatureSequence,
        plan: &SamplingPlan,
        span: (f64, f64),
        carried: Option<&[LayerState]>,
        capture_time: Option<f64>,
        lead: f64,
        tail: f64,
    ) -> Result<SpanRun> {
        let (t0, t1) = span;
        let rates = plan.rates.unwrap_or_default();
        let coarse_idx = dedup_sorted(sample_indices(&std.timestamps, t0, t1, rates.low));
        let coarse_seq = std.select(&coarse_idx)?;
        let capture_at = capture_time.and_then(|ct| {
            let count = coarse_seq.timestamps.iter().filter(|&&ts| ts < ct).count();
            if count == 0 { None } else { Some(count - 1) }
        });
        let coarse = self.infer_track(&coarse_seq, Tier::Low, carried, capture_at)?;

        // Candidate regions: the plan's MED/HIGH segments plus coarse
        // probability triggers, high triggers backtracked 2 s.
        let mut med_regions = clip_regions(plan.regions(Tier::Med), t0, t1);
        let mut high_regions = clip_regions(plan.regions(Tier::High), t0, t1);
        med_regions.extend(trigger_regions(&coarse, self.cfg.trig_med, 0.0, t0, t1));
        high_regions.extend(trigger_regions(
            &coarse,
            self.cfg.trig_high,
            crate::sampler::BACKTRACK_S,
            t0,
            t1,
        ));
        let med_regions = merge_regions(med_regions);
        let high_regions = merge_regions(high_regions);

        let mut subtracks = vec![SubTrack::from_result(&coarse, Tier::Low)];
        let mut tiers_used = vec![Tier::Low];
        let mut frames = coarse_seq.len();
        for (regions, tier, rate) in [
            (&med_regions, Tier::Med, rates.med),
            (&high_regions, Tier::High, rates.high),
        ] {
            for &(r0, r1) in regions {
                let idx = dedup_sorted(sample_indices(&std.timestamps, r0, r1, rate));
                if idx.len() < 2 {
                    continue;
                }
                let seq = std.select(&idx)?;
                let tr = self.infer_track(&seq, tier, None, None)?;
                frames += seq.len();
                subtracks.push(SubTrack::from_result(&tr, tier));
                if !tiers_used.contains(&tier) {
                    tiers_used.push(tier);
                }
            }
        }

        // Trim the attention/state margins from every contributed track.
        let keep_lo = t0 + lead;
        let keep_hi = t1 - tail;
        for st in &mut subtracks {
            st.trim(keep_lo, keep_hi);
        }
        subtracks.retain(|st| !st.times.is_empty());

        Ok(SpanRun {
            subtracks,
            tiers_used,
            frames,
            med_seconds: med_regions.iter().map(|r| r.1 - r.0).sum(),
            high_seconds: high_regions.iter().map(|r| r.1 - r.0).sum(),
            captured: coarse.captured.clone(),
            chan_scores: coarse.chan_scores.clone(),
        })
    }

    fn finish_outcome(&self, run: SpanRun, plan: &SamplingPlan) -> Result<PipelineOutcome> {
        let tracks: Vec<(Vec<f64>, Vec<f64>)> = run
            .subtracks
            .iter()
            .map(|st| (st.times.clone(), st.probs.clone()))
            .collect();
        let (times, probs) = fuse_tracks(&tracks);
        if times.is_empty() {
            return Err(CoreError::EmptySequence("no probability track produced".into()));
        }
        let (_, t_peak, confidence, valid) = detect_peak(&times, &probs, self.cfg.p_min)?;
        let duration = plan.duration_s().max(1e-9);

        let prediction = if valid {
            // Refine on the finest subtrack containing the peak timestamp.
            let mut chosen: Option<&SubTrack> = None;
            for st in &run.subtracks {
                if st.times.iter().any(|&t| t == t_peak)
                    && chosen.is_none_or(|c| tier_order(st.tier) > tier_order(c.tier))
                {
                    chosen = Some(st);
                }
            }
            let st = chosen.ok_or_else(|| CoreError::contract("peak missing from subtracks"))?;
            let k = st.times.iter().position(|&t| t == t_peak).unwrap();
            let refine_params = self.refine_trained.then(|| {
                (
                    self.param("head.refine.w1"),
                    self.param("head.refine.b1"),
                    self.param("head.refine.w2"),
                    self.param("head.refine.b2"),
                )
            });
            let offset = head::refine_boundary(
                &RefineInputs { times: &st.times, probs: &st.probs, head_in: &st.head_in, k },
                refine_params,
            )?;
            TemporalPrediction {
                track_times: times,
                track_probs: probs,
                t_coarse_s: Some(t_peak),
                t_refined_s: Some(t_peak + offset),
                delta_offset_s: offset,
                confidence,
                valid: true,
            }
        } else {
            TemporalPrediction::invalid(times, probs, confidence)
        };

        Ok(PipelineOutcome {
            prediction,
            tiers_used: run.tiers_used,
            frames_processed: run.frames,
            med_fraction: run.med_seconds / duration,
            high_fraction: run.high_seconds / duration,
        })
    }

    // ── persistence ────────────────────────────────────────────────────

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.names.len());
        for (i, (name, t)) in self.names.iter().zip(&self.tensors).enumerate() {
            let file = format!("t_{i:03}.tlt");
            io::write_tensor(&dir.join(&file), t)?;
            entries.push(CheckpointTensor {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        let manifest = CheckpointManifest {
            format: "tloc-checkpoint-v1".into(),
            config: self.cfg.clone(),
            refine_trained: self.refine_trained,
            thresholds_learned: self.thresholds_learned,
            tensors: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json")).map_err(|e| {
                CoreError::Format(format!("checkpoint manifest missing at {}: {e}", dir.display()))
            })?)?;
        if manifest.format != "tloc-checkpoint-v1" {
            return Err(CoreError::Format(format!(
                "unsupported checkpoint format {:?}",
                manifest.format
            )));
        }
        let mut model = CrashLocalizer::new(manifest.config.clone())?;
        if manifest.tensors.len() != model.names.len() {
            return Err(CoreError::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                manifest.tensors.len(),
                model.names.len()
            )));
        }
        for entry in &manifest.tensors {
            let idx = *model.index.get(&entry.name).ok_or_else(|| {
                CoreError::Format(format!("unknown tensor {:?} in checkpoint", entry.name))
            })?;
            let t = io::read_tensor(&dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() || t.shape() != model.tensors[idx].shape() {
                return Err(CoreError::Format(format!(
                    "tensor {:?} shape mismatch: file {:?}, manifest {:?}, model {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape,
                    model.tensors[idx].shape()
                )));
            }
            model.tensors[idx] = t;
        }
        model.refine_trained = manifest.refine_trained;
        model.thresholds_learned = manifest.thresholds_learned;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: ModelConfig,
    refine_trained: bool,
    thresholds_learned: bool,
    tensors: Vec<CheckpointTensor>,
}

// ── span-run helpers ────────────────────────────────────────────────────

struct SubTrack {
    times: Vec<f64>,
    probs: Vec<f64>,
    head_in: Tensor,
    tier: Tier,
}

impl SubTrack {
    fn from_result(tr: &TrackResult, tier: Tier) -> Self {
        SubTrack {
            times: tr.times.clone(),
            probs: tr.probs.clone(),
            head_in: tr.head_in.clone(),
            tier,
        }
    }

    fn trim(&mut self, lo: f64, hi: f64) {
        let keep: Vec<usize> = self
            .times
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= lo && t <= hi)
            .map(|(i, _)| i)
            .collect();
        if keep.len() == self.times.len() {
            return;
        }
        let d = self.head_in.cols();
        let mut data = Vec::with_capacity(keep.len() * d);
        for &i in &keep {
            data.push(self.probs[i]);
        }
        let probs = data.clone();
        data.clear();
        for &i in &keep {
            data.extend_from_slice(self.head_in.row_slice(i));
        }
        self.head_in = Tensor::from_parts(vec![keep.len().max(1), d], if keep.is_empty() { vec![0.0; d] } else { data });
        self.times = keep.iter().map(|&i| self.times[i]).collect();
        self.probs = probs;
    }
}

struct SpanRun {
    subtracks: Vec<SubTrack>,
    tiers_used: Vec<Tier>,
    frames: usize,
    med_seconds: f64,
    high_seconds: f64,
    captured: Option<Vec<LayerState>>,
    chan_scores: Vec<Vec<f64>>,
}

impl SpanRun {
    fn merge(mut runs: Vec<SpanRun>) -> SpanRun {
        let mut out = SpanRun {
            subtracks: Vec::new(),
            tiers_used: Vec::new(),
            frames: 0,
            med_seconds: 0.0,
            high_seconds: 0.0,
            captured: None,
            chan_scores: Vec::new(),
        };
        for run in runs.drain(..) {
            out.subtracks.extend(run.subtracks);
            for t in run.tiers_used {
                if !out.tiers_used.contains(&t) {
                    out.tiers_used.push(t);
                }
            }
            out.frames += run.frames;
            out.med_seconds += run.med_seconds;
            out.high_seconds += run.high_seconds;
            out.chan_scores = run.chan_scores;
        }
        out
    }
}

fn tier_order(t: Tier) -> u8 {
    match t {
        Tier::Low => 0,
        Tier::Med => 1,
        Tier::High => 2,
    }
}

fn estimate_rate(times: &[f64]) -> f64 {
    if times.len() < 2 {
        return 1.0;
    }
    let span = times[times.len() - 1] - times[0];
    if span <= 0.0 {
        return 1.0;
    }
    (times.len() - 1) as f64 / span
}

fn dedup_sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

fn clip_regions(regions: Vec<(f64, f64)>, t0: f64, t1: f64) -> Vec<(f64, f64)> {
    regions
        .into_iter()
        .filter_map(|(a, b)| {
            let lo = a.max(t0);
            let hi = b.min(t1);
            (hi - lo > 1e-9).then_some((lo, hi))
        })
        .collect()
}

/// Regions where coarse probabilities exceed a trigger, segment-aligned,
/// with optional backtracking, clipped to the span.
fn trigger_regions(
    coarse: &TrackResult,
    trigger: f64,
    backtrack_s: f64,
    t0: f64,
    t1: f64,
) -> Vec<(f64, f64)> {
    let seg = crate::sampler::SEGMENT_LENGTH_S;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (&t, &p) in coarse.times.iter().zip(&coarse.probs) {
        if p > trigger {
            let s0 = ((t / seg).floor() * seg - backtrack_s).max(t0);
            let s1 = ((t / seg).floor() * seg + seg).min(t1);
            if s1 - s0 > 1e-9 {
                out.push((s0, s1));
            }
        }
    }
    out
}

fn merge_regions(mut regions: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    regions.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (a, b) in regions {
        match out.last_mut() {
            Some(last) if a <= last.1 + 1e-9 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Zero all but the top N/4 state channels, scored by the channel's mean
/// output weight times its state magnitude.
fn retain_top_channels(states: &mut [LayerState], chan_scores: &[Vec<f64>]) {
    for (li, state) in states.iter_mut().enumerate() {
        let h = &state.fwd.h;
        let (d, n) = (h.rows(), h.cols());
        let keep = (n / 4).max(1);
        let empty: Vec<f64> = Vec::new();
        let cmean = chan_scores.get(li).unwrap_or(&empty);
        let mut scores: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let mag: f64 = (0..d).map(|c| h.at(c, j).abs()).sum::<f64>() / d as f64;
                let w = cmean.get(j).copied().unwrap_or(1.0);
                (w * mag, j)
            })
            .collect();
        scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let retained: std::collections::HashSet<usize> =
            scores.iter().take(keep).map(|&(_, j)| j).collect();
        let mut data = h.data().to_vec();
        for c in 0..d {
            for j in 0..n {
                if !retained.contains(&j) {
                    data[c * n + j] = 0.0;
                }
            }
        }
        state.fwd.h = Tensor::from_parts(vec![d, n], data);
        state.fwd.t = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_checkpoint_round_trip() {
        let cfg = ModelConfig::tiny(7);
        let model = CrashLocalizer::new(cfg).unwrap();
        let dir = std::env::temp_dir().join("tloc_ckpt_test");
        let _ = fs::remove_dir_all(&dir);
        model.save(&dir).unwrap();
        let back = CrashLocalizer::load(&dir).unwrap();
        assert_eq!(model.param_names(), back.param_names());
        for name in model.param_names() {
            assert_eq!(model.param(name).data(), back.param(name).data(), "{name}");
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn load_rejects_corrupt_checkpoint() {
        let cfg = ModelConfig::tiny(8);
        let model = CrashLocalizer::new(cfg).unwrap();
        let dir = std::env::temp_dir().join("tloc_ckpt_corrupt");
        let _ = fs::remove_dir_all(&dir);
        model.save(&dir).unwrap();
        // Truncate one tensor file.
        std::fs::write(dir.join("t_000.tlt"), b"TLT1 junk").unwrap();
        assert!(CrashLocalizer::load(&dir).is_err());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn threshold_quantiles_initialize_at_80_95() {
        let model = CrashLocalizer::new(ModelConfig::tiny(3)).unwrap();
        let (qm, qh) = model.threshold_quantiles();
        assert!((qm - 0.8).abs() < 1e-12);
        assert!((qh - 0.95).abs() < 1e-12);
    }

    #[test]
    fn merge_regions_coalesces() {
        let merged = merge_regions(vec![(0.0, 2.0), (1.5, 3.0), (5.0, 6.0)]);
        assert_eq!(merged, vec![(0.0, 3.0), (5.0, 6.0)]);
    }

    #[test]
    fn retention_keeps_quarter_of_channels() {
        let mut states = vec![LayerState {
            fwd: SsmState { h: Tensor::ones(vec![2, 8]), t: 99 },
        }];
        let scores = vec![(0..8).map(|j| j as f64).collect::<Vec<f64>>()];
        retain_top_channels(&mut states, &scores);
        let h = &states[0].fwd.h;
        let nonzero: usize = (0..8).filter(|&j| h.at(0, j) != 0.0).count();
        assert_eq!(nonzero, 2); // N/4 of 8
        assert_eq!(h.at(0, 7), 1.0);
        assert_eq!(h.at(0, 6), 1.0);
        assert_eq!(h.at(0, 0), 0.0);
    }
}
