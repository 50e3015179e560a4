//! Motion-variance scoring, threshold estimation, and the multi-level
//! sampling plan driving token compression.
//!
//! The per-frame score blends feature-space change against flow magnitude:
//!
//!   v_t = α · mean_i ‖f_{t,i} − f_{t−1,i}‖² + (1−α) · mean_j ‖o_{t,j}‖
//!
//! scores aggregate into fixed 1-second segments, thresholds initialize at
//! the 80th/95th percentiles, and the plan assigns LOW/MED/HIGH tiers with
//! 2-second backtracking before HIGH triggers.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::pipeline::FeatureSequence;
use crate::synthgen::FrameSequence;

/// Variance-segment granularity. The plan and the motion profile share it.
pub const SEGMENT_LENGTH_S: f64 = 1.0;

/// Flow vectors per frame. A provider backed by a real optical-flow
/// implementation can be substituted for the temporal-gradient surrogate.
#[derive(Clone, Debug, Default)]
pub struct FlowField {
    pub per_frame: Vec<Vec<[f64; 2]>>,
}

impl FlowField {
    /// Mean L2 magnitude of the flow vectors of one frame.
    pub fn magnitude(&self, frame: usize) -> f64 {
        let v = &self.per_frame[frame];
        if v.is_empty() {
            return 0.0;
        }
        v.iter().map(|o| (o[0] * o[0] + o[1] * o[1]).sqrt()).sum::<f64>() / v.len() as f64
    }
}

/// Pluggable flow backend.
pub trait FlowProvider {
    fn name(&self) -> &str;
    fn flow(&self, frames: &FrameSequence) -> Result<FlowField>;
}

/// Desk-scale stand-in for dense optical flow: the per-frame mean absolute
/// temporal gradient of pixel intensities, a monotone proxy for flow
/// magnitude. Emits one pseudo-vector per frame whose norm is that value.
pub struct TemporalGradientFlow;

impl FlowProvider for TemporalGradientFlow {
    fn name(&self) -> &str {
        "temporal-gradient"
    }

    fn flow(&self, frames: &FrameSequence) -> Result<FlowField> {
        flow_surrogate(frames)
    }
}

/// See [`TemporalGradientFlow`]. A single-frame input yields zero motion.
pub fn flow_surrogate(frames: &FrameSequence) -> Result<FlowField> {
    if frames.frames.is_empty() {
        return Err(CoreError::EmptySequence("flow_surrogate: no frames".into()));
    }
    let px = frames.h * frames.w;
    if frames.frames.iter().any(|f| f.len() != px) {
        return Err(CoreError::dim("flow_surrogate: frames differ in size"));
    }
    let mut per_frame = Vec::with_capacity(frames.frames.len());
    per_frame.push(vec![[0.0, 0.0]]);
    for pair in frames.frames.windows(2) {
        let g: f64 = pair[0]
            .iter()
            .zip(&pair[1])
            .map(|(a, b)| (b - a).abs())
            .sum::<f64>()
            / px as f64;
        per_frame.push(vec![[g, 0.0]]);
    }
    Ok(FlowField { per_frame })
}

/// Per-segment variance scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionProfile {
    pub segment_length_s: f64,
    /// One score per segment, all finite and ≥ 0.
    pub v: Vec<f64>,
    pub alpha: f64,
    /// Per-frame scores before segment aggregation (implementation detail
    /// consumed by the head's motion channel and the baseline detector).
    pub frame_v: Vec<f64>,
}

impl MotionProfile {
    pub fn segment_of(&self, t: f64) -> usize {
        ((t / self.segment_length_s) as usize).min(self.v.len().saturating_sub(1))
    }

    /// Percentile rank in [0,1] of each segment's score.
    pub fn segment_ranks(&self) -> Vec<f64> {
        let n = self.v.len();
        if n <= 1 {
            return vec![0.5; n];
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.v[a].total_cmp(&self.v[b]));
        let mut ranks = vec![0.0; n];
        for (pos, &idx) in order.iter().enumerate() {
            ranks[idx] = pos as f64 / (n - 1) as f64;
        }
        ranks
    }
}

/// Blend feature change and flow magnitude per frame, then average within
/// 1-second segments. The first frame's feature difference is zero.
pub fn motion_variance(
    features: &FeatureSequence,
    flows: &FlowField,
    alpha: f64,
) -> Result<MotionProfile> {
    motion_variance_with(features, flows, alpha, false)
}

/// `normalize_terms` standardizes both blend terms to zero mean / unit
/// variance over the video before mixing (off by default: the blend is
/// applied verbatim even though its two terms carry different units).
pub fn motion_variance_with(
    features: &FeatureSequence,
    flows: &FlowField,
    alpha: f64,
    normalize_terms: bool,
) -> Result<MotionProfile> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::contract(format!("alpha {alpha} outside [0,1]")));
    }
    let n = features.len();
    if flows.per_frame.len() != n {
        return Err(CoreError::Alignment(format!(
            "{n} feature frames vs {} flow frames",
            flows.per_frame.len()
        )));
    }
    let d = features.dim();
    let mut feat_term = Vec::with_capacity(n);
    let mut flow_term = Vec::with_capacity(n);
    for t in 0..n {
        let fd = if t == 0 {
            0.0
        } else {
            let prev = features.features.row_slice(t - 1);
            let cur = features.features.row_slice(t);
            cur.iter()
                .zip(prev)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d as f64
        };
        feat_term.push(fd);
        flow_term.push(flows.magnitude(t));
    }
    if normalize_terms {
        for term in [&mut feat_term, &mut flow_term] {
            let m = term.iter().sum::<f64>() / n as f64;
            let var = term.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            let s = if var > 0.0 { var.sqrt() } else { 1.0 };
            term.iter_mut().for_each(|x| *x = (*x - m) / s);
        }
    }
    let frame_v: Vec<f64> = feat_term
        .iter()
        .zip(&flow_term)
        .map(|(f, o)| {
            let v = alpha * f + (1.0 - alpha) * o;
            if normalize_terms { v } else { v.max(0.0) }
        })
        .collect();

    let n_segments = (features.duration_s / SEGMENT_LENGTH_S).ceil().max(1.0) as usize;
    let mut sums = vec![0.0; n_segments];
    let mut counts = vec![0usize; n_segments];
    for (t, &ts) in features.timestamps.iter().enumerate() {
        let seg = ((ts / SEGMENT_LENGTH_S) as usize).min(n_segments - 1);
        sums[seg] += frame_v[t];
        counts[seg] += 1;
    }
    let v: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Evaluation("motion variance is non-finite".into()));
    }
    Ok(MotionProfile { segment_length_s: SEGMENT_LENGTH_S, v, alpha, frame_v })
}

/// Tier thresholds on the variance score.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_high: f64,
    pub tau_med: f64,
    pub learned: bool,
    /// Set when a degenerate all-equal profile forced a tie-break.
    #[serde(default)]
    pub degenerate: bool,
}

/// Type-7 (linear interpolation) percentile of unsorted values.
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

/// Statistical initialization: τ_med at the 80th percentile, τ_high at the
/// 95th. An all-equal profile resolves the tie with τ_high += 1e−9.
pub fn init_thresholds(profile: &MotionProfile) -> Result<Thresholds> {
    if profile.v.len() < 5 {
        return Err(CoreError::contract(format!(
            "init_thresholds: need >= 5 segments, got {}",
            profile.v.len()
        )));
    }
    let tau_med = percentile(&profile.v, 80.0);
    let mut tau_high = percentile(&profile.v, 95.0);
    let mut degenerate = false;
    if tau_high <= tau_med {
        tau_high = tau_med + 1e-9;
        degenerate = true;
    }
    Ok(Thresholds { tau_high, tau_med, learned: false, degenerate })
}

/// Thresholds from learned quantile levels (in (0,1), ordered) applied to
/// this profile's empirical distribution.
pub fn thresholds_from_quantiles(profile: &MotionProfile, q_med: f64, q_high: f64) -> Result<Thresholds> {
    if !(0.0 < q_med && q_med < q_high && q_high < 1.0) {
        return Err(CoreError::contract(format!(
            "quantile levels must satisfy 0 < {q_med} < {q_high} < 1"
        )));
    }
    let tau_med = percentile(&profile.v, q_med * 100.0);
    let mut tau_high = percentile(&profile.v, q_high * 100.0);
    let mut degenerate = false;
    if tau_high <= tau_med {
        tau_high = tau_med + 1e-9;
        degenerate = true;
    }
    Ok(Thresholds { tau_high, tau_med, learned: true, degenerate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tier {
    Low,
    Med,
    High,
}

impl Tier {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Low => "LOW",
            Tier::Med => "MED",
            Tier::High => "HIGH",
        }
    }
}

/// Frames-per-second per tier.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TierRates {
    pub low: f64,
    pub med: f64,
    pub high: f64,
}

impl Default for TierRates {
    fn default() -> Self {
        TierRates { low: 1.0, med: 5.0, high: 30.0 }
    }
}

impl TierRates {
    pub fn rate(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Low => self.low,
            Tier::Med => self.med,
            Tier::High => self.high,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlanSegment {
    pub t0: f64,
    pub t1: f64,
    pub tier: Tier,
    pub rate_fps: f64,
}

/// Per-segment tier assignment plus budget accounting. Serializes to the
/// plan JSON schema {segments, reduction_pct, thresholds}.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub segments: Vec<PlanSegment>,
    pub reduction_pct: f64,
    pub thresholds: Thresholds,
    #[serde(default)]
    pub backtrack_s: f64,
    #[serde(default)]
    pub rates: Option<TierRates>,
}

impl SamplingPlan {
    pub fn duration_s(&self) -> f64 {
        self.segments.last().map(|s| s.t1).unwrap_or(0.0)
    }

    pub fn tier_at(&self, t: f64) -> Tier {
        for seg in &self.segments {
            if t >= seg.t0 && t < seg.t1 {
                return seg.tier;
            }
        }
        Tier::Low
    }

    /// Planned retained frames: Σ segment duration × rate (fractional).
    pub fn planned_frames(&self) -> f64 {
        self.segments.iter().map(|s| (s.t1 - s.t0) * s.rate_fps).sum()
    }

    /// Fraction of the timeline covered by a tier.
    pub fn tier_fraction(&self, tier: Tier) -> f64 {
        let total = self.duration_s();
        if total <= 0.0 {
            return 0.0;
        }
        self.segments
            .iter()
            .filter(|s| s.tier == tier)
            .map(|s| s.t1 - s.t0)
            .sum::<f64>()
            / total
    }

    /// Maximal runs of consecutive segments of one tier.
    pub fn regions(&self, tier: Tier) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for seg in self.segments.iter().filter(|s| s.tier == tier) {
            match out.last_mut() {
                Some(last) if (last.1 - seg.t0).abs() < 1e-9 => last.1 = seg.t1,
                _ => out.push((seg.t0, seg.t1)),
            }
        }
        out
    }
}

/// Duration-adaptive base rate: 4 FPS up to 2-minute videos, 2 FPS up to
/// 10 minutes, 0.5 FPS beyond.
pub fn duration_adaptive_low_rate(duration_min: f64) -> f64 {
    if duration_min <= 2.0 {
        4.0
    } else if duration_min <= 10.0 {
        2.0
    } else {
        0.5
    }
}

pub const BACKTRACK_S: f64 = 2.0;

/// Tier rule: HIGH iff v > τ_high (strict), MED iff τ_med < v ≤ τ_high,
/// LOW otherwise; HIGH regions extend 2 s backward; the LOW rate follows the
/// duration bracket.
pub fn build_plan(profile: &MotionProfile, th: &Thresholds, duration_min: f64) -> SamplingPlan {
    build_plan_with(profile, th, duration_min, TierRates::default(), true)
}

/// [`build_plan`] with explicit rates and optional duration adaptation.
pub fn build_plan_with(
    profile: &MotionProfile,
    th: &Thresholds,
    duration_min: f64,
    mut rates: TierRates,
    duration_adaptive: bool,
) -> SamplingPlan {
    if duration_adaptive {
        rates.low = duration_adaptive_low_rate(duration_min);
    }
    let seg_len = profile.segment_length_s;
    let mut tiers: Vec<Tier> = profile
        .v
        .iter()
        .map(|&v| {
            if v > th.tau_high {
                Tier::High
            } else if v > th.tau_med {
                Tier::Med
            } else {
                Tier::Low
            }
        })
        .collect();
    // 2-second backtracking before every HIGH trigger.
    let back = (BACKTRACK_S / seg_len).ceil() as usize;
    let high_idx: Vec<usize> = tiers
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == Tier::High)
        .map(|(i, _)| i)
        .collect();
    for i in high_idx {
        let lo = i.saturating_sub(back);
        for t in tiers.iter_mut().take(i).skip(lo) {
            *t = Tier::High;
        }
    }
    let segments: Vec<PlanSegment> = tiers
        .iter()
        .enumerate()
        .map(|(i, &tier)| PlanSegment {
            t0: i as f64 * seg_len,
            t1: (i + 1) as f64 * seg_len,
            tier,
            rate_fps: rates.rate(tier),
        })
        .collect();
    let duration = segments.last().map(|s| s.t1).unwrap_or(0.0);
    let planned: f64 = segments.iter().map(|s| (s.t1 - s.t0) * s.rate_fps).sum();
    let uniform = duration * rates.high;
    let reduction_pct = if uniform > 0.0 { (1.0 - planned / uniform) * 100.0 } else { 0.0 };
    SamplingPlan {
        segments,
        reduction_pct,
        thresholds: *th,
        backtrack_s: BACKTRACK_S,
        rates: Some(rates),
    }
}

/// Keep frames at each segment's tier rate via nearest-timestamp selection.
/// Retained frames keep their original timestamps (irregular spacing).
pub fn compress_tokens(features: &FeatureSequence, plan: &SamplingPlan) -> Result<FeatureSequence> {
    if plan.segments.is_empty() {
        return Err(CoreError::contract("compress_tokens: empty plan"));
    }
    let first = plan.segments[0].t0;
    let last = plan.duration_s();
    let (t_min, t_max) = (features.timestamps[0], *features.timestamps.last().unwrap());
    if t_min < first - 1e-9 || t_max >= last + 1e-9 {
        return Err(CoreError::contract(format!(
            "compress_tokens: plan [{first}, {last}) does not cover timeline [{t_min}, {t_max}]"
        )));
    }
    let mut keep: Vec<usize> = Vec::new();
    for seg in &plan.segments {
        keep.extend(sample_indices(&features.timestamps, seg.t0, seg.t1, seg.rate_fps));
    }
    keep.sort_unstable();
    keep.dedup();
    features.select(&keep)
}

/// Nearest-timestamp frame indices for uniform sampling of [t0, t1) at
/// `rate_fps`. May contain duplicates; callers dedup after merging.
pub fn sample_indices(timestamps: &[f64], t0: f64, t1: f64, rate_fps: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = t0 + k as f64 / rate_fps;
        if t >= t1 - 1e-12 {
            break;
        }
        out.push(nearest_index(timestamps, t));
        k += 1;
    }
    out
}

fn nearest_index(sorted: &[f64], t: f64) -> usize {
    match sorted.binary_search_by(|x| x.total_cmp(&t)) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) if i >= sorted.len() => sorted.len() - 1,
        Err(i) => {
            if (t - sorted[i - 1]).abs() <= (sorted[i] - t).abs() {
                i - 1
            } else {
                i
            }
        }
    }
}

/// Timestamp of the maximum per-frame variance score: the trivial baseline
/// detector the trained model must beat.
pub fn vt_peak_time(features: &FeatureSequence, profile: &MotionProfile) -> f64 {
    let mut best = 0;
    for (i, &v) in profile.frame_v.iter().enumerate() {
        if v > profile.frame_v[best] {
            best = i;
        }
    }
    features.timestamps[best]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::percentile_linear;
    use crate::tensor::Tensor;

    fn feat_seq(rows: Vec<Vec<f64>>, dt: f64) -> FeatureSequence {
        let n = rows.len();
        FeatureSequence::new(
            (0..n).map(|i| i as f64 * dt).collect(),
            Tensor::from_rows(&rows).unwrap(),
            1.0 / dt,
            n as f64 * dt,
        )
        .unwrap()
    }

    fn zero_flow(n: usize) -> FlowField {
        FlowField { per_frame: vec![vec![[0.0, 0.0]]; n] }
    }

    #[test]
    fn identical_frames_zero_flow_gives_zero() {
        let f = feat_seq(vec![vec![1.0, 2.0]; 6], 1.0);
        let prof = motion_variance(&f, &zero_flow(6), 0.7).unwrap();
        assert!(prof.v.iter().all(|&v| v == 0.0));
        assert!(prof.frame_v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_one_ignores_flow() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 3.0]];
        let f = feat_seq(rows, 1.0);
        let mut flows = zero_flow(2);
        flows.per_frame[1] = vec![[100.0, 0.0]];
        let prof = motion_variance(&f, &flows, 1.0).unwrap();
        // mean squared diff = (1 + 9) / 2 = 5
        assert_eq!(prof.frame_v[1], 5.0);
    }

    #[test]
    fn hand_arithmetic_example() {
        // f diff = [1,1] → mean sq 1; o = (3,4) → ‖o‖ = 5; α = 0.5 → v = 3.0
        let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let f = feat_seq(rows, 1.0);
        let mut flows = zero_flow(2);
        flows.per_frame[1] = vec![[3.0, 4.0]];
        let prof = motion_variance(&f, &flows, 0.5).unwrap();
        assert_eq!(prof.frame_v[1], 3.0);
        // Frame 1 is alone in segment 1, so the segment score matches.
        assert_eq!(prof.v[1], 3.0);
    }

    #[test]
    fn alignment_error_on_length_mismatch() {
        let f = feat_seq(vec![vec![0.0]; 4], 1.0);
        assert!(motion_variance(&f, &zero_flow(3), 0.5).is_err());
    }

    #[test]
    fn monotone_in_each_term() {
        let base = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![1.5, 0.5]];
        let f = feat_seq(base.clone(), 1.0);
        let mut flows = zero_flow(3);
        flows.per_frame[2] = vec![[2.0, 0.0]];
        let p0 = motion_variance(&f, &flows, 0.6).unwrap();
        // Increase one feature difference.
        let mut bigger = base.clone();
        bigger[1][0] = 2.0;
        let f2 = feat_seq(bigger, 1.0);
        let p1 = motion_variance(&f2, &flows, 0.6).unwrap();
        assert!(p1.frame_v[1] > p0.frame_v[1]);
        // Increase one flow magnitude.
        let mut flows2 = flows.clone();
        flows2.per_frame[2] = vec![[3.0, 0.0]];
        let p2 = motion_variance(&f, &flows2, 0.6).unwrap();
        assert!(p2.frame_v[2] > p0.frame_v[2]);
        for (a, b) in p0.frame_v.iter().zip(&p2.frame_v).take(2) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn flow_surrogate_static_is_zero() {
        let frames = FrameSequence {
            frames: vec![vec![0.5; 16]; 5],
            h: 4,
            w: 4,
            fps: 10.0,
        };
        let flow = flow_surrogate(&frames).unwrap();
        for t in 0..5 {
            assert_eq!(flow.magnitude(t), 0.0);
        }
    }

    #[test]
    fn flow_surrogate_uniform_shift() {
        let mut frames = vec![vec![0.2; 16], vec![0.2; 16]];
        frames[1].iter_mut().for_each(|p| *p += 0.125);
        let fs = FrameSequence { frames, h: 4, w: 4, fps: 10.0 };
        let flow = flow_surrogate(&fs).unwrap();
        assert!((flow.magnitude(1) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn single_frame_zero_motion() {
        let fs = FrameSequence { frames: vec![vec![0.1; 4]], h: 2, w: 2, fps: 1.0 };
        let flow = flow_surrogate(&fs).unwrap();
        assert_eq!(flow.per_frame.len(), 1);
        assert_eq!(flow.magnitude(0), 0.0);
    }

    fn profile_from(v: Vec<f64>) -> MotionProfile {
        MotionProfile { segment_length_s: 1.0, frame_v: v.clone(), v, alpha: 0.7 }
    }

    #[test]
    fn thresholds_percentile_oracle() {
        let prof = profile_from((0..100).map(|i| i as f64).collect());
        let th = init_thresholds(&prof).unwrap();
        let mut sorted = prof.v.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        assert!((th.tau_med - percentile_linear(&sorted, 80.0)).abs() < 1e-12);
        assert!((th.tau_high - percentile_linear(&sorted, 95.0)).abs() < 1e-12);
        assert!((th.tau_med - 79.2).abs() < 1e-12);
        assert!((th.tau_high - 94.05).abs() < 1e-12);
        assert!(!th.learned && !th.degenerate);
    }

    #[test]
    fn degenerate_profile_flagged_with_order_kept() {
        let prof = profile_from(vec![2.5; 8]);
        let th = init_thresholds(&prof).unwrap();
        assert!(th.degenerate);
        assert!(th.tau_med < th.tau_high);
    }

    #[test]
    fn thresholds_require_five_segments() {
        let prof = profile_from(vec![1.0; 4]);
        assert!(init_thresholds(&prof).is_err());
    }

    #[test]
    fn order_invariant_holds_on_random_profiles() {
        let mut rng = crate::rng::Rng::stream(99, "th");
        for _ in 0..50 {
            let prof = profile_from((0..20).map(|_| rng.range(0.0, 10.0)).collect());
            let th = init_thresholds(&prof).unwrap();
            assert!(th.tau_med < th.tau_high);
        }
    }

    #[test]
    fn boundary_value_is_med_not_high() {
        // v == τ_high exactly → MED (the rule is strict v > τ_high).
        let mut v = vec![0.0; 20];
        v[10] = 5.0;
        let prof = profile_from(v);
        let th = Thresholds { tau_med: 1.0, tau_high: 5.0, learned: false, degenerate: false };
        let plan = build_plan_with(&prof, &th, 0.33, TierRates::default(), false);
        assert_eq!(plan.segments[10].tier, Tier::Med);
        assert!(plan.segments.iter().all(|s| s.tier != Tier::High));
    }

    #[test]
    fn all_low_budget_is_duration_times_rate() {
        let prof = profile_from(vec![0.0; 30]);
        let th = Thresholds { tau_med: 1.0, tau_high: 2.0, learned: false, degenerate: false };
        let plan = build_plan_with(&prof, &th, 0.5, TierRates::default(), false);
        assert!((plan.planned_frames() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn engineered_profile_meets_reduction_target() {
        // 15% MED / 3% HIGH at 1/5/30 over a uniform-30 baseline.
        let n = 100;
        let mut v = vec![0.0; n];
        // A MED run directly before the HIGH run, so the 2 s backtrack
        // recruits segments already counted in the budget.
        for x in v.iter_mut().take(97).skip(82) {
            *x = 5.0; // 15 MED segments
        }
        for x in v.iter_mut().take(100).skip(97) {
            *x = 9.0; // 3 HIGH segments
        }
        let th = Thresholds { tau_med: 1.0, tau_high: 7.0, learned: false, degenerate: false };
        let plan = build_plan_with(&profile_from(v), &th, n as f64 / 60.0, TierRates::default(), false);
        // Backtracking converts 2 MED segments to HIGH.
        assert!((plan.tier_fraction(Tier::High) - 0.05).abs() < 1e-9);
        assert!((plan.tier_fraction(Tier::Med) - 0.13).abs() < 1e-9);
        assert!(plan.reduction_pct >= 70.0, "reduction {}", plan.reduction_pct);
    }

    #[test]
    fn backtracking_extends_high_by_two_seconds() {
        let mut v = vec![0.0; 20];
        v[10] = 9.0;
        let prof = profile_from(v);
        let th = Thresholds { tau_med: 1.0, tau_high: 5.0, learned: false, degenerate: false };
        let plan = build_plan_with(&prof, &th, 0.33, TierRates::default(), false);
        let regions = plan.regions(Tier::High);
        assert_eq!(regions.len(), 1);
        let (start, end) = regions[0];
        assert!((start - 8.0).abs() < 1e-9, "start {start}");
        assert!((end - 11.0).abs() < 1e-9);
        // Trigger at segment 10: start is 2 s earlier.
        assert!(10.0 - start >= BACKTRACK_S);
    }

    #[test]
    fn backtracking_clamps_at_zero() {
        let mut v = vec![0.0; 10];
        v[0] = 9.0;
        let prof = profile_from(v);
        let th = Thresholds { tau_med: 1.0, tau_high: 5.0, learned: false, degenerate: false };
        let plan = build_plan_with(&prof, &th, 0.16, TierRates::default(), false);
        assert_eq!(plan.regions(Tier::High)[0].0, 0.0);
    }

    #[test]
    fn plan_is_deterministic() {
        let mut rng = crate::rng::Rng::stream(7, "plan");
        let prof = profile_from((0..40).map(|_| rng.range(0.0, 10.0)).collect());
        let th = init_thresholds(&prof).unwrap();
        let p1 = build_plan(&prof, &th, 0.66);
        let p2 = build_plan(&prof, &th, 0.66);
        assert_eq!(serde_json::to_string(&p1).unwrap(), serde_json::to_string(&p2).unwrap());
    }

    #[test]
    fn duration_brackets() {
        assert_eq!(duration_adaptive_low_rate(2.0), 4.0);
        assert_eq!(duration_adaptive_low_rate(10.0), 2.0);
        assert_eq!(duration_adaptive_low_rate(40.0), 0.5);
    }

    fn uniform_seq(duration_s: f64, fps: f64, d: usize) -> FeatureSequence {
        let n = (duration_s * fps) as usize;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64; d]).collect();
        FeatureSequence::new(
            (0..n).map(|i| i as f64 / fps).collect(),
            Tensor::from_rows(&rows).unwrap(),
            fps,
            duration_s,
        )
        .unwrap()
    }

    #[test]
    fn compress_all_high_at_source_rate_is_identity() {
        let f = uniform_seq(5.0, 30.0, 2);
        let prof = profile_from(vec![9.0; 5]);
        let th = Thresholds { tau_med: 0.5, tau_high: 1.0, learned: false, degenerate: false };
        let plan = build_plan_with(&prof, &th, 5.0 / 60.0, TierRates::default(), false);
        let out = compress_tokens(&f, &plan).unwrap();
        assert_eq!(out.len(), f.len());
        assert_eq!(out.timestamps, f.timestamps);
    }

    #[test]
    fn compress_low_tier_counts_frames() {
        // LOW at 1 FPS over a 10 s, 30 FPS clip → 10 retained frames.
        let f = uniform_seq(10.0, 30.0, 2);
        let prof = profile_from(vec![0.0; 10]);
        let th = Thresholds { tau_med: 0.5, tau_high: 1.0, learned: false, degenerate: false };
        let plan = build_plan_with(&prof, &th, 10.0 / 60.0, TierRates::default(), false);
        let out = compress_tokens(&f, &plan).unwrap();
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn compressed_timestamps_are_subset_and_monotone() {
        let f = uniform_seq(8.0, 10.0, 3);
        let mut v = vec![0.0; 8];
        v[4] = 9.0;
        let prof = profile_from(v);
        let th = Thresholds { tau_med: 0.5, tau_high: 1.0, learned: false, degenerate: false };
        let plan = build_plan(&prof, &th, 8.0 / 60.0);
        let out = compress_tokens(&f, &plan).unwrap();
        assert!(out.timestamps.windows(2).all(|w| w[0] < w[1]));
        for t in &out.timestamps {
            assert!(f.timestamps.contains(t));
        }
    }

    #[test]
    fn accounting_identity() {
        let prof = profile_from(vec![0.0, 0.0, 5.0, 9.0, 0.0, 0.0, 0.0, 0.0]);
        let th = Thresholds { tau_med: 1.0, tau_high: 7.0, learned: false, degenerate: false };
        let rates = TierRates::default();
        let plan = build_plan_with(&prof, &th, 8.0 / 60.0, rates, false);
        let uniform = plan.duration_s() * rates.high;
        let expect = (1.0 - plan.planned_frames() / uniform) * 100.0;
        assert!((plan.reduction_pct - expect).abs() < 1e-12);
    }
}
