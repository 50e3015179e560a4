//! Sequence types, the feature adapter, and the inference orchestrators:
//! hierarchical three-tier processing and sliding-window long-video
//! inference with state carry and periodic reset.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::head::TemporalPrediction;
use crate::model::CrashLocalizer;
use crate::sampler::{SamplingPlan, Tier};
use crate::tensor::Tensor;

/// Per-frame feature vectors with timing metadata; the universal currency
/// between modules.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    /// Seconds, strictly increasing.
    pub timestamps: Vec<f64>,
    /// frames × d.
    pub features: Tensor,
    pub source_fps: f64,
    pub duration_s: f64,
    /// Optional per-frame motion-variance scores riding along with the
    /// frames (feeds the head's motion channel); kept aligned by `select`.
    pub motion: Option<Vec<f64>>,
}

impl FeatureSequence {
    pub fn new(timestamps: Vec<f64>, features: Tensor, source_fps: f64, duration_s: f64) -> Result<Self> {
        if timestamps.is_empty() {
            return Err(CoreError::EmptySequence("feature sequence with no frames".into()));
        }
        if timestamps.len() != features.rows() {
            return Err(CoreError::dim(format!(
                "{} timestamps vs {} feature rows",
                timestamps.len(),
                features.rows()
            )));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::contract("timestamps must be strictly increasing"));
        }
        Ok(FeatureSequence { timestamps, features, source_fps, duration_s, motion: None })
    }

    pub fn with_motion(mut self, motion: Vec<f64>) -> Result<Self> {
        if motion.len() != self.timestamps.len() {
            return Err(CoreError::dim("motion channel length mismatch"));
        }
        self.motion = Some(motion);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sub-sequence of the frames whose timestamps fall in [t0, t1).
    pub fn slice_time(&self, t0: f64, t1: f64) -> Result<FeatureSequence> {
        let idx: Vec<usize> = self
            .timestamps
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= t0 && t < t1)
            .map(|(i, _)| i)
            .collect();
        self.select(&idx)
    }

    /// Sub-sequence by row indices (must be sorted ascending).
    pub fn select(&self, idx: &[usize]) -> Result<FeatureSequence> {
        if idx.is_empty() {
            return Err(CoreError::EmptySequence("selection is empty".into()));
        }
        let d = self.dim();
        let mut ts = Vec::with_capacity(idx.len());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            ts.push(self.timestamps[i]);
            data.extend_from_slice(self.features.row_slice(i));
        }
        let mut out = FeatureSequence::new(
            ts,
            Tensor::new(vec![idx.len(), d], data)?,
            self.source_fps,
            self.duration_s,
        )?;
        if let Some(m) = &self.motion {
            out.motion = Some(idx.iter().map(|&i| m[i]).collect());
        }
        Ok(out)
    }
}

/// Sliding-window configuration for long-video inference.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_s: f64,
    pub overlap_s: f64,
    pub reset_interval_s: f64,
    /// When false, state is carried across all windows without zeroing.
    pub resets_enabled: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { window_s: 300.0, overlap_s: 60.0, reset_interval_s: 600.0, resets_enabled: true }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_s >= 0.0 && self.overlap_s < self.window_s) {
            return Err(CoreError::contract(format!(
                "window config: need 0 <= overlap ({}) < window ({})",
                self.overlap_s, self.window_s
            )));
        }
        if self.reset_interval_s < self.window_s - self.overlap_s {
            return Err(CoreError::contract(
                "window config: reset interval shorter than window advance",
            ));
        }
        Ok(())
    }

    pub fn advance_s(&self) -> f64 {
        self.window_s - self.overlap_s
    }
}

/// Standardization report: columns whose variance was zero are passed
/// through with unit scale.
#[derive(Clone, Debug, Default)]
pub struct StandardizeInfo {
    pub flagged_columns: Vec<usize>,
}

/// Per-feature standardization over the sequence's own rows.
pub fn standardize_features(raw: &FeatureSequence) -> Result<(FeatureSequence, StandardizeInfo)> {
    if raw.is_empty() {
        return Err(CoreError::EmptySequence("standardize: empty input".into()));
    }
    let (rows, d) = (raw.len(), raw.dim());
    let x = &raw.features;
    let mut mean = vec![0.0; d];
    for r in 0..rows {
        for (j, &v) in x.row_slice(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; d];
    for r in 0..rows {
        for (j, &v) in x.row_slice(r).iter().enumerate() {
            var[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    var.iter_mut().for_each(|v| *v /= rows as f64);

    let mut info = StandardizeInfo::default();
    let scale: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            if v == 0.0 {
                info.flagged_columns.push(j);
                1.0
            } else {
                1.0 / v.sqrt()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(rows * d);
    for r in 0..rows {
        for (j, &v) in x.row_slice(r).iter().enumerate() {
            data.push((v - mean[j]) * scale[j]);
        }
    }
    let mut out = FeatureSequence::new(
        raw.timestamps.clone(),
        Tensor::new(vec![rows, d], data)?,
        raw.source_fps,
        raw.duration_s,
    )?;
    out.motion = raw.motion.clone();
    Ok((out, info))
}

/// Learned affine projection applied after standardization.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub w: Tensor, // f×d
    pub b: Tensor, // 1×d
}

/// Standardize then project to the adapter's output width.
pub fn adapt_features(
    raw: &FeatureSequence,
    adapter: &AdapterParams,
) -> Result<(FeatureSequence, StandardizeInfo)> {
    if raw.dim() != adapter.w.rows() {
        return Err(CoreError::dim(format!(
            "adapt_features: input dim {} vs adapter {}",
            raw.dim(),
            adapter.w.rows()
        )));
    }
    let (std, info) = standardize_features(raw)?;
    let projected = crate::tensor::matmul_raw(&std.features, &adapter.w)?;
    let d = adapter.w.cols();
    let mut data = projected.data().to_vec();
    for r in 0..std.len() {
        for j in 0..d {
            data[r * d + j] += adapter.b.at(0, j);
        }
    }
    let mut out = FeatureSequence::new(
        std.timestamps.clone(),
        Tensor::new(vec![std.len(), d], data)?,
        std.source_fps,
        std.duration_s,
    )?;
    out.motion = std.motion.clone();
    Ok((out, info))
}

/// Serialized prediction (one JSON file per video).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_refined_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_coarse_s: Option<f64>,
    pub confidence: f64,
    pub valid: bool,
    pub prob_track: Vec<TrackPoint>,
    pub tiers_used: Vec<String>,
    pub frames_processed: usize,
    pub reduction_pct: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrackPoint {
    pub t: f64,
    pub p: f64,
}

impl PredictionRecord {
    pub fn from_prediction(
        video_id: &str,
        pred: &TemporalPrediction,
        tiers_used: Vec<String>,
        frames_processed: usize,
        reduction_pct: f64,
    ) -> Self {
        PredictionRecord {
            video_id: video_id.to_string(),
            t_refined_s: pred.t_refined_s,
            t_coarse_s: pred.t_coarse_s,
            confidence: pred.confidence,
            valid: pred.valid,
            prob_track: pred
                .track_times
                .iter()
                .zip(&pred.track_probs)
                .map(|(&t, &p)| TrackPoint { t, p })
                .collect(),
            tiers_used,
            frames_processed,
            reduction_pct,
        }
    }
}

/// Result of one orchestrated inference call.
pub struct PipelineOutcome {
    pub prediction: TemporalPrediction,
    pub tiers_used: Vec<Tier>,
    pub frames_processed: usize,
    /// Fraction of video time covered by MED / HIGH processing.
    pub med_fraction: f64,
    pub high_fraction: f64,
}

/// Fuse probability tracks by elementwise max at shared timestamps; points
/// unique to one track pass through. Fusing a track with itself is a no-op.
pub fn fuse_tracks(tracks: &[(Vec<f64>, Vec<f64>)]) -> (Vec<f64>, Vec<f64>) {
    use std::collections::BTreeMap;
    let mut merged: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for (times, probs) in tracks {
        for (&t, &p) in times.iter().zip(probs) {
            let key = t.to_bits();
            merged
                .entry(key)
                .and_modify(|e| e.1 = e.1.max(p))
                .or_insert((t, p));
        }
    }
    let mut ts = Vec::with_capacity(merged.len());
    let mut ps = Vec::with_capacity(merged.len());
    for (_, (t, p)) in merged {
        ts.push(t);
        ps.push(p);
    }
    (ts, ps)
}

/// Hierarchical three-tier processing of one video.
///
/// Tier 1 screens the whole video at the plan's LOW rate; tier 2 re-runs
/// MED regions (from the plan plus coarse-probability triggers) at the MED
/// rate with the mid model; tier 3 re-runs HIGH regions at the HIGH rate
/// with the fine model. Tracks are max-fused and the head produces the final
/// prediction over the fused track.
pub fn hierarchical_process(
    video: &FeatureSequence,
    plan: &SamplingPlan,
    model: &CrashLocalizer,
) -> Result<PipelineOutcome> {
    model.hierarchical_process(video, plan)
}

/// Window start times: advance by window − overlap until the remainder is
/// covered by the final window.
pub fn window_starts(duration_s: f64, cfg: &WindowConfig) -> Vec<f64> {
    let advance = cfg.advance_s();
    let mut starts = Vec::new();
    let mut k = 0.0;
    while k * advance < duration_s - cfg.overlap_s {
        starts.push(k * advance);
        k += 1.0;
    }
    starts
}

/// Sliding-window inference with forward-state carry between windows and
/// periodic state reset. Falls through to [`hierarchical_process`] when the
/// video is shorter than one window.
pub fn sliding_window_infer(
    video: &FeatureSequence,
    cfg: &WindowConfig,
    plan: &SamplingPlan,
    model: &CrashLocalizer,
) -> Result<PipelineOutcome> {
    model.sliding_window_infer(video, cfg, plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, d: usize) -> FeatureSequence {
        let mut rng = crate::rng::Rng::stream(5, "pipeline-test");
        let data: Vec<f64> = (0..rows * d).map(|_| rng.range(-3.0, 5.0)).collect();
        FeatureSequence::new(
            (0..rows).map(|i| i as f64).collect(),
            Tensor::new(vec![rows, d], data).unwrap(),
            1.0,
            rows as f64,
        )
        .unwrap()
    }

    #[test]
    fn rejects_non_monotone_timestamps() {
        let t = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(FeatureSequence::new(vec![1.0, 1.0], t, 1.0, 2.0).is_err());
    }

    #[test]
    fn standardize_passthrough_identity_projection() {
        let raw = seq(50, 3);
        let adapter = AdapterParams {
            w: Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            b: Tensor::zeros(vec![1, 3]),
        };
        let (out, info) = adapt_features(&raw, &adapter).unwrap();
        assert!(info.flagged_columns.is_empty());
        // Standardized columns have mean ~0 and variance ~1.
        for j in 0..3 {
            let col: Vec<f64> = (0..out.len()).map(|r| out.features.at(r, j)).collect();
            let m: f64 = col.iter().sum::<f64>() / col.len() as f64;
            let v: f64 = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_column_is_flagged_not_nan() {
        let mut data = Vec::new();
        for r in 0..10 {
            data.extend_from_slice(&[r as f64, 7.5]);
        }
        let raw = FeatureSequence::new(
            (0..10).map(|i| i as f64).collect(),
            Tensor::new(vec![10, 2], data).unwrap(),
            1.0,
            10.0,
        )
        .unwrap();
        let (std, info) = standardize_features(&raw).unwrap();
        assert_eq!(info.flagged_columns, vec![1]);
        assert!(std.features.all_finite());
        // The constant column standardizes to exactly zero with unit scale.
        for r in 0..10 {
            assert_eq!(std.features.at(r, 1), 0.0);
        }
    }

    #[test]
    fn output_column_means_equal_bias() {
        let raw = seq(40, 4);
        let mut rng = crate::rng::Rng::stream(8, "adapter");
        let w = Tensor::new(vec![4, 2], (0..8).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.7, -1.2]).unwrap();
        let (out, _) = adapt_features(&raw, &AdapterParams { w, b }).unwrap();
        for j in 0..2 {
            let m: f64 = (0..out.len()).map(|r| out.features.at(r, j)).sum::<f64>() / out.len() as f64;
            let bias = if j == 0 { 0.7 } else { -1.2 };
            assert!((m - bias).abs() < 1e-9, "col {j}: mean {m} vs bias {bias}");
        }
    }

    #[test]
    fn fuse_is_idempotent() {
        let t = vec![0.0, 1.0, 2.0];
        let p = vec![0.1, 0.9, 0.3];
        let (ft, fp) = fuse_tracks(&[(t.clone(), p.clone()), (t.clone(), p.clone())]);
        assert_eq!(ft, t);
        assert_eq!(fp, p);
    }

    #[test]
    fn fuse_takes_max_on_overlap() {
        let a = (vec![0.0, 1.0], vec![0.2, 0.8]);
        let b = (vec![1.0, 2.0], vec![0.5, 0.4]);
        let (ft, fp) = fuse_tracks(&[a, b]);
        assert_eq!(ft, vec![0.0, 1.0, 2.0]);
        assert_eq!(fp, vec![0.2, 0.8, 0.4]);
    }

    #[test]
    fn window_config_validation() {
        assert!(WindowConfig::default().validate().is_ok());
        let bad = WindowConfig { window_s: 100.0, overlap_s: 100.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad2 = WindowConfig {
            window_s: 300.0,
            overlap_s: 60.0,
            reset_interval_s: 100.0,
            resets_enabled: true,
        };
        assert!(bad2.validate().is_err());
    }
}
