//! Evaluation protocol: MAE, Accuracy@K, failure-inclusive metrics with the
//! maximum-penalty convention, stratified reports, and the exponential
//! duration fit (reported descriptively, never asserted against paper
//! numbers).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One scored video. `valid = false` means no prediction was produced; such
/// records take the maximum penalty (their full duration) in failure-
/// inclusive metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub video_id: String,
    pub t_gt_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_pred_s: Option<f64>,
    pub valid: bool,
    pub duration_s: f64,
    pub condition: String,
    #[serde(default)]
    pub tiers_used: Vec<String>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.valid != self.t_pred_s.is_some() {
            return Err(CoreError::contract(format!(
                "{}: valid flag disagrees with prediction presence",
                self.video_id
            )));
        }
        if !(0.0..=self.duration_s).contains(&self.t_gt_s) {
            return Err(CoreError::contract(format!(
                "{}: t_gt {} outside [0, {}]",
                self.video_id, self.t_gt_s, self.duration_s
            )));
        }
        Ok(())
    }

    pub fn abs_error(&self) -> Option<f64> {
        self.t_pred_s.map(|p| (p - self.t_gt_s).abs())
    }
}

pub const ACC_THRESHOLDS_S: [f64; 3] = [1.0, 3.0, 5.0];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// MAE over valid records; absent when no record is valid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_valid_s: Option<f64>,
    /// Failure-inclusive MAE: invalid records contribute their duration.
    pub mae_all_s: f64,
    /// Accuracy@K for K ∈ {1, 3, 5} seconds (fraction of all records).
    pub acc_at: BTreeMap<String, f64>,
    pub valid_rate: f64,
    pub n: usize,
    /// Per-stratum breakdown when stratified.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub strata: BTreeMap<String, EvalReport>,
}

/// (mae_valid, mae_all) under the maximum-penalty convention.
pub fn mae(records: &[EvalRecord]) -> Result<(Option<f64>, f64)> {
    if records.is_empty() {
        return Err(CoreError::contract("mae: no records"));
    }
    let mut valid_sum = 0.0;
    let mut valid_n = 0usize;
    let mut all_sum = 0.0;
    for r in records {
        r.validate()?;
        match r.abs_error() {
            Some(e) => {
                valid_sum += e;
                valid_n += 1;
                all_sum += e;
            }
            None => all_sum += r.duration_s,
        }
    }
    let mae_valid = (valid_n > 0).then(|| valid_sum / valid_n as f64);
    Ok((mae_valid, all_sum / records.len() as f64))
}

/// Fraction of all records (invalid ones count in the denominator) whose
/// error is within K seconds, inclusive.
pub fn accuracy_at(records: &[EvalRecord], k_s: f64) -> Result<f64> {
    if k_s <= 0.0 {
        return Err(CoreError::contract("accuracy_at: K must be > 0"));
    }
    if records.is_empty() {
        return Err(CoreError::contract("accuracy_at: no records"));
    }
    let hits = records
        .iter()
        .filter(|r| r.abs_error().map(|e| e <= k_s).unwrap_or(false))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Full report over one record set.
pub fn report(records: &[EvalRecord]) -> Result<EvalReport> {
    let (mae_valid_s, mae_all_s) = mae(records)?;
    let mut acc_at = BTreeMap::new();
    for k in ACC_THRESHOLDS_S {
        acc_at.insert(format!("{k}s"), accuracy_at(records, k)?);
    }
    let valid = records.iter().filter(|r| r.valid).count();
    Ok(EvalReport {
        mae_valid_s,
        mae_all_s,
        acc_at,
        valid_rate: valid as f64 / records.len() as f64,
        n: records.len(),
        strata: BTreeMap::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StratifyKey {
    Duration,
    Condition,
}

impl StratifyKey {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "duration" => Ok(StratifyKey::Duration),
            "condition" => Ok(StratifyKey::Condition),
            other => Err(CoreError::contract(format!("unknown stratum key {other:?}"))),
        }
    }
}

/// Pooled report plus one per stratum. Empty strata cannot arise (every
/// record belongs to exactly one stratum).
pub fn stratify(records: &[EvalRecord], key: StratifyKey) -> Result<EvalReport> {
    let mut pooled = report(records)?;
    let mut groups: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        let k = match key {
            StratifyKey::Condition => r.condition.clone(),
            StratifyKey::Duration => format!("{}s", r.duration_s.round() as i64),
        };
        groups.entry(k).or_default().push(r.clone());
    }
    for (k, rs) in groups {
        pooled.strata.insert(k, report(&rs)?);
    }
    Ok(pooled)
}

/// Least-squares fit mae ≈ a·e^{b·d} on log-mae; non-positive mae points
/// are dropped. Needs ≥ 3 usable duration points and ≥ 2 distinct
/// durations.
pub fn duration_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, m)| *m > 0.0)
        .map(|&(d, m)| (d, m.ln()))
        .collect();
    if usable.len() < 3 {
        return Err(CoreError::contract(format!(
            "duration_fit: need >= 3 positive points, have {}",
            usable.len()
        )));
    }
    let n = usable.len() as f64;
    let sx: f64 = usable.iter().map(|(d, _)| d).sum();
    let sy: f64 = usable.iter().map(|(_, y)| y).sum();
    let sxx: f64 = usable.iter().map(|(d, _)| d * d).sum();
    let sxy: f64 = usable.iter().map(|(d, y)| d * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return Err(CoreError::contract("duration_fit: degenerate (single duration)"));
    }
    let b = (n * sxy - sx * sy) / denom;
    let ln_a = (sy - b * sx) / n;
    Ok((ln_a.exp(), b))
}

/// Mean ± sample standard deviation across repeated runs.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Plain-text table for one report (plus strata blocks).
pub fn render_table(report: &EvalReport, title: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("== {title} (n = {}) ==\n", report.n));
    out.push_str(&format!(
        "  mae_valid: {}\n",
        report
            .mae_valid_s
            .map(|m| format!("{m:.4} s"))
            .unwrap_or_else(|| "undefined (no valid predictions)".into())
    ));
    out.push_str(&format!("  mae_all:   {:.4} s\n", report.mae_all_s));
    for (k, v) in &report.acc_at {
        out.push_str(&format!("  acc@{k}:   {:.1}%\n", v * 100.0));
    }
    out.push_str(&format!("  valid:     {:.1}%\n", report.valid_rate * 100.0));
    for (name, sub) in &report.strata {
        out.push_str(&render_table(sub, &format!("{title} / {name}")));
    }
    out
}

/// Histogram of signed errors over valid records (plot data export).
pub fn error_histogram(records: &[EvalRecord], bin_s: f64, max_s: f64) -> Vec<(f64, usize)> {
    let nbins = (2.0 * max_s / bin_s).ceil() as usize;
    let mut bins = vec![0usize; nbins];
    for r in records {
        if let Some(p) = r.t_pred_s {
            let e = (p - r.t_gt_s).clamp(-max_s, max_s - 1e-9);
            let idx = ((e + max_s) / bin_s) as usize;
            bins[idx.min(nbins - 1)] += 1;
        }
    }
    bins.iter()
        .enumerate()
        .map(|(i, &c)| (-max_s + (i as f64 + 0.5) * bin_s, c))
        .collect()
}
