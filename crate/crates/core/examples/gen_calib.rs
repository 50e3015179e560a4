//! Generator calibration: crash response, distractor steal rate, baseline
//! accuracy, and the clean-video burst property.

use tloc_core::sampler;
use tloc_core::synthgen::*;

fn main() {
    let n = 60u64;
    let (mut weak, mut steal, mut with_d, mut correct) = (0, 0, 0, 0);
    for seed in 0..n {
        let spec = ScenarioSpec {
            duration_s: 60.0,
            fps: 10.0,
            crash_time_s: Some(10.0 + (seed as f64 * 0.61) % 40.0),
            condition: Condition::Clear,
            seed: 100 + seed,
        };
        let tc = spec.crash_time_s.unwrap();
        let (frames, gt) = generate(&spec).unwrap();
        let feats = default_extractor(&frames).unwrap();
        let flow = sampler::flow_surrogate(&frames).unwrap();
        let prof = sampler::motion_variance(&feats, &flow, 0.7).unwrap();
        let t_peak = sampler::vt_peak_time(&feats, &prof);
        let ci = (tc * 10.0) as usize;
        let local = prof.frame_v[ci..ci + 15].iter().cloned().fold(0.0, f64::max);
        let bg: f64 = prof.frame_v[10..90].iter().sum::<f64>() / 80.0;
        if local < 3.0 * bg { weak += 1; }
        if gt.distractor_time_s.is_some() {
            with_d += 1;
            if (t_peak - tc).abs() > 3.0 { steal += 1; }
        }
        if (t_peak - tc).abs() <= 3.0 { correct += 1; }
    }
    println!("weak: {weak}/{n}  steal: {steal}/{with_d}  baselineAcc3(clear): {correct}/{n}");

    let mut fails = 0;
    for seed in 0..100u64 {
        let spec = ScenarioSpec {
            duration_s: 30.0, fps: 10.0, crash_time_s: None,
            condition: Condition::ALL[(seed % 5) as usize], seed: 1000 + seed,
        };
        let (frames, _) = generate(&spec).unwrap();
        let feats = default_extractor(&frames).unwrap();
        let flow = sampler::flow_surrogate(&frames).unwrap();
        let prof = sampler::motion_variance(&feats, &flow, 0.7).unwrap();
        let mut s = prof.v.clone();
        s.sort_by(|a, b| a.total_cmp(b));
        let max = s[s.len() - 1];
        let p95 = tloc_core::oracle::percentile_linear(&s, 95.0);
        let med = tloc_core::oracle::percentile_linear(&s, 50.0);
        if max - p95 > 3.0 * med { fails += 1; }
    }
    println!("clean burst property failures: {fails}/100");
}
