//! Per-tier probability diagnostics on one video.

use tloc_core::model::CrashLocalizer;
use tloc_core::sampler::{build_plan_with, Tier, TierRates};
use tloc_core::synthgen::{load_manifest, load_video_features};

fn main() {
    let corpus = std::path::PathBuf::from(std::env::args().nth(1).unwrap());
    let ckpt = std::path::PathBuf::from(std::env::args().nth(2).unwrap());
    let vid = std::env::args().nth(3).unwrap();
    let model = CrashLocalizer::load(&ckpt).unwrap();
    let manifest = load_manifest(&corpus).unwrap();
    let rec = manifest.videos.iter().find(|r| r.id == vid).unwrap();
    let lv = load_video_features(&corpus, rec, model.cfg.alpha).unwrap();
    let std = model.preprocess(&lv.features).unwrap();

    // Coarse track at the adaptive low rate (4 fps for 2-min).
    let idx: Vec<usize> = {
        let mut v = tloc_core::sampler::sample_indices(&std.timestamps, 0.0, std.duration_s, 4.0);
        v.sort_unstable(); v.dedup(); v
    };
    let coarse_seq = std.select(&idx).unwrap();
    let coarse = model.infer_track(&coarse_seq, Tier::Low, None, None).unwrap();
    let cmax = coarse.probs.iter().cloned().fold(0.0f64, f64::max);
    let carg = coarse.probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    println!("coarse: max p = {:.3} at t = {:.1}", cmax, coarse.times[carg]);

    // What the full pipeline reports.
    let th = model.thresholds_for(&lv.profile).unwrap();
    let plan = build_plan_with(&lv.profile, &th, rec.duration_s / 60.0, TierRates::default(), true);
    let out = model.hierarchical_process(&lv.features, &plan).unwrap();
    println!(
        "pipeline: conf = {:.3}, tiers = {:?}, med_frac = {:.2}, high_frac = {:.2}",
        out.prediction.confidence, out.tiers_used, out.med_fraction, out.high_fraction
    );

    // Mid/fine on the coarse-peak region.
    let t_peak = coarse.times[carg];
    for (tier, rate, half) in [(Tier::Med, 5.0, 8.0), (Tier::High, 10.0, 3.0)] {
        let lo = (t_peak - half).max(0.0);
        let hi = (t_peak + half).min(std.duration_s);
        let mut idx = tloc_core::sampler::sample_indices(&std.timestamps, lo, hi, rate);
        idx.sort_unstable(); idx.dedup();
        if idx.len() < 2 { continue; }
        let seq = std.select(&idx).unwrap();
        let tr = model.infer_track(&seq, tier, None, None).unwrap();
        let m = tr.probs.iter().cloned().fold(0.0f64, f64::max);
        println!("{tier:?} on peak region: max p = {m:.3}");
    }
}
