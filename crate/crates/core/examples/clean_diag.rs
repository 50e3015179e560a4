//! Inspect motion-channel separation between clean-video peaks and crash
//! bursts, and where the model fires on clean videos.

use tloc_core::synthgen::{load_manifest, load_video_features, Split};

fn main() {
    let corpus = std::path::PathBuf::from(std::env::args().nth(1).unwrap());
    let preds = std::path::PathBuf::from(std::env::args().nth(2).unwrap());
    let manifest = load_manifest(&corpus).unwrap();
    for rec in manifest.videos.iter().filter(|r| r.split == Split::Test) {
        let lv = load_video_features(&corpus, rec, 0.7).unwrap();
        let v = &lv.profile.frame_v;
        let vmax = v.iter().cloned().fold(0.0f64, f64::max);
        let p = preds.join(format!("{}.json", rec.id));
        let j: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        let conf = j["confidence"].as_f64().unwrap();
        let tpk = j["t_coarse_s"].as_f64();
        // v at the model's peak location
        let v_at_peak = tpk.map(|t| {
            let idx = (t * rec.fps).round() as usize;
            v[idx.min(v.len() - 1)]
        });
        println!(
            "{} crash={} cond={} vmax={:.4} conf={:.3} peak_t={:?} v_at_peak={:?}",
            rec.id,
            rec.crash_time_s.is_some(),
            rec.condition,
            vmax,
            conf,
            tpk.map(|t| (t * 10.0).round() / 10.0),
            v_at_peak.map(|x| (x * 1e4).round() / 1e4),
        );
    }
}
