//! Compare the variance-argmax baseline against stored predictions.

use tloc_core::sampler;
use tloc_core::synthgen::{load_manifest, load_video_features, Split};

fn main() {
    let corpus = std::path::PathBuf::from(std::env::args().nth(1).unwrap());
    let preds = std::env::args().nth(2).map(std::path::PathBuf::from);
    let manifest = load_manifest(&corpus).unwrap();
    let mut base_errs = Vec::new();
    let mut model_errs = Vec::new();
    for rec in manifest.videos.iter().filter(|r| r.split == Split::Test) {
        let Some(tc) = rec.crash_time_s else { continue };
        let lv = load_video_features(&corpus, rec, 0.7).unwrap();
        let t_base = sampler::vt_peak_time(&lv.features, &lv.profile);
        let be = (t_base - tc).abs();
        base_errs.push(be);
        let me = preds.as_ref().map(|p| {
            let j: serde_json::Value = serde_json::from_slice(
                &std::fs::read(p.join(format!("{}.json", rec.id))).unwrap(),
            )
            .unwrap();
            (j["t_refined_s"].as_f64().unwrap_or(f64::NAN) - tc).abs()
        });
        println!(
            "{} cond={} t_gt={:.2} baseline_err={:.2} model_err={:?}",
            rec.id, rec.condition, tc, be, me
        );
        if let Some(e) = me { model_errs.push(e); }
    }
    let mae = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let acc3 = |v: &[f64]| v.iter().filter(|&&e| e <= 3.0).count() as f64 / v.len() as f64;
    println!("baseline: MAE {:.2} Acc@3 {:.0}%", mae(&base_errs), 100.0 * acc3(&base_errs));
    if !model_errs.is_empty() {
        println!("model:    MAE {:.2} Acc@3 {:.0}%", mae(&model_errs), 100.0 * acc3(&model_errs));
    }
}
