//! End-to-end training smoke: the three phases run on a tiny corpus, losses
//! trend downward, thresholds stay ordered, and everything is bitwise
//! deterministic under a fixed seed.

use tloc_core::model::{CrashLocalizer, ModelConfig};
use tloc_core::sampler::TierRates;
use tloc_core::synthgen::{build_corpus, load_manifest, load_video_features, CorpusConfig, Split};
use tloc_core::training::{
    phase_compression_aware, phase_contrastive, phase_supervised, prepare_video, LossWeights,
    Phase, PreparedVideo, TrainConfig,
};

fn tiny_model(seed: u64) -> CrashLocalizer {
    CrashLocalizer::new(ModelConfig {
        feature_dim: 70,
        d_model: 16,
        layers: 1,
        n_coarse: 4,
        n_mid: 8,
        n_fine: 8,
        head_hidden: 12,
        refine_hidden: 6,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn prepared_corpus(dir: &std::path::Path, seed: u64, model: &CrashLocalizer) -> Vec<PreparedVideo> {
    let cfg = CorpusConfig { n_crash: 6, n_clean: 2, seed, duration_s: 30.0, fps: 5.0 };
    let _ = std::fs::remove_dir_all(dir);
    build_corpus(dir, &cfg).unwrap();
    let manifest = load_manifest(dir).unwrap();
    manifest
        .videos
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| {
            let loaded = load_video_features(dir, r, 0.7).unwrap();
            let th = tloc_core::sampler::init_thresholds(&loaded.profile).unwrap();
            prepare_video(&loaded, model, TierRates::default(), false, Some(&th)).unwrap()
        })
        .collect()
}

fn run_three_phases(seed: u64) -> (CrashLocalizer, Vec<f64>) {
    let dir = std::env::temp_dir().join(format!("tloc_train_smoke_{seed}"));
    let mut model = tiny_model(seed);
    let items = prepared_corpus(&dir, 21, &model);
    let w = LossWeights::default();

    let c_cfg = TrainConfig { phase: Phase::Contrastive, epochs: 2, lr: 5e-3, batch: 4, seed };
    phase_contrastive(&mut model, &items, &c_cfg).unwrap();

    let s_cfg = TrainConfig { phase: Phase::Supervised, epochs: 10, lr: 5e-3, batch: 4, seed };
    let log = phase_supervised(&mut model, &items, &s_cfg, &w).unwrap();
    let losses: Vec<f64> = log.iter().map(|r| r.loss_total).collect();

    let k_cfg = TrainConfig { phase: Phase::CompressionAware, epochs: 2, lr: 1e-3, batch: 4, seed };
    phase_compression_aware(&mut model, &items, &k_cfg, &w).unwrap();

    let _ = std::fs::remove_dir_all(&dir);
    (model, losses)
}

#[test]
fn supervised_loss_trends_down() {
    let (model, losses) = run_three_phases(3);
    assert!(losses.len() >= 10);
    // Smoothed trend: late-window mean below early-window mean.
    let k = losses.len() / 3;
    let early: f64 = losses[..k].iter().sum::<f64>() / k as f64;
    let late: f64 = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(
        late < early,
        "supervised loss did not decrease: early {early:.4}, late {late:.4}"
    );
    // Thresholds were trained and stay ordered.
    assert!(model.thresholds_learned);
    assert!(model.refine_trained);
    let (qm, qh) = model.threshold_quantiles();
    assert!(0.0 < qm && qm < qh && qh < 1.0, "quantiles {qm} {qh}");
    // And they moved from initialization, i.e. received gradient.
    assert!(
        (qm - 0.8).abs() > 1e-9 || (qh - 0.95).abs() > 1e-9,
        "thresholds never updated"
    );
}

#[test]
fn training_is_bitwise_deterministic() {
    let (m1, l1) = run_three_phases(9);
    let (m2, l2) = run_three_phases(9);
    assert_eq!(l1, l2);
    for name in m1.param_names() {
        assert_eq!(m1.param(name).data(), m2.param(name).data(), "{name}");
    }
}

#[test]
fn zero_epochs_and_zero_lr_leave_model_unchanged() {
    let dir = std::env::temp_dir().join("tloc_train_smoke_zero");
    let mut m = tiny_model(4);
    let items = prepared_corpus(&dir, 22, &m);
    let w = LossWeights::default();
    let before: Vec<Vec<f64>> = m.tensors().iter().map(|t| t.data().to_vec()).collect();
    let cfg = TrainConfig { phase: Phase::Supervised, epochs: 0, lr: 1e-3, batch: 4, seed: 4 };
    phase_supervised(&mut m, &items, &cfg, &w).unwrap();
    for (t, b) in m.tensors().iter().zip(&before) {
        assert_eq!(t.data(), b.as_slice());
    }
    assert!(!m.thresholds_learned);

    let mut m2 = tiny_model(4);
    let cfg2 = TrainConfig { phase: Phase::Supervised, epochs: 1, lr: 0.0, batch: 4, seed: 4 };
    phase_supervised(&mut m2, &items, &cfg2, &w).unwrap();
    for (t, b) in m2.tensors().iter().zip(&before) {
        assert_eq!(t.data(), b.as_slice());
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn contrastive_separates_classes() {
    let dir = std::env::temp_dir().join("tloc_train_smoke_contrastive");
    let mut model = tiny_model(5);
    let items = prepared_corpus(&dir, 23, &model);
    let cfg = TrainConfig { phase: Phase::Contrastive, epochs: 6, lr: 1e-2, batch: 4, seed: 5 };
    phase_contrastive(&mut model, &items, &cfg).unwrap();

    // Measure inter/intra class distances of coarse embeddings on the
    // training items (held-in is fine for a direction check at this scale).
    let mut inter = Vec::new();
    let mut intra = Vec::new();
    for item in &items {
        let Some(t_gt) = item.t_gt else { continue };
        let mut tape = tloc_core::tape::Tape::inference();
        let nodes = model.leaf_params(&mut tape, false);
        let fwd = model
            .forward_track(&mut tape, &nodes, &item.coarse, tloc_core::sampler::Tier::Low, None, None)
            .unwrap();
        let emb = tape.value(fwd.embed);
        let classify = |t: f64| -> usize {
            if t < t_gt - 1.0 {
                0
            } else if t <= t_gt + 2.0 {
                1
            } else {
                2
            }
        };
        let d = emb.cols();
        let mut means = vec![vec![0.0; d]; 3];
        let mut counts = [0usize; 3];
        for (i, &t) in item.coarse.timestamps.iter().enumerate() {
            let c = classify(t);
            counts[c] += 1;
            for j in 0..d {
                means[c][j] += emb.at(i, j);
            }
        }
        if counts.iter().any(|&c| c == 0) {
            continue;
        }
        for (c, m) in means.iter_mut().enumerate() {
            m.iter_mut().for_each(|v| *v /= counts[c] as f64);
        }
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        inter.push(dist(&means[0], &means[1]));
        inter.push(dist(&means[1], &means[2]));
        for (i, &t) in item.coarse.timestamps.iter().enumerate() {
            let c = classify(t);
            let row: Vec<f64> = (0..d).map(|j| emb.at(i, j)).collect();
            intra.push(dist(&row, &means[c]));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&inter) > mean(&intra),
        "inter {} <= intra {}",
        mean(&inter),
        mean(&intra)
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn compression_consistency_improves() {
    let dir = std::env::temp_dir().join("tloc_train_smoke_comp");
    let mut model = tiny_model(6);
    let items = prepared_corpus(&dir, 24, &model);
    let w = LossWeights::default();

    let gap = |model: &CrashLocalizer| -> f64 {
        let mut acc = 0.0;
        let mut n = 0.0;
        for item in &items {
            let Some((comp, _)) = &item.compressed else { continue };
            let full = model
                .infer_track(&item.coarse, tloc_core::sampler::Tier::Low, None, None)
                .unwrap();
            let ct = model.infer_track(comp, tloc_core::sampler::Tier::Low, None, None).unwrap();
            let t_full =
                tloc_core::training::soft_argmax_plain(&full.times, &full.probs, model.cfg.soft_temp);
            let t_comp = tloc_core::training::soft_argmax_plain(&ct.times, &ct.probs, model.cfg.soft_temp);
            acc += (t_full - t_comp).abs();
            n += 1.0;
        }
        acc / n
    };

    let before = gap(&model);
    let cfg = TrainConfig { phase: Phase::CompressionAware, epochs: 6, lr: 5e-3, batch: 4, seed: 6 };
    let log = phase_compression_aware(&mut model, &items, &cfg, &w).unwrap();
    assert!(!log.is_empty());
    assert!(log.iter().all(|r| r.loss_reg_or_consist >= 0.0));
    let after = gap(&model);
    assert!(
        after <= before + 1e-9,
        "consistency gap grew: before {before:.4}, after {after:.4}"
    );
    let _ = std::fs::remove_dir_all(&dir);
}
