//! Acceptance suite: one test per criterion, each printing its measured
//! values (run with `--nocapture` to see them). The end-to-end fixtures
//! (corpus + trained checkpoint) are built once and shared.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use tloc_cli::{
    chunk_invariance_error, cmd_generate, cmd_predict, cmd_train, collect_records, parse_phases,
    read_truth_csv, time_scan, GenerateArgs, PredictArgs, RunConfig, TrainArgs,
};
use tloc_core::gradcheck::finite_diff_check_multi4;
use tloc_core::model::{CrashLocalizer, ModelConfig, ParamNodes};
use tloc_core::oracle::naive_scan_reference;
use tloc_core::pipeline::{FeatureSequence, WindowConfig};
use tloc_core::rng::Rng;
use tloc_core::sampler::{
    build_plan_with, motion_variance, FlowField, MotionProfile, SamplingPlan, Thresholds, Tier,
    TierRates,
};
use tloc_core::ssm::{crash_aware_shift, hippo_init, selective_scan, SsmParams, SsmState};
use tloc_core::synthgen::{load_manifest, load_video_features, Split};
use tloc_core::tensor::Tensor;
use tloc_core::training::{loss_temporal, loss_total, supervised_loss_on_tape, LossWeights};

// ── shared fixtures ─────────────────────────────────────────────────────

struct Fixture {
    corpus: PathBuf,
    checkpoint: PathBuf,
    predictions: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = std::env::temp_dir().join("tloc_acceptance");
        let corpus = root.join("corpus");
        let checkpoint = root.join("ckpt");
        let predictions = root.join("preds");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();

        // Default synthetic corpus: 50 crash (40 train / 10 test) + clean,
        // 120 s each, seed 1.
        cmd_generate(&GenerateArgs {
            out: corpus.clone(),
            n_crash: 50,
            n_clean: 10,
            seed: 1,
            duration_s: 120.0,
            fps: 10.0,
            force: false,
        })
        .unwrap();

        let config = RunConfig { seed: 1, ..Default::default() };
        cmd_train(&TrainArgs {
            corpus: corpus.clone(),
            out: checkpoint.clone(),
            phases: parse_phases("contrastive,supervised,compression").unwrap(),
            epochs: None,
            config: config.clone(),
            log: None,
        })
        .unwrap();

        cmd_predict(&PredictArgs {
            corpus: corpus.clone(),
            checkpoint: checkpoint.join("final"),
            out: predictions.clone(),
            sliding_window: false,
            split: Some(Split::Test),
            config,
        })
        .unwrap();

        Fixture { corpus, checkpoint, predictions }
    })
}

// ── 1. scan oracle equivalence ──────────────────────────────────────────

#[test]
fn criterion_01_scan_oracle_equivalence() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = Rng::stream(seed, "acceptance-scan");
        let t_len = 1 + rng.usize_below(64);
        let n = 1 + rng.usize_below(32);
        let d = 1 + rng.usize_below(16);
        let params = SsmParams::init(n, d, 0.1, &mut rng).unwrap();
        let xprime = Tensor::new(
            vec![t_len, d],
            (0..t_len * d).map(|_| rng.range(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let residual = Tensor::new(
            vec![t_len, d],
            (0..t_len * d).map(|_| rng.range(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let h0 = Tensor::new(vec![d, n], (0..d * n).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let init = SsmState { h: h0.clone(), t: 0 };
        let (y, state) = selective_scan(&xprime, &residual, &params, &init).unwrap();
        let (y_ref, h_ref) = naive_scan_reference(&xprime, &residual, &params, h0.data());
        for (a, b) in y.data().iter().zip(&y_ref) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in state.h.data().iter().zip(&h_ref) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!("criterion 1: max |scan − naive| = {worst:e} over 50 seeds in {elapsed:.2} s");
    assert!(worst <= 1e-12, "scan deviates from the naive recurrence: {worst:e}");
    assert!(elapsed < 10.0, "oracle sweep took {elapsed:.1} s (limit 10 s)");
}

// ── 2. linear-time scaling ──────────────────────────────────────────────

#[test]
fn criterion_02_linear_time_scaling() {
    let start = Instant::now();
    let measure = || {
        let t4 = time_scan(4096, 64, 64, 5);
        let t8 = time_scan(8192, 64, 64, 5);
        t8 / t4
    };
    let mut ratio = measure();
    if ratio > 2.3 {
        // One retry absorbs transient machine load.
        ratio = measure();
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!("criterion 2: scan runtime ratio T8192/T4096 = {ratio:.3} in {elapsed:.1} s");
    assert!(ratio <= 2.3, "scan scaling ratio {ratio:.3} exceeds 2.3");
    assert!(elapsed < 60.0);
}

// ── 3. chunk invariance ─────────────────────────────────────────────────

#[test]
fn criterion_03_chunk_invariance() {
    // Split scan with carried state vs whole scan.
    let mut worst: f64 = 0.0;
    for (t_len, n, d) in [(48, 8, 6), (96, 16, 8), (64, 32, 4)] {
        worst = worst.max(chunk_invariance_error(t_len, n, d));
    }
    println!("criterion 3a: split-scan max abs error = {worst:e}");
    assert!(worst < 1e-10, "split-scan error {worst:e}");

    // 5-min windows, 1-min overlap, resets disabled: windowed inference
    // equals whole-sequence inference (single-tier configuration per the
    // chunk-carry invariant).
    let cfg = ModelConfig {
        feature_dim: 6,
        d_model: 16,
        layers: 2,
        n_coarse: 8,
        n_mid: 8,
        n_fine: 8,
        trig_med: 0.999,
        trig_high: 0.9995,
        seed: 11,
        ..Default::default()
    };
    let model = CrashLocalizer::new(cfg).unwrap();
    let n_frames = 900usize;
    let mut rng = Rng::stream(5, "acceptance-window");
    let data: Vec<f64> = (0..n_frames * 6)
        .map(|i| ((i as f64) * 0.013).sin() + 0.2 * rng.normal())
        .collect();
    let video = FeatureSequence::new(
        (0..n_frames).map(|i| i as f64).collect(),
        Tensor::new(vec![n_frames, 6], data).unwrap(),
        1.0,
        n_frames as f64,
    )
    .unwrap();
    let profile = MotionProfile {
        segment_length_s: 1.0,
        v: vec![0.0; n_frames],
        alpha: 0.7,
        frame_v: vec![0.0; n_frames],
    };
    let th = Thresholds { tau_med: 1.0, tau_high: 2.0, learned: false, degenerate: false };
    let plan = build_plan_with(&profile, &th, n_frames as f64 / 60.0, TierRates::default(), false);

    let whole = model.hierarchical_process(&video, &plan).unwrap();
    let wcfg = WindowConfig {
        window_s: 300.0,
        overlap_s: 60.0,
        reset_interval_s: 1e12,
        resets_enabled: false,
    };
    let windowed = model.sliding_window_infer(&video, &wcfg, &plan).unwrap();
    assert_eq!(whole.prediction.track_times, windowed.prediction.track_times);
    let mut max_err: f64 = 0.0;
    for (a, b) in whole
        .prediction
        .track_probs
        .iter()
        .zip(&windowed.prediction.track_probs)
    {
        max_err = max_err.max((a - b).abs());
    }
    println!("criterion 3b: windowed vs whole max deviation = {max_err:e}");
    assert!(max_err < 1e-8, "windowed inference deviates by {max_err:e}");
}

// ── 4. gradient correctness ─────────────────────────────────────────────

#[test]
fn criterion_04_full_model_gradient_check() {
    let start = Instant::now();
    let cfg = ModelConfig {
        feature_dim: 5,
        d_model: 6,
        layers: 1,
        n_coarse: 3,
        n_mid: 3,
        n_fine: 4,
        bidirectional: true,
        head_hidden: 4,
        refine_hidden: 3,
        seed: 42,
        ..Default::default()
    };
    let model = CrashLocalizer::new(cfg).unwrap();
    let t_len = 32usize;
    let mut rng = Rng::stream(9, "acceptance-fd");
    let data: Vec<f64> = (0..t_len * 5).map(|_| rng.range(-1.5, 1.5)).collect();
    let coarse = FeatureSequence::new(
        (0..t_len).map(|i| i as f64).collect(),
        Tensor::new(vec![t_len, 5], data).unwrap(),
        1.0,
        t_len as f64,
    )
    .unwrap();
    let t_gt = 17.4;
    let coarse_full = coarse.clone();
    let labels = tloc_core::training::frame_labels(&coarse.timestamps, t_gt);
    let med = coarse.slice_time(9.0, 26.0).unwrap();
    let med_labels = tloc_core::training::frame_labels(&med.timestamps, t_gt);
    let fine = coarse.slice_time(14.0, 21.0).unwrap();
    let fine_labels = tloc_core::training::frame_labels(&fine.timestamps, t_gt);
    let item = tloc_core::training::PreparedVideo {
        id: "fd32".into(),
        t_gt: Some(t_gt),
        duration_s: t_len as f64,
        coarse_ranks: (0..t_len).map(|i| i as f64 / (t_len - 1) as f64).collect(),
        coarse,
        coarse_labels: labels,
        med_window: Some((med, med_labels)),
        fine_window: Some((fine, fine_labels)),
        neg_med_window: None,
        neg_fine_window: None,
        full: coarse_full,
        rates: tloc_core::sampler::TierRates::default(),
        compressed: None,
    };
    let w = LossWeights::default();
    let fixed_k = {
        let mut tape = tloc_core::tape::Tape::inference();
        let nodes = model.leaf_params(&mut tape, false);
        let fwd = model
            .forward_track(&mut tape, &nodes, &item.coarse, Tier::Low, None, None)
            .unwrap();
        let probs = tape.value(fwd.probs).data().to_vec();
        tloc_core::head::detect_peak(&item.coarse.timestamps, &probs, 0.0)
            .unwrap()
            .0
    };
    let names: Vec<String> = model
        .param_names()
        .iter()
        .filter(|n| !CrashLocalizer::is_frozen(n))
        .cloned()
        .collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| model.param(n).clone()).collect();
    let errs = finite_diff_check_multi4(
        &|tape, ids| {
            let mut all_names = names.clone();
            let mut all_ids = ids.to_vec();
            for frozen in ["adapter.mean", "adapter.scale"] {
                all_names.push(frozen.to_string());
                all_ids.push(tape.constant(model.param(frozen).clone()));
            }
            let nodes = ParamNodes::from_pairs(&all_names, &all_ids);
            let loss = supervised_loss_on_tape(tape, &model, &nodes, &item, &w, Some(fixed_k))?;
            Ok(loss.total)
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    let mut worst = ("", 0.0f64);
    for (name, err) in names.iter().zip(&errs) {
        if *err > worst.1 {
            worst = (name, *err);
        }
        assert!(*err < 1e-4, "parameter group {name}: rel error {err:e}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 4: {} parameter groups, worst {} at {:.2e}, {elapsed:.1} s",
        names.len(),
        worst.0,
        worst.1
    );
    assert!(elapsed < 300.0, "gradient check took {elapsed:.0} s (limit 5 min)");
}

// ── 5. motion-variance formula ──────────────────────────────────────────

#[test]
fn criterion_05_motion_variance_formula() {
    // Hand-computed case: feature diff [1,1], flow vector (3,4), α = 0.5.
    let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    let f = FeatureSequence::new(
        vec![0.0, 1.0],
        Tensor::from_rows(&rows).unwrap(),
        1.0,
        2.0,
    )
    .unwrap();
    let flows = FlowField {
        per_frame: vec![vec![[0.0, 0.0]], vec![[3.0, 4.0]]],
    };
    let prof = motion_variance(&f, &flows, 0.5).unwrap();
    println!("criterion 5: v = {} (expected exactly 3.0); default alpha = 0.7", prof.frame_v[1]);
    assert_eq!(prof.frame_v[1], 3.0);
    assert_eq!(prof.v[1], 3.0);
    // The default weighting factor matches the optimal value.
    assert_eq!(ModelConfig::default().alpha, 0.7);
    assert_eq!(RunConfig::default().model.alpha, 0.7);
}

// ── 6. compute reduction ────────────────────────────────────────────────

#[test]
fn criterion_06_compute_reduction() {
    // Profile engineered to 15% MED / 3% HIGH at 1/5/30 FPS.
    let n = 100;
    let mut v = vec![0.0; n];
    for x in v.iter_mut().take(97).skip(82) {
        *x = 5.0;
    }
    for x in v.iter_mut().take(100).skip(97) {
        *x = 9.0;
    }
    let profile = MotionProfile { segment_length_s: 1.0, frame_v: v.clone(), v, alpha: 0.7 };
    let th = Thresholds { tau_med: 1.0, tau_high: 7.0, learned: false, degenerate: false };
    let plan: SamplingPlan =
        build_plan_with(&profile, &th, n as f64 / 60.0, TierRates::default(), false);
    println!(
        "criterion 6: reduction = {:.1}% (med {:.0}%, high {:.0}% of timeline)",
        plan.reduction_pct,
        plan.tier_fraction(Tier::Med) * 100.0,
        plan.tier_fraction(Tier::High) * 100.0
    );
    assert!(plan.reduction_pct >= 70.0, "reduction {:.1}% < 70%", plan.reduction_pct);
}

// ── 7. transition initialization ────────────────────────────────────────

#[test]
fn criterion_07_hippo_and_shift() {
    let a = hippo_init(2).unwrap();
    assert_eq!(a.at(0, 0), -1.0);
    assert_eq!(a.at(0, 1), 0.0);
    assert_eq!(a.at(1, 1), -2.0);
    assert!((a.at(1, 0) + (3.0f64).sqrt()).abs() < 1e-15);

    let mut rng = Rng::stream(3, "acceptance-shift");
    let m = Tensor::new(vec![5, 5], (0..25).map(|_| rng.normal()).collect()).unwrap();
    let s = crash_aware_shift(&m, 0.1).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let expect = m.at(i, j) + if i == j { 0.1 } else { 0.0 };
            assert_eq!(s.at(i, j), expect);
        }
    }
    // The shift default is 0.1 everywhere it is configured.
    assert_eq!(ModelConfig::default().lambda_shift, 0.1);
    println!("criterion 7: hippo_init(2) and +0.1 diagonal shift verified");
}

// ── 8. loss formulas ────────────────────────────────────────────────────

#[test]
fn criterion_08_loss_formulas() {
    let w = LossWeights::default();
    let l_half = loss_temporal(0.5, 0.0, &w);
    let l_two = loss_temporal(2.0, 0.0, &w);
    println!("criterion 8: L_temp(0.5) = {l_half}, L_temp(2) = {l_two}");
    assert!((l_half - 0.3875).abs() < 1e-15);
    assert!((l_two - 1.85).abs() < 1e-15);

    // Linearity in the λ weights.
    let (bce, temp, reg) = (0.31, 0.77, 0.052);
    let base = loss_total(bce, temp, reg, &w);
    assert!((base - (1.0 * bce + 2.0 * temp + 0.1 * reg)).abs() < 1e-15);
    for (scale, which) in [(3.0, 0), (0.5, 1), (7.0, 2)] {
        let mut w2 = w;
        match which {
            0 => w2.lambda1 *= scale,
            1 => w2.lambda2 *= scale,
            _ => w2.lambda3 *= scale,
        }
        let expect = match which {
            0 => base + (scale - 1.0) * w.lambda1 * bce,
            1 => base + (scale - 1.0) * w.lambda2 * temp,
            _ => base + (scale - 1.0) * w.lambda3 * reg,
        };
        assert!((loss_total(bce, temp, reg, &w2) - expect).abs() < 1e-12);
    }
}

// ── 9. metrics ──────────────────────────────────────────────────────────

#[test]
fn criterion_09_metrics() {
    use tloc_core::evalkit::{accuracy_at, mae, EvalRecord};
    let rec = |id: &str, gt: f64, pred: Option<f64>, dur: f64| EvalRecord {
        video_id: id.into(),
        t_gt_s: gt,
        t_pred_s: pred,
        valid: pred.is_some(),
        duration_s: dur,
        condition: "clear".into(),
        tiers_used: vec![],
    };
    // Exact predictions.
    let rs = vec![rec("a", 10.0, Some(10.0), 60.0), rec("b", 50.0, Some(50.0), 60.0)];
    let (mv, ma) = mae(&rs).unwrap();
    assert_eq!((mv, ma), (Some(0.0), 0.0));
    // Hand arithmetic.
    let rs = vec![rec("a", 0.0, Some(0.5), 60.0), rec("b", 0.0, Some(1.5), 60.0)];
    assert_eq!(mae(&rs).unwrap(), (Some(1.0), 1.0));
    // Failure-inclusive: (1.0 + 120) / 2 = 60.5.
    let rs = vec![rec("a", 30.0, Some(31.0), 120.0), rec("b", 50.0, None, 120.0)];
    let (mv, ma) = mae(&rs).unwrap();
    assert_eq!(mv, Some(1.0));
    assert_eq!(ma, 60.5);
    println!("criterion 9: worked examples hold (failure-inclusive case = {ma})");

    // Monotonicity over 100 random record sets.
    let mut rng = Rng::stream(77, "acceptance-metrics");
    for _ in 0..100 {
        let n = 2 + rng.usize_below(30);
        let rs: Vec<EvalRecord> = (0..n)
            .map(|i| {
                let gt = rng.range(1.0, 100.0);
                let pred =
                    if rng.uniform() < 0.85 { Some(gt + rng.range(-10.0, 10.0)) } else { None };
                rec(&format!("v{i}"), gt, pred, 120.0)
            })
            .collect();
        let a1 = accuracy_at(&rs, 1.0).unwrap();
        let a3 = accuracy_at(&rs, 3.0).unwrap();
        let a5 = accuracy_at(&rs, 5.0).unwrap();
        assert!(a1 <= a3 && a3 <= a5);
    }
}

// ── 10. end-to-end learning ─────────────────────────────────────────────

#[test]
fn criterion_10_end_to_end_learning() {
    let start = Instant::now();
    let fx = fixture();

    // Model metrics over the crash test split.
    let truth = read_truth_csv(&fx.corpus.join("truth_test.csv")).unwrap();
    let records = collect_records(&fx.predictions, &truth).unwrap();
    let report = tloc_core::evalkit::report(&records).unwrap();
    let model_mae = report.mae_all_s;
    let model_acc3 = report.acc_at["3s"];

    // The motion-variance argmax baseline on the same videos.
    let manifest = load_manifest(&fx.corpus).unwrap();
    let mut base_errs = Vec::new();
    for rec in manifest.videos.iter().filter(|r| r.split == Split::Test) {
        let Some(tc) = rec.crash_time_s else { continue };
        let lv = load_video_features(&fx.corpus, rec, 0.7).unwrap();
        let t_base = tloc_core::sampler::vt_peak_time(&lv.features, &lv.profile);
        base_errs.push((t_base - tc).abs());
    }
    let base_mae = base_errs.iter().sum::<f64>() / base_errs.len() as f64;
    let base_acc3 =
        base_errs.iter().filter(|&&e| e <= 3.0).count() as f64 / base_errs.len() as f64;

    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "criterion 10: model MAE {model_mae:.2} s / Acc@3s {:.0}% vs baseline {base_mae:.2} s / {:.0}% ({elapsed:.0} s incl. fixture)",
        model_acc3 * 100.0,
        base_acc3 * 100.0
    );
    assert!(model_mae < 5.0, "test MAE {model_mae:.2} >= 5 s");
    assert!(model_acc3 > 0.60, "Acc@3s {:.2} <= 60%", model_acc3);
    assert!(model_mae < base_mae, "model MAE does not beat baseline");
    assert!(model_acc3 > base_acc3, "model Acc@3s does not beat baseline");
    assert!(elapsed < 1800.0, "end-to-end run took {elapsed:.0} s (limit 30 min)");
}

// ── 11. sliding-window direction check ──────────────────────────────────

#[test]
fn criterion_11_sliding_window_direction() {
    let fx = fixture();
    let model = CrashLocalizer::load(&fx.checkpoint.join("final")).unwrap();

    // 20-minute-equivalent sequences.
    let long_dir = std::env::temp_dir().join("tloc_acceptance_long");
    let _ = std::fs::remove_dir_all(&long_dir);
    tloc_core::synthgen::build_corpus(
        &long_dir,
        &tloc_core::synthgen::CorpusConfig {
            n_crash: 6,
            n_clean: 0,
            seed: 1,
            duration_s: 1200.0,
            fps: 2.0,
        },
    )
    .unwrap();
    let manifest = load_manifest(&long_dir).unwrap();
    let wcfg = WindowConfig::default();
    let mut whole_errs = Vec::new();
    let mut sliding_errs = Vec::new();
    for rec in &manifest.videos {
        let tc = rec.crash_time_s.unwrap();
        let lv = load_video_features(&long_dir, rec, model.cfg.alpha).unwrap();
        let th = model.thresholds_for(&lv.profile).unwrap();
        let plan = build_plan_with(&lv.profile, &th, 20.0, TierRates::default(), true);
        let err = |p: &tloc_core::head::TemporalPrediction| -> f64 {
            match p.t_refined_s {
                Some(t) => (t - tc).abs(),
                None => rec.duration_s, // failure-inclusive convention
            }
        };
        let whole = model.hierarchical_process(&lv.features, &plan).unwrap();
        whole_errs.push(err(&whole.prediction));
        let sliding = model.sliding_window_infer(&lv.features, &wcfg, &plan).unwrap();
        sliding_errs.push(err(&sliding.prediction));
    }
    let mae = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mw, ms) = (mae(&whole_errs), mae(&sliding_errs));
    println!("criterion 11: sliding MAE {ms:.2} s vs whole-sequence MAE {mw:.2} s");
    assert!(
        ms <= mw,
        "sliding-window MAE {ms:.3} exceeds whole-sequence MAE {mw:.3}"
    );
    let _ = std::fs::remove_dir_all(&long_dir);
}

// ── 12. determinism ─────────────────────────────────────────────────────

#[test]
fn criterion_12_determinism() {
    let root = std::env::temp_dir().join("tloc_acceptance_det");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();

    // Corpus manifest hash is reproducible.
    let gen = |dir: &std::path::Path| {
        cmd_generate(&GenerateArgs {
            out: dir.to_path_buf(),
            n_crash: 6,
            n_clean: 2,
            seed: 1,
            duration_s: 20.0,
            fps: 5.0,
            force: false,
        })
        .unwrap();
        load_manifest(dir).unwrap().content_hash
    };
    let h1 = gen(&root.join("c1"));
    let h2 = gen(&root.join("c2"));
    assert_eq!(h1, h2, "corpus manifest hash not reproducible");

    // cmd_train twice with seed 1 → byte-identical checkpoints.
    let train = |out: &std::path::Path| {
        cmd_train(&TrainArgs {
            corpus: root.join("c1"),
            out: out.to_path_buf(),
            phases: parse_phases("contrastive,supervised,compression").unwrap(),
            epochs: Some(2),
            config: RunConfig { seed: 1, ..Default::default() },
            log: None,
        })
        .unwrap();
    };
    train(&root.join("k1"));
    train(&root.join("k2"));
    let mut files: Vec<String> = std::fs::read_dir(root.join("k1").join("final"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert!(!files.is_empty());
    for f in &files {
        let a = std::fs::read(root.join("k1").join("final").join(f)).unwrap();
        let b = std::fs::read(root.join("k2").join("final").join(f)).unwrap();
        assert_eq!(a, b, "checkpoint file {f} differs between runs");
    }
    println!(
        "criterion 12: manifest hash {h1} reproducible; {} checkpoint files byte-identical",
        files.len()
    );
    let _ = std::fs::remove_dir_all(&root);
}

// ── supporting checks tied to the trained fixture ───────────────────────

#[test]
fn trained_budgets_and_clean_rejection() {
    let fx = fixture();
    let model = CrashLocalizer::load(&fx.checkpoint.join("final")).unwrap();
    let manifest = load_manifest(&fx.corpus).unwrap();

    // Tier budgets: MED ≤ 20% and HIGH ≤ 5% of the timeline on the test
    // split, and the plan's HIGH tier covers the true crash (plan recall).
    let mut med = Vec::new();
    let mut high = Vec::new();
    let mut covered = 0usize;
    let mut n_crash = 0usize;
    for rec in manifest.videos.iter().filter(|r| r.split == Split::Test) {
        let lv = load_video_features(&fx.corpus, rec, model.cfg.alpha).unwrap();
        let th = model.thresholds_for(&lv.profile).unwrap();
        let plan = build_plan_with(&lv.profile, &th, rec.duration_s / 60.0, TierRates::default(), true);
        let out = model.hierarchical_process(&lv.features, &plan).unwrap();
        med.push(out.med_fraction);
        high.push(out.high_fraction);
        if let Some(tc) = rec.crash_time_s {
            n_crash += 1;
            if plan
                .regions(Tier::High)
                .iter()
                .any(|&(a, b)| tc >= a - 1e-9 && tc <= b + 1e-9)
            {
                covered += 1;
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "budgets: mean MED {:.1}% / HIGH {:.1}% of timeline; plan HIGH covers crash in {covered}/{n_crash}",
        mean(&med) * 100.0,
        mean(&high) * 100.0
    );
    assert!(mean(&med) <= 0.20, "MED fraction {:.3}", mean(&med));
    assert!(mean(&high) <= 0.05, "HIGH fraction {:.3}", mean(&high));
    assert!(covered * 10 >= n_crash * 9, "plan recall {covered}/{n_crash}");

    // Clean test videos: no crash alarm above threshold on ≥ 90%.
    let mut ok = 0usize;
    let mut n_clean = 0usize;
    for rec in manifest
        .videos
        .iter()
        .filter(|r| r.split == Split::Test && r.crash_time_s.is_none())
    {
        n_clean += 1;
        let pred: tloc_core::pipeline::PredictionRecord = serde_json::from_slice(
            &std::fs::read(fx.predictions.join(format!("{}.json", rec.id))).unwrap(),
        )
        .unwrap();
        if !pred.valid || pred.confidence < 0.5 {
            ok += 1;
        }
    }
    println!("clean rejection: {ok}/{n_clean} clean test videos below alarm threshold");
    assert!(ok * 10 >= n_clean * 9, "clean rejection {ok}/{n_clean}");
}

#[test]
fn crash_in_overlap_fuses_to_single_peak() {
    let fx = fixture();
    let model = CrashLocalizer::load(&fx.checkpoint.join("final")).unwrap();

    // A long video whose crash sits inside a window overlap region
    // (window 300 s, overlap 60 s → overlaps at [240,300), [480,540), ...).
    let dir = std::env::temp_dir().join("tloc_acceptance_overlap");
    let _ = std::fs::remove_dir_all(&dir);
    let spec = tloc_core::synthgen::ScenarioSpec {
        duration_s: 600.0,
        fps: 2.0,
        crash_time_s: Some(265.0),
        condition: tloc_core::synthgen::Condition::Clear,
        seed: 1234,
    };
    let (frames, _) = tloc_core::synthgen::generate(&spec).unwrap();
    let feats = tloc_core::synthgen::default_extractor(&frames).unwrap();
    let flow = tloc_core::sampler::flow_surrogate(&frames).unwrap();
    let profile = motion_variance(&feats, &flow, model.cfg.alpha).unwrap();
    let feats = feats.with_motion(profile.frame_v.clone()).unwrap();
    let th = model.thresholds_for(&profile).unwrap();
    let plan = build_plan_with(&profile, &th, 10.0, TierRates::default(), true);
    let out = model
        .sliding_window_infer(&feats, &WindowConfig::default(), &plan)
        .unwrap();
    let p = &out.prediction;
    assert!(p.valid, "no valid prediction for overlap crash");
    let t = p.t_refined_s.unwrap();
    assert!((t - 265.0).abs() <= 3.0, "overlap crash localized at {t:.2}");

    // Exactly one fused peak: count strong local maxima near the crash.
    let mut peaks = 0;
    for i in 1..p.track_probs.len() - 1 {
        let (a, b, c) = (p.track_probs[i - 1], p.track_probs[i], p.track_probs[i + 1]);
        if b >= 0.5 && b >= a && b >= c && (p.track_times[i] - 265.0).abs() < 10.0 {
            // Plateau of equal values counts once.
            if p.track_probs[i - 1] != b {
                peaks += 1;
            }
        }
    }
    println!("overlap fusion: {peaks} strong peak(s) near the crash, refined at {t:.2} s");
    assert!(peaks >= 1, "no fused peak found near the crash");
    let duplicates = p
        .track_times
        .windows(2)
        .filter(|w| w[1] - w[0] <= 0.0)
        .count();
    assert_eq!(duplicates, 0, "fused track has duplicate timestamps");
    let _ = std::fs::remove_dir_all(&dir);
}
