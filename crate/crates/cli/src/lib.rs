//! Command implementations behind the `tloc` binary: corpus generation,
//! three-phase training, hierarchical / sliding-window prediction,
//! evaluation, and the performance bench tables.
//!
//! Exit-code contract: 0 success, 2 validation error, 3 divergence or
//! runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use tloc_core::error::{CoreError, Result};
use tloc_core::evalkit::{self, EvalRecord, EvalReport, StratifyKey};
use tloc_core::model::{CrashLocalizer, ModelConfig};
use tloc_core::pipeline::{PredictionRecord, WindowConfig};
use tloc_core::sampler::TierRates;
use tloc_core::synthgen::{
    build_corpus, load_manifest, load_video_features, CorpusConfig, Split, VideoRecord,
};
use tloc_core::training::{
    self, phase_compression_aware, phase_contrastive, phase_supervised, prepare_video,
    LossWeights, LogRow, Phase, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn exit_code_for(err: &CoreError) -> i32 {
    match err {
        CoreError::Dimension(_)
        | CoreError::Contract(_)
        | CoreError::Alignment(_)
        | CoreError::EmptySequence(_)
        | CoreError::Format(_)
        | CoreError::Json(_) => EXIT_VALIDATION,
        CoreError::Divergence(_) | CoreError::Io(_) | CoreError::Evaluation(_) => EXIT_RUNTIME,
    }
}

// ── configuration ───────────────────────────────────────────────────────

/// Run-wide configuration. A JSON file of flat dotted keys overrides the
/// defaults; command-line flags override the file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub rates: TierRates,
    pub duration_adaptive: bool,
    pub window: WindowConfig,
    pub weights: LossWeights,
    pub epochs_contrastive: usize,
    pub epochs_supervised: usize,
    pub epochs_compression: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            rates: TierRates::default(),
            duration_adaptive: true,
            window: WindowConfig::default(),
            weights: LossWeights::default(),
            epochs_contrastive: 3,
            epochs_supervised: 30,
            epochs_compression: 4,
            lr: 3e-3,
            batch: 4,
            seed: 1,
        }
    }
}

impl RunConfig {
    /// Apply one flat dotted-key override.
    pub fn apply(&mut self, key: &str, value: &serde_json::Value) -> Result<()> {
        let as_f64 = || -> Result<f64> {
            value
                .as_f64()
                .ok_or_else(|| CoreError::contract(format!("{key}: expected number")))
        };
        let as_usize = || -> Result<usize> {
            value
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| CoreError::contract(format!("{key}: expected integer")))
        };
        let as_bool = || -> Result<bool> {
            value
                .as_bool()
                .ok_or_else(|| CoreError::contract(format!("{key}: expected bool")))
        };
        match key {
            "seed" => self.seed = as_usize()? as u64,
            "lr" => self.lr = as_f64()?,
            "batch" => self.batch = as_usize()?,
            "epochs.contrastive" => self.epochs_contrastive = as_usize()?,
            "epochs.supervised" => self.epochs_supervised = as_usize()?,
            "epochs.compression" => self.epochs_compression = as_usize()?,
            "sampler.alpha" => self.model.alpha = as_f64()?,
            "sampler.rate_low" => self.rates.low = as_f64()?,
            "sampler.rate_med" => self.rates.med = as_f64()?,
            "sampler.rate_high" => self.rates.high = as_f64()?,
            "sampler.duration_adaptive" => self.duration_adaptive = as_bool()?,
            "window.window_s" => self.window.window_s = as_f64()?,
            "window.overlap_s" => self.window.overlap_s = as_f64()?,
            "window.reset_interval_s" => self.window.reset_interval_s = as_f64()?,
            "window.resets_enabled" => self.window.resets_enabled = as_bool()?,
            "model.d_model" => self.model.d_model = as_usize()?,
            "model.layers" => self.model.layers = as_usize()?,
            "model.n_coarse" => self.model.n_coarse = as_usize()?,
            "model.n_mid" => self.model.n_mid = as_usize()?,
            "model.n_fine" => self.model.n_fine = as_usize()?,
            "model.bidirectional" => self.model.bidirectional = as_bool()?,
            "model.lambda_shift" => self.model.lambda_shift = as_f64()?,
            "model.head_hidden" => self.model.head_hidden = as_usize()?,
            "model.p_min" => self.model.p_min = as_f64()?,
            "model.trig_med" => self.model.trig_med = as_f64()?,
            "model.trig_high" => self.model.trig_high = as_f64()?,
            "loss.lambda1" => self.weights.lambda1 = as_f64()?,
            "loss.lambda2" => self.weights.lambda2 = as_f64()?,
            "loss.lambda3" => self.weights.lambda3 = as_f64()?,
            "loss.alpha_t" => self.weights.alpha_t = as_f64()?,
            "loss.beta_t" => self.weights.beta_t = as_f64()?,
            other => {
                return Err(CoreError::contract(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        let map: BTreeMap<String, serde_json::Value> = serde_json::from_str(&text)?;
        for (k, v) in &map {
            self.apply(k, v)?;
        }
        Ok(())
    }
}

// ── generate ────────────────────────────────────────────────────────────

pub struct GenerateArgs {
    pub out: PathBuf,
    pub n_crash: usize,
    pub n_clean: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub fps: f64,
    pub force: bool,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<String> {
    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)?.next().is_some();
        if non_empty && !args.force {
            return Err(CoreError::contract(format!(
                "output dir {} is not empty (use --force to overwrite)",
                args.out.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(&args.out)?;
        }
    }
    let cfg = CorpusConfig {
        n_crash: args.n_crash,
        n_clean: args.n_clean,
        seed: args.seed,
        duration_s: args.duration_s,
        fps: args.fps,
    };
    let manifest = build_corpus(&args.out, &cfg)?;
    write_truth_csv(&args.out, &manifest.videos)?;
    Ok(format!(
        "generated {} videos ({} crash / {} clean), {} frames each, manifest hash {}",
        manifest.n_videos,
        args.n_crash,
        args.n_clean,
        (args.duration_s * args.fps).round() as usize,
        manifest.content_hash
    ))
}

fn write_truth_csv(dir: &Path, videos: &[VideoRecord]) -> Result<()> {
    let render = |filter: Option<Split>| -> String {
        let mut out = String::from("video_id,t_gt_s,duration_s,condition\n");
        for v in videos {
            if let Some(tc) = v.crash_time_s {
                if filter.is_none_or(|s| v.split == s) {
                    out.push_str(&format!("{},{},{},{}\n", v.id, tc, v.duration_s, v.condition));
                }
            }
        }
        out
    };
    fs::write(dir.join("truth.csv"), render(None))?;
    fs::write(dir.join("truth_train.csv"), render(Some(Split::Train)))?;
    fs::write(dir.join("truth_test.csv"), render(Some(Split::Test)))?;
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

pub struct TrainArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub phases: Vec<Phase>,
    pub epochs: Option<usize>,
    pub config: RunConfig,
    pub log: Option<PathBuf>,
}

pub fn parse_phases(s: &str) -> Result<Vec<Phase>> {
    s.split(',')
        .map(|p| match p.trim() {
            "contrastive" => Ok(Phase::Contrastive),
            "supervised" => Ok(Phase::Supervised),
            "compression" => Ok(Phase::CompressionAware),
            other => Err(CoreError::contract(format!("unknown phase {other:?}"))),
        })
        .collect()
}

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    let manifest = load_manifest(&args.corpus)?;
    let cfg = &args.config;
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let mut model = CrashLocalizer::new(model_cfg)?;

    // Preprocess every training video once.
    let train_recs: Vec<&VideoRecord> =
        manifest.videos.iter().filter(|r| r.split == Split::Train).collect();
    if train_recs.is_empty() {
        return Err(CoreError::contract("corpus has no training split"));
    }
    let loaded: Vec<_> = tloc_core::par::map_ordered(&train_recs, |r| {
        load_video_features(&args.corpus, r, cfg.model.alpha)
    });
    let loaded: Vec<_> = loaded.into_iter().collect::<Result<_>>()?;
    if !model.cfg.per_video_norm {
        // Corpus-level standardization statistics, frozen into the
        // checkpoint.
        let feature_refs: Vec<_> = loaded.iter().map(|lv| &lv.features).collect();
        model.fit_adapter_stats(&feature_refs)?;
    }
    let model_ref = &model;
    let items: Vec<_> = tloc_core::par::map_ordered(&loaded, |lv| {
        prepare_video(lv, model_ref, cfg.rates, cfg.duration_adaptive, None)
    });
    let mut items: Vec<_> = items.into_iter().collect::<Result<_>>()?;

    fs::create_dir_all(&args.out)?;
    let mut log: Vec<LogRow> = Vec::new();
    for phase in &args.phases {
        let (epochs, lr) = match phase {
            Phase::Contrastive => (args.epochs.unwrap_or(cfg.epochs_contrastive), cfg.lr),
            Phase::Supervised => (args.epochs.unwrap_or(cfg.epochs_supervised), cfg.lr),
            Phase::CompressionAware => {
                (args.epochs.unwrap_or(cfg.epochs_compression), cfg.lr / 3.0)
            }
        };
        let tc = TrainConfig { phase: *phase, epochs, lr, batch: cfg.batch, seed: cfg.seed };
        let rows = match phase {
            Phase::Contrastive => phase_contrastive(&mut model, &items, &tc)?,
            Phase::Supervised => phase_supervised(&mut model, &items, &tc, &cfg.weights)?,
            Phase::CompressionAware => {
                // Compressed tracks use the thresholds as learned so far.
                let model_ref = &model;
                let with_comp: Vec<_> = tloc_core::par::map_ordered(&loaded, |lv| {
                    let th = model_ref.thresholds_for(&lv.profile)?;
                    prepare_video(lv, model_ref, cfg.rates, cfg.duration_adaptive, Some(&th))
                });
                items = with_comp.into_iter().collect::<Result<_>>()?;
                phase_compression_aware(&mut model, &items, &tc, &cfg.weights)?
            }
        };
        log.extend(rows);
        model.save(&args.out.join(format!("phase-{phase}")))?;
    }
    model.save(&args.out.join("final"))?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.join("training_log.csv"));
    training::write_log_csv(&log_path, &log)?;
    Ok(format!(
        "trained {} phase(s) on {} videos, {} steps logged, checkpoint at {}",
        args.phases.len(),
        items.len(),
        log.len(),
        args.out.join("final").display()
    ))
}

// ── predict ─────────────────────────────────────────────────────────────

pub struct PredictArgs {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub sliding_window: bool,
    pub split: Option<Split>,
    pub config: RunConfig,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<String> {
    let manifest = load_manifest(&args.corpus)?;
    let model = CrashLocalizer::load(&args.checkpoint)?;
    fs::create_dir_all(&args.out)?;
    let cfg = &args.config;

    let recs: Vec<&VideoRecord> = manifest
        .videos
        .iter()
        .filter(|r| args.split.is_none_or(|s| r.split == s))
        .collect();
    if recs.is_empty() {
        return Err(CoreError::contract("no videos match the requested split"));
    }

    let results: Vec<Result<(String, usize, f64)>> = tloc_core::par::map_ordered(&recs, |rec| {
        let lv = load_video_features(&args.corpus, rec, model.cfg.alpha)?;
        let th = model.thresholds_for(&lv.profile)?;
        let plan = tloc_core::sampler::build_plan_with(
            &lv.profile,
            &th,
            rec.duration_s / 60.0,
            cfg.rates,
            cfg.duration_adaptive,
        );
        let outcome = if args.sliding_window {
            model.sliding_window_infer(&lv.features, &cfg.window, &plan)?
        } else {
            model.hierarchical_process(&lv.features, &plan)?
        };
        let record = PredictionRecord::from_prediction(
            &rec.id,
            &outcome.prediction,
            outcome.tiers_used.iter().map(|t| t.as_str().to_string()).collect(),
            outcome.frames_processed,
            plan.reduction_pct,
        );
        fs::write(
            args.out.join(format!("{}.json", rec.id)),
            serde_json::to_vec_pretty(&record)?,
        )?;
        Ok((rec.id.clone(), outcome.frames_processed, plan.reduction_pct))
    });

    let mut frames = 0usize;
    let mut reductions = Vec::new();
    let mut n = 0usize;
    for r in results {
        let (_, f, red) = r?;
        frames += f;
        reductions.push(red);
        n += 1;
    }
    let mean_red = reductions.iter().sum::<f64>() / reductions.len() as f64;
    Ok(format!(
        "predicted {n} videos: {frames} frames processed, mean planned reduction {mean_red:.1}%"
    ))
}

// ── eval ────────────────────────────────────────────────────────────────

pub struct EvalArgs {
    /// Prediction directory; may contain `{seed}` with `--seeds`.
    pub predictions: PathBuf,
    /// Ground-truth CSV (video_id, t_gt_s, duration_s, condition) or a
    /// corpus directory containing truth.csv.
    pub truth: PathBuf,
    pub strata: Option<String>,
    pub seeds: Option<(u64, u64)>,
    pub out: Option<PathBuf>,
    pub hist: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TruthRow {
    pub video_id: String,
    pub t_gt_s: f64,
    pub duration_s: f64,
    pub condition: String,
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<TruthRow>> {
    let path = if path.is_dir() { path.join("truth.csv") } else { path.to_path_buf() };
    let text = fs::read_to_string(&path)
        .map_err(|e| CoreError::Format(format!("cannot read truth csv {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(CoreError::Format(format!("truth.csv line {}: need 4 fields", i + 1)));
        }
        rows.push(TruthRow {
            video_id: parts[0].to_string(),
            t_gt_s: parts[1]
                .parse()
                .map_err(|_| CoreError::Format(format!("bad t_gt_s on line {}", i + 1)))?,
            duration_s: parts[2]
                .parse()
                .map_err(|_| CoreError::Format(format!("bad duration_s on line {}", i + 1)))?,
            condition: parts[3].to_string(),
        });
    }
    Ok(rows)
}

pub fn collect_records(pred_dir: &Path, truth: &[TruthRow]) -> Result<Vec<EvalRecord>> {
    let mut missing = Vec::new();
    let mut records = Vec::new();
    for row in truth {
        let path = pred_dir.join(format!("{}.json", row.video_id));
        if !path.exists() {
            missing.push(row.video_id.clone());
            continue;
        }
        let pred: PredictionRecord = serde_json::from_slice(&fs::read(&path)?)?;
        records.push(EvalRecord {
            video_id: row.video_id.clone(),
            t_gt_s: row.t_gt_s,
            t_pred_s: if pred.valid { pred.t_refined_s } else { None },
            valid: pred.valid && pred.t_refined_s.is_some(),
            duration_s: row.duration_s,
            condition: row.condition.clone(),
            tiers_used: pred.tiers_used.clone(),
        });
    }
    if !missing.is_empty() {
        return Err(CoreError::contract(format!(
            "predictions missing for {} video(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(records)
}

fn eval_one(pred_dir: &Path, truth: &[TruthRow], strata: &Option<String>) -> Result<EvalReport> {
    let records = collect_records(pred_dir, truth)?;
    match strata {
        Some(key) => evalkit::stratify(&records, StratifyKey::parse(key)?),
        None => evalkit::report(&records),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let truth = read_truth_csv(&args.truth)?;
    if truth.is_empty() {
        return Err(CoreError::contract("ground truth has no rows"));
    }

    let mut output = String::new();
    let report_json: serde_json::Value;
    match args.seeds {
        None => {
            let report = eval_one(&args.predictions, &truth, &args.strata)?;
            output.push_str(&evalkit::render_table(&report, "evaluation"));
            if let Some(hist_path) = &args.hist {
                let records = collect_records(&args.predictions, &truth)?;
                let bins = evalkit::error_histogram(&records, 0.5, 10.0);
                let mut csv = String::from("bin_center_s,count\n");
                for (c, n) in bins {
                    csv.push_str(&format!("{c},{n}\n"));
                }
                fs::write(hist_path, csv)?;
            }
            report_json = serde_json::to_value(&report)?;
        }
        Some((lo, hi)) => {
            let template = args.predictions.to_string_lossy().to_string();
            if !template.contains("{seed}") {
                return Err(CoreError::contract(
                    "--seeds requires a predictions path containing {seed}",
                ));
            }
            let mut maes = Vec::new();
            let mut accs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut per_seed = BTreeMap::new();
            for seed in lo..=hi {
                let dir = PathBuf::from(template.replace("{seed}", &seed.to_string()));
                let report = eval_one(&dir, &truth, &args.strata)?;
                maes.push(report.mae_all_s);
                for (k, v) in &report.acc_at {
                    accs.entry(k.clone()).or_default().push(*v);
                }
                per_seed.insert(seed.to_string(), report);
            }
            let (mm, ms) = evalkit::mean_std(&maes);
            output.push_str(&format!("== evaluation over seeds {lo}..{hi} ==\n"));
            output.push_str(&format!("  mae_all: {mm:.4} ± {ms:.4} s\n"));
            for (k, vals) in &accs {
                let (am, asd) = evalkit::mean_std(vals);
                output.push_str(&format!(
                    "  acc@{k}: {:.1}% ± {:.1}%\n",
                    am * 100.0,
                    asd * 100.0
                ));
            }
            report_json = serde_json::json!({
                "seeds": per_seed,
                "mae_all_mean": mm,
                "mae_all_std": ms,
            });
        }
    }
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_vec_pretty(&report_json)?)?;
    }
    Ok(output)
}

// ── bench ───────────────────────────────────────────────────────────────

pub struct BenchArgs {
    pub out: Option<PathBuf>,
    pub t_values: Vec<usize>,
    pub n: usize,
    pub d: usize,
    pub reps: usize,
}

impl Default for BenchArgs {
    fn default() -> Self {
        BenchArgs {
            out: None,
            t_values: vec![1024, 2048, 4096, 8192],
            n: 64,
            d: 64,
            reps: 5,
        }
    }
}

/// Median wall-clock of the raw scan over `reps` warm repetitions.
pub fn time_scan(t_len: usize, n: usize, d: usize, reps: usize) -> f64 {
    use tloc_core::rng::Rng;
    let mut rng = Rng::stream(17, "bench");
    let mk = |len: usize, lo: f64, hi: f64, rng: &mut Rng| -> Vec<f64> {
        (0..len).map(|_| rng.range(lo, hi)).collect()
    };
    let abar = mk(t_len * n, 0.05, 0.95, &mut rng);
    let bbar = mk(t_len * n, -1.0, 1.0, &mut rng);
    let cseq = mk(t_len * n, -1.0, 1.0, &mut rng);
    let dskip = mk(d, -1.0, 1.0, &mut rng);
    let xp = mk(t_len * d, -1.0, 1.0, &mut rng);
    let res = vec![0.0; t_len * d];
    let h0 = vec![0.0; d * n];

    // Warm once, then take the median of timed repetitions.
    let run = || {
        let start = Instant::now();
        let (y, _, _) = tloc_core::tape::scan_core(
            &abar, &bbar, &cseq, &dskip, &xp, &res, &h0, t_len, n, d, false,
        );
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(y[0]);
        elapsed
    };
    run();
    let mut times: Vec<f64> = (0..reps).map(|_| run()).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    times[times.len() / 2]
}

pub fn cmd_bench(args: &BenchArgs) -> Result<String> {
    let mut rows: Vec<(String, String, f64)> = Vec::new();

    let mut prev: Option<(usize, f64)> = None;
    for &t in &args.t_values {
        let secs = time_scan(t, args.n, args.d, args.reps);
        rows.push(("scan_runtime".into(), format!("T{t}"), secs * 1e9));
        if let Some((pt, ps)) = prev {
            rows.push((
                "scan_ratio".into(),
                format!("T{t}/T{pt}"),
                secs / ps,
            ));
        }
        prev = Some((t, secs));
    }

    // Frame-budget table for the 15% MED / 3% HIGH profile at 1/5/30 FPS.
    let n_seg = 100;
    let mut v = vec![0.0; n_seg];
    for x in v.iter_mut().take(97).skip(82) {
        *x = 5.0;
    }
    for x in v.iter_mut().take(100).skip(97) {
        *x = 9.0;
    }
    let profile = tloc_core::sampler::MotionProfile {
        segment_length_s: 1.0,
        frame_v: v.clone(),
        v,
        alpha: 0.7,
    };
    let th = tloc_core::sampler::Thresholds {
        tau_med: 1.0,
        tau_high: 7.0,
        learned: false,
        degenerate: false,
    };
    let plan = tloc_core::sampler::build_plan_with(
        &profile,
        &th,
        n_seg as f64 / 60.0,
        TierRates::default(),
        false,
    );
    rows.push(("budget".into(), "planned_frames".into(), plan.planned_frames()));
    rows.push(("budget".into(), "uniform_frames".into(), n_seg as f64 * 30.0));
    rows.push(("budget".into(), "reduction_pct".into(), plan.reduction_pct));

    // Chunk invariance: split scan with carried state vs whole scan.
    let err = chunk_invariance_error(48, 8, 6);
    rows.push(("chunk_invariance".into(), "max_abs_err".into(), err));

    let mut csv = String::from("section,label,value\n");
    for (s, l, v) in &rows {
        csv.push_str(&format!("{s},{l},{v}\n"));
    }
    if let Some(path) = &args.out {
        fs::write(path, &csv)?;
    }
    Ok(csv)
}

/// Max abs deviation between one whole scan and the same scan split in two
/// with the carried state.
pub fn chunk_invariance_error(t_len: usize, n: usize, d: usize) -> f64 {
    use tloc_core::rng::Rng;
    use tloc_core::ssm::{SsmParams, SsmState};
    use tloc_core::tensor::Tensor;
    let mut rng = Rng::stream(23, "chunk");
    let params = SsmParams::init(n, d, 0.1, &mut rng).unwrap();
    let data: Vec<f64> = (0..t_len * d).map(|_| rng.normal()).collect();
    let x = Tensor::new(vec![t_len, d], data).unwrap();
    let zeros = Tensor::zeros(vec![t_len, d]);
    let (whole, _) = tloc_core::ssm::selective_scan(&x, &zeros, &params, &SsmState::zeros(d, n)).unwrap();

    let half = t_len / 2;
    let rows: Vec<Vec<f64>> = (0..t_len).map(|t| x.row_slice(t).to_vec()).collect();
    let xa = Tensor::from_rows(&rows[..half]).unwrap();
    let xb = Tensor::from_rows(&rows[half..]).unwrap();
    let za = Tensor::zeros(vec![half, d]);
    let zb = Tensor::zeros(vec![t_len - half, d]);
    let (ya, st) = tloc_core::ssm::selective_scan(&xa, &za, &params, &SsmState::zeros(d, n)).unwrap();
    let (yb, _) = tloc_core::ssm::selective_scan(&xb, &zb, &params, &st).unwrap();

    let mut err: f64 = 0.0;
    for t in 0..t_len {
        for c in 0..d {
            let split = if t < half { ya.at(t, c) } else { yb.at(t - half, c) };
            err = err.max((whole.at(t, c) - split).abs());
        }
    }
    err
}
