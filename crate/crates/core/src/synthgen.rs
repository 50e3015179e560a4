//! Deterministic synthetic corpus generator.
//!
//! Videos are 32×32 intensity grids: drifting traffic blobs over a static
//! road gradient. A crash injects an abrupt trajectory discontinuity plus a
//! transient localized intensity burst with debris over 1.5 s. Most crash
//! videos also carry a benign global flash at another time whose variance
//! spike rivals the crash — enough to fool a pure motion-variance argmax
//! detector, which is the floor the trained model has to beat. Clean videos
//! stay burst-free. Condition presets are noise models (night, rain, snow,
//! fog), not photorealism.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::{self, Dtype};
use crate::pipeline::FeatureSequence;
use crate::rng::{fnv1a64, Rng};
use crate::tensor::Tensor;

pub const FRAME_H: usize = 32;
pub const FRAME_W: usize = 32;
/// Crash burst length in seconds.
pub const CRASH_SIGNATURE_S: f64 = 1.5;
/// Global-flash amplitude relative to the crash burst; calibrated so the
/// flash's variance spike lands in the same range as the crash's.
const FLASH_SCALE: f64 = 0.032;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clear,
    Night,
    Rain,
    Snow,
    Fog,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Clear,
        Condition::Night,
        Condition::Rain,
        Condition::Snow,
        Condition::Fog,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Clear => "clear",
            Condition::Night => "night",
            Condition::Rain => "rain",
            Condition::Snow => "snow",
            Condition::Fog => "fog",
        }
    }

    pub fn parse(s: &str) -> Result<Condition> {
        match s {
            "clear" => Ok(Condition::Clear),
            "night" => Ok(Condition::Night),
            "rain" => Ok(Condition::Rain),
            "snow" => Ok(Condition::Snow),
            "fog" => Ok(Condition::Fog),
            other => Err(CoreError::contract(format!("unknown condition {other:?}"))),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub duration_s: f64,
    pub fps: f64,
    /// Absent for non-crash videos.
    pub crash_time_s: Option<f64>,
    pub condition: Condition,
    pub seed: u64,
}

impl ScenarioSpec {
    fn validate(&self) -> Result<()> {
        if self.duration_s <= 0.0 || self.fps <= 0.0 {
            return Err(CoreError::contract("scenario needs positive duration and fps"));
        }
        if let Some(tc) = self.crash_time_s {
            if !(tc > 0.0 && tc < self.duration_s) {
                return Err(CoreError::contract(format!(
                    "crash_time_s {tc} outside (0, {})",
                    self.duration_s
                )));
            }
        }
        Ok(())
    }
}

/// Raw intensity frames, row-major h×w in [0, 1].
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub frames: Vec<Vec<f64>>,
    pub h: usize,
    pub w: usize,
    pub fps: f64,
}

impl FrameSequence {
    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.frames.len()).map(|i| i as f64 / self.fps).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub crash_time_s: Option<f64>,
    pub duration_s: f64,
    pub condition: Condition,
    /// Benign high-motion event injected to make the variance argmax an
    /// imperfect detector; crash videos only.
    pub distractor_time_s: Option<f64>,
}

struct Blob {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    amp: f64,
    sigma: f64,
}

fn add_blob(frame: &mut [f64], x: f64, y: f64, amp: f64, sigma: f64) {
    blob_op(frame, x, y, amp, sigma, false)
}

/// Opaque compositing for traffic blobs: crossings occlude rather than sum,
/// so the crash burst stays the only additive transient in a video.
fn max_blob(frame: &mut [f64], x: f64, y: f64, amp: f64, sigma: f64, base: &[f64]) {
    let r = (3.0 * sigma).ceil() as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for py in (cy - r).max(0)..=(cy + r).min(FRAME_H as i64 - 1) {
        for px in (cx - r).max(0)..=(cx + r).min(FRAME_W as i64 - 1) {
            let dx = px as f64 - x;
            let dy = py as f64 - y;
            let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let idx = py as usize * FRAME_W + px as usize;
            frame[idx] = frame[idx].max(base[idx] + amp * g);
        }
    }
}

fn blob_op(frame: &mut [f64], x: f64, y: f64, amp: f64, sigma: f64, _max: bool) {
    let r = (3.0 * sigma).ceil() as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for py in (cy - r).max(0)..=(cy + r).min(FRAME_H as i64 - 1) {
        for px in (cx - r).max(0)..=(cx + r).min(FRAME_W as i64 - 1) {
            let dx = px as f64 - x;
            let dy = py as f64 - y;
            let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            frame[py as usize * FRAME_W + px as usize] += amp * g;
        }
    }
}

fn box_blur(frame: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; frame.len()];
    for y in 0..FRAME_H {
        for x in 0..FRAME_W {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && yy < FRAME_H as i64 && xx >= 0 && xx < FRAME_W as i64 {
                        acc += frame[yy as usize * FRAME_W + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * FRAME_W + x] = acc / n;
        }
    }
    out
}

/// Render one synthetic video. Deterministic per spec (same seed → identical
/// frames, bit for bit).
pub fn generate(spec: &ScenarioSpec) -> Result<(FrameSequence, GroundTruth)> {
    spec.validate()?;
    let mut rng = Rng::stream(spec.seed, "video");
    let n_frames = (spec.duration_s * spec.fps).round() as usize;
    let dt = 1.0 / spec.fps;

    let mut blobs: Vec<Blob> = (0..3)
        .map(|_| {
            let ang = rng.range(0.0, std::f64::consts::TAU);
            let speed = rng.range(1.0, 3.5);
            Blob {
                x: rng.range(4.0, FRAME_W as f64 - 4.0),
                y: rng.range(4.0, FRAME_H as f64 - 4.0),
                vx: speed * ang.cos(),
                vy: speed * ang.sin(),
                amp: rng.range(0.18, 0.32),
                sigma: rng.range(1.6, 2.6),
            }
        })
        .collect();

    // Crash placement and its signature.
    let crash = spec.crash_time_s;
    let crash_pos = (rng.range(8.0, FRAME_W as f64 - 8.0), rng.range(8.0, FRAME_H as f64 - 8.0));
    let crash_amp = 0.55 * rng.range(0.8, 1.2);
    let debris: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| {
            let ang = rng.range(0.0, std::f64::consts::TAU);
            let speed = rng.range(3.0, 9.0);
            (crash_pos.0, crash_pos.1, speed * ang.cos(), speed * ang.sin())
        })
        .collect();
    // Post-crash trajectory discontinuity: new velocities applied at t_c.
    let scatter: Vec<(f64, f64)> = (0..blobs.len())
        .map(|_| {
            let ang = rng.range(0.0, std::f64::consts::TAU);
            let speed = rng.range(1.0, 9.0);
            (speed * ang.cos(), speed * ang.sin())
        })
        .collect();

    // Benign flash distractor: crash videos only, away from the crash. Its
    // amplitude is calibrated so its motion-variance spike straddles the
    // crash's own — an argmax on v_t picks the wrong event on a fraction
    // of videos, which is exactly the ambiguity the model must resolve.
    let distractor = if crash.is_some() && rng.uniform() < 0.6 {
        let tc = crash.unwrap();
        let mut td = rng.range(3.0, (spec.duration_s - 3.0).max(3.1));
        let mut guard = 0;
        while (td - tc).abs() < 10.0 && guard < 64 {
            td = rng.range(3.0, (spec.duration_s - 3.0).max(3.1));
            guard += 1;
        }
        if (td - tc).abs() < 10.0 {
            None
        } else {
            let ratio = (rng.range((0.5f64).ln(), (2.0f64).ln())).exp();
            Some((td, crash_amp * FLASH_SCALE * ratio))
        }
    } else {
        None
    };
    let mut jitter_rng = Rng::stream(spec.seed, "crash-jitter");

    // Condition noise streams must not perturb the shared draws above.
    let mut noise_rng = Rng::stream(spec.seed, "condition-noise");

    let mut frames = Vec::with_capacity(n_frames);
    let mut scattered = false;
    for fi in 0..n_frames {
        let t = fi as f64 * dt;
        if let Some(tc) = crash {
            if !scattered && t >= tc {
                for (b, &(vx, vy)) in blobs.iter_mut().zip(&scatter) {
                    b.vx = vx;
                    b.vy = vy;
                }
                scattered = true;
            }
        }

        let mut frame = vec![0.0; FRAME_H * FRAME_W];
        for y in 0..FRAME_H {
            let road = 0.30 + 0.08 * (y as f64 / FRAME_H as f64);
            for x in 0..FRAME_W {
                frame[y * FRAME_W + x] = road;
            }
        }
        for b in &blobs {
            add_blob(&mut frame, b.x, b.y, b.amp, b.sigma);
        }

        if let Some(tc) = crash {
            let rel = t - tc;
            if (0.0..CRASH_SIGNATURE_S).contains(&rel) {
                // Fast attack, exponential decay, with a flicker that keeps
                // the frame-to-frame signal alive through the burst.
                let decay = if rel < 0.2 { rel / 0.2 } else { (-(rel - 0.2) / 0.6).exp() };
                let env = decay * (0.8 + 0.2 * (std::f64::consts::TAU * 4.0 * rel).cos());
                add_blob(&mut frame, crash_pos.0, crash_pos.1, crash_amp * env, 2.0);
                if rel < 1.2 {
                    for &(x0, y0, vx, vy) in &debris {
                        let jx = jitter_rng.range(-0.7, 0.7);
                        let jy = jitter_rng.range(-0.7, 0.7);
                        add_blob(
                            &mut frame,
                            x0 + vx * rel + jx,
                            y0 + vy * rel + jy,
                            0.30 * decay,
                            0.8,
                        );
                    }
                }
            }
        }

        if let Some((td, amp)) = distractor {
            let rel = t - td;
            if (0.0..0.4).contains(&rel) {
                let env = (std::f64::consts::PI * rel / 0.4).sin();
                for p in frame.iter_mut() {
                    *p += amp * env;
                }
            }
        }

        apply_condition(&mut frame, spec.condition, &mut noise_rng);
        for p in frame.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
        frames.push(frame);

        for b in blobs.iter_mut() {
            b.x += b.vx * dt;
            b.y += b.vy * dt;
            // Blobs drift through an extended domain and wrap outside the
            // visible frame, so they exit and re-enter smoothly; no abrupt
            // trajectory changes exist in normal traffic.
            let margin = 10.0;
            let (w, h) = (FRAME_W as f64, FRAME_H as f64);
            if b.x < -margin {
                b.x += w + 2.0 * margin;
            } else if b.x > w + margin {
                b.x -= w + 2.0 * margin;
            }
            if b.y < -margin {
                b.y += h + 2.0 * margin;
            } else if b.y > h + margin {
                b.y -= h + 2.0 * margin;
            }
        }
    }

    Ok((
        FrameSequence { frames, h: FRAME_H, w: FRAME_W, fps: spec.fps },
        GroundTruth {
            crash_time_s: crash,
            duration_s: spec.duration_s,
            condition: spec.condition,
            distractor_time_s: distractor.map(|(td, _)| td),
        },
    ))
}

fn apply_condition(frame: &mut [f64], condition: Condition, rng: &mut Rng) {
    match condition {
        Condition::Clear => {}
        Condition::Night => {
            for p in frame.iter_mut() {
                *p = *p * 0.45 + 0.03 * rng.normal();
            }
        }
        Condition::Rain => {
            for p in frame.iter_mut() {
                *p += 0.02 * rng.normal();
            }
        }
        Condition::Snow => {
            for p in frame.iter_mut() {
                *p += 0.012 * rng.normal();
                if rng.uniform() < 0.002 {
                    *p += 0.5;
                }
            }
        }
        Condition::Fog => {
            let blurred = box_blur(&box_blur(frame));
            for (p, b) in frame.iter_mut().zip(blurred) {
                *p = 0.5 + (b - 0.5) * 0.55 + 0.01 * rng.normal();
            }
        }
    }
}

// ── feature extraction ──────────────────────────────────────────────────

/// Boundary standing in for the external vision encoder: same frames must
/// produce the same features, outputs finite.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, frames: &FrameSequence) -> Result<FeatureSequence>;
}

/// 8×8 average-pooled intensities (64), temporal-gradient statistics (5),
/// and a motion-variance hint (1): d = 70.
pub struct DefaultExtractor;

pub const DEFAULT_FEATURE_DIM: usize = 70;

impl FeatureExtractor for DefaultExtractor {
    fn name(&self) -> &str {
        "pooled-intensity-v1"
    }

    fn dim(&self) -> usize {
        DEFAULT_FEATURE_DIM
    }

    fn extract(&self, frames: &FrameSequence) -> Result<FeatureSequence> {
        default_extractor(frames)
    }
}

/// See [`DefaultExtractor`].
pub fn default_extractor(frames: &FrameSequence) -> Result<FeatureSequence> {
    if frames.frames.is_empty() {
        return Err(CoreError::EmptySequence("default_extractor: no frames".into()));
    }
    let px = frames.h * frames.w;
    if frames.frames.iter().any(|f| f.len() != px) {
        return Err(CoreError::dim("default_extractor: frames differ in size"));
    }
    let n = frames.frames.len();
    let (ph, pw) = (frames.h / 8, frames.w / 8);
    let mut data = Vec::with_capacity(n * DEFAULT_FEATURE_DIM);
    for fi in 0..n {
        let f = &frames.frames[fi];
        // 8×8 pooled grid.
        for gy in 0..8 {
            for gx in 0..8 {
                let mut acc = 0.0;
                for y in gy * ph..(gy + 1) * ph {
                    for x in gx * pw..(gx + 1) * pw {
                        acc += f[y * frames.w + x];
                    }
                }
                data.push(acc / (ph * pw) as f64);
            }
        }
        // Temporal gradient statistics against the previous frame.
        if fi == 0 {
            data.extend_from_slice(&[0.0; 6]);
        } else {
            let prev = &frames.frames[fi - 1];
            let mut sum_abs = 0.0;
            let mut max_abs: f64 = 0.0;
            let mut sum_sq = 0.0;
            let mut sum_pos = 0.0;
            let mut sum_neg = 0.0;
            for (a, b) in prev.iter().zip(f) {
                let d = b - a;
                sum_abs += d.abs();
                max_abs = max_abs.max(d.abs());
                sum_sq += d * d;
                if d > 0.0 {
                    sum_pos += d;
                } else {
                    sum_neg += -d;
                }
            }
            let m = px as f64;
            let mean_abs = sum_abs / m;
            data.extend_from_slice(&[
                mean_abs,
                max_abs,
                (sum_sq / m).sqrt(),
                sum_pos / m,
                sum_neg / m,
                mean_abs, // motion-variance hint: the flow-surrogate value
            ]);
        }
    }
    let feats = Tensor::new(vec![n, DEFAULT_FEATURE_DIM], data)?;
    FeatureSequence::new(
        frames.timestamps(),
        feats,
        frames.fps,
        n as f64 / frames.fps,
    )
}

// ── corpus ──────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub split: Split,
    pub condition: Condition,
    pub duration_s: f64,
    pub fps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crash_time_s: Option<f64>,
    pub frames_file: String,
    pub sidecar_file: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub seed: u64,
    pub duration_s: f64,
    pub fps: f64,
    pub n_videos: usize,
    pub content_hash: String,
    pub videos: Vec<VideoRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoSidecar {
    pub id: String,
    pub spec: ScenarioSpec,
    pub ground_truth: GroundTruth,
}

#[derive(Clone, Copy, Debug)]
pub struct CorpusConfig {
    pub n_crash: usize,
    pub n_clean: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub fps: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { n_crash: 50, n_clean: 10, seed: 1, duration_s: 120.0, fps: 10.0 }
    }
}

const CONDITION_CYCLE: [Condition; 8] = [
    Condition::Clear,
    Condition::Night,
    Condition::Rain,
    Condition::Clear,
    Condition::Snow,
    Condition::Clear,
    Condition::Fog,
    Condition::Clear,
];

/// Specs for one corpus: crash times uniform over the video interior,
/// conditions cycling through the presets, per-video seeds derived from the
/// corpus seed.
pub fn corpus_specs(cfg: &CorpusConfig) -> Vec<(String, ScenarioSpec)> {
    let mut rng = Rng::stream(cfg.seed, "corpus");
    let mut out = Vec::with_capacity(cfg.n_crash + cfg.n_clean);
    for i in 0..cfg.n_crash {
        let id = format!("crash_{i:04}");
        let crash_time = rng.range(3.0, cfg.duration_s - 3.0);
        let seed = Rng::stream(cfg.seed, &id).next_u64();
        out.push((
            id,
            ScenarioSpec {
                duration_s: cfg.duration_s,
                fps: cfg.fps,
                crash_time_s: Some(crash_time),
                condition: CONDITION_CYCLE[i % CONDITION_CYCLE.len()],
                seed,
            },
        ));
    }
    for i in 0..cfg.n_clean {
        let id = format!("clean_{i:04}");
        let seed = Rng::stream(cfg.seed, &id).next_u64();
        out.push((
            id,
            ScenarioSpec {
                duration_s: cfg.duration_s,
                fps: cfg.fps,
                crash_time_s: None,
                condition: CONDITION_CYCLE[i % CONDITION_CYCLE.len()],
                seed,
            },
        ));
    }
    out
}

/// 80/20 split per class, stratified by condition: videos of one class are
/// ordered by condition and every fifth goes to test.
fn assign_splits(specs: &[(String, ScenarioSpec)]) -> Vec<Split> {
    let mut splits = vec![Split::Train; specs.len()];
    for class_is_crash in [true, false] {
        let mut members: Vec<usize> = specs
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| s.crash_time_s.is_some() == class_is_crash)
            .map(|(i, _)| i)
            .collect();
        members.sort_by_key(|&i| (specs[i].1.condition, i));
        for (rank, &i) in members.iter().enumerate() {
            if rank % 5 == 2 {
                splits[i] = Split::Test;
            }
        }
    }
    splits
}

/// Generate and persist a corpus: TLT1 frame tensors (f32), JSON sidecars,
/// and a manifest with a reproducible content hash.
pub fn build_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<CorpusManifest> {
    if cfg.n_crash + cfg.n_clean == 0 {
        return Err(CoreError::contract("build_corpus: empty corpus"));
    }
    fs::create_dir_all(dir.join("videos"))?;
    let specs = corpus_specs(cfg);
    let splits = assign_splits(&specs);

    let results: Vec<Result<(VideoRecord, u64)>> = crate::par::map_indices(specs.len(), |i| {
        let (id, spec) = &specs[i];
        let (frames, gt) = generate(spec)?;
        let n = frames.frames.len();
        let mut flat = Vec::with_capacity(n * FRAME_H * FRAME_W);
        for f in &frames.frames {
            flat.extend_from_slice(f);
        }
        let tensor = Tensor::new(vec![n, FRAME_H, FRAME_W], flat)?;
        let bytes = io::tensor_to_bytes(&tensor, Dtype::F32)?;
        let frames_file = format!("videos/{id}.tlt");
        let sidecar_file = format!("videos/{id}.json");
        let sidecar = VideoSidecar { id: id.clone(), spec: spec.clone(), ground_truth: gt };
        let sidecar_bytes = serde_json::to_vec_pretty(&sidecar)?;
        fs::write(dir.join(&frames_file), &bytes)?;
        fs::write(dir.join(&sidecar_file), &sidecar_bytes)?;
        let mut h = fnv1a64(&bytes);
        h ^= fnv1a64(&sidecar_bytes).rotate_left(17);
        Ok((
            VideoRecord {
                id: id.clone(),
                split: splits[i],
                condition: spec.condition,
                duration_s: spec.duration_s,
                fps: spec.fps,
                crash_time_s: spec.crash_time_s,
                frames_file,
                sidecar_file,
                seed: spec.seed,
            },
            h,
        ))
    });

    let mut videos = Vec::with_capacity(results.len());
    let mut hash_bytes: Vec<u8> = Vec::new();
    for r in results {
        let (rec, h) = r?;
        hash_bytes.extend_from_slice(&h.to_le_bytes());
        videos.push(rec);
    }
    let manifest = CorpusManifest {
        format: "tloc-corpus-v1".into(),
        seed: cfg.seed,
        duration_s: cfg.duration_s,
        fps: cfg.fps,
        n_videos: videos.len(),
        content_hash: format!("{:016x}", fnv1a64(&hash_bytes)),
        videos,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// One corpus video with features extracted, the motion profile computed,
/// and per-frame motion scores attached to the sequence.
pub struct LoadedVideo {
    pub record: VideoRecord,
    pub features: FeatureSequence,
    pub profile: crate::sampler::MotionProfile,
}

/// Frames → default extractor → flow surrogate → motion profile.
pub fn load_video_features(dir: &Path, rec: &VideoRecord, alpha: f64) -> Result<LoadedVideo> {
    let frames = load_frames(dir, rec)?;
    let features = default_extractor(&frames)?;
    let flow = crate::sampler::flow_surrogate(&frames)?;
    let profile = crate::sampler::motion_variance(&features, &flow, alpha)?;
    let features = features.with_motion(profile.frame_v.clone())?;
    Ok(LoadedVideo { record: rec.clone(), features, profile })
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(CoreError::Format(format!(
            "no corpus manifest at {}",
            path.display()
        )));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn frames_path(dir: &Path, rec: &VideoRecord) -> PathBuf {
    dir.join(&rec.frames_file)
}

/// Load one video's frames back from disk.
pub fn load_frames(dir: &Path, rec: &VideoRecord) -> Result<FrameSequence> {
    let t = io::read_tensor(&frames_path(dir, rec))?;
    let sh = t.shape().to_vec();
    if sh.len() != 3 {
        return Err(CoreError::Format(format!("expected [T,h,w] frames, got {sh:?}")));
    }
    let (n, h, w) = (sh[0], sh[1], sh[2]);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        frames.push(t.data()[i * h * w..(i + 1) * h * w].to_vec());
    }
    Ok(FrameSequence { frames, h, w, fps: rec.fps })
}
