//! Synthetic multi-label behavior dataset.
//!
//! Long recordings are built from a seeded signal model: each class owns a
//! fixed unit-norm feature direction and a frequency, and active classes add
//! an amplitude-modulated sinusoid of that direction on top of Gaussian
//! noise. Episodes arrive as a Poisson process and are tiled with labeled
//! action segments; everything outside an episode is the background class.
//! Recordings are then windowed into overlapping fixed-length clips with
//! the same chunked feature geometry a video backbone would produce.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::SegmentAnnotation;
use crate::tensor::Tensor;

/// The default label set; index 0 is the background class.
pub const DEFAULT_LABELS: [&str; 14] = [
    "Normal",
    "Head Nodding",
    "Staring",
    "Neck Jerk",
    "Mouth Clonus",
    "Unilateral Forelimb Clonus",
    "Wet-Dog Shake",
    "Bilateral Forelimb Clonus",
    "Rearing",
    "Alternating Forelimb Clonus",
    "Jumping",
    "Falling",
    "Tonic Extension",
    "Wild Running",
];

pub fn default_label_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| {
            DEFAULT_LABELS
                .get(c)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class-{c}"))
        })
        .collect()
}

/// Stable cross-platform seed derivation for independent RNG streams.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub feature_file: String,
    pub t: usize,
    pub d: usize,
    pub duration_s: f64,
    pub split: Split,
    pub augmented: bool,
    /// Index of the source recording; splits never cut across recordings.
    pub recording: usize,
    pub annotations: Vec<SegmentAnnotation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub label_names: Vec<String>,
    pub fps: usize,
    pub frames_per_clip: usize,
    pub feature_chunk: usize,
    pub feature_stride: usize,
    pub clips: Vec<ClipRecord>,
}

impl DatasetManifest {
    /// Seconds spanned by one feature row.
    pub fn delta_base_s(&self) -> f64 {
        self.feature_stride as f64 / self.fps as f64
    }

    pub fn clip_duration_s(&self) -> f64 {
        self.frames_per_clip as f64 / self.fps as f64
    }

    /// Rows per clip: floor((frames - chunk) / stride) + 1.
    pub fn rows_per_clip(&self) -> usize {
        (self.frames_per_clip - self.feature_chunk) / self.feature_stride + 1
    }

    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn validate(&self, root: Option<&Path>) -> Result<()> {
        if self.label_names.is_empty() {
            return Err(Error::Data("empty label set".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for clip in &self.clips {
            if !seen.insert(&clip.clip_id) {
                return Err(Error::Data(format!("duplicate clip_id {}", clip.clip_id)));
            }
            let mut by_label: HashMap<usize, Vec<(f64, f64)>> = HashMap::new();
            for a in &clip.annotations {
                if a.end_s <= a.start_s || a.start_s < 0.0 || a.end_s > clip.duration_s + 1e-9 {
                    return Err(Error::Data(format!(
                        "clip {}: bad segment [{}, {}] (duration {})",
                        clip.clip_id, a.start_s, a.end_s, clip.duration_s
                    )));
                }
                if a.label >= self.label_names.len() {
                    return Err(Error::Data(format!(
                        "clip {}: label {} out of range",
                        clip.clip_id, a.label
                    )));
                }
                by_label.entry(a.label).or_default().push((a.start_s, a.end_s));
            }
            for (label, mut spans) in by_label {
                spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
                for w in spans.windows(2) {
                    if w[1].0 < w[0].1 - 1e-9 {
                        return Err(Error::Data(format!(
                            "clip {}: overlapping segments for label {label}",
                            clip.clip_id
                        )));
                    }
                }
            }
            if let Some(root) = root {
                let path = root.join(&clip.feature_file);
                let meta = fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
                let expected = (clip.t * clip.d * 4) as u64;
                if meta.len() != expected {
                    return Err(Error::Data(format!(
                        "clip {}: feature file holds {} bytes, expected {}",
                        clip.clip_id,
                        meta.len(),
                        expected
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_recordings: usize,
    pub recording_length_s: f64,
    /// Mean episode arrivals per minute.
    pub episode_rate_per_min: f64,
    /// Episode duration range [min, max) in seconds; the floor is the
    /// minimum duration that counts as an episode.
    pub episode_duration_s: [f64; 2],
    /// Action-unit duration range inside an episode.
    pub au_duration_s: [f64; 2],
    /// Probability that a segment gets a second concurrent label.
    pub concurrency_prob: f64,
    pub noise_sigma: f64,
    /// Fraction of clips duplicated with feature-space perturbation.
    pub aug_fraction: f64,
    /// Moving-average width (rows) of the temporal blur.
    pub aug_blur_width: usize,
    /// Amplitude attenuation factor of augmented features.
    pub aug_attenuation: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_classes: 14,
            feature_dim: 32,
            num_recordings: 10,
            recording_length_s: 120.0,
            episode_rate_per_min: 3.0,
            episode_duration_s: [5.0, 12.0],
            au_duration_s: [1.0, 8.0],
            concurrency_prob: 0.2,
            noise_sigma: 0.1,
            aug_fraction: 0.2,
            aug_blur_width: 5,
            aug_attenuation: 0.7,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least background + one class".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        for (name, r) in [
            ("episode_duration_s", self.episode_duration_s),
            ("au_duration_s", self.au_duration_s),
        ] {
            if !(r[0] > 0.0 && r[1] >= r[0]) {
                return Err(Error::Config(format!("{name} range {r:?} must be positive and ordered")));
            }
        }
        if self.recording_length_s < self.episode_duration_s[0] {
            return Err(Error::Config(format!(
                "recording of {} s is too short for one episode (>= {} s)",
                self.recording_length_s, self.episode_duration_s[0]
            )));
        }
        if !(0.0..=1.0).contains(&self.concurrency_prob)
            || !(0.0..=1.0).contains(&self.aug_fraction)
        {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.aug_blur_width == 0 || self.aug_blur_width % 2 == 0 {
            return Err(Error::Config("aug_blur_width must be odd".into()));
        }
        Ok(())
    }
}

/// Per-class feature signature: fixed unit-norm direction and frequency.
#[derive(Clone, Debug)]
pub struct SignalModel {
    pub directions: Vec<Vec<f64>>,
    pub freqs_hz: Vec<f64>,
    pub noise_sigma: f64,
}

impl SignalModel {
    pub fn from_seed(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "signal-model", 0));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let directions = (0..cfg.num_classes)
            .map(|_| {
                let mut v: Vec<f64> =
                    (0..cfg.feature_dim).map(|_| normal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in v.iter_mut() {
                    *x /= norm;
                }
                v
            })
            .collect();
        let freqs_hz = (0..cfg.num_classes)
            .map(|_| rng.gen_range(0.5..3.0))
            .collect();
        SignalModel {
            directions,
            freqs_hz,
            noise_sigma: cfg.noise_sigma,
        }
    }

    /// Feature vector at absolute time `t_s` with the given active classes:
    /// noise + sum over active c of u_c * (1 + 0.5 sin(2 pi f_c t)).
    pub fn sample(&self, t_s: f64, active: &[usize], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let d = self.directions[0].len();
        let mut row = vec![0.0f64; d];
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma > 0");
            for x in row.iter_mut() {
                *x = normal.sample(rng);
            }
        }
        for &c in active {
            let amp = 1.0 + 0.5 * (2.0 * std::f64::consts::PI * self.freqs_hz[c] * t_s).sin();
            for (x, u) in row.iter_mut().zip(&self.directions[c]) {
                *x += amp * u;
            }
        }
        row.into_iter().map(|x| x as f32).collect()
    }
}

/// One generated recording: features on the chunk-center grid plus
/// annotations in recording time, and the signal model that produced them.
#[derive(Clone, Debug)]
pub struct Recording {
    pub index: usize,
    pub length_s: f64,
    pub features: Tensor<f32>,
    pub annotations: Vec<SegmentAnnotation>,
    pub signal: SignalModel,
    seed: u64,
}

pub const FPS: usize = 30;
pub const FRAMES_PER_CLIP: usize = 300;
pub const FEATURE_CHUNK: usize = 16;
pub const FEATURE_STRIDE: usize = 4;
pub const CLIP_SECONDS: f64 = 10.0;
pub const STRIDE_SECONDS: f64 = 5.0;
/// Windowed annotation fragments shorter than this are dropped.
pub const FRAGMENT_FLOOR_S: f64 = 0.5;

fn chunk_center_s(frame_offset: usize, row: usize) -> f64 {
    (frame_offset + FEATURE_STRIDE * row + FEATURE_CHUNK / 2) as f64 / FPS as f64
}

fn active_labels(annotations: &[SegmentAnnotation], t_s: f64) -> Vec<usize> {
    let mut active: Vec<usize> = annotations
        .iter()
        .filter(|a| a.start_s <= t_s && t_s < a.end_s)
        .map(|a| a.label)
        .collect();
    active.sort_unstable();
    active.dedup();
    active
}

/// Samples episodes and labels for one recording, then realizes features on
/// the chunked grid.
pub fn generate_recording(cfg: &GeneratorConfig, index: usize) -> Result<Recording> {
    cfg.validate()?;
    let signal = SignalModel::from_seed(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "recording", index as u64));

    // episode arrivals: exponential gaps at the configured rate
    let rate_per_s = cfg.episode_rate_per_min / 60.0;
    let gap_dist = Exp::new(rate_per_s).map_err(|_| Error::Config("episode rate must be positive".into()))?;
    let mut episodes: Vec<(f64, f64)> = Vec::new();
    let mut t = 0.0f64;
    loop {
        t += gap_dist.sample(&mut rng);
        let dur = rng.gen_range(cfg.episode_duration_s[0]..cfg.episode_duration_s[1]);
        if t + dur > cfg.recording_length_s {
            break;
        }
        episodes.push((t, t + dur));
        t += dur;
    }

    // tile each episode with action segments, occasionally stacking a
    // concurrent second label over a segment
    let mut annotations: Vec<SegmentAnnotation> = Vec::new();
    for &(es, ee) in &episodes {
        let mut cursor = es;
        let mut prev_label: Option<usize> = None;
        while cursor < ee - 1e-9 {
            let mut dur = rng.gen_range(cfg.au_duration_s[0]..cfg.au_duration_s[1]);
            if cursor + dur > ee || ee - (cursor + dur) < 0.25 {
                dur = ee - cursor;
            }
            let label = loop {
                let l = rng.gen_range(1..cfg.num_classes);
                if Some(l) != prev_label || cfg.num_classes == 2 {
                    break l;
                }
            };
            annotations.push(SegmentAnnotation {
                label,
                start_s: cursor,
                end_s: cursor + dur,
            });
            if cfg.num_classes > 2 && rng.gen::<f64>() < cfg.concurrency_prob {
                let overlay = loop {
                    let l = rng.gen_range(1..cfg.num_classes);
                    if l != label {
                        break l;
                    }
                };
                annotations.push(SegmentAnnotation {
                    label: overlay,
                    start_s: cursor,
                    end_s: cursor + dur,
                });
            }
            prev_label = Some(label);
            cursor += dur;
        }
    }

    // background between episodes
    let mut bg_start = 0.0f64;
    for &(es, ee) in &episodes {
        if es > bg_start + 1e-9 {
            annotations.push(SegmentAnnotation {
                label: 0,
                start_s: bg_start,
                end_s: es,
            });
        }
        bg_start = ee;
    }
    if cfg.recording_length_s > bg_start + 1e-9 {
        annotations.push(SegmentAnnotation {
            label: 0,
            start_s: bg_start,
            end_s: cfg.recording_length_s,
        });
    }
    annotations.sort_by(|a, b| {
        (a.start_s, a.end_s, a.label)
            .partial_cmp(&(b.start_s, b.end_s, b.label))
            .unwrap()
    });

    // realize the feature grid
    let frames = (cfg.recording_length_s * FPS as f64).round() as usize;
    if frames < FEATURE_CHUNK {
        return Err(Error::Config("recording shorter than one feature chunk".into()));
    }
    let rows = (frames - FEATURE_CHUNK) / FEATURE_STRIDE + 1;
    let mut noise_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "recording-noise", index as u64));
    let mut data = Vec::with_capacity(rows * cfg.feature_dim);
    for m in 0..rows {
        let t_s = chunk_center_s(0, m);
        let active = active_labels(&annotations, t_s);
        data.extend(signal.sample(t_s, &active, &mut noise_rng));
    }
    Ok(Recording {
        index,
        length_s: cfg.recording_length_s,
        features: Tensor::new(vec![rows, cfg.feature_dim], data)?,
        annotations,
        signal,
        seed: cfg.seed,
    })
}

/// A windowed clip before split assignment.
#[derive(Clone, Debug)]
pub struct WindowedClip {
    pub recording: usize,
    pub offset_s: f64,
    pub features: Tensor<f32>,
    pub annotations: Vec<SegmentAnnotation>,
}

/// Cuts a recording into overlapping clips.
///
/// Clips start at multiples of the stride; each carries `rows_per_clip`
/// feature rows sampled at the exact chunk centers of its frame window, and
/// its annotations re-based to clip-local time with sub-floor fragments
/// dropped.
pub fn window_clips(recording: &Recording) -> Result<Vec<WindowedClip>> {
    if recording.length_s < CLIP_SECONDS {
        return Err(Error::Data(format!(
            "recording of {} s is shorter than one {CLIP_SECONDS} s clip",
            recording.length_s
        )));
    }
    let rows = (FRAMES_PER_CLIP - FEATURE_CHUNK) / FEATURE_STRIDE + 1;
    let d = recording.features.shape()[1];
    let mut clips = Vec::new();
    let mut clip_index = 0usize;
    let mut offset = 0.0f64;
    while offset + CLIP_SECONDS <= recording.length_s + 1e-9 {
        let frame_offset = (offset * FPS as f64).round() as usize;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            recording.seed,
            "clip-noise",
            (recording.index as u64) << 32 | clip_index as u64,
        ));
        let mut data = Vec::with_capacity(rows * d);
        for j in 0..rows {
            let t_abs = chunk_center_s(frame_offset, j);
            let active = active_labels(&recording.annotations, t_abs);
            data.extend(recording.signal.sample(t_abs, &active, &mut noise_rng));
        }
        let mut annotations = Vec::new();
        for a in &recording.annotations {
            let s = a.start_s.max(offset) - offset;
            let e = a.end_s.min(offset + CLIP_SECONDS) - offset;
            if e - s >= FRAGMENT_FLOOR_S {
                annotations.push(SegmentAnnotation {
                    label: a.label,
                    start_s: s,
                    end_s: e,
                });
            }
        }
        clips.push(WindowedClip {
            recording: recording.index,
            offset_s: offset,
            features: Tensor::new(vec![rows, d], data)?,
            annotations,
        });
        offset += STRIDE_SECONDS;
        clip_index += 1;
    }
    Ok(clips)
}

/// A clip with its final identity and feature payload.
pub struct BuiltClip {
    pub record: ClipRecord,
    pub features: Tensor<f32>,
}

/// Temporal moving-average blur plus amplitude attenuation; the surrogate
/// for appearance augmentation, applied in feature space.
fn augment_features(features: &Tensor<f32>, blur_width: usize, attenuation: f64) -> Tensor<f32> {
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let half = blur_width / 2;
    let mut out = Tensor::zeros(&[t, d]);
    for i in 0..t {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(t - 1);
        let n = (hi - lo + 1) as f32;
        for c in 0..d {
            let mut acc = 0.0f32;
            for j in lo..=hi {
                acc += features.at2(j, c);
            }
            out.row_mut(i)[c] = acc / n * attenuation as f32;
        }
    }
    out
}

/// Assigns recordings to train/test near the target ratio and duplicates a
/// fraction of clips with feature-space augmentation.
pub fn split_and_augment(
    clips_by_recording: &[Vec<WindowedClip>],
    cfg: &GeneratorConfig,
) -> Result<Vec<BuiltClip>> {
    if clips_by_recording.len() < 2 {
        return Err(Error::Data(
            "need clips from at least 2 recordings to split".into(),
        ));
    }
    // decide augmentation up front so the split optimizes final clip counts
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "augment", 0));
    let aug_flags: Vec<Vec<bool>> = clips_by_recording
        .iter()
        .map(|clips| {
            clips
                .iter()
                .map(|_| aug_rng.gen::<f64>() < cfg.aug_fraction)
                .collect()
        })
        .collect();
    let weight = |r: usize| -> usize {
        clips_by_recording[r].len() + aug_flags[r].iter().filter(|&&f| f).count()
    };
    let total: usize = (0..clips_by_recording.len()).map(weight).sum();
    let target_train = 0.65 * total as f64;

    let mut order: Vec<usize> = (0..clips_by_recording.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split", 0));
    for i in (1..order.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut split_of = vec![Split::Test; clips_by_recording.len()];
    let mut train_count = 0usize;
    for &r in &order {
        let n = weight(r);
        let with = (train_count + n) as f64;
        let without = train_count as f64;
        if (with - target_train).abs() < (without - target_train).abs() {
            split_of[r] = Split::Train;
            train_count += n;
        }
    }
    // repair pass: flip single recordings while it tightens the ratio,
    // keeping both sides populated
    loop {
        let mut best: Option<(usize, f64)> = None;
        let current = (train_count as f64 - target_train).abs();
        for r in 0..split_of.len() {
            let n = weight(r);
            let candidate = match split_of[r] {
                Split::Train => {
                    if train_count == n {
                        continue; // would empty the train side
                    }
                    (train_count - n) as f64
                }
                Split::Test => {
                    if train_count + n == total {
                        continue;
                    }
                    (train_count + n) as f64
                }
            };
            let err = (candidate - target_train).abs();
            if err < current && best.map_or(true, |(_, b)| err < b) {
                best = Some((r, err));
            }
        }
        let Some((r, _)) = best else { break };
        match split_of[r] {
            Split::Train => {
                split_of[r] = Split::Test;
                train_count -= weight(r);
            }
            Split::Test => {
                split_of[r] = Split::Train;
                train_count += weight(r);
            }
        }
    }
    if train_count == 0 {
        split_of[order[0]] = Split::Train;
    } else if train_count == total {
        split_of[*order.last().expect("non-empty")] = Split::Test;
    }

    let mut built = Vec::new();
    for (r, clips) in clips_by_recording.iter().enumerate() {
        for (ci, clip) in clips.iter().enumerate() {
            let clip_id = format!("rec{:03}_t{:04}", r, clip.offset_s.round() as usize);
            let base = ClipRecord {
                clip_id: clip_id.clone(),
                feature_file: format!("features/{clip_id}.f32"),
                t: clip.features.shape()[0],
                d: clip.features.shape()[1],
                duration_s: CLIP_SECONDS,
                split: split_of[r],
                augmented: false,
                recording: r,
                annotations: clip.annotations.clone(),
            };
            let augmented = aug_flags[r][ci].then(|| {
                let aug_id = format!("{clip_id}_aug");
                BuiltClip {
                    record: ClipRecord {
                        clip_id: aug_id.clone(),
                        feature_file: format!("features/{aug_id}.f32"),
                        augmented: true,
                        ..base.clone()
                    },
                    features: augment_features(
                        &clip.features,
                        cfg.aug_blur_width,
                        cfg.aug_attenuation,
                    ),
                }
            });
            built.push(BuiltClip {
                record: base,
                features: clip.features.clone(),
            });
            built.extend(augmented);
        }
    }
    Ok(built)
}

/// End-to-end dataset build: recordings -> clips -> split/augment ->
/// manifest plus feature payloads.
pub fn build_dataset(cfg: &GeneratorConfig) -> Result<(DatasetManifest, Vec<BuiltClip>)> {
    cfg.validate()?;
    if cfg.num_recordings < 2 {
        return Err(Error::Config("num_recordings must be >= 2".into()));
    }
    // jitter recording lengths to 75-125% of the base so clip counts vary
    // and the recording-level split can land near the target ratio
    let mut clips_by_recording = Vec::with_capacity(cfg.num_recordings);
    for r in 0..cfg.num_recordings {
        let mut len_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "length", r as u64));
        let factor = 0.75 + 0.5 * len_rng.gen::<f64>();
        let mut rec_cfg = cfg.clone();
        rec_cfg.recording_length_s =
            (cfg.recording_length_s * factor).max(CLIP_SECONDS.max(cfg.episode_duration_s[0]));
        let recording = generate_recording(&rec_cfg, r)?;
        clips_by_recording.push(window_clips(&recording)?);
    }
    let built = split_and_augment(&clips_by_recording, cfg)?;
    let manifest = DatasetManifest {
        label_names: default_label_names(cfg.num_classes),
        fps: FPS,
        frames_per_clip: FRAMES_PER_CLIP,
        feature_chunk: FEATURE_CHUNK,
        feature_stride: FEATURE_STRIDE,
        clips: built.iter().map(|b| b.record.clone()).collect(),
    };
    manifest.validate(None)?;
    Ok((manifest, built))
}

/// Writes `manifest.json` and `features/<clip_id>.f32` under `root`.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest, clips: &[BuiltClip]) -> Result<()> {
    let feat_dir = root.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    for clip in clips {
        write_features(&root.join(&clip.record.feature_file), &clip.features)?;
    }
    manifest.save(&root.join("manifest.json"))
}

/// Raw little-endian f32, row-major.
pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(features.len() * 4);
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path, t: usize, d: usize) -> Result<Tensor<f32>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() != t * d * 4 {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            buf.len(),
            t * d * 4
        )));
    }
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![t, d], data)
}

/// Loads one clip's features, resolving the path against the dataset root.
pub fn load_clip_features(root: &Path, clip: &ClipRecord) -> Result<Tensor<f32>> {
    read_features(&root.join(&clip.feature_file), clip.t, clip.d)
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct DatasetSummary {
    pub total_clips: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub augmented_clips: usize,
    pub segments_per_class: Vec<usize>,
}

pub fn summarize(manifest: &DatasetManifest) -> DatasetSummary {
    let mut s = DatasetSummary {
        total_clips: manifest.clips.len(),
        segments_per_class: vec![0; manifest.label_names.len()],
        ..Default::default()
    };
    for c in &manifest.clips {
        match c.split {
            Split::Train => s.train_clips += 1,
            Split::Test => s.test_clips += 1,
        }
        if c.augmented {
            s.augmented_clips += 1;
        }
        for a in &c.annotations {
            s.segments_per_class[a.label] += 1;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig {
            num_classes: 4,
            feature_dim: 8,
            num_recordings: 3,
            recording_length_s: 40.0,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_single_class_lies_on_its_direction() {
        let mut c = cfg();
        c.noise_sigma = 0.0;
        let model = SignalModel::from_seed(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for step in 0..50 {
            let t = step as f64 * 0.133;
            let row = model.sample(t, &[2], &mut rng);
            // row must be colinear with direction 2
            let u = &model.directions[2];
            let dot: f64 = row.iter().zip(u).map(|(&r, &u)| r as f64 * u).sum();
            let residual: f64 = row
                .iter()
                .zip(u)
                .map(|(&r, &u)| (r as f64 - dot * u).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(residual < 1e-5, "residual {residual} at t={t}");
        }
    }

    #[test]
    fn episodes_respect_the_duration_floor() {
        let rec = generate_recording(&cfg(), 0).unwrap();
        // contiguous non-background spans are episodes; each must last >= 5 s
        let mut spans: Vec<(f64, f64)> = rec
            .annotations
            .iter()
            .filter(|a| a.label != 0)
            .map(|a| (a.start_s, a.end_s))
            .collect();
        spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (s, e) in spans {
            match merged.last_mut() {
                Some(last) if s <= last.1 + 1e-9 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        for (s, e) in merged {
            assert!(e - s >= 5.0 - 1e-9, "episode [{s}, {e}] too short");
        }
    }

    #[test]
    fn too_short_recording_is_rejected() {
        let mut c = cfg();
        c.recording_length_s = 3.0;
        assert!(generate_recording(&c, 0).is_err());
    }

    #[test]
    fn class_mean_direction_converges() {
        // 8 s single-class segment at sigma = 0.1: mean feature direction
        // within cosine 0.99 of the class direction
        let mut c = cfg();
        c.noise_sigma = 0.1;
        let model = SignalModel::from_seed(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = (8.0 / (FEATURE_STRIDE as f64 / FPS as f64)) as usize;
        let mut mean = vec![0.0f64; c.feature_dim];
        for j in 0..rows {
            let row = model.sample(j as f64 * 0.1333, &[1], &mut rng);
            for (m, r) in mean.iter_mut().zip(&row) {
                *m += *r as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let u = &model.directions[1];
        let dot: f64 = mean.iter().zip(u).map(|(a, b)| a * b).sum();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosine = dot / norm;
        assert!(cosine > 0.99, "cosine {cosine}");
    }

    #[test]
    fn twenty_second_recording_gives_three_clips() {
        let mut c = cfg();
        c.recording_length_s = 20.0;
        let rec = generate_recording(&c, 0).unwrap();
        let clips = window_clips(&rec).unwrap();
        let offsets: Vec<f64> = clips.iter().map(|c| c.offset_s).collect();
        assert_eq!(offsets, vec![0.0, 5.0, 10.0]);
        for clip in &clips {
            assert_eq!(clip.features.shape(), &[72, c.feature_dim]);
        }
    }

    #[test]
    fn annotations_rebase_across_windows() {
        let mut rec = generate_recording(&cfg(), 0).unwrap();
        rec.annotations = vec![
            SegmentAnnotation {
                label: 1,
                start_s: 4.0,
                end_s: 9.0,
            },
            SegmentAnnotation {
                label: 0,
                start_s: 0.0,
                end_s: 4.0,
            },
            SegmentAnnotation {
                label: 0,
                start_s: 9.0,
                end_s: rec.length_s,
            },
        ];
        let clips = window_clips(&rec).unwrap();
        let at0: Vec<_> = clips[0]
            .annotations
            .iter()
            .filter(|a| a.label == 1)
            .collect();
        assert_eq!((at0[0].start_s, at0[0].end_s), (4.0, 9.0));
        let at5: Vec<_> = clips[1]
            .annotations
            .iter()
            .filter(|a| a.label == 1)
            .collect();
        assert_eq!((at5[0].start_s, at5[0].end_s), (0.0, 4.0));
    }

    #[test]
    fn sliver_fragments_are_dropped() {
        let mut rec = generate_recording(&cfg(), 0).unwrap();
        rec.annotations = vec![SegmentAnnotation {
            label: 1,
            start_s: 4.2,
            end_s: 5.1,
        }];
        let clips = window_clips(&rec).unwrap();
        // in clip@5 the fragment is [0, 0.1] -> dropped; clip@0 holds [4.2, 5.1]
        assert!(clips[0].annotations.iter().any(|a| a.label == 1));
        assert!(!clips[1].annotations.iter().any(|a| a.label == 1));
    }

    #[test]
    fn dataset_invariants_and_leakage() {
        let (manifest, _) = build_dataset(&cfg()).unwrap();
        manifest.validate(None).unwrap();
        let mut rec_split: HashMap<usize, Split> = HashMap::new();
        for c in &manifest.clips {
            if let Some(prev) = rec_split.insert(c.recording, c.split) {
                assert_eq!(prev, c.split, "recording {} straddles the split", c.recording);
            }
        }
        assert!(manifest.clips.iter().any(|c| c.split == Split::Train));
        assert!(manifest.clips.iter().any(|c| c.split == Split::Test));
    }

    #[test]
    fn augmented_clips_share_annotations_with_sources() {
        let mut c = cfg();
        c.aug_fraction = 0.5;
        let (manifest, _) = build_dataset(&c).unwrap();
        let mut found = 0;
        for clip in manifest.clips.iter().filter(|c| c.augmented) {
            let src_id = clip.clip_id.trim_end_matches("_aug");
            let src = manifest
                .clips
                .iter()
                .find(|c| c.clip_id == src_id)
                .expect("source clip");
            assert_eq!(src.annotations, clip.annotations);
            assert_eq!(src.split, clip.split);
            found += 1;
        }
        assert!(found > 0, "no augmented clips generated at fraction 0.5");
    }

    #[test]
    fn zero_fraction_means_no_augmented_clips() {
        let mut c = cfg();
        c.aug_fraction = 0.0;
        let (manifest, _) = build_dataset(&c).unwrap();
        assert!(manifest.clips.iter().all(|c| !c.augmented));
    }

    #[test]
    fn split_ratio_near_target_for_ten_recordings() {
        for seed in [0u64, 1, 2] {
            let mut c = cfg();
            c.num_recordings = 10;
            c.recording_length_s = 60.0;
            c.seed = seed;
            let (manifest, _) = build_dataset(&c).unwrap();
            let s = summarize(&manifest);
            let ratio = s.train_clips as f64 / s.total_clips as f64;
            assert!(
                (ratio - 0.65).abs() <= 0.05,
                "seed {seed}: train ratio {ratio}"
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (m1, b1) = build_dataset(&cfg()).unwrap();
        let (m2, b2) = build_dataset(&cfg()).unwrap();
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
        for (a, b) in b1.iter().zip(&b2) {
            assert_eq!(a.features.data(), b.features.data());
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::<f32>::randn(&[7, 3], 1.0, &mut rng);
        let path = dir.path().join("x.f32");
        write_features(&path, &t).unwrap();
        let back = read_features(&path, 7, 3).unwrap();
        assert_eq!(t.data(), back.data());
        assert!(read_features(&path, 7, 4).is_err());
    }
}
