//! Synthetic micro-expression clips, frame selection and balanced sampling.
//!
//! Every subject gets a smooth random "face". A clip overlays a small
//! Gaussian bump in one facial region whose centre drifts in one of four
//! directions while its intensity ramps from zero at onset to the amplitude at
//! apex and fades afterwards. The class is the (region, direction) pair, so
//! telling classes apart needs both where the movement happens and how it
//! unfolds over time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HstaError, Result};
use crate::io;
use crate::tensor::Tensor;

/// Relative `(row, column)` centres of the facial regions.
const REGIONS: [(f64, f64); 4] = [(0.28, 0.31), (0.28, 0.69), (0.72, 0.34), (0.72, 0.66)];

/// Unit drift directions `(dy, dx)`: right, left, down, up.
const PATTERNS: [(f64, f64); 4] = [(0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0)];

/// Bump width and total drift, relative to the frame width.
const BUMP_SIGMA: f64 = 0.06;
const DRIFT: f64 = 0.25;

/// Number of distinct (region, pattern) classes the generator can express.
pub const MAX_CLASSES: usize = REGIONS.len() * PATTERNS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub num_subjects: usize,
    pub clips_per_subject: usize,
    pub num_classes: usize,
    /// Frames per clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Peak bump intensity.
    pub amplitude: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Largest per-subject offset of the expression regions, in pixels.
    pub subject_shift: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_subjects: 30,
            clips_per_subject: 12,
            num_classes: 3,
            frames: 12,
            height: 32,
            width: 32,
            channels: 1,
            amplitude: 0.5,
            noise: 0.05,
            subject_shift: 1.0,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(HstaError::Config(format!(
                "num_classes must be in 2..={MAX_CLASSES} (distinct region/pattern pairs), got {}",
                self.num_classes
            )));
        }
        if self.num_subjects == 0 || self.clips_per_subject == 0 {
            return Err(HstaError::Config(
                "need at least one subject and one clip per subject".into(),
            ));
        }
        if self.frames < 4 {
            return Err(HstaError::Config(format!(
                "need at least 4 frames per clip, got {}",
                self.frames
            )));
        }
        if self.height < 8 || self.width < 8 || self.channels == 0 {
            return Err(HstaError::Config(format!(
                "frames must be at least 8x8 with one channel, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if !(self.amplitude >= 0.0 && self.noise >= 0.0 && self.subject_shift >= 0.0) {
            return Err(HstaError::Config(
                "amplitude, noise and subject_shift must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn num_clips(&self) -> usize {
        self.num_subjects * self.clips_per_subject
    }

    fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Region and drift pattern for a class. Classes are enumerated in growing
/// squares of the (region × pattern) grid, so any `C ≥ 3` mixes both factors:
/// `(0,0) (1,0) (0,1) (1,1) (2,0) (2,1) (0,2) (1,2) (2,2) …`
pub fn class_factors(class: usize) -> (usize, usize) {
    let shell = (class as f64).sqrt().floor() as usize;
    let k = class - shell * shell;
    if k < shell {
        (shell, k)
    } else if k < 2 * shell {
        (k - shell, shell)
    } else {
        (shell, shell)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub clip_id: usize,
    pub subject_id: usize,
    pub label: usize,
    pub onset_idx: usize,
    pub apex_idx: usize,
    /// `[T × H × W × ch]`, values in `[0, 1]`.
    pub frames: Tensor,
}

impl SyntheticClip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// One frame as `[H × W × ch]`.
    pub fn frame(&self, idx: usize) -> Tensor {
        let s = self.frames.shape();
        let len = s[1] * s[2] * s[3];
        Tensor::new(s[1..].to_vec(), self.frames.data()[idx * len..(idx + 1) * len].to_vec())
            .expect("frame slice matches its shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GenSpec,
    pub clips: Vec<SyntheticClip>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }

    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.clips.iter().map(|c| c.subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Clip count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.num_classes];
        for c in &self.clips {
            counts[c.label] += 1;
        }
        counts
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Subject {
    base: Vec<f64>,
    // Per-subject misalignment of all regions, in pixels.
    shift: (f64, f64),
}

fn make_subject(spec: &GenSpec, subject_id: usize) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x5u64 << 40 | subject_id as u64));
    let (h, w) = (spec.height as f64, spec.width as f64);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..h),
                rng.random_range(0.0..w),
                rng.random_range(0.15..0.35) * w,
                rng.random_range(-0.12..0.12),
            )
        })
        .collect();
    let level = rng.random_range(0.25..0.4);
    let mut base = Vec::with_capacity(spec.frame_len());
    for y in 0..spec.height {
        for x in 0..spec.width {
            let mut v = level;
            for &(cy, cx, s, amp) in &blobs {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += amp * (-r2 / (2.0 * s * s)).exp();
            }
            let v = v.clamp(0.0, 1.0);
            for _ in 0..spec.channels {
                base.push(v);
            }
        }
    }
    let sh = spec.subject_shift;
    let shift = (rng.random_range(-1.0..1.0) * sh, rng.random_range(-1.0..1.0) * sh);
    Subject { base, shift }
}

/// Intensity envelope: 0 up to onset, linear ramp to 1 at apex, linear fade
/// to 0.25 at the last frame.
fn envelope(t: usize, onset: usize, apex: usize, frames: usize) -> f64 {
    if t <= onset {
        0.0
    } else if t <= apex {
        (t - onset) as f64 / (apex - onset) as f64
    } else {
        let tail = (frames - 1 - apex) as f64;
        1.0 - 0.75 * (t - apex) as f64 / tail
    }
}

fn make_clip(spec: &GenSpec, subject: &Subject, subject_id: usize, clip_id: usize, label: usize) -> SyntheticClip {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, clip_id as u64));
    let t_total = spec.frames;
    let onset = rng.random_range(0..=t_total / 6);
    let apex_lo = onset + (t_total / 4).max(1);
    let apex_hi = (t_total - 1 - (t_total / 4).max(1)).max(apex_lo);
    let apex = rng.random_range(apex_lo..=apex_hi);

    let (region, pattern) = class_factors(label);
    let (ry, rx) = REGIONS[region];
    let (dy, dx) = PATTERNS[pattern];
    let (h, w) = (spec.height as f64, spec.width as f64);
    let cy = ry * h + subject.shift.0;
    let cx = rx * w + subject.shift.1;
    let sigma = BUMP_SIGMA * w;
    let travel = DRIFT * w;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid normal");

    let frame_len = spec.frame_len();
    let mut data = Vec::with_capacity(t_total * frame_len);
    for t in 0..t_total {
        // The bump travels from -1/2 to +1/2 of the drift between onset and
        // apex, then holds its position while fading.
        let progress = (t.clamp(onset, apex) - onset) as f64 / (apex - onset) as f64 - 0.5;
        let (py, px) = (cy + dy * travel * progress, cx + dx * travel * progress);
        let intensity = spec.amplitude * envelope(t, onset, apex, t_total);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let r2 = (y as f64 - py).powi(2) + (x as f64 - px).powi(2);
                let bump = intensity * (-r2 / (2.0 * sigma * sigma)).exp();
                for c in 0..spec.channels {
                    let mut v = subject.base[(y * spec.width + x) * spec.channels + c] + bump;
                    if spec.noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    SyntheticClip {
        clip_id,
        subject_id,
        label,
        onset_idx: onset,
        apex_idx: apex,
        frames: Tensor::new(vec![t_total, spec.height, spec.width, spec.channels], data)
            .expect("frame buffer matches shape"),
    }
}

/// Generates the full dataset. Labels cycle through the classes in clip order,
/// so class counts differ by at most one overall and within each subject.
pub fn generate_dataset(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut clips = Vec::with_capacity(spec.num_clips());
    for subject_id in 0..spec.num_subjects {
        let subject = make_subject(spec, subject_id);
        for k in 0..spec.clips_per_subject {
            let clip_id = subject_id * spec.clips_per_subject + k;
            let label = clip_id % spec.num_classes;
            clips.push(make_clip(spec, &subject, subject_id, clip_id, label));
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        clips,
    })
}

/// Centred-bin frame indices: `round_half_up((i + ½)·T/n − ½)`.
pub fn uniform_sample_indices(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(HstaError::Contract(format!(
            "cannot sample {n} frames from a clip of {total}"
        )));
    }
    // round_half_up(((2i+1)T − n) / 2n) == floor((2i+1)T / 2n)
    Ok((0..n).map(|i| ((2 * i + 1) * total / (2 * n)).min(total - 1)).collect())
}

/// `[n × H × W × ch]` stack of uniformly sampled frames.
pub fn uniform_sample_frames(clip: &SyntheticClip, n: usize) -> Result<Tensor> {
    let idx = uniform_sample_indices(clip.num_frames(), n)?;
    let s = clip.frames.shape();
    let len = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(n * len);
    for i in idx {
        data.extend_from_slice(&clip.frames.data()[i * len..(i + 1) * len]);
    }
    let mut shape = s.to_vec();
    shape[0] = n;
    Tensor::new(shape, data)
}

/// `(onset, apex)` frames.
pub fn extract_special_frames(clip: &SyntheticClip) -> (Tensor, Tensor) {
    (clip.frame(clip.onset_idx), clip.frame(clip.apex_idx))
}

/// Per-epoch class-balanced batching.
///
/// Each epoch visits as many clips as there are in the pool, cycling through
/// the classes round-robin (the starting class rotates with the epoch). Within
/// a class clips are drawn from a shuffled queue that is reshuffled and reused
/// when exhausted, so minority classes are resampled.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
    epoch_len: usize,
}

impl BalancedSampler {
    /// `items` are `(clip_id, label)` pairs.
    pub fn new(items: &[(usize, usize)], num_classes: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < num_classes {
            return Err(HstaError::Config(format!(
                "batch size {batch_size} is smaller than the number of classes {num_classes}"
            )));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for &(id, label) in items {
            if label >= num_classes {
                return Err(HstaError::Contract(format!("label {label} out of range")));
            }
            by_class[label].push(id);
        }
        if let Some(empty) = by_class.iter().position(Vec::is_empty) {
            return Err(HstaError::Config(format!("class {empty} has no training clips")));
        }
        Ok(BalancedSampler {
            by_class,
            batch_size,
            seed,
            epoch_len: items.len(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.epoch_len.div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, epoch as u64));
        let c = self.by_class.len();
        let mut queues: Vec<Vec<usize>> = self.by_class.clone();
        for q in queues.iter_mut() {
            q.shuffle(&mut rng);
        }
        let mut cursor = vec![0usize; c];
        let mut order = Vec::with_capacity(self.epoch_len);
        for k in 0..self.epoch_len {
            let class = (epoch + k) % c;
            if cursor[class] == queues[class].len() {
                queues[class].shuffle(&mut rng);
                cursor[class] = 0;
            }
            order.push(queues[class][cursor[class]]);
            cursor[class] += 1;
        }
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    clip_id: usize,
    subject_id: usize,
    label: usize,
    onset_idx: usize,
    apex_idx: usize,
    payload: String,
}

pub const DATASET_SPEC_FILE: &str = "dataset.toml";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes `dataset.toml`, `manifest.csv` and one tensor file per clip.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let clip_dir = dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| HstaError::io(&clip_dir, e))?;
    let spec_path = dir.join(DATASET_SPEC_FILE);
    let spec_text = toml::to_string(&dataset.spec).map_err(|e| HstaError::Format {
        path: spec_path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&spec_path, spec_text).map_err(|e| HstaError::io(&spec_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let csv_err = |e: csv::Error| HstaError::Format {
        path: manifest_path.clone(),
        reason: e.to_string(),
    };
    let mut writer = csv::Writer::from_path(&manifest_path).map_err(csv_err)?;
    for clip in &dataset.clips {
        let payload = format!("clips/clip_{:05}.hsta", clip.clip_id);
        io::write_tensor(&dir.join(&payload), &clip.frames)?;
        writer
            .serialize(ManifestRecord {
                clip_id: clip.clip_id,
                subject_id: clip.subject_id,
                label: clip.label,
                onset_idx: clip.onset_idx,
                apex_idx: clip.apex_idx,
                payload,
            })
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| HstaError::io(&manifest_path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let spec_path = dir.join(DATASET_SPEC_FILE);
    let text = fs::read_to_string(&spec_path).map_err(|e| HstaError::io(&spec_path, e))?;
    let spec: GenSpec = toml::from_str(&text).map_err(|e| HstaError::Format {
        path: spec_path.clone(),
        reason: e.to_string(),
    })?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let format_err = |reason: String| HstaError::Format {
        path: manifest_path.clone(),
        reason,
    };
    let mut reader = csv::Reader::from_path(&manifest_path).map_err(|e| format_err(e.to_string()))?;
    let mut clips = Vec::new();
    for rec in reader.deserialize::<ManifestRecord>() {
        let rec = rec.map_err(|e| format_err(e.to_string()))?;
        let frames = io::read_tensor(&dir.join(PathBuf::from(&rec.payload)))?;
        let t = frames.shape().first().copied().unwrap_or(0);
        if !(rec.onset_idx < rec.apex_idx && rec.apex_idx < t) || rec.label >= spec.num_classes {
            return Err(format_err(format!(
                "clip {} violates index/label invariants",
                rec.clip_id
            )));
        }
        clips.push(SyntheticClip {
            clip_id: rec.clip_id,
            subject_id: rec.subject_id,
            label: rec.label,
            onset_idx: rec.onset_idx,
            apex_idx: rec.apex_idx,
            frames,
        });
    }
    Ok(Dataset { spec, clips })
}

/// Clip counts keyed by subject.
pub fn clips_per_subject(dataset: &Dataset) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for c in &dataset.clips {
        *m.entry(c.subject_id).or_insert(0) += 1;
    }
    m
}
