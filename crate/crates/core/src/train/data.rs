//! Dataset indices, the synthetic scene generator and TAU metadata ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use super::{substream, TrainError};
use crate::augment::convolve_truncated;
use crate::frontend::SAMPLE_RATE_HZ;
use crate::models::N_CLASSES;

pub const CLIP_SAMPLES: usize = SAMPLE_RATE_HZ as usize;

pub const TAU_SCENES: [&str; N_CLASSES] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClipSource {
    File { path: PathBuf },
    Synthetic { class: usize, index: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub source: ClipSource,
    pub label: usize,
    pub device: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub items: Vec<DatasetItem>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if let Some(it) = self.items.iter().find(|it| it.label >= N_CLASSES) {
            return Err(TrainError::Input(format!("label {} out of range for {:?}", it.label, it.source)));
        }
        Ok(())
    }
}

/// Index plus the decoded waveforms, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub waves: Vec<Vec<f32>>,
}

impl Dataset {
    /// Decodes every file-backed clip relative to `root`; synthetic clips are regenerated.
    pub fn load(index: DatasetIndex, root: &Path) -> Result<Self, TrainError> {
        index.validate()?;
        let waves = index
            .items
            .iter()
            .map(|it| match &it.source {
                ClipSource::File { path } => read_wav_mono(&root.join(path)),
                ClipSource::Synthetic { class, index, seed } => Ok(synth_clip(*class, *index, *seed, &it.device)),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { index, waves })
    }
}

pub fn read_wav_mono(path: &Path) -> Result<Vec<f32>, TrainError> {
    let err = |reason: String| TrainError::Format(format!("{}: {reason}", path.display()));
    let reader = hound::WavReader::open(path).map_err(|e| err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(err(format!("expected mono {SAMPLE_RATE_HZ} Hz, got {} ch at {} Hz", spec.channels, spec.sample_rate)));
    }
    match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().collect::<Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader.into_samples::<i32>().map(|s| s.map(|v| v as f32 * scale)).collect()
        }
    }
    .map_err(|e| err(e.to_string()))
}

/// Simulated recording devices: reference, low-pass, high-pass and a comb-like
/// response. The last one never appears in training or validation.
pub const DEVICES: [(&str, &[f32]); 4] = [
    ("a", &[1.0]),
    ("b", &[0.5, 0.35, 0.15]),
    ("c", &[1.0, -0.7]),
    ("d", &[0.6, 0.0, 0.0, 0.45, 0.0, -0.25]),
];
pub const HELD_OUT_DEVICE: &str = "d";

/// Per-class noise band centre, tone and envelope rate (Hz).
pub const CLASS_RECIPES: [(f32, f32, f32); N_CLASSES] = [
    (300.0, 2800.0, 1.0),
    (450.0, 600.0, 4.0),
    (700.0, 5200.0, 2.0),
    (1000.0, 1200.0, 6.0),
    (1500.0, 350.0, 1.5),
    (2200.0, 7800.0, 3.0),
    (3200.0, 900.0, 8.0),
    (4500.0, 1800.0, 0.7),
    (6500.0, 4000.0, 5.0),
    (9000.0, 500.0, 2.5),
];
const BAND_HALF_WIDTH: f32 = 0.3;

fn device_filter(name: &str) -> &'static [f32] {
    DEVICES.iter().find(|(n, _)| *n == name).map(|(_, h)| *h).unwrap_or(&[1.0])
}

/// Noise with a flat spectrum over `[lo, hi]` Hz plus `tilt`-weighted broadband
/// pink noise, unit RMS.
fn shaped_noise<R: Rng>(rng: &mut R, lo: f32, hi: f32, pink: f32) -> Vec<f32> {
    let n = CLIP_SAMPLES;
    let mut planner = RealFftPlanner::<f32>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut spec = ifft.make_input_vec();
    let hz_per_bin = SAMPLE_RATE_HZ as f32 / n as f32;
    let last = spec.len() - 1;
    for (k, c) in spec.iter_mut().enumerate() {
        let f = k as f32 * hz_per_bin;
        let mut gain = if (lo..=hi).contains(&f) { 1.0 } else { 0.0 };
        if k > 0 {
            gain += pink * (100.0 / f.max(100.0)).sqrt();
        }
        let re: f32 = StandardNormal.sample(rng);
        let im: f32 = StandardNormal.sample(rng);
        *c = realfft::num_complex::Complex::new(re * gain, if k == 0 || k == last { 0.0 } else { im * gain });
    }
    let mut out = ifft.make_output_vec();
    ifft.process(&mut spec, &mut out).expect("sized buffers");
    let rms = (out.iter().map(|v| v * v).sum::<f32>() / n as f32).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v /= rms);
    out
}

/// One synthetic clip: a class-specific noise band and tone, each amplitude
/// modulated at the class rate, over broadband noise with a random distractor
/// tone, then coloured by the device filter.
pub fn synth_clip(class: usize, index: usize, seed: u64, device: &str) -> Vec<f32> {
    let mut rng = substream(seed, 0x5c17, class as u64, index as u64);
    let (centre, tone, rate) = CLASS_RECIPES[class % N_CLASSES];
    let centre = centre * rng.random_range(0.8f32..1.25);
    let band = shaped_noise(&mut rng, centre * (1.0 - BAND_HALF_WIDTH), centre * (1.0 + BAND_HALF_WIDTH), 0.0);
    let background = shaped_noise(&mut rng, 0.0, 0.0, 1.0);
    let bg_level = rng.random_range(0.2f32..0.8);
    let tone_f = tone * rng.random_range(0.9f32..1.1);
    let tone_amp = if rng.random_bool(0.8) { rng.random_range(0.2f32..0.6) } else { 0.0 };
    let distractor_f = 200.0 * 50f32.powf(rng.random::<f32>());
    let distractor_amp = rng.random_range(0.0f32..0.5);
    let rate = rate * rng.random_range(0.85f32..1.15);
    let depth = rng.random_range(0.3f32..0.9);
    let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
    let gain = rng.random_range(0.05f32..0.3);
    let w = std::f32::consts::TAU / SAMPLE_RATE_HZ as f32;
    let wave: Vec<f32> = (0..CLIP_SAMPLES)
        .map(|i| {
            let t = i as f32;
            let env = 1.0 - depth * 0.5 * (1.0 + (w * rate * t + phase).sin());
            let sig = env * (band[i] + tone_amp * 1.414 * (w * tone_f * t).sin());
            gain * (sig + bg_level * background[i] + distractor_amp * (w * distractor_f * t + phase).sin())
        })
        .collect();
    convolve_truncated(&wave, device_filter(device))
}

fn split_for(i: usize, n: usize) -> Split {
    let n_train = (n * 3).div_ceil(5);
    let n_valid = n / 5;
    if i < n_train {
        Split::Train
    } else if i < n_train + n_valid {
        Split::Valid
    } else {
        Split::Test
    }
}

/// `n_per_class` clips per class, split 60/20/20 per class. Training and
/// validation clips use devices a-c; test clips draw from all four.
pub fn synth_dataset(n_per_class: usize, seed: u64) -> Result<Dataset, TrainError> {
    if n_per_class == 0 {
        return Err(TrainError::Input("n_per_class must be >= 1".into()));
    }
    let mut items = Vec::with_capacity(n_per_class * N_CLASSES);
    let mut waves = Vec::with_capacity(n_per_class * N_CLASSES);
    for class in 0..N_CLASSES {
        for index in 0..n_per_class {
            let split = split_for(index, n_per_class);
            let mut rng = substream(seed, 0xde71ce, class as u64, index as u64);
            let n_dev = if split == Split::Test { DEVICES.len() } else { DEVICES.len() - 1 };
            let device = DEVICES[rng.random_range(0..n_dev)].0.to_string();
            waves.push(synth_clip(class, index, seed, &device));
            items.push(DatasetItem {
                source: ClipSource::Synthetic { class, index, seed },
                label: class,
                device,
                split,
            });
        }
    }
    Ok(Dataset {
        index: DatasetIndex { items },
        waves,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauIndex {
    pub index: DatasetIndex,
    /// Subset entries with no matching metadata row.
    pub unmatched: Vec<String>,
}

fn tsv_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), TrainError> {
    let text = fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| TrainError::Format(format!("{}: missing header row", path.display())))?
        .split('\t')
        .map(|s| s.trim().to_string())
        .collect();
    let rows = lines.map(|l| l.split('\t').map(|s| s.trim().to_string()).collect()).collect();
    Ok((header, rows))
}

/// Parses TAU-style tab-separated metadata (`filename`, `scene_label`, and
/// `source` or `source_label`). When `subset_path` is given only the listed
/// filenames are kept. Every retained item is assigned `split`.
pub fn load_tau_index(meta_path: &Path, subset_path: Option<&Path>, split: Split) -> Result<TauIndex, TrainError> {
    let (header, rows) = tsv_rows(meta_path)?;
    let col = |names: &[&str]| header.iter().position(|h| names.contains(&h.as_str()));
    let (Some(fcol), Some(lcol), Some(dcol)) = (col(&["filename"]), col(&["scene_label"]), col(&["source", "source_label"]))
    else {
        return Err(TrainError::Format(format!(
            "{}: header needs columns filename, scene_label and source (found {})",
            meta_path.display(),
            header.join(", ")
        )));
    };
    let mut by_name = BTreeMap::new();
    let mut order = Vec::new();
    for (ln, r) in rows.iter().enumerate() {
        let get = |c: usize| {
            r.get(c)
                .ok_or_else(|| TrainError::Format(format!("{}: row {} is missing column {c}", meta_path.display(), ln + 2)))
        };
        let (file, label, device) = (get(fcol)?, get(lcol)?, get(dcol)?);
        let label = TAU_SCENES
            .iter()
            .position(|s| s == label)
            .ok_or_else(|| TrainError::Format(format!("unknown scene label `{label}`")))?;
        by_name.insert(file.clone(), (label, device.clone()));
        order.push(file.clone());
    }
    let (keep, unmatched): (Vec<String>, Vec<String>) = match subset_path {
        None => (order, Vec::new()),
        Some(p) => {
            let (h, rows) = tsv_rows(p)?;
            // The header row is optional; a first line that names a known clip is data.
            let mut names: Vec<String> = rows.into_iter().filter_map(|r| r.into_iter().next()).collect();
            if let Some(first) = h.first() {
                if by_name.contains_key(first) {
                    names.insert(0, first.clone());
                }
            }
            let mut seen = BTreeSet::new();
            names.retain(|n| seen.insert(n.clone()));
            names.into_iter().partition(|n| by_name.contains_key(n))
        }
    };
    if keep.is_empty() {
        return Err(TrainError::Input(format!("no clips of {} survive the subset filter", meta_path.display())));
    }
    let items = keep
        .into_iter()
        .map(|f| {
            let (label, device) = by_name[&f].clone();
            DatasetItem {
                source: ClipSource::File { path: PathBuf::from(f) },
                label,
                device,
                split,
            }
        })
        .collect();
    Ok(TauIndex {
        index: DatasetIndex { items },
        unmatched,
    })
}
