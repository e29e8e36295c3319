//! Log-Mel front-end.
//!
//! Waveforms are assumed to be 32 kHz mono. Frames are taken with center
//! reflect padding of `n_fft / 2`, windowed by a periodic Hann window of
//! `win_length` samples (centered in the FFT buffer), and the power spectrum
//! is projected onto triangular filters spaced on the `2595 log10(1 + f/700)`
//! mel scale. Output is the natural log of the mel energies, floored at
//! `log_floor`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use realfft::{RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SAMPLE_RATE_HZ: u32 = 32_000;
pub const DEFAULT_LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("invalid frontend config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("empty waveform")]
    EmptyInput,
    #[error("unknown frontend preset `{0}` (expected passt1, passt2, cpresnet1, cpresnet2 or cpmobile)")]
    UnknownPreset(String),
}

/// Named front-end configurations, one per model family/resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Passt1,
    Passt2,
    Cpresnet1,
    Cpresnet2,
    Cpmobile,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Passt1,
        Preset::Passt2,
        Preset::Cpresnet1,
        Preset::Cpresnet2,
        Preset::Cpmobile,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Preset::Passt1 => "passt1",
            Preset::Passt2 => "passt2",
            Preset::Cpresnet1 => "cpresnet1",
            Preset::Cpresnet2 => "cpresnet2",
            Preset::Cpmobile => "cpmobile",
        }
    }

    pub fn config(self) -> FrontendConfig {
        let (n_fft, win_length, hop_length, n_mels) = match self {
            Preset::Passt1 => (1024, 800, 320, 128),
            Preset::Passt2 => (4096, 800, 320, 128),
            Preset::Cpresnet1 => (4096, 3072, 750, 256),
            Preset::Cpresnet2 => (4096, 3072, 500, 256),
            Preset::Cpmobile => (4096, 3072, 500, 256),
        };
        FrontendConfig {
            sample_rate_hz: SAMPLE_RATE_HZ,
            n_fft,
            win_length,
            hop_length,
            n_mels,
            f_min_hz: 0.0,
            f_max_hz: SAMPLE_RATE_HZ as f64 / 2.0,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Preset {
    type Err = FrontendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| FrontendError::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Preset::Cpmobile.config()
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        let bad = |field, reason: &str| {
            Err(FrontendError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.sample_rate_hz != SAMPLE_RATE_HZ {
            return bad("sample_rate_hz", "only 32000 Hz audio is supported");
        }
        if self.n_fft < 2 {
            return bad("n_fft", "must be at least 2");
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad("win_length", "must be in 1..=n_fft");
        }
        if self.hop_length == 0 {
            return bad("hop_length", "must be >= 1");
        }
        if self.n_mels == 0 {
            return bad("n_mels", "must be >= 1");
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.f_min_hz >= 0.0) {
            return bad("f_min_hz", "must be >= 0");
        }
        if !(self.f_max_hz > self.f_min_hz) || self.f_max_hz > nyquist {
            return bad("f_max_hz", "must satisfy f_min_hz < f_max_hz <= sample_rate_hz / 2");
        }
        if !(self.log_floor > 0.0) || !self.log_floor.is_finite() {
            return bad("log_floor", "must be a finite value > 0");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count produced for `n_samples` input samples under center padding.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_length
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges in Hz: `n_mels + 2` points equally spaced on the mel scale.
/// Filter `k` rises from `edges[k]`, peaks at `edges[k + 1]` and falls to `edges[k + 2]`.
pub fn mel_band_edges(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min_hz);
    let hi = hz_to_mel(cfg.f_max_hz);
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect()
}

/// Triangular mel filters, stored densely with the nonzero support of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_bins)
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }

    pub fn get(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.n_bins + bin]
    }

    /// Half-open range of bins where row `mel` is nonzero.
    pub fn support(&self, mel: usize) -> (usize, usize) {
        self.support[mel]
    }
}

pub fn mel_filterbank(cfg: &FrontendConfig) -> Result<MelFilterbank, FrontendError> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let edges = mel_band_edges(cfg);
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    let mut support = Vec::with_capacity(cfg.n_mels);
    for k in 0..cfg.n_mels {
        let (left, center, right) = (edges[k], edges[k + 1], edges[k + 2]);
        let row = &mut weights[k * n_bins..(k + 1) * n_bins];
        let mut first = None;
        let mut last = 0;
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            let v = rise.min(fall).max(0.0);
            if v > 0.0 {
                *w = v;
                first.get_or_insert(b);
                last = b;
            }
        }
        match first {
            Some(start) => support.push((start, last + 1)),
            None => {
                return Err(FrontendError::Config {
                    field: "n_mels",
                    reason: format!("mel filter {k} covers no FFT bin; reduce n_mels or raise n_fft"),
                })
            }
        }
    }
    Ok(MelFilterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
        support,
    })
}

/// Periodic Hann window of `len` samples.
pub fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMelSpectrogram {
    /// Row-major `[n_mels × n_frames]`.
    pub data: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub config: FrontendConfig,
}

impl LogMelSpectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.data[mel * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..self.n_mels).map(|m| self.get(m, frame)).collect()
    }
}

/// Reusable extractor holding the filterbank, window and FFT plan for one config.
#[derive(Clone)]
pub struct LogMelExtractor {
    cfg: FrontendConfig,
    filterbank: MelFilterbank,
    window: Vec<f32>,
    /// Per mel row: first supported bin and the f32 weights over the support.
    sparse: Vec<(usize, Vec<f32>)>,
    fft: Arc<dyn RealToComplex<f32>>,
}

fn dot_f32(w: &[f32], p: &[f32]) -> f64 {
    // Eight independent lanes let this vectorise; the lanes are summed in f64.
    let mut acc = [0.0f32; 8];
    let (wc, pc) = (w.chunks_exact(8), p.chunks_exact(8));
    let tail: f64 = wc.remainder().iter().zip(pc.remainder()).map(|(a, b)| (a * b) as f64).sum();
    for (a, b) in wc.zip(pc) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    acc.iter().map(|&v| v as f64).sum::<f64>() + tail
}

impl fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl LogMelExtractor {
    pub fn new(cfg: &FrontendConfig) -> Result<Self, FrontendError> {
        let filterbank = mel_filterbank(cfg)?;
        let offset = (cfg.n_fft - cfg.win_length) / 2;
        let mut window = vec![0.0f32; cfg.n_fft];
        for (i, w) in hann_periodic(cfg.win_length).into_iter().enumerate() {
            window[offset + i] = w as f32;
        }
        let fft = RealFftPlanner::<f32>::new().plan_fft_forward(cfg.n_fft);
        let sparse = (0..cfg.n_mels)
            .map(|m| {
                let (a, b) = filterbank.support(m);
                (a, filterbank.row(m)[a..b].iter().map(|&w| w as f32).collect())
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            filterbank,
            window,
            sparse,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, waveform: &[f32]) -> Result<LogMelSpectrogram, FrontendError> {
        if waveform.is_empty() {
            return Err(FrontendError::EmptyInput);
        }
        let cfg = &self.cfg;
        let n = waveform.len();
        let pad = cfg.n_fft / 2;
        let n_frames = cfg.n_frames(n);
        let n_mels = cfg.n_mels;
        let floor = cfg.log_floor;

        let mut buf = self.fft.make_input_vec();
        let mut spectrum = self.fft.make_output_vec();
        let mut scratch = self.fft.make_scratch_vec();
        let mut power = vec![0.0f32; cfg.n_bins()];
        let mut data = vec![0.0f32; n_mels * n_frames];

        let win_start = (cfg.n_fft - cfg.win_length) / 2;
        let win_end = win_start + cfg.win_length;
        for t in 0..n_frames {
            let start = (t * cfg.hop_length) as isize - pad as isize;
            buf.fill(0.0);
            let lo = start + win_start as isize;
            let hi = start + win_end as isize;
            let window = &self.window[win_start..win_end];
            if lo >= 0 && hi <= n as isize {
                let src = &waveform[lo as usize..hi as usize];
                for ((slot, w), x) in buf[win_start..win_end].iter_mut().zip(window).zip(src) {
                    *slot = w * x;
                }
            } else {
                for (i, (slot, w)) in buf[win_start..win_end].iter_mut().zip(window).enumerate() {
                    *slot = w * waveform[reflect_index(lo + i as isize, n)];
                }
            }
            self.fft
                .process_with_scratch(&mut buf, &mut spectrum, &mut scratch)
                .expect("fft buffers sized by the planner");
            for (p, c) in power.iter_mut().zip(&spectrum) {
                *p = c.re * c.re + c.im * c.im;
            }
            for (m, (start, w)) in self.sparse.iter().enumerate() {
                let e = dot_f32(w, &power[*start..*start + w.len()]);
                data[m * n_frames + t] = e.max(floor).ln() as f32;
            }
        }
        Ok(LogMelSpectrogram {
            data,
            n_mels,
            n_frames,
            config: cfg.clone(),
        })
    }
}

/// Reflect an index into `0..len` without repeating the edge sample
/// (numpy "reflect" mode), folding repeatedly for very short signals.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

pub fn log_mel(waveform: &[f32], cfg: &FrontendConfig) -> Result<LogMelSpectrogram, FrontendError> {
    LogMelExtractor::new(cfg)?.compute(waveform)
}
