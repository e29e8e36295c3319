//! Waveform and spectrogram augmentation: circular time roll, device impulse
//! response convolution, and frequency-wise MixStyle.

use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{Preset, SAMPLE_RATE_HZ};
use crate::nn::Tensor;

pub const MIXSTYLE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augment config error in `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("augment input error: {0}")]
    Input(String),
    #[error("impulse response file {path}: {reason}")]
    IrFile { path: String, reason: String },
}

fn cfg_err(field: &'static str, reason: impl Into<String>) -> AugmentError {
    AugmentError::Config {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixStyleConfig {
    pub alpha_mix: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub time_roll_max_samples: usize,
    pub dir_prob: f64,
    /// `None` disables Freq-MixStyle.
    pub mixstyle: Option<MixStyleConfig>,
}

impl AugmentConfig {
    pub const NONE: AugmentConfig = AugmentConfig {
        time_roll_max_samples: 0,
        dir_prob: 0.0,
        mixstyle: None,
    };

    /// Per-model settings, keyed by front-end preset.
    pub fn preset(p: Preset) -> Self {
        let ms = |alpha_mix, p| Some(MixStyleConfig { alpha_mix, p });
        match p {
            Preset::Passt1 => Self {
                time_roll_max_samples: 10_000,
                dir_prob: 0.6,
                mixstyle: ms(0.4, 0.4),
            },
            Preset::Passt2 => Self {
                time_roll_max_samples: 4_000,
                dir_prob: 0.4,
                mixstyle: ms(0.4, 0.8),
            },
            Preset::Cpresnet1 => Self {
                time_roll_max_samples: 4_000,
                dir_prob: 0.4,
                mixstyle: ms(0.4, 0.8),
            },
            Preset::Cpresnet2 => Self {
                time_roll_max_samples: 4_000,
                dir_prob: 0.6,
                mixstyle: ms(0.3, 0.4),
            },
            Preset::Cpmobile => Self {
                time_roll_max_samples: 10_000,
                dir_prob: 0.6,
                mixstyle: None,
            },
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.dir_prob) {
            return Err(cfg_err("dir_prob", format!("must be in [0, 1], got {}", self.dir_prob)));
        }
        if let Some(m) = self.mixstyle {
            if !(m.alpha_mix > 0.0) || !m.alpha_mix.is_finite() {
                return Err(cfg_err("mixstyle.alpha_mix", format!("must be > 0, got {}", m.alpha_mix)));
            }
            if !(0.0..=1.0).contains(&m.p) {
                return Err(cfg_err("mixstyle.p", format!("must be in [0, 1], got {}", m.p)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceImpulseResponse {
    samples: Vec<f32>,
    source_id: String,
}

impl DeviceImpulseResponse {
    pub fn new(samples: Vec<f32>, source_id: impl Into<String>) -> Result<Self, AugmentError> {
        let source_id = source_id.into();
        if samples.is_empty() {
            return Err(AugmentError::Input(format!("impulse response `{source_id}` is empty")));
        }
        if !samples.iter().all(|s| s.is_finite()) || samples.iter().all(|&s| s == 0.0) {
            return Err(AugmentError::Input(format!(
                "impulse response `{source_id}` needs finite samples and at least one nonzero"
            )));
        }
        Ok(Self { samples, source_id })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Copy scaled so the largest absolute sample is 1.
    pub fn peak_normalized(&self) -> Vec<f32> {
        let peak = self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        self.samples.iter().map(|s| s / peak).collect()
    }
}

impl fmt::Display for DeviceImpulseResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} taps)", self.source_id, self.samples.len())
    }
}

/// Mono 32 kHz WAV files in `dir`, sorted by file name.
pub fn load_ir_dir(dir: &Path) -> Result<Vec<DeviceImpulseResponse>, AugmentError> {
    let io_err = |path: &Path, e: &dyn fmt::Display| AugmentError::IrFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, &e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(io_err(dir, &"directory holds no .wav files"));
    }
    paths
        .iter()
        .map(|p| {
            let reader = hound::WavReader::open(p).map_err(|e| io_err(p, &e))?;
            let spec = reader.spec();
            if spec.channels != 1 || spec.sample_rate != SAMPLE_RATE_HZ {
                return Err(io_err(
                    p,
                    &format!("expected mono {SAMPLE_RATE_HZ} Hz, got {} ch at {} Hz", spec.channels, spec.sample_rate),
                ));
            }
            let samples: Vec<f32> = match spec.sample_format {
                hound::SampleFormat::Float => reader.into_samples::<f32>().collect::<Result<_, _>>(),
                hound::SampleFormat::Int => {
                    let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
                    reader
                        .into_samples::<i32>()
                        .map(|s| s.map(|v| v as f32 * scale))
                        .collect::<Result<_, _>>()
                }
            }
            .map_err(|e| io_err(p, &e))?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            DeviceImpulseResponse::new(samples, id).map_err(|e| io_err(p, &e))
        })
        .collect()
}

/// Small fixed bank of decaying-noise responses with a few early
/// reflections, used when no IR directory is configured.
pub fn synthetic_ir_bank() -> Vec<DeviceImpulseResponse> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1f1f);
    (0..6)
        .map(|i| {
            let len = 64 + 48 * i;
            let decay = 6.0 / len as f32;
            let mut s: Vec<f32> = (0..len)
                .map(|n| rng.random_range(-1.0f32..1.0) * (-decay * n as f32).exp() * 0.3)
                .collect();
            s[0] = 1.0;
            for k in 1..=2 {
                let at = (len * k) / 5 + i;
                s[at.min(len - 1)] += 0.5 / k as f32;
            }
            DeviceImpulseResponse::new(s, format!("synthetic_{i}")).expect("nonempty")
        })
        .collect()
}

/// `out[i] = x[(i - k) mod n]`.
pub fn roll(x: &[f32], k: i64) -> Vec<f32> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.rem_euclid(n as i64) as usize;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&x[n - k..]);
    out.extend_from_slice(&x[..n - k]);
    out
}

/// Circular shift by a signed amount drawn uniformly from `[-max_shift, max_shift]`.
pub fn time_roll<R: Rng + ?Sized>(x: &[f32], max_shift: usize, rng: &mut R) -> Result<Vec<f32>, AugmentError> {
    if max_shift >= x.len() {
        return Err(AugmentError::Input(format!(
            "time roll of up to {max_shift} samples needs a longer waveform than {}",
            x.len()
        )));
    }
    let m = max_shift as i64;
    let k = rng.random_range(-m..=m);
    Ok(roll(x, k))
}

const FFT_CONV_MIN_TAPS: usize = 32;

/// Linear convolution truncated to `x.len()` samples. Long kernels go
/// through a zero-padded real FFT.
pub fn convolve_truncated(x: &[f32], h: &[f32]) -> Vec<f32> {
    if h.len() >= FFT_CONV_MIN_TAPS && x.len() >= FFT_CONV_MIN_TAPS {
        return fft_convolve_truncated(x, h);
    }
    let mut out = vec![0.0f64; x.len()];
    for (j, &hj) in h.iter().enumerate() {
        if hj == 0.0 || j >= x.len() {
            continue;
        }
        let hj = hj as f64;
        for (o, &xi) in out[j..].iter_mut().zip(x) {
            *o += hj * xi as f64;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

fn fft_convolve_truncated(x: &[f32], h: &[f32]) -> Vec<f32> {
    thread_local! {
        static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    });
    let spectrum = |sig: &[f32]| {
        let mut buf = fwd.make_input_vec();
        for (b, &v) in buf.iter_mut().zip(sig) {
            *b = v as f64;
        }
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out).expect("sized buffers");
        out
    };
    let mut xs = spectrum(x);
    let hs = spectrum(h);
    for (a, b) in xs.iter_mut().zip(&hs) {
        *a *= b;
    }
    let mut y = inv.make_output_vec();
    inv.process(&mut xs, &mut y).expect("sized buffers");
    let scale = 1.0 / n as f64;
    y[..x.len()].iter().map(|v| (v * scale) as f32).collect()
}

/// With probability `prob`, convolve with the peak-normalized response.
pub fn dir_convolve<R: Rng + ?Sized>(x: &[f32], ir: &DeviceImpulseResponse, prob: f64, rng: &mut R) -> Vec<f32> {
    if rng.random_bool(prob.clamp(0.0, 1.0)) {
        convolve_truncated(x, &ir.peak_normalized())
    } else {
        x.to_vec()
    }
}

/// DIR augmentation drawing the response uniformly from `bank`.
pub fn dir_augment<R: Rng + ?Sized>(
    x: &[f32],
    bank: &[DeviceImpulseResponse],
    prob: f64,
    rng: &mut R,
) -> Result<Vec<f32>, AugmentError> {
    if bank.is_empty() {
        return Err(AugmentError::Input("impulse response bank is empty".into()));
    }
    if !rng.random_bool(prob.clamp(0.0, 1.0)) {
        return Ok(x.to_vec());
    }
    let ir = &bank[rng.random_range(0..bank.len())];
    Ok(convolve_truncated(x, &ir.peak_normalized()))
}

fn batch_dims(x: &Tensor) -> Result<(usize, usize, usize), AugmentError> {
    let s = x.shape();
    match s.len() {
        3 => Ok((s[0], s[1], s[2])),
        4 if s[1] == 1 => Ok((s[0], s[2], s[3])),
        _ => Err(AugmentError::Input(format!(
            "Freq-MixStyle expects [batch, mels, frames] or [batch, 1, mels, frames], got {s:?}"
        ))),
    }
}

/// Freq-MixStyle with one Bernoulli(p) draw, one permutation and a
/// Beta(alpha, alpha) mixing weight per sample.
pub fn freq_mixstyle<R: Rng + ?Sized>(x: &Tensor, alpha_mix: f64, p: f64, rng: &mut R) -> Result<Tensor, AugmentError> {
    let (b, _, _) = batch_dims(x)?;
    if p > 0.0 && b < 2 {
        return Err(AugmentError::Input(format!("Freq-MixStyle needs a batch of at least 2, got {b}")));
    }
    if !(alpha_mix > 0.0) {
        return Err(cfg_err("mixstyle.alpha_mix", format!("must be > 0, got {alpha_mix}")));
    }
    if !rng.random_bool(p.clamp(0.0, 1.0)) {
        return Ok(x.clone());
    }
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    let beta = Beta::new(alpha_mix, alpha_mix).map_err(|e| cfg_err("mixstyle.alpha_mix", e.to_string()))?;
    let lambdas: Vec<f64> = (0..b).map(|_| beta.sample(rng)).collect();
    mixstyle_with(x, &perm, &lambdas)
}

/// Deterministic core of Freq-MixStyle: sample `i` takes statistics
/// `lambda[i]` of its own and `1 - lambda[i]` of sample `perm[i]`.
pub fn mixstyle_with(x: &Tensor, perm: &[usize], lambdas: &[f64]) -> Result<Tensor, AugmentError> {
    let (b, m, t) = batch_dims(x)?;
    if perm.len() != b || lambdas.len() != b || perm.iter().any(|&j| j >= b) {
        return Err(AugmentError::Input(format!(
            "permutation/lambda lengths {}/{} do not match batch {b}",
            perm.len(),
            lambdas.len()
        )));
    }
    let v = x.values();
    let mut mu = vec![0.0; b * m];
    let mut sig = vec![0.0; b * m];
    for r in 0..b * m {
        let row = &v[r * t..(r + 1) * t];
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / t as f64;
        mu[r] = mean;
        sig[r] = (var + MIXSTYLE_EPS).sqrt();
    }
    let mut out = x.clone();
    let o = out.values_mut();
    for i in 0..b {
        let (j, lam) = (perm[i], lambdas[i]);
        for f in 0..m {
            let (ri, rj) = (i * m + f, j * m + f);
            let mu_mix = lam * mu[ri] + (1.0 - lam) * mu[rj];
            let sig_mix = lam * sig[ri] + (1.0 - lam) * sig[rj];
            for a in &mut o[ri * t..(ri + 1) * t] {
                *a = (*a - mu[ri]) / sig[ri] * sig_mix + mu_mix;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roll_direction() {
        assert_eq!(roll(&[1.0, 2.0, 3.0, 4.0], 1), vec![4.0, 1.0, 2.0, 3.0]);
        assert_eq!(roll(&[1.0, 2.0, 3.0, 4.0], -1), vec![2.0, 3.0, 4.0, 1.0]);
        assert_eq!(roll(&[1.0, 2.0, 3.0], 7), roll(&[1.0, 2.0, 3.0], 1));
    }

    #[test]
    fn time_roll_rejects_overlong_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(time_roll(&[0.0; 4], 4, &mut rng), Err(AugmentError::Input(_))));
        assert_eq!(time_roll(&[1.0, 2.0], 0, &mut rng).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn hand_convolution() {
        let ir = DeviceImpulseResponse::new(vec![2.0, 1.0], "x").unwrap();
        assert_eq!(convolve_truncated(&[1.0, 2.0, 3.0], &ir.peak_normalized()), vec![1.0, 2.5, 4.0]);
    }

    #[test]
    fn fft_path_matches_direct_sum() {
        let x: Vec<f32> = (0..200).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let h: Vec<f32> = (0..40).map(|i| 1.0 / (1 + i) as f32).collect();
        let fast = convolve_truncated(&x, &h);
        for (n, v) in fast.iter().enumerate() {
            let direct: f64 = (0..=n.min(h.len() - 1)).map(|j| h[j] as f64 * x[n - j] as f64).sum();
            assert!((*v as f64 - direct).abs() < 1e-4, "{n}: {v} vs {direct}");
        }
    }

    #[test]
    fn empty_or_silent_ir_rejected() {
        assert!(DeviceImpulseResponse::new(vec![], "e").is_err());
        assert!(DeviceImpulseResponse::new(vec![0.0, 0.0], "z").is_err());
    }

    #[test]
    fn presets_validate() {
        for p in Preset::ALL {
            AugmentConfig::preset(p).validate().unwrap();
        }
        let bad = AugmentConfig {
            dir_prob: 1.5,
            ..AugmentConfig::NONE
        };
        assert!(matches!(bad.validate(), Err(AugmentError::Config { field: "dir_prob", .. })));
    }

    #[test]
    fn mixstyle_needs_two_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::zeros(&[1, 4, 8]);
        assert!(freq_mixstyle(&x, 0.4, 0.5, &mut rng).is_err());
        assert_eq!(freq_mixstyle(&x, 0.4, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn synthetic_bank_is_valid_and_fixed() {
        let a = synthetic_ir_bank();
        assert_eq!(a, synthetic_ir_bank());
        assert!(a.iter().all(|ir| ir.samples()[0] == 1.0));
    }
}
