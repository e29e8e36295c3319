use dualkd::frontend::{log_mel, mel_filterbank, FrontendConfig, LogMelExtractor, Preset};
use proptest::prelude::*;

// Independent mel formulas for the oracles below.
fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}
fn hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}
fn edges(cfg: &FrontendConfig) -> Vec<f64> {
    let (lo, hi) = (mel(cfg.f_min_hz), mel(cfg.f_max_hz));
    (0..cfg.n_mels + 2)
        .map(|i| hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

#[test]
fn passt1_filterbank_is_128_by_513_and_nonnegative() {
    let fb = mel_filterbank(&Preset::Passt1.config()).unwrap();
    assert_eq!(fb.shape(), (128, 513));
    for p in Preset::ALL {
        let fb = mel_filterbank(&p.config()).unwrap();
        for k in 0..fb.n_mels() {
            assert!(fb.row(k).iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn rows_peak_next_to_their_centre() {
    // The triangles have unequal slopes, so when the centre falls almost halfway
    // between two bins the steeper side can lose; the peak must then still be
    // one of the two bracketing bins and the one the closed-form triangle favours.
    for p in [Preset::Passt1, Preset::Cpmobile] {
        let cfg = p.config();
        let fb = mel_filterbank(&cfg).unwrap();
        let e = edges(&cfg);
        let bin_hz = cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
        let mut nearest_hits = 0;
        for k in 0..cfg.n_mels {
            let row = fb.row(k);
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            let c = e[k + 1] / bin_hz;
            let (lo, hi) = (c.floor() as usize, c.ceil() as usize);
            assert!(peak == lo || peak == hi, "{p} row {k}: peak {peak}, centre at bin {c:.3}");
            let tri = |b: usize| {
                let f = b as f64 * bin_hz;
                ((f - e[k]) / (e[k + 1] - e[k])).min((e[k + 2] - f) / (e[k + 2] - e[k + 1]))
            };
            let other = if peak == lo { hi } else { lo };
            assert!(tri(peak) >= tri(other), "{p} row {k}");
            nearest_hits += usize::from(peak == c.round() as usize);
        }
        assert!(nearest_hits * 10 >= cfg.n_mels * 9, "{p}: only {nearest_hits} rows peak at the nearest bin");
    }
}

#[test]
fn silence_sits_on_the_floor() {
    let cfg = Preset::Cpmobile.config();
    let s = log_mel(&vec![0.0; 32_000], &cfg).unwrap();
    let floor = cfg.log_floor.ln() as f32;
    assert!(s.data.iter().all(|&v| v == floor));
}

#[test]
fn one_second_at_hop_500_gives_65_frames() {
    let s = log_mel(&vec![0.1; 32_000], &Preset::Cpmobile.config()).unwrap();
    assert_eq!((s.n_mels, s.n_frames), (256, 1 + 32_000 / 500));
}

#[test]
fn tone_lands_in_its_mel_band() {
    let cfg = Preset::Cpmobile.config();
    let wave: Vec<f32> = (0..32_000)
        .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 32_000.0).sin() as f32)
        .collect();
    let s = log_mel(&wave, &cfg).unwrap();
    let mid = s.n_frames / 2;
    let col = s.column(mid);
    let got = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
    let e = edges(&cfg);
    let tri = |k: usize| ((1000.0 - e[k]) / (e[k + 1] - e[k])).min((e[k + 2] - 1000.0) / (e[k + 2] - e[k + 1]));
    let want = (0..cfg.n_mels).max_by(|&a, &b| tri(a).total_cmp(&tri(b))).unwrap();
    assert_eq!(got, want);
}

fn wave_strategy(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hop_shift_moves_frames_by_one(w in wave_strategy(8_000)) {
        let cfg = Preset::Passt1.config();
        let ex = LogMelExtractor::new(&cfg).unwrap();
        let hop = cfg.hop_length;
        let mut shifted = vec![0.0f32; w.len()];
        for (i, v) in w.iter().enumerate() {
            shifted[(i + hop) % w.len()] = *v;
        }
        let a = ex.compute(&w).unwrap();
        let b = ex.compute(&shifted).unwrap();
        // Frames whose window stays clear of the padded edges on both sides.
        let margin = cfg.n_fft / hop + 2;
        for t in margin..a.n_frames - margin - 1 {
            for m in 0..a.n_mels {
                prop_assert!((a.get(m, t) - b.get(m, t + 1)).abs() < 1e-4, "frame {t} mel {m}");
            }
        }
    }

    #[test]
    fn louder_never_lowers_entries_above_floor(w in wave_strategy(4_000), c in 1.01f32..4.0) {
        let cfg = Preset::Passt1.config();
        let ex = LogMelExtractor::new(&cfg).unwrap();
        let a = ex.compute(&w).unwrap();
        let loud: Vec<f32> = w.iter().map(|v| v * c).collect();
        let b = ex.compute(&loud).unwrap();
        let floor = cfg.log_floor.ln() as f32;
        for (x, y) in a.data.iter().zip(&b.data) {
            if *x > floor {
                prop_assert!(y >= x);
            }
        }
    }

    #[test]
    fn identical_input_gives_identical_bits(w in wave_strategy(3_000)) {
        let cfg = Preset::Cpresnet1.config();
        let a = log_mel(&w, &cfg).unwrap();
        let b = log_mel(&w, &cfg).unwrap();
        prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
