//! Log-mel frontend against a direct, unoptimised reference.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

use usm_core::features::{log_mel, resample, AudioClip, MelFrontend, NUM_MELS, SAMPLE_RATE};

/// Naive DFT power spectrum, dense triangular filters evaluated at every
/// bin, natural log with the same floor.
fn reference_log_mel(samples: &[f64]) -> Vec<Vec<f64>> {
    let (win, hop, nfft) = (400usize, 160usize, 1024usize);
    let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(125.0), mel(7600.0));
    let edges: Vec<f64> = (0..NUM_MELS + 2).map(|i| hz(lo + (hi - lo) * i as f64 / (NUM_MELS as f64 + 1.0))).collect();
    let bins = nfft / 2 + 1;
    let mut out = Vec::new();
    let mut start = 0;
    while start + win <= samples.len() {
        let frame: Vec<f64> = (0..win)
            .map(|i| samples[start + i] * (0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos()))
            .collect();
        let power: Vec<f64> = (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / nfft as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let row = (0..NUM_MELS)
            .map(|m| {
                let e: f64 = (0..bins)
                    .map(|k| {
                        let f = k as f64 * SAMPLE_RATE as f64 / nfft as f64;
                        let w = if f <= edges[m] || f >= edges[m + 2] {
                            0.0
                        } else if f <= edges[m + 1] {
                            (f - edges[m]) / (edges[m + 1] - edges[m])
                        } else {
                            (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1])
                        };
                        w * power[k]
                    })
                    .sum();
                (e + 1e-10).ln()
            })
            .collect();
        out.push(row);
        start += hop;
    }
    out
}

#[test]
fn white_noise_matches_reference_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let samples: Vec<f64> = (0..400 + 160 * 11).map(|_| noise.sample(&mut rng)).collect();
    let got = log_mel(&AudioClip::new(samples.clone(), SAMPLE_RATE));
    let want = reference_log_mel(&samples);
    assert_eq!(got.num_frames, want.len());
    assert_eq!(got.num_frames, 12);
    let mut worst: f64 = 0.0;
    for (t, row) in want.iter().enumerate() {
        for (m, v) in row.iter().enumerate() {
            worst = worst.max((got.frame(t)[m] - v).abs());
        }
    }
    assert!(worst < 1e-6, "max abs deviation {worst:e}");
}

#[test]
fn one_second_gives_98_frames() {
    let f = log_mel(&AudioClip::new(vec![0.0; 16_000], SAMPLE_RATE));
    assert_eq!(f.num_frames, 98);
    assert_eq!(f.frames.len(), 98 * NUM_MELS);
}

#[test]
fn filters_are_unit_peaked_triangles() {
    let fb = MelFrontend::new().filterbank();
    for row in &fb {
        let peak = row.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.0 && peak <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frame_count_formula(n in 0usize..20_000) {
        let expected = if n < 400 { 0 } else { 1 + (n - 400) / 160 };
        prop_assert_eq!(MelFrontend::num_frames(n), expected);
    }

    #[test]
    fn resampled_length_tracks_duration(rate in prop::sample::select(vec![8_000u32, 22_050, 44_100, 48_000]), ms in 50usize..1500) {
        let n = rate as usize * ms / 1000;
        let out = resample(&AudioClip::new(vec![0.1; n], rate), SAMPLE_RATE);
        let expected = n as f64 * SAMPLE_RATE as f64 / rate as f64;
        prop_assert!((out.samples.len() as f64 - expected).abs() <= 1.0);
    }

    #[test]
    fn features_are_finite(seed in any::<u64>(), gain in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let s: Vec<f64> = (0..2000).map(|_| gain * noise.sample(&mut rng)).collect();
        let f = log_mel(&AudioClip::new(s, SAMPLE_RATE));
        prop_assert!(f.frames.iter().all(|v| v.is_finite()));
        let n = f.normalized();
        prop_assert!(n.frames.iter().all(|v| v.is_finite()));
    }
}
