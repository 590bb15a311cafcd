//! Seeded signal generators for fixtures, demos and tests.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::seed::substream;

/// Gaussian noise with standard deviation `std`, clamped to `[-1, 1]`.
pub fn gaussian_noise(n: usize, std: f64, seed: u64) -> Vec<f32> {
    let mut rng = substream(seed, "synth.noise");
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    (0..n).map(|_| normal.sample(&mut rng).clamp(-1.0, 1.0) as f32).collect()
}

pub fn sine(n: usize, sample_rate: u32, freq_hz: f64, amplitude: f64) -> Vec<f32> {
    let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate as f64;
    (0..n).map(|i| (amplitude * (w * i as f64).sin()) as f32).collect()
}

/// Noise shaped by a slow random envelope, a crude stand-in for speech:
/// broadband, with syllable-rate (2-6 Hz) level fluctuations and short
/// near-silent stretches.
pub fn speech_like(n: usize, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = substream(seed, "synth.speech_like");
    let normal = Normal::new(0.0, 1.0).unwrap();
    // one-pole lowpass + highpass to tilt the spectrum like speech
    let mut lp = 0.0f64;
    let mut prev = 0.0f64;
    let mut out = Vec::with_capacity(n);
    let syllable = (sample_rate as f64 * 0.2) as usize;
    let mut level = 0.0;
    let mut target = 0.0;
    for i in 0..n {
        if i % syllable.max(1) == 0 {
            target = if rng.random_bool(0.15) { 0.01 } else { rng.random_range(0.3..1.0) };
        }
        level += (target - level) * 0.002;
        let white: f64 = normal.sample(&mut rng);
        lp += 0.3 * (white - lp);
        let hp = lp - prev;
        prev = lp;
        out.push(((lp + 0.5 * hp) * 0.25 * level).clamp(-1.0, 1.0) as f32);
    }
    out
}

/// A harmonic "voiced" tone with a mild, never-silent amplitude wobble.
pub fn voiced(n: usize, sample_rate: u32, f0: f64, amplitude: f64) -> Vec<f32> {
    let sr = sample_rate as f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let wobble = 0.8 + 0.2 * (2.0 * std::f64::consts::PI * 4.0 * t).sin();
            let s: f64 = (1..=4)
                .map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64)
                .sum();
            (amplitude * wobble * s / 2.1) as f32
        })
        .collect()
}

/// Channel signal that is voiced inside each `(start_s, end_s)` interval and
/// carries low background noise (about -70 dBFS) elsewhere.
pub fn scripted_channel(
    duration_s: f64,
    sample_rate: u32,
    intervals: &[(f64, f64)],
    f0: f64,
    seed: u64,
) -> Vec<f32> {
    let n = (duration_s * sample_rate as f64).round() as usize;
    let mut out = gaussian_noise(n, 10f64.powf(-70.0 / 20.0), seed);
    let tone = voiced(n, sample_rate, f0, 0.4);
    for &(s, e) in intervals {
        let lo = (s * sample_rate as f64).round() as usize;
        let hi = ((e * sample_rate as f64).round() as usize).min(n);
        if lo < hi {
            out[lo..hi].copy_from_slice(&tone[lo..hi]);
        }
    }
    out
}
