//! Short-time objective intelligibility.

use std::f64::consts::PI;

use ndarray::{s, Array2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::EvalError;
use crate::audio::AudioBuffer;

pub const STOI_FS: u32 = 10_000;
pub const FRAME_LEN: usize = 256;
pub const HOP: usize = FRAME_LEN / 2;
pub const NFFT: usize = 512;
pub const N_BANDS: usize = 15;
pub const MIN_FREQ_HZ: f64 = 150.0;
/// Frames per analysis segment (384 ms).
pub const SEGMENT_FRAMES: usize = 30;
pub const BETA_DB: f64 = -15.0;
pub const DYN_RANGE_DB: f64 = 40.0;

const EPS: f64 = f64::EPSILON;

/// STOI between mono clean and degraded buffers of equal rate and length.
pub fn stoi(clean: &AudioBuffer, degraded: &AudioBuffer) -> Result<f64, EvalError> {
    if clean.n_channels() != 1 || degraded.n_channels() != 1 {
        return Err(EvalError::NotMono);
    }
    if clean.sample_rate() != degraded.sample_rate() {
        return Err(EvalError::SampleRateMismatch(clean.sample_rate(), degraded.sample_rate()));
    }
    let x: Vec<f64> = clean.channel(0).iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = degraded.channel(0).iter().map(|&v| v as f64).collect();
    stoi_samples(&x, &y, clean.sample_rate())
}

pub fn stoi_samples(clean: &[f64], degraded: &[f64], sample_rate: u32) -> Result<f64, EvalError> {
    if clean.len() != degraded.len() {
        return Err(EvalError::LengthMismatch(clean.len(), degraded.len()));
    }
    let (x, y) = if sample_rate == STOI_FS {
        (clean.to_vec(), degraded.to_vec())
    } else {
        (resample(clean, sample_rate, STOI_FS), resample(degraded, sample_rate, STOI_FS))
    };
    let (x, y) = remove_silent_frames(&x, &y);
    let xs = band_envelopes(&x);
    let ys = band_envelopes(&y);
    let n_frames = xs.ncols();
    if n_frames < SEGMENT_FRAMES {
        return Err(EvalError::TooShort { frames: n_frames, needed: SEGMENT_FRAMES });
    }
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEGMENT_FRAMES..=n_frames {
        for j in 0..N_BANDS {
            let xseg = xs.slice(s![j, m - SEGMENT_FRAMES..m]);
            let yseg = ys.slice(s![j, m - SEGMENT_FRAMES..m]);
            let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let xv = xseg.to_vec();
            let scale = norm(&xv) / (norm(&yseg.to_vec()) + EPS);
            let mut yp: Vec<f64> = yseg.iter().zip(&xv).map(|(&b, &a)| (b * scale).min(a * (1.0 + clip))).collect();
            let mut xp = xv;
            center_unit(&mut xp);
            center_unit(&mut yp);
            total += xp.iter().zip(&yp).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn center_unit(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|a| *a -= mean);
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt() + EPS;
    v.iter_mut().for_each(|a| *a /= n);
}

/// Symmetric Hann window without the zero endpoints.
fn hann(n: usize) -> Vec<f64> {
    (1..=n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos()).collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME_LEN)).step_by(HOP)
}

/// Drop frames more than `DYN_RANGE_DB` below the loudest clean frame and
/// rebuild both signals by overlap-add.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hann(FRAME_LEN);
    let frame = |sig: &[f64], i: usize| -> Vec<f64> { w.iter().zip(&sig[i..i + FRAME_LEN]).map(|(a, b)| a * b).collect() };
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&i| 20.0 * (frame(x, i).iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts.iter().zip(&energies).filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0).map(|(&i, _)| i).collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * HOP + FRAME_LEN;
    let (mut xo, mut yo) = (vec![0.0; out_len], vec![0.0; out_len]);
    for (n, &i) in kept.iter().enumerate() {
        let (fx, fy) = (frame(x, i), frame(y, i));
        for k in 0..FRAME_LEN {
            xo[n * HOP + k] += fx[k];
            yo[n * HOP + k] += fy[k];
        }
    }
    (xo, yo)
}

/// One-third-octave band matrix over the `NFFT/2 + 1` bins, with band edges
/// snapped to the nearest bin.
pub fn third_octave_bands() -> Vec<(usize, usize)> {
    let n_bins = NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..n_bins).map(|i| i as f64 * STOI_FS as f64 / NFFT as f64).collect();
    let nearest = |f: f64| {
        (0..n_bins).min_by(|&a, &b| (freqs[a] - f).powi(2).total_cmp(&(freqs[b] - f).powi(2))).expect("bins")
    };
    (0..N_BANDS)
        .map(|k| {
            let lo = MIN_FREQ_HZ * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0);
            let hi = MIN_FREQ_HZ * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band amplitude envelopes, `N_BANDS × frames`.
fn band_envelopes(x: &[f64]) -> Array2<f64> {
    let w = hann(FRAME_LEN);
    let bands = third_octave_bands();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let mut out = Array2::zeros((N_BANDS, starts.len()));
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for (m, &i) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for k in 0..FRAME_LEN {
            buf[k].re = w[k] * x[i + k];
        }
        fft.process(&mut buf);
        for (j, &(lo, hi)) in bands.iter().enumerate() {
            out[[j, m]] = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        }
    }
    out
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    const HALF_TAPS: f64 = 32.0;
    let ratio = from as f64 / to as f64;
    let cutoff = (to as f64 / from as f64).min(1.0);
    let half = HALF_TAPS / cutoff;
    let n_out = ((x.len() as f64) / ratio).floor() as usize;
    (0..n_out)
        .map(|n| {
            let center = n as f64 * ratio;
            let lo = ((center - half).ceil().max(0.0)) as usize;
            let hi = ((center + half).floor() as usize).min(x.len().saturating_sub(1));
            (lo..=hi)
                .map(|m| {
                    let t = m as f64 - center;
                    let arg = PI * cutoff * t;
                    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                    let win = 0.5 + 0.5 * (PI * t / half).cos();
                    x[m] * cutoff * sinc * win
                })
                .sum()
        })
        .collect()
}
