//! Energy-based voice activity detection on one channel.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Level assigned to digitally silent frames.
pub const SILENT_FRAME_DB: f64 = -100.0;
/// Percentile of frame energies taken as the noise floor.
pub const NOISE_FLOOR_PERCENTILE: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum VadError {
    #[error("empty channel")]
    Empty,
    #[error("window of {window} samples is longer than the {len}-sample signal")]
    WindowTooLong { window: usize, len: usize },
    #[error("invalid VAD configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub threshold_db_offset: f64,
    pub absolute_floor_db: f64,
    pub min_speech_ms: f64,
    pub min_silence_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            threshold_db_offset: 10.0,
            absolute_floor_db: -40.0,
            min_speech_ms: 100.0,
            min_silence_ms: 200.0,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), VadError> {
        if !(self.hop_ms > 0.0 && self.window_ms >= self.hop_ms) {
            return Err(VadError::Config(format!(
                "need window_ms >= hop_ms > 0, got {} / {}",
                self.window_ms, self.hop_ms
            )));
        }
        if !(self.min_speech_ms > 0.0 && self.min_silence_ms > 0.0) {
            return Err(VadError::Config("minimum durations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeechSegment {
    pub start_s: f64,
    pub end_s: f64,
}

impl SpeechSegment {
    pub fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Frame RMS levels in dBFS, one per hop; the final partial window is dropped.
pub fn frame_energies(
    samples: &[f32],
    sample_rate: u32,
    window_ms: f64,
    hop_ms: f64,
) -> Result<Vec<f64>, VadError> {
    if samples.is_empty() {
        return Err(VadError::Empty);
    }
    let window = ms_to_samples(window_ms, sample_rate).max(1);
    let hop = ms_to_samples(hop_ms, sample_rate).max(1);
    if window > samples.len() {
        return Err(VadError::WindowTooLong { window, len: samples.len() });
    }
    let n_frames = (samples.len() - window) / hop + 1;
    Ok((0..n_frames)
        .map(|i| crate::audio::rms_db(&samples[i * hop..i * hop + window], SILENT_FRAME_DB))
        .collect())
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Nearest-rank percentile.
fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Decision threshold in dBFS for a sequence of frame energies.
///
/// The noise floor is the 10th-percentile frame level, capped at the
/// absolute floor so a recording with no pauses (or a steady tone) still
/// clears the threshold.
pub fn speech_threshold(energies: &[f64], config: &VadConfig) -> f64 {
    let floor = percentile(energies, NOISE_FLOOR_PERCENTILE).min(config.absolute_floor_db);
    (floor + config.threshold_db_offset).max(config.absolute_floor_db)
}

/// Speech segments from frame energies.
///
/// A window overlapping speech by any amount flags its frame, so a run of
/// speech frames `i..=j` is reported as `[i*hop + (window - hop), (j+1)*hop]`.
/// A run starting at frame 0 starts at 0; a run reaching the final frame
/// ends where the last window ends. Runs too short to cover one hop after
/// that compensation are discarded.
pub fn detect_speech(energies: &[f64], config: &VadConfig) -> Result<Vec<SpeechSegment>, VadError> {
    config.validate()?;
    if energies.is_empty() {
        return Ok(Vec::new());
    }
    let threshold = speech_threshold(energies, config);
    let hop_s = config.hop_ms / 1000.0;
    let lead_s = (config.window_ms - config.hop_ms) / 1000.0;
    let last = energies.len() - 1;
    let end_of_signal = last as f64 * hop_s + config.window_ms / 1000.0;
    let mut raw = Vec::new();
    let mut i = 0;
    while i < energies.len() {
        if energies[i] > threshold {
            let first = i;
            while i < energies.len() && energies[i] > threshold {
                i += 1;
            }
            let start_s = if first == 0 { 0.0 } else { first as f64 * hop_s + lead_s };
            let end_s = if i - 1 == last { end_of_signal } else { i as f64 * hop_s };
            if start_s < end_s {
                raw.push(SpeechSegment::new(start_s, end_s));
            }
        } else {
            i += 1;
        }
    }
    Ok(postprocess(&raw, config.min_speech_ms / 1000.0, config.min_silence_ms / 1000.0))
}

/// Merge silences shorter than `min_silence_s`, then drop speech shorter
/// than `min_speech_s`. Idempotent on its own output.
pub fn postprocess(segments: &[SpeechSegment], min_speech_s: f64, min_silence_s: f64) -> Vec<SpeechSegment> {
    const EPS: f64 = 1e-9;
    let mut merged: Vec<SpeechSegment> = Vec::with_capacity(segments.len());
    for &seg in segments {
        match merged.last_mut() {
            Some(prev) if seg.start_s - prev.end_s < min_silence_s - EPS => prev.end_s = seg.end_s,
            _ => merged.push(seg),
        }
    }
    merged.retain(|s| s.duration_s() >= min_speech_s - EPS);
    merged
}

/// Full single-channel pipeline: energies then segments.
pub fn vad_channel(samples: &[f32], sample_rate: u32, config: &VadConfig) -> Result<Vec<SpeechSegment>, VadError> {
    let energies = frame_energies(samples, sample_rate, config.window_ms, config.hop_ms)?;
    let mut segments = detect_speech(&energies, config)?;
    // a run reaching the last frame extends over the dropped partial window
    let last_frame_end = (energies.len() - 1) as f64 * config.hop_ms / 1000.0 + config.window_ms / 1000.0;
    let duration = samples.len() as f64 / sample_rate as f64;
    if let Some(last) = segments.last_mut() {
        if last.end_s >= last_frame_end - 1e-9 {
            last.end_s = duration;
        }
    }
    Ok(segments)
}

/// `{"channel":c,"start_s":x.xxx,"end_s":y.yyy}` per line.
pub fn segments_to_jsonl(channel: usize, segments: &[SpeechSegment]) -> String {
    segments
        .iter()
        .map(|s| format!("{{\"channel\":{channel},\"start_s\":{:.3},\"end_s\":{:.3}}}\n", s.start_s, s.end_s))
        .collect()
}

#[derive(Debug, Deserialize)]
struct SegmentRecord {
    channel: usize,
    start_s: f64,
    end_s: f64,
}

/// Parse segment records, grouping by channel (0 and 1).
pub fn segments_from_jsonl(text: &str) -> Result<[Vec<SpeechSegment>; 2], serde_json::Error> {
    let mut out = [Vec::new(), Vec::new()];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: SegmentRecord = serde_json::from_str(line)?;
        if r.channel < 2 {
            out[r.channel].push(SpeechSegment::new(r.start_s, r.end_s));
        }
    }
    Ok(out)
}
