//! Stereo conversation QA and corpus manifest assembly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{rms_db, AudioBuffer};
use crate::wav::{read_wav, WavError};

/// Magnitude at or above which a sample counts as clipped.
pub const CLIP_LEVEL: f32 = 0.999;
/// Per-10 ms-frame level below which a frame counts as silent.
pub const SILENCE_FLOOR_DB: f64 = -60.0;
const DB_FLOOR: f64 = -100.0;
const QA_FRAME_S: f64 = 0.010;

/// File extension of the alignment companion of `<id>.wav`.
pub const ALIGNMENT_EXT: &str = "align";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("audio is empty")]
    EmptyAudio,
    #[error("QA expects {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPolicy {
    pub max_clipping_ratio: f64,
    pub max_balance_db: f64,
    pub max_silence_fraction: f64,
    pub min_duration_s: f64,
    /// Allow mono input (balance is then 0).
    pub allow_mono: bool,
}

impl Default for QaPolicy {
    fn default() -> Self {
        Self {
            max_clipping_ratio: 0.001,
            max_balance_db: 12.0,
            max_silence_fraction: 0.8,
            min_duration_s: 10.0,
            allow_mono: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaReport {
    pub duration_s: f64,
    pub clipping_ratio: f64,
    pub rms_db: Vec<f64>,
    pub balance_db: f64,
    pub silence_fraction: f64,
    pub pass: bool,
    /// Names of the failed checks, empty when `pass`.
    pub failures: Vec<String>,
}

pub fn qa_check(audio: &AudioBuffer, policy: &QaPolicy) -> Result<QaReport, IngestError> {
    if audio.is_empty() {
        return Err(IngestError::EmptyAudio);
    }
    if audio.n_channels() != 2 && !policy.allow_mono {
        return Err(IngestError::ChannelCount { expected: 2, got: audio.n_channels() });
    }
    let total = (audio.len() * audio.n_channels()) as f64;
    let clipped = audio
        .channels()
        .iter()
        .flat_map(|c| c.iter())
        .filter(|s| s.abs() >= CLIP_LEVEL)
        .count();
    let clipping_ratio = clipped as f64 / total;

    let levels: Vec<f64> = audio.channels().iter().map(|c| rms_db(c, DB_FLOOR)).collect();
    let balance_db = if levels.len() == 2 { (levels[0] - levels[1]).abs() } else { 0.0 };

    // A frame is silent when every channel is below the floor.
    let frame = ((QA_FRAME_S * audio.sample_rate() as f64).round() as usize).max(1);
    let n_frames = audio.len().div_ceil(frame);
    let silent = (0..n_frames)
        .filter(|&i| {
            let lo = i * frame;
            let hi = (lo + frame).min(audio.len());
            audio.channels().iter().all(|c| rms_db(&c[lo..hi], DB_FLOOR) < SILENCE_FLOOR_DB)
        })
        .count();
    let silence_fraction = silent as f64 / n_frames as f64;
    let duration_s = audio.duration_s();

    let mut failures = Vec::new();
    if clipping_ratio > policy.max_clipping_ratio {
        failures.push("clipping".to_string());
    }
    if balance_db > policy.max_balance_db {
        failures.push("balance".to_string());
    }
    if silence_fraction > policy.max_silence_fraction {
        failures.push("silence".to_string());
    }
    if duration_s < policy.min_duration_s {
        failures.push("duration".to_string());
    }
    Ok(QaReport {
        duration_s,
        clipping_ratio,
        rms_db: levels,
        balance_db,
        silence_fraction,
        pass: failures.is_empty(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum EntryStatus {
    Active,
    Excluded { reasons: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: PathBuf,
    pub alignment_path: Option<PathBuf>,
    pub duration_s: Option<f64>,
    pub qa: Option<QaReport>,
    #[serde(flatten)]
    pub status: EntryStatus,
}

impl ManifestEntry {
    pub fn is_active(&self) -> bool {
        self.status == EntryStatus::Active
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn active(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.is_active())
    }

    pub fn excluded(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| !e.is_active())
    }

    /// One JSON record per line, in id order.
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entry serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }
}

/// Evaluate one audio file; errors become exclusion reasons.
pub fn inspect_entry(
    id: String,
    audio_path: PathBuf,
    alignment_path: Option<PathBuf>,
    policy: &QaPolicy,
) -> ManifestEntry {
    let mut reasons = Vec::new();
    if alignment_path.is_none() {
        reasons.push("missing alignment".to_string());
    }
    let (duration_s, qa) = match read_wav(&audio_path) {
        Ok(audio) => match qa_check(&audio, policy) {
            Ok(qa) => {
                reasons.extend(qa.failures.iter().cloned());
                (Some(qa.duration_s), Some(qa))
            }
            Err(e) => {
                reasons.push(format!("qa error: {e}"));
                (Some(audio.duration_s()), None)
            }
        },
        Err(e) => {
            reasons.push(decode_reason(&e));
            (None, None)
        }
    };
    let status =
        if reasons.is_empty() { EntryStatus::Active } else { EntryStatus::Excluded { reasons } };
    ManifestEntry { id, audio_path, alignment_path, duration_s, qa, status }
}

fn decode_reason(e: &WavError) -> String {
    format!("decode error: {e}")
}

/// Audio/alignment pairs found under `root`, keyed by basename.
pub fn scan_pairs(root: &Path) -> Result<BTreeMap<String, (PathBuf, Option<PathBuf>)>, IngestError> {
    let io = |source| IngestError::Io { path: root.to_path_buf(), source };
    let mut audio = BTreeMap::new();
    let mut align = BTreeMap::new();
    for entry in std::fs::read_dir(root).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else { continue };
        let stem = stem.to_string_lossy().into_owned();
        match ext.to_string_lossy().to_ascii_lowercase().as_str() {
            "wav" => {
                audio.insert(stem, path);
            }
            e if e == ALIGNMENT_EXT => {
                align.insert(stem, path);
            }
            _ => {}
        }
    }
    Ok(audio
        .into_iter()
        .map(|(id, a)| {
            let al = align.remove(&id);
            (id, (a, al))
        })
        .collect())
}

pub fn build_manifest(root: &Path, policy: &QaPolicy) -> Result<CorpusManifest, IngestError> {
    let entries = scan_pairs(root)?
        .into_iter()
        .map(|(id, (audio, align))| inspect_entry(id, audio, align, policy))
        .collect();
    Ok(CorpusManifest { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::wav::write_wav_pcm16;

    #[test]
    fn saturated_square_wave() {
        let sq: Vec<f32> = (0..16000 * 12).map(|i| if (i / 40) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let audio = AudioBuffer::stereo(16000, sq.clone(), sq).unwrap();
        let r = qa_check(&audio, &QaPolicy::default()).unwrap();
        assert_eq!(r.clipping_ratio, 1.0);
        assert!(!r.pass);
        assert!(r.failures.contains(&"clipping".to_string()));
    }

    #[test]
    fn silent_stereo() {
        let audio = AudioBuffer::stereo(16000, vec![0.0; 16000 * 60], vec![0.0; 16000 * 60]).unwrap();
        let r = qa_check(&audio, &QaPolicy::default()).unwrap();
        assert_eq!(r.silence_fraction, 1.0);
        assert!(!r.pass);
    }

    #[test]
    fn balanced_noise_channels() {
        // Gaussian noise with std sigma has RMS sigma: -20 dBFS => 0.1, -26 dBFS => 10^(-1.3).
        let sr = 16000;
        let a = synth::gaussian_noise(sr as usize * 60, 0.1, 1);
        let b = synth::gaussian_noise(sr as usize * 60, 10f64.powf(-26.0 / 20.0), 2);
        let audio = AudioBuffer::stereo(sr, a, b).unwrap();
        let r = qa_check(&audio, &QaPolicy::default()).unwrap();
        assert!((r.balance_db - 6.0).abs() <= 0.5, "balance {}", r.balance_db);
        assert!((r.rms_db[0] + 20.0).abs() < 0.1);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn scale_consistency() {
        let sr = 8000;
        let a = synth::gaussian_noise(sr * 20, 0.05, 3);
        let b = synth::gaussian_noise(sr * 20, 0.02, 4);
        let base = qa_check(&AudioBuffer::stereo(sr as u32, a.clone(), b.clone()).unwrap(), &QaPolicy::default()).unwrap();
        let dbl = |v: &[f32]| v.iter().map(|s| s * 2.0).collect::<Vec<_>>();
        let doubled =
            qa_check(&AudioBuffer::stereo(sr as u32, dbl(&a), dbl(&b)).unwrap(), &QaPolicy::default()).unwrap();
        for c in 0..2 {
            assert!((doubled.rms_db[c] - base.rms_db[c] - 6.0206).abs() < 1e-3);
        }
        assert!((doubled.balance_db - base.balance_db).abs() < 1e-6);
    }

    #[test]
    fn empty_and_mono() {
        let empty = AudioBuffer::stereo(8000, vec![], vec![]).unwrap();
        assert!(matches!(qa_check(&empty, &QaPolicy::default()), Err(IngestError::EmptyAudio)));
        let mono = AudioBuffer::mono(8000, vec![0.1; 100]).unwrap();
        assert!(matches!(qa_check(&mono, &QaPolicy::default()), Err(IngestError::ChannelCount { .. })));
        let relaxed = QaPolicy { allow_mono: true, ..QaPolicy::default() };
        assert_eq!(qa_check(&mono, &relaxed).unwrap().balance_db, 0.0);
    }

    #[test]
    fn manifest_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let empty = build_manifest(dir.path(), &QaPolicy::default()).unwrap();
        assert!(empty.entries.is_empty());

        let sr = 8000u32;
        let good = || {
            AudioBuffer::stereo(
                sr,
                synth::gaussian_noise(sr as usize * 12, 0.1, 5),
                synth::gaussian_noise(sr as usize * 12, 0.08, 6),
            )
            .unwrap()
        };
        for id in ["c", "a", "b"] {
            write_wav_pcm16(dir.path().join(format!("{id}.wav")), &good()).unwrap();
            std::fs::write(dir.path().join(format!("{id}.{ALIGNMENT_EXT}")), "").unwrap();
        }
        let m = build_manifest(dir.path(), &QaPolicy::default()).unwrap();
        let ids: Vec<_> = m.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(m.active().count(), 3);
        let back = CorpusManifest::from_jsonl(&m.to_jsonl()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn clipped_file_is_excluded_with_reason() {
        let dir = tempfile::tempdir().unwrap();
        let sr = 8000u32;
        let ok = AudioBuffer::stereo(
            sr,
            synth::gaussian_noise(sr as usize * 12, 0.1, 7),
            synth::gaussian_noise(sr as usize * 12, 0.1, 8),
        )
        .unwrap();
        let sq: Vec<f32> = (0..sr as usize * 12).map(|i| if i % 20 < 10 { 1.0 } else { -1.0 }).collect();
        let clipped = AudioBuffer::stereo(sr, sq.clone(), sq).unwrap();
        write_wav_pcm16(dir.path().join("ok.wav"), &ok).unwrap();
        write_wav_pcm16(dir.path().join("hot.wav"), &clipped).unwrap();
        std::fs::write(dir.path().join("ok.align"), "").unwrap();
        std::fs::write(dir.path().join("hot.align"), "").unwrap();
        std::fs::write(dir.path().join("orphan.wav"), encode_ok(&ok)).unwrap();

        let m = build_manifest(dir.path(), &QaPolicy::default()).unwrap();
        let active: Vec<_> = m.active().map(|e| e.id.as_str()).collect();
        assert_eq!(active, ["ok"]);
        let hot = m.entries.iter().find(|e| e.id == "hot").unwrap();
        assert_eq!(hot.status, EntryStatus::Excluded { reasons: vec!["clipping".into()] });
        let orphan = m.entries.iter().find(|e| e.id == "orphan").unwrap();
        assert_eq!(orphan.status, EntryStatus::Excluded { reasons: vec!["missing alignment".into()] });
    }

    fn encode_ok(a: &AudioBuffer) -> Vec<u8> {
        crate::wav::encode_wav_pcm16(a)
    }
}
