//! 17-stream token framing: text placement with PAD filling, one-step
//! acoustic delay, fixed-length chunking and the binary chunk container.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::TimeGrid;
use crate::seed::substream;
use crate::tokenizer::{Vocab, PAD_ID};

pub const N_CODEBOOKS: usize = 8;
pub const N_AUDIO_STREAMS: usize = 2 * N_CODEBOOKS;
pub const N_STREAMS: usize = 1 + N_AUDIO_STREAMS;
pub const DEFAULT_CHUNK_STEPS: usize = 2048;
pub const DEFAULT_AUDIO_VOCAB: usize = 2048;

const MAGIC: &[u8; 4] = b"DPXF";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("word {word:?} needs step {step}, beyond the {n_steps}-step grid")]
    Overflow { word: String, step: usize, n_steps: usize },
    #[error("word {word:?} has invalid timing [{start}, {end}]")]
    WordTiming { word: String, start: f64, end: f64 },
    #[error("streams have no steps")]
    NoSteps,
    #[error("text stream has {text} steps but audio has {audio}")]
    LengthMismatch { text: usize, audio: usize },
    #[error("expected {expected} audio streams, got {got}")]
    AudioStreams { expected: usize, got: usize },
    #[error("no chunks")]
    NoChunks,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad chunk container: {0}")]
    Container(String),
    #[error("alignment line {line}: {msg}")]
    Alignment { line: usize, msg: String },
    #[error("audio token file line {line}: {msg}")]
    AudioTokens { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Channel {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub channel: Channel,
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Parse line-delimited `{channel, text, start_s, end_s}` records.
pub fn parse_alignment(text: &str) -> Result<Vec<AlignedWord>, FrameError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FrameError::Alignment { line: i + 1, msg: e.to_string() })
        })
        .collect()
}

/// What a stream index carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Text,
    Audio { speaker: Channel, codebook: usize },
}

/// Stream 0 is text, 1..=8 system codebooks 1..8, 9..=16 user codebooks.
/// Codebook index 0 is the semantic codebook.
pub struct StreamLayout;

impl StreamLayout {
    pub const TEXT: usize = 0;
    pub const SEMANTIC: [usize; 2] = [1, 1 + N_CODEBOOKS];

    pub fn audio_stream(speaker: Channel, codebook: usize) -> usize {
        assert!(codebook < N_CODEBOOKS);
        let base = match speaker {
            Channel::System => 1,
            Channel::User => 1 + N_CODEBOOKS,
        };
        base + codebook
    }

    pub fn kind(stream: usize) -> StreamKind {
        match stream {
            0 => StreamKind::Text,
            s if s <= N_CODEBOOKS => StreamKind::Audio { speaker: Channel::System, codebook: s - 1 },
            s if s < N_STREAMS => StreamKind::Audio { speaker: Channel::User, codebook: s - 1 - N_CODEBOOKS },
            s => panic!("stream {s} out of range"),
        }
    }

    pub fn is_semantic(stream: usize) -> bool {
        Self::SEMANTIC.contains(&stream)
    }

    /// Codes written to the container header, one byte per stream:
    /// 0 text, 1 system semantic, 2 system acoustic, 3 user semantic, 4 user acoustic.
    pub fn descriptor() -> [u8; N_STREAMS] {
        let mut d = [0u8; N_STREAMS];
        for (s, code) in d.iter_mut().enumerate() {
            *code = match Self::kind(s) {
                StreamKind::Text => 0,
                StreamKind::Audio { speaker: Channel::System, codebook: 0 } => 1,
                StreamKind::Audio { speaker: Channel::System, .. } => 2,
                StreamKind::Audio { speaker: Channel::User, codebook: 0 } => 3,
                StreamKind::Audio { speaker: Channel::User, .. } => 4,
            };
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub text_vocab: usize,
    pub audio_vocab: usize,
    pub chunk_steps: usize,
    /// Delay the semantic codebooks together with the acoustic ones.
    pub delay_semantic: bool,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            text_vocab: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            audio_vocab: DEFAULT_AUDIO_VOCAB,
            chunk_steps: DEFAULT_CHUNK_STEPS,
            delay_semantic: false,
        }
    }
}

impl FrameConfig {
    /// Reserved id filling the first step of delayed streams.
    pub fn init_id(&self) -> u32 {
        self.audio_vocab as u32
    }
}

/// Text stream for `grid`, PAD everywhere except word tokens.
///
/// Words from both channels share the stream in start-time order. Each word
/// (with a trailing space as its end-of-word marker) is encoded and its
/// tokens laid on consecutive steps from `floor(start * rate)`, shifted
/// forward past steps already taken.
pub fn place_text_tokens(words: &[AlignedWord], vocab: &Vocab, grid: &TimeGrid) -> Result<Vec<u32>, FrameError> {
    let mut ordered: Vec<&AlignedWord> = words.iter().collect();
    ordered.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.channel.cmp(&b.channel)));
    let mut stream = vec![PAD_ID; grid.n_steps];
    let mut next_free = 0usize;
    for w in ordered {
        if !(w.start_s >= 0.0 && w.start_s < w.end_s) {
            return Err(FrameError::WordTiming { word: w.text.clone(), start: w.start_s, end: w.end_s });
        }
        let tokens = vocab.encode(&format!("{} ", w.text));
        let onset = grid.step_of_time(w.start_s).map_err(|_| FrameError::Overflow {
            word: w.text.clone(),
            step: (w.start_s * grid.rate_hz) as usize,
            n_steps: grid.n_steps,
        })?;
        let first = onset.max(next_free);
        let end = first + tokens.len();
        if end > grid.n_steps {
            return Err(FrameError::Overflow { word: w.text.clone(), step: end - 1, n_steps: grid.n_steps });
        }
        stream[first..end].copy_from_slice(&tokens);
        next_free = end;
    }
    Ok(stream)
}

fn delayed(stream: usize, delay_semantic: bool) -> bool {
    delay_semantic || !StreamLayout::is_semantic(stream + 1)
}

/// Shift delayed audio streams one step later, filling step 0 with `init_id`
/// and dropping the final token. Row `r` is stream `r + 1` of the layout.
pub fn apply_acoustic_delay(audio: ArrayView2<u32>, init_id: u32, delay_semantic: bool) -> Result<Array2<u32>, FrameError> {
    if audio.nrows() != N_AUDIO_STREAMS {
        return Err(FrameError::AudioStreams { expected: N_AUDIO_STREAMS, got: audio.nrows() });
    }
    let n = audio.ncols();
    if n == 0 {
        return Err(FrameError::NoSteps);
    }
    let mut out = audio.to_owned();
    for r in 0..N_AUDIO_STREAMS {
        if delayed(r, delay_semantic) {
            out[[r, 0]] = init_id;
            out.slice_mut(s![r, 1..]).assign(&audio.slice(s![r, ..n - 1]));
        }
    }
    Ok(out)
}

/// Inverse of [`apply_acoustic_delay`] on steps `0..n-1`; the last step of
/// delayed rows, lost by the shift, is filled with `init_id`.
pub fn undo_acoustic_delay(audio: ArrayView2<u32>, init_id: u32, delay_semantic: bool) -> Array2<u32> {
    let n = audio.ncols();
    let mut out = audio.to_owned();
    for r in 0..audio.nrows() {
        if delayed(r, delay_semantic) && n > 0 {
            out.slice_mut(s![r, ..n - 1]).assign(&audio.slice(s![r, 1..]));
            out[[r, n - 1]] = init_id;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameChunk {
    /// `N_STREAMS × steps`, row-major.
    pub tokens: Array2<u32>,
    pub text_vocab: usize,
    pub audio_vocab: usize,
}

impl FrameChunk {
    pub fn steps(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn text(&self) -> ndarray::ArrayView1<'_, u32> {
        self.tokens.row(StreamLayout::TEXT)
    }

    pub fn init_id(&self) -> u32 {
        self.audio_vocab as u32
    }
}

/// Cut aligned streams into consecutive non-overlapping windows of
/// `cfg.chunk_steps`; a trailing partial window is dropped.
pub fn build_chunks(text: &[u32], audio: ArrayView2<u32>, cfg: &FrameConfig) -> Result<Vec<FrameChunk>, FrameError> {
    if audio.nrows() != N_AUDIO_STREAMS {
        return Err(FrameError::AudioStreams { expected: N_AUDIO_STREAMS, got: audio.nrows() });
    }
    if text.len() != audio.ncols() {
        return Err(FrameError::LengthMismatch { text: text.len(), audio: audio.ncols() });
    }
    let n_chunks = text.len() / cfg.chunk_steps;
    Ok((0..n_chunks)
        .map(|c| {
            let lo = c * cfg.chunk_steps;
            let hi = lo + cfg.chunk_steps;
            let mut tokens = Array2::zeros((N_STREAMS, cfg.chunk_steps));
            tokens.row_mut(0).assign(&ndarray::ArrayView1::from(&text[lo..hi]));
            tokens.slice_mut(s![1.., ..]).assign(&audio.slice(s![.., lo..hi]));
            FrameChunk { tokens, text_vocab: cfg.text_vocab, audio_vocab: cfg.audio_vocab }
        })
        .collect())
}

/// Fraction of text positions holding PAD.
pub fn pad_ratio(chunks: &[FrameChunk]) -> Result<f64, FrameError> {
    let total: usize = chunks.iter().map(|c| c.steps()).sum();
    if total == 0 {
        return Err(FrameError::NoChunks);
    }
    let pads: usize = chunks.iter().map(|c| c.text().iter().filter(|&&t| t == PAD_ID).count()).sum();
    Ok(pads as f64 / total as f64)
}

/// Seeded uniform audio tokens, `N_AUDIO_STREAMS × n_steps`, standing in for codec output.
pub fn synth_audio_tokens(n_steps: usize, audio_vocab: usize, seed: u64) -> Array2<u32> {
    let mut rng = substream(seed, "framebuilder.audio");
    Array2::from_shape_fn((N_AUDIO_STREAMS, n_steps), |_| rng.random_range(0..audio_vocab as u32))
}

/// Audio tokens from text: one line per step, 16 whitespace-separated ids.
pub fn parse_audio_tokens(text: &str, audio_vocab: usize) -> Result<Array2<u32>, FrameError> {
    let mut cols: Vec<u32> = Vec::new();
    let mut n = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: String| FrameError::AudioTokens { line: i + 1, msg };
        let ids: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(format!("bad id {t:?}"))))
            .collect::<Result<_, _>>()?;
        if ids.len() != N_AUDIO_STREAMS {
            return Err(err(format!("expected {N_AUDIO_STREAMS} ids, got {}", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= audio_vocab) {
            return Err(err(format!("id {bad} outside audio vocabulary of {audio_vocab}")));
        }
        cols.extend(ids);
        n += 1;
    }
    // parsed step-major; transpose into stream-major
    let step_major = Array2::from_shape_vec((n, N_AUDIO_STREAMS), cols).expect("row lengths checked");
    Ok(step_major.t().to_owned())
}

/// Serialize chunks: a fixed header then row-major token grids, 16-bit when
/// every id fits, else 32-bit, little-endian.
///
/// Header: magic `DPXF`, u16 version, u8 bytes-per-token, u8 reserved,
/// u16 n_streams, u32 steps, u32 text_vocab, u32 audio_vocab, u32 pad_id,
/// u32 init_id, u32 n_chunks, then one layout byte per stream.
pub fn write_chunks(mut w: impl Write, chunks: &[FrameChunk]) -> Result<(), FrameError> {
    let first = chunks.first().ok_or(FrameError::NoChunks)?;
    let (steps, text_vocab, audio_vocab) = (first.steps(), first.text_vocab, first.audio_vocab);
    if chunks.iter().any(|c| c.steps() != steps || c.text_vocab != text_vocab || c.audio_vocab != audio_vocab) {
        return Err(FrameError::Container("chunks disagree on shape or vocab".into()));
    }
    let max_id = text_vocab.max(audio_vocab + 1) as u64;
    let width: u8 = if max_id <= 1 << 16 { 2 } else { 4 };
    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u8(width)?;
    w.write_u8(0)?;
    w.write_u16::<LittleEndian>(N_STREAMS as u16)?;
    w.write_u32::<LittleEndian>(steps as u32)?;
    w.write_u32::<LittleEndian>(text_vocab as u32)?;
    w.write_u32::<LittleEndian>(audio_vocab as u32)?;
    w.write_u32::<LittleEndian>(PAD_ID)?;
    w.write_u32::<LittleEndian>(audio_vocab as u32)?;
    w.write_u32::<LittleEndian>(chunks.len() as u32)?;
    w.write_all(&StreamLayout::descriptor())?;
    for c in chunks {
        for &t in c.tokens.iter() {
            if width == 2 {
                w.write_u16::<LittleEndian>(t as u16)?;
            } else {
                w.write_u32::<LittleEndian>(t)?;
            }
        }
    }
    Ok(())
}

pub fn read_chunks(mut r: impl Read) -> Result<Vec<FrameChunk>, FrameError> {
    let bad = |m: &str| FrameError::Container(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    if r.read_u16::<LittleEndian>()? != VERSION {
        return Err(bad("unsupported version"));
    }
    let width = r.read_u8()?;
    if width != 2 && width != 4 {
        return Err(bad("token width must be 2 or 4"));
    }
    r.read_u8()?;
    if r.read_u16::<LittleEndian>()? as usize != N_STREAMS {
        return Err(bad("stream count"));
    }
    let steps = r.read_u32::<LittleEndian>()? as usize;
    let text_vocab = r.read_u32::<LittleEndian>()? as usize;
    let audio_vocab = r.read_u32::<LittleEndian>()? as usize;
    let pad = r.read_u32::<LittleEndian>()?;
    let init = r.read_u32::<LittleEndian>()?;
    if pad != PAD_ID || init as usize != audio_vocab {
        return Err(bad("unexpected PAD or INIT id"));
    }
    let n_chunks = r.read_u32::<LittleEndian>()? as usize;
    let mut layout = [0u8; N_STREAMS];
    r.read_exact(&mut layout)?;
    if layout != StreamLayout::descriptor() {
        return Err(bad("unknown stream layout"));
    }
    let mut chunks = Vec::with_capacity(n_chunks);
    for _ in 0..n_chunks {
        let mut data = vec![0u32; N_STREAMS * steps];
        for v in data.iter_mut() {
            *v = if width == 2 { r.read_u16::<LittleEndian>()? as u32 } else { r.read_u32::<LittleEndian>()? };
        }
        let tokens = Array2::from_shape_vec((N_STREAMS, steps), data).expect("sized above");
        chunks.push(FrameChunk { tokens, text_vocab, audio_vocab });
    }
    Ok(chunks)
}
