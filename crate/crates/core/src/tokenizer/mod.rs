//! Byte-level BPE subword vocabulary.
//!
//! Text is cut into words at every whitespace→non-whitespace transition, so
//! each word carries its trailing whitespace. That trailing whitespace is the
//! end-of-word marker: it takes part in merges like any other byte, and
//! keeping it makes encoding exactly reversible. Every byte has its own id,
//! so any string encodes without an unknown token.

mod bpe;
pub mod migration;

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

pub use bpe::train_bpe;
pub use migration::{
    apply_plan, make_migration_plan, plan_for_vocab_size, InitSpec, MigrationAction, MigrationError, MigrationPlan,
    TensorEntry, TensorManifest, TensorRole,
};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<unk>"];
/// Id of byte 0; byte `b` has id `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: u32 = 3;
/// Specials plus the 256 byte pieces.
pub const BASE_VOCAB_SIZE: usize = 3 + 256;
pub const DEFAULT_VOCAB_SIZE: usize = 32_000;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target size {target} is below the base vocabulary of {base}")]
    TargetTooSmall { target: usize, base: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocab file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    /// Bytes of each piece; empty for specials.
    pieces: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    target_size: usize,
}

impl Vocab {
    /// Specials and single bytes only.
    pub fn byte_level() -> Self {
        Self::from_merges(Vec::new(), BASE_VOCAB_SIZE)
    }

    pub(crate) fn from_merges(merges: Vec<(u32, u32)>, target_size: usize) -> Self {
        let mut pieces: Vec<Vec<u8>> = vec![Vec::new(); 3];
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let mut p = pieces[l as usize].clone();
            p.extend_from_slice(&pieces[r as usize]);
            pieces.push(p);
            ranks.insert((l, r), rank as u32);
        }
        Self { pieces, merges, ranks, target_size }
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn piece_bytes(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(|p| p.as_slice())
    }

    pub fn is_special(id: u32) -> bool {
        id < BYTE_OFFSET
    }

    /// Human-readable piece text (lossy for partial UTF-8 sequences).
    pub fn piece_text(&self, id: u32) -> String {
        if Self::is_special(id) {
            SPECIALS[id as usize].to_string()
        } else {
            String::from_utf8_lossy(&self.pieces[id as usize]).into_owned()
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in split_words(text) {
            self.encode_word(word, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word.bytes().map(|b| BYTE_OFFSET + b as u32).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min_by_key(|&(r, _)| r);
            let Some((rank, pair)) = best else { break };
            let new_id = BASE_VOCAB_SIZE as u32 + rank;
            syms = merge_pair(&syms, pair, new_id);
        }
        out.extend_from_slice(&syms);
    }

    /// Inverse of [`Vocab::encode`]. Specials decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let piece = self
                .pieces
                .get(id as usize)
                .ok_or(TokenizerError::IdOutOfRange { id, size: self.size() })?;
            bytes.extend_from_slice(piece);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Plain-text vocab file: header, one `piece` line per id, one `merge`
    /// line per rule in learned order. Piece bytes are hex encoded.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "#duplexkit-vocab v1 size={} target={}", self.size(), self.target_size).unwrap();
        for (id, p) in self.pieces.iter().enumerate() {
            if Self::is_special(id as u32) {
                writeln!(out, "piece\t{id}\t{}", SPECIALS[id]).unwrap();
            } else {
                let hex: String = p.iter().map(|b| format!("{b:02x}")).collect();
                writeln!(out, "piece\t{id}\t{hex}").unwrap();
            }
        }
        for (l, r) in &self.merges {
            writeln!(out, "merge\t{l}\t{r}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, msg: &str| TokenizerError::Parse { line: line + 1, msg: msg.into() };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(0, "empty file"))?;
        let target = header
            .split_whitespace()
            .find_map(|t| t.strip_prefix("target="))
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err(0, "missing target= in header"))?;
        let mut merges = Vec::new();
        let mut pieces = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["piece", id, body] => {
                    let id: usize = id.parse().map_err(|_| err(n, "bad piece id"))?;
                    if id != pieces.len() {
                        return Err(err(n, "piece ids must be dense and ordered"));
                    }
                    pieces.push(body.to_string());
                }
                ["merge", l, r] => {
                    let l: u32 = l.parse().map_err(|_| err(n, "bad merge id"))?;
                    let r: u32 = r.parse().map_err(|_| err(n, "bad merge id"))?;
                    let known = BASE_VOCAB_SIZE + merges.len();
                    if l < BYTE_OFFSET || r < BYTE_OFFSET || l as usize >= known || r as usize >= known {
                        return Err(err(n, "merge refers to unknown or special piece"));
                    }
                    merges.push((l, r));
                }
                [""] => {}
                _ => return Err(err(n, "unrecognised line")),
            }
        }
        let vocab = Self::from_merges(merges, target);
        if pieces.len() != vocab.size() {
            return Err(err(0, "piece count does not match merges"));
        }
        for (id, body) in pieces.iter().enumerate().skip(BYTE_OFFSET as usize) {
            let hex: String = vocab.pieces[id].iter().map(|b| format!("{b:02x}")).collect();
            if *body != hex {
                return Err(err(id + 1, "piece bytes disagree with merges"));
            }
        }
        Ok(vocab)
    }
}

fn merge_pair(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

/// Words with their trailing whitespace; leading whitespace forms its own chunk.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let mut prev_ws = false;
        let mut cut = rest.len();
        for (i, c) in rest.char_indices() {
            let ws = c.is_whitespace();
            if i > 0 && prev_ws && !ws {
                cut = i;
                break;
            }
            prev_ws = ws;
        }
        let (word, tail) = rest.split_at(cut);
        rest = tail;
        Some(word)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Fragmentation {
    pub tokens_per_word: f64,
    pub tokens_per_char: f64,
}

/// Mean tokens per whitespace-delimited word and per character (all
/// characters, whitespace included).
pub fn fragmentation(corpus: &str, vocab: &Vocab) -> Result<Fragmentation, TokenizerError> {
    let words = corpus.split_whitespace().count();
    let chars = corpus.chars().count();
    if words == 0 {
        return Err(TokenizerError::EmptyCorpus);
    }
    let tokens = vocab.encode(corpus).len() as f64;
    Ok(Fragmentation { tokens_per_word: tokens / words as f64, tokens_per_char: tokens / chars as f64 })
}
