//! Prompted-continuation segmentation, STOI, perplexity and the evaluation report.

mod stoi;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::turntaking::{TurnRow, TurnStats};

pub use stoi::{resample, stoi, stoi_samples, third_octave_bands};

pub const WINDOW_S: f64 = 30.0;
pub const PROMPT_S: f64 = 10.0;
pub const TEMPERATURES: [f64; 3] = [0.8, 0.9, 1.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("signals differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample rates differ: {0} vs {1}")]
    SampleRateMismatch(u32, u32),
    #[error("expected mono signals")]
    NotMono,
    #[error("only {frames} non-silent frames; one analysis segment needs {needed}")]
    TooShort { frames: usize, needed: usize },
    #[error("no tokens to score")]
    NoTokens,
    #[error("record {id}: {msg}")]
    BadRecord { id: String, msg: String },
    #[error("nll line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("report has no sections")]
    EmptyReport,
    #[error("invalid duration {0}")]
    Duration(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationSegment {
    pub conversation_id: String,
    pub index: usize,
    pub window_start_s: f64,
    pub temperature: f64,
}

impl ContinuationSegment {
    pub fn window(&self) -> (f64, f64) {
        (self.window_start_s, self.window_start_s + WINDOW_S)
    }

    pub fn prompt(&self) -> (f64, f64) {
        (self.window_start_s, self.window_start_s + PROMPT_S)
    }

    pub fn target(&self) -> (f64, f64) {
        (self.window_start_s + PROMPT_S, self.window_start_s + WINDOW_S)
    }

    pub fn id(&self) -> String {
        format!("{}/{:04}/t{:.1}", self.conversation_id, self.index, self.temperature)
    }
}

/// Consecutive 30 s windows from 0; a partial tail is dropped.
pub fn segment_for_continuation(
    conversation_id: &str,
    duration_s: f64,
    temperature: f64,
) -> Result<Vec<ContinuationSegment>, EvalError> {
    if !(duration_s >= 0.0) || !duration_s.is_finite() {
        return Err(EvalError::Duration(duration_s));
    }
    let n = (duration_s / WINDOW_S + 1e-9).floor() as usize;
    Ok((0..n)
        .map(|i| ContinuationSegment {
            conversation_id: conversation_id.to_string(),
            index: i,
            window_start_s: i as f64 * WINDOW_S,
            temperature,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllRecord {
    pub segment_id: String,
    pub n_tokens: u64,
    pub nll_sum: f64,
}

impl NllRecord {
    fn validate(&self) -> Result<(), EvalError> {
        let bad = |msg: &str| EvalError::BadRecord { id: self.segment_id.clone(), msg: msg.into() };
        if self.n_tokens == 0 {
            return Err(bad("zero tokens"));
        }
        if !(self.nll_sum >= 0.0) || !self.nll_sum.is_finite() {
            return Err(bad("nll sum must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn parse_nll_records(text: &str) -> Result<Vec<NllRecord>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::Parse { line: i + 1, msg: e.to_string() }))
        .collect()
}

/// `exp(Σ nll / Σ tokens)`, pooled over records. The NLL total is summed
/// exactly, so record order and splitting a record cannot change the result.
pub fn perplexity(records: &[NllRecord]) -> Result<f64, EvalError> {
    let mut tokens = 0u64;
    for r in records {
        r.validate()?;
        tokens += r.n_tokens;
    }
    if tokens == 0 {
        return Err(EvalError::NoTokens);
    }
    let nll = exact_sum(records.iter().map(|r| r.nll_sum));
    Ok((nll / tokens as f64).exp())
}

/// Correctly rounded sum of finite values (Shewchuk's non-overlapping
/// partials, with the round-half-even fix-up at the end).
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecRow {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl CodecRow {
    /// Mean and population standard deviation of per-segment scores.
    pub fn from_scores(metric: &str, scores: &[f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Some(Self { metric: metric.into(), mean, std: var.sqrt(), n: scores.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub label: String,
    /// `None` for the ground-truth row.
    pub temperature: Option<f64>,
    pub ppl: f64,
    pub n_tokens: u64,
}

pub fn row_label(temperature: Option<f64>) -> String {
    match temperature {
        None => "ground truth".into(),
        Some(t) => format!("τ={t:.1}"),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub codec: Vec<CodecRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ppl: Vec<PplRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub turns: Vec<TurnRow>,
}

/// Assemble a report. PPL and turn inputs are keyed by temperature, `None`
/// being ground truth; rows come out ground truth first, then by temperature.
pub fn make_report(
    codec: Vec<CodecRow>,
    ppl: &[(Option<f64>, Vec<NllRecord>)],
    turns: &[(Option<f64>, TurnStats)],
) -> Result<Report, EvalError> {
    let order = |t: &Option<f64>| t.map_or(f64::NEG_INFINITY, |v| v);
    let mut ppl_rows = ppl
        .iter()
        .map(|(t, recs)| {
            Ok(PplRow {
                label: row_label(*t),
                temperature: *t,
                ppl: perplexity(recs)?,
                n_tokens: recs.iter().map(|r| r.n_tokens).sum(),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    ppl_rows.sort_by(|a, b| order(&a.temperature).total_cmp(&order(&b.temperature)));
    let mut turn_rows: Vec<(Option<f64>, TurnRow)> =
        turns.iter().map(|(t, s)| (*t, TurnRow { label: row_label(*t), stats: *s })).collect();
    turn_rows.sort_by(|a, b| order(&a.0).total_cmp(&order(&b.0)));
    let report = Report { codec, ppl: ppl_rows, turns: turn_rows.into_iter().map(|(_, r)| r).collect() };
    if report.codec.is_empty() && report.ppl.is_empty() && report.turns.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    Ok(report)
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.codec.is_empty() {
            out.push_str("Codec resynthesis\n");
            let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>6}", "metric", "mean", "std", "n");
            for r in &self.codec {
                let _ = writeln!(out, "{:<8} {:>8.3} {:>8.3} {:>6}", r.metric, r.mean, r.std, r.n);
            }
            out.push('\n');
        }
        if !self.ppl.is_empty() {
            out.push_str("Continuation perplexity\n");
            let _ = writeln!(out, "{:<14} {:>10} {:>10}", "condition", "PPL", "tokens");
            for r in &self.ppl {
                let _ = writeln!(out, "{:<14} {:>10.1} {:>10}", r.label, r.ppl, r.n_tokens);
            }
            out.push('\n');
        }
        if !self.turns.is_empty() {
            out.push_str("Turn-taking statistics (per minute)\n");
            let _ = writeln!(
                out,
                "{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                "condition", "IPU n", "IPU s", "Pause n", "Pause s", "Gap n", "Gap s", "Ovl n", "Ovl s"
            );
            for r in &self.turns {
                let s = &r.stats;
                let _ = writeln!(
                    out,
                    "{:<14} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                    r.label,
                    s.ipu_count_per_min,
                    s.ipu_s_per_min,
                    s.pause_count_per_min,
                    s.pause_s_per_min,
                    s.gap_count_per_min,
                    s.gap_s_per_min,
                    s.overlap_count_per_min,
                    s.overlap_s_per_min
                );
            }
        }
        out
    }
}
