//! Turn-taking statistics from two channels of speech segments.
//!
//! Event definitions:
//! - IPU: each speech segment of a channel.
//! - OVERLAP: maximal interval where both channels speak.
//! - PAUSE / GAP: an interval where neither channel speaks, bounded by speech
//!   on both sides. It is a PAUSE when the IPUs before and after belong to
//!   the same channel and a GAP when they differ.
//! - Silence touching the start or end of the conversation is unattributed.
//!
//! When both channels end an IPU at the same instant the preceding owner is
//! the channel that started speaking later; when both start at the same
//! instant the following owner is the channel that stops first. Remaining
//! ties go to channel A.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vad::SpeechSegment;

#[derive(Debug, Error, PartialEq)]
pub enum TurnError {
    #[error("duration must be positive, got {0}")]
    Duration(f64),
    #[error("channel {channel} segment [{start}, {end}] lies outside [0, {duration}]")]
    SegmentOutOfRange { channel: Speaker, start: f64, end: f64, duration: f64 },
    #[error("channel {0} segments are unsorted, overlapping or empty")]
    InvalidSegments(Speaker),
    #[error("hop must be positive")]
    Hop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn index(self) -> usize {
        match self {
            Speaker::A => 0,
            Speaker::B => 1,
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

impl std::fmt::Display for Speaker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Speaker::A => "A",
            Speaker::B => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameState {
    AOnly,
    BOnly,
    Both,
    Neither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStateSequence {
    pub hop_ms: f64,
    pub states: Vec<FrameState>,
}

impl FrameStateSequence {
    pub fn count(&self, state: FrameState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }
}

fn validate(segs: &[SpeechSegment], ch: Speaker, duration_s: f64) -> Result<(), TurnError> {
    for s in segs {
        if !(s.start_s < s.end_s) {
            return Err(TurnError::InvalidSegments(ch));
        }
        if s.start_s < 0.0 || s.end_s > duration_s + 1e-9 {
            return Err(TurnError::SegmentOutOfRange {
                channel: ch,
                start: s.start_s,
                end: s.end_s,
                duration: duration_s,
            });
        }
    }
    if segs.windows(2).any(|w| w[1].start_s < w[0].end_s) {
        return Err(TurnError::InvalidSegments(ch));
    }
    Ok(())
}

fn contains(segs: &[SpeechSegment], t: f64) -> bool {
    // segments are sorted: find the last one starting at or before t
    let idx = segs.partition_point(|s| s.start_s <= t);
    idx > 0 && t < segs[idx - 1].end_s
}

/// Label every `hop_ms` frame by which channels are active at its midpoint.
pub fn classify_frames(
    a: &[SpeechSegment],
    b: &[SpeechSegment],
    duration_s: f64,
    hop_ms: f64,
) -> Result<FrameStateSequence, TurnError> {
    if !(duration_s > 0.0) {
        return Err(TurnError::Duration(duration_s));
    }
    if !(hop_ms > 0.0) {
        return Err(TurnError::Hop);
    }
    validate(a, Speaker::A, duration_s)?;
    validate(b, Speaker::B, duration_s)?;
    let hop_s = hop_ms / 1000.0;
    // tolerate float noise so 60 s / 10 ms gives exactly 6000 frames
    let n = (duration_s / hop_s - 1e-9).ceil() as usize;
    let states = (0..n)
        .map(|i| {
            let mid = (i as f64 + 0.5) * hop_s;
            match (contains(a, mid), contains(b, mid)) {
                (true, true) => FrameState::Both,
                (true, false) => FrameState::AOnly,
                (false, true) => FrameState::BOnly,
                (false, false) => FrameState::Neither,
            }
        })
        .collect();
    Ok(FrameStateSequence { hop_ms, states })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum EventKind {
    Ipu { channel: Speaker },
    Pause { channel: Speaker },
    Gap { from: Speaker, to: Speaker },
    Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnEvent {
    #[serde(flatten)]
    pub kind: EventKind,
    pub start_s: f64,
    pub end_s: f64,
}

impl TurnEvent {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

fn intersections(a: &[SpeechSegment], b: &[SpeechSegment]) -> Vec<(f64, f64)> {
    let (mut i, mut j) = (0, 0);
    let mut out: Vec<(f64, f64)> = Vec::new();
    while i < a.len() && j < b.len() {
        let lo = a[i].start_s.max(b[j].start_s);
        let hi = a[i].end_s.min(b[j].end_s);
        if lo < hi {
            match out.last_mut() {
                Some(last) if last.1 >= lo => last.1 = last.1.max(hi),
                _ => out.push((lo, hi)),
            }
        }
        if a[i].end_s < b[j].end_s {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn union(a: &[SpeechSegment], b: &[SpeechSegment]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, f64)> = a.iter().chain(b).map(|s| (s.start_s, s.end_s)).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (s, e) in all {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn owner_before(a: &[SpeechSegment], b: &[SpeechSegment], t: f64) -> Speaker {
    let ending = |segs: &[SpeechSegment]| segs.iter().find(|s| s.end_s == t).copied();
    match (ending(a), ending(b)) {
        (Some(x), Some(y)) => {
            if y.start_s > x.start_s {
                Speaker::B
            } else {
                Speaker::A
            }
        }
        (None, Some(_)) => Speaker::B,
        _ => Speaker::A,
    }
}

fn owner_after(a: &[SpeechSegment], b: &[SpeechSegment], t: f64) -> Speaker {
    let starting = |segs: &[SpeechSegment]| segs.iter().find(|s| s.start_s == t).copied();
    match (starting(a), starting(b)) {
        (Some(x), Some(y)) => {
            if y.end_s < x.end_s {
                Speaker::B
            } else {
                Speaker::A
            }
        }
        (None, Some(_)) => Speaker::B,
        _ => Speaker::A,
    }
}

/// All IPU, PAUSE, GAP and OVERLAP events, sorted by start time.
pub fn turn_events(a: &[SpeechSegment], b: &[SpeechSegment], duration_s: f64) -> Vec<TurnEvent> {
    let mut events: Vec<TurnEvent> = Vec::new();
    for (ch, segs) in [(Speaker::A, a), (Speaker::B, b)] {
        events.extend(segs.iter().map(|s| TurnEvent {
            kind: EventKind::Ipu { channel: ch },
            start_s: s.start_s,
            end_s: s.end_s,
        }));
    }
    events.extend(
        intersections(a, b)
            .into_iter()
            .map(|(s, e)| TurnEvent { kind: EventKind::Overlap, start_s: s, end_s: e }),
    );
    let speech = union(a, b);
    for w in speech.windows(2) {
        let (start, end) = (w[0].1, w[1].0);
        if !(start < end) || start <= 0.0 || end >= duration_s {
            continue;
        }
        let from = owner_before(a, b, start);
        let to = owner_after(a, b, end);
        let kind = if from == to { EventKind::Pause { channel: from } } else { EventKind::Gap { from, to } };
        events.push(TurnEvent { kind, start_s: start, end_s: end });
    }
    events.sort_by(|x, y| x.start_s.total_cmp(&y.start_s).then(x.end_s.total_cmp(&y.end_s)));
    events
}

/// Brute-force events from a frame labelling: channel runs become IPUs, BOTH
/// runs overlaps, and interior NEITHER runs pauses or gaps under the same
/// ownership rule as [`turn_events`], resolved by scanning neighbouring
/// frames. Boundaries are frame edges.
pub fn oracle_events(seq: &FrameStateSequence) -> Vec<TurnEvent> {
    use FrameState::*;
    let st = &seq.states;
    let n = st.len();
    let hop = seq.hop_ms / 1000.0;
    let ev = |kind, i: usize, j: usize| TurnEvent { kind, start_s: i as f64 * hop, end_s: j as f64 * hop };
    let active = |s: FrameState, ch: Speaker| match ch {
        Speaker::A => matches!(s, AOnly | Both),
        Speaker::B => matches!(s, BOnly | Both),
    };
    let runs = |pred: &dyn Fn(FrameState) -> bool| {
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            if pred(st[i]) {
                let j = (i..n).find(|&k| !pred(st[k])).unwrap_or(n);
                out.push((i, j));
                i = j;
            } else {
                i += 1;
            }
        }
        out
    };
    let mut events = Vec::new();
    for ch in [Speaker::A, Speaker::B] {
        for (i, j) in runs(&|s| active(s, ch)) {
            events.push(ev(EventKind::Ipu { channel: ch }, i, j));
        }
    }
    for (i, j) in runs(&|s| s == Both) {
        events.push(ev(EventKind::Overlap, i, j));
    }
    // through a BOTH run: whoever spoke alone on the far side started earlier
    // (or stops later), so the other channel owns this side
    let resolve = |frame: Option<&FrameState>| match frame {
        Some(AOnly) => Speaker::B,
        Some(BOnly) => Speaker::A,
        _ => Speaker::A,
    };
    let single = |s: FrameState| match s {
        AOnly => Some(Speaker::A),
        BOnly => Some(Speaker::B),
        _ => None,
    };
    for (i, j) in runs(&|s| s == Neither) {
        if i == 0 || j == n {
            continue;
        }
        let from = single(st[i - 1]).unwrap_or_else(|| {
            let k = (0..i).rev().find(|&k| st[k] != Both);
            resolve(k.map(|k| &st[k]))
        });
        let to = single(st[j]).unwrap_or_else(|| {
            let k = (j..n).find(|&k| st[k] != Both);
            resolve(k.map(|k| &st[k]))
        });
        let kind = if from == to { EventKind::Pause { channel: from } } else { EventKind::Gap { from, to } };
        events.push(ev(kind, i, j));
    }
    events.sort_by(|x, y| x.start_s.total_cmp(&y.start_s).then(x.end_s.total_cmp(&y.end_s)));
    events
}

/// Raw counts and seconds, before per-minute normalisation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnTotals {
    pub duration_s: f64,
    pub ipu_count: [f64; 2],
    pub ipu_s: [f64; 2],
    pub pause_count: [f64; 2],
    pub pause_s: [f64; 2],
    /// Index 0 is A→B, 1 is B→A.
    pub gap_count: [f64; 2],
    pub gap_s: [f64; 2],
    pub overlap_count: f64,
    pub overlap_s: f64,
}

impl TurnTotals {
    pub fn from_events(events: &[TurnEvent], duration_s: f64) -> Self {
        let mut t = TurnTotals { duration_s, ..Default::default() };
        for e in events {
            let d = e.duration_s();
            match e.kind {
                EventKind::Ipu { channel } => {
                    t.ipu_count[channel.index()] += 1.0;
                    t.ipu_s[channel.index()] += d;
                }
                EventKind::Pause { channel } => {
                    t.pause_count[channel.index()] += 1.0;
                    t.pause_s[channel.index()] += d;
                }
                EventKind::Gap { from, .. } => {
                    t.gap_count[from.index()] += 1.0;
                    t.gap_s[from.index()] += d;
                }
                EventKind::Overlap => {
                    t.overlap_count += 1.0;
                    t.overlap_s += d;
                }
            }
        }
        t
    }

    /// Sum of several conversations' totals.
    pub fn sum<'a>(parts: impl IntoIterator<Item = &'a TurnTotals>) -> TurnTotals {
        let mut acc = TurnTotals::default();
        for p in parts {
            acc.duration_s += p.duration_s;
            for i in 0..2 {
                acc.ipu_count[i] += p.ipu_count[i];
                acc.ipu_s[i] += p.ipu_s[i];
                acc.pause_count[i] += p.pause_count[i];
                acc.pause_s[i] += p.pause_s[i];
                acc.gap_count[i] += p.gap_count[i];
                acc.gap_s[i] += p.gap_s[i];
            }
            acc.overlap_count += p.overlap_count;
            acc.overlap_s += p.overlap_s;
        }
        acc
    }

    pub fn per_minute(&self) -> Result<TurnStats, TurnError> {
        if !(self.duration_s > 0.0) {
            return Err(TurnError::Duration(self.duration_s));
        }
        let k = 60.0 / self.duration_s;
        let scale2 = |v: [f64; 2]| [v[0] * k, v[1] * k];
        let ipu_s = (self.ipu_s[0] + self.ipu_s[1]) * k;
        let pause_s = (self.pause_s[0] + self.pause_s[1]) * k;
        let gap_s = (self.gap_s[0] + self.gap_s[1]) * k;
        let overlap_s = self.overlap_s * k;
        let single = ipu_s - 2.0 * overlap_s;
        Ok(TurnStats {
            ipu_count_per_min: (self.ipu_count[0] + self.ipu_count[1]) * k,
            ipu_count_per_min_by_channel: scale2(self.ipu_count),
            ipu_s_per_min: ipu_s,
            ipu_s_per_min_by_channel: scale2(self.ipu_s),
            pause_s_per_min: pause_s,
            pause_s_per_min_by_channel: scale2(self.pause_s),
            pause_count_per_min: (self.pause_count[0] + self.pause_count[1]) * k,
            gap_s_per_min: gap_s,
            gap_s_per_min_by_direction: scale2(self.gap_s),
            gap_count_per_min: (self.gap_count[0] + self.gap_count[1]) * k,
            overlap_s_per_min: overlap_s,
            overlap_count_per_min: self.overlap_count * k,
            single_speaker_s_per_min: single,
            unattributed_s_per_min: (60.0 - single - overlap_s - pause_s - gap_s).max(0.0),
        })
    }
}

/// Per-minute turn-taking statistics. Gap directions are `[A→B, B→A]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnStats {
    pub ipu_count_per_min: f64,
    pub ipu_count_per_min_by_channel: [f64; 2],
    pub ipu_s_per_min: f64,
    pub ipu_s_per_min_by_channel: [f64; 2],
    pub pause_s_per_min: f64,
    pub pause_s_per_min_by_channel: [f64; 2],
    pub pause_count_per_min: f64,
    pub gap_s_per_min: f64,
    pub gap_s_per_min_by_direction: [f64; 2],
    pub gap_count_per_min: f64,
    pub overlap_s_per_min: f64,
    pub overlap_count_per_min: f64,
    pub single_speaker_s_per_min: f64,
    pub unattributed_s_per_min: f64,
}

pub fn stats_per_minute(events: &[TurnEvent], duration_s: f64) -> Result<TurnStats, TurnError> {
    TurnTotals::from_events(events, duration_s).per_minute()
}

/// One labelled row per conversation plus the corpus aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTable {
    pub rows: Vec<TurnRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRow {
    pub label: String,
    pub stats: TurnStats,
}

impl TurnTable {
    /// Rows for each conversation followed by a duration-weighted `corpus` row.
    pub fn from_totals(parts: &[(String, TurnTotals)]) -> Result<Self, TurnError> {
        let mut rows = parts
            .iter()
            .map(|(label, t)| Ok(TurnRow { label: label.clone(), stats: t.per_minute()? }))
            .collect::<Result<Vec<_>, TurnError>>()?;
        if !parts.is_empty() {
            let agg = TurnTotals::sum(parts.iter().map(|(_, t)| t));
            rows.push(TurnRow { label: "corpus".into(), stats: agg.per_minute()? });
        }
        Ok(Self { rows })
    }

    /// Text table with the IPU / Pause / Gap / Overlap column set, each as
    /// count per minute and seconds per minute.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "conversation", "IPU/min", "IPU s", "Pause/min", "Pause s", "Gap/min", "Gap s", "Ovl/min", "Ovl s"
        )
        .unwrap();
        for r in &self.rows {
            let s = &r.stats;
            writeln!(
                out,
                "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                r.label,
                s.ipu_count_per_min,
                s.ipu_s_per_min,
                s.pause_count_per_min,
                s.pause_s_per_min,
                s.gap_count_per_min,
                s.gap_s_per_min,
                s.overlap_count_per_min,
                s.overlap_s_per_min
            )
            .unwrap();
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
    }
}
