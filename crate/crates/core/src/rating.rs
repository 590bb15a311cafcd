//! Blinded human-vs-model pair ratings: pair set, durable store, summary.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::subseed;

#[derive(Debug, Error)]
pub enum RatingError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid rating: {0}")]
    Validation(String),
    #[error("pair {pair_id} already rated by {rater_id}")]
    Duplicate { pair_id: u32, rater_id: String },
    #[error("unknown pair {0}")]
    UnknownPair(u32),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate pair id {0} in manifest")]
    DuplicatePair(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Origin {
    Human,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifestEntry {
    pub pair_id: u32,
    pub human_audio: String,
    pub model_audio: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSource {
    pub audio: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub pair_id: u32,
    pub a: PairSource,
    pub b: PairSource,
}

impl EvalPair {
    /// Place the two clips by a seeded coin per pair id.
    pub fn blinded(entry: &PairManifestEntry, seed: u64) -> Self {
        let human = PairSource { audio: entry.human_audio.clone(), origin: Origin::Human };
        let model = PairSource { audio: entry.model_audio.clone(), origin: Origin::Model };
        let human_first = subseed(seed, &format!("rating.blind/{}", entry.pair_id)) & 1 == 0;
        let (a, b) = if human_first { (human, model) } else { (model, human) };
        Self { pair_id: entry.pair_id, a, b }
    }

    pub fn origin(&self, pos: Position) -> Origin {
        match pos {
            Position::A => self.a.origin,
            Position::B => self.b.origin,
        }
    }

    pub fn position_of(&self, origin: Origin) -> Position {
        if self.a.origin == origin {
            Position::A
        } else {
            Position::B
        }
    }

    pub fn view(&self) -> PairView {
        PairView { pair_id: self.pair_id, audio_a: self.a.audio.clone(), audio_b: self.b.audio.clone() }
    }
}

/// What a rater sees: no origins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairView {
    pub pair_id: u32,
    pub audio_a: String,
    pub audio_b: String,
}

#[derive(Debug, Clone, Default)]
pub struct PairSet {
    pairs: BTreeMap<u32, EvalPair>,
}

impl PairSet {
    pub fn new(entries: &[PairManifestEntry], seed: u64) -> Result<Self, RatingError> {
        let mut pairs = BTreeMap::new();
        for e in entries {
            if pairs.insert(e.pair_id, EvalPair::blinded(e, seed)).is_some() {
                return Err(RatingError::DuplicatePair(e.pair_id));
            }
        }
        Ok(Self { pairs })
    }

    /// Line-delimited `{pair_id, human_audio, model_audio}` records.
    pub fn from_manifest(text: &str, seed: u64) -> Result<Self, RatingError> {
        let entries: Vec<PairManifestEntry> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| RatingError::Parse { line: i + 1, msg: e.to_string() }))
            .collect::<Result<_, _>>()?;
        Self::new(&entries, seed)
    }

    pub fn get(&self, pair_id: u32) -> Option<&EvalPair> {
        self.pairs.get(&pair_id)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EvalPair> {
        self.pairs.values()
    }

    /// Lowest-id pair `rater` has not rated.
    pub fn next_for(&self, rater: &str, store: &RatingStore) -> Option<PairView> {
        self.pairs.values().find(|p| !store.contains(p.pair_id, rater)).map(EvalPair::view)
    }

    /// Whether `audio` is one of the clips of some pair.
    pub fn references(&self, audio: &str) -> bool {
        self.pairs.values().any(|p| p.a.audio == audio || p.b.audio == audio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Preference {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Rubrics {
    pub human_like: bool,
    pub appropriate: bool,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub pair_id: u32,
    pub rater_id: String,
    pub naturalness_a: u8,
    pub naturalness_b: u8,
    pub clarity_a: u8,
    pub clarity_b: u8,
    pub preference: Preference,
    /// Judged on the model clip.
    pub rubrics: Rubrics,
    /// Unix milliseconds, set by the store when zero.
    #[serde(default)]
    pub timestamp: u64,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<(), RatingError> {
        if self.rater_id.trim().is_empty() {
            return Err(RatingError::Validation("rater_id is empty".into()));
        }
        for (name, v) in [
            ("naturalness_a", self.naturalness_a),
            ("naturalness_b", self.naturalness_b),
            ("clarity_a", self.clarity_a),
            ("clarity_b", self.clarity_b),
        ] {
            if !(1..=5).contains(&v) {
                return Err(RatingError::Validation(format!("{name} = {v} outside 1..=5")));
            }
        }
        Ok(())
    }
}

/// Append-only line-delimited store; one record per (pair, rater).
#[derive(Debug)]
pub struct RatingStore {
    records: Vec<RatingRecord>,
    keys: HashSet<(u32, String)>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl RatingStore {
    pub fn in_memory() -> Self {
        Self { records: Vec::new(), keys: HashSet::new(), file: None }
    }

    /// Load existing records from `path` (if present) and append to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RatingError> {
        let path = path.as_ref().to_path_buf();
        let mut store = Self::in_memory();
        if path.exists() {
            for (i, line) in std::fs::read_to_string(&path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let r: RatingRecord =
                    serde_json::from_str(line).map_err(|e| RatingError::Parse { line: i + 1, msg: e.to_string() })?;
                store.insert(r)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        store.file = Some((path, BufWriter::new(file)));
        Ok(store)
    }

    fn insert(&mut self, r: RatingRecord) -> Result<(), RatingError> {
        if !self.keys.insert((r.pair_id, r.rater_id.clone())) {
            return Err(RatingError::Duplicate { pair_id: r.pair_id, rater_id: r.rater_id });
        }
        self.records.push(r);
        Ok(())
    }

    pub fn contains(&self, pair_id: u32, rater: &str) -> bool {
        self.keys.contains(&(pair_id, rater.to_string()))
    }

    /// Validate and append, flushing to disk before returning.
    pub fn submit(&mut self, pairs: &PairSet, mut record: RatingRecord) -> Result<&RatingRecord, RatingError> {
        record.validate()?;
        if pairs.get(record.pair_id).is_none() {
            return Err(RatingError::UnknownPair(record.pair_id));
        }
        if self.contains(record.pair_id, &record.rater_id) {
            return Err(RatingError::Duplicate { pair_id: record.pair_id, rater_id: record.rater_id });
        }
        if record.timestamp == 0 {
            record.timestamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0);
        }
        if let Some((_, w)) = &mut self.file {
            serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.insert(record)?;
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn completed_by(&self, rater: &str) -> usize {
        self.records.iter().filter(|r| r.rater_id == rater).count()
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_ratings: usize,
    pub naturalness_human: Option<f64>,
    pub naturalness_model: Option<f64>,
    pub clarity_human: Option<f64>,
    pub clarity_model: Option<f64>,
    pub preference_human_pct: Option<f64>,
    pub preference_model_pct: Option<f64>,
    pub preference_tie_pct: Option<f64>,
    pub human_like_pct: Option<f64>,
    pub appropriate_pct: Option<f64>,
    pub complete_pct: Option<f64>,
}

/// Un-blind each record through its pair and aggregate per origin. All
/// accumulation is in integers, so record order cannot change the result.
pub fn summarize(pairs: &PairSet, records: &[RatingRecord]) -> Result<Summary, RatingError> {
    let (mut nat, mut cla) = ([0u64; 2], [0u64; 2]);
    let mut pref = [0u64; 3];
    let mut rub = [0u64; 3];
    for r in records {
        let pair = pairs.get(r.pair_id).ok_or(RatingError::UnknownPair(r.pair_id))?;
        let idx = |o: Origin| match o {
            Origin::Human => 0,
            Origin::Model => 1,
        };
        nat[idx(pair.a.origin)] += r.naturalness_a as u64;
        nat[idx(pair.b.origin)] += r.naturalness_b as u64;
        cla[idx(pair.a.origin)] += r.clarity_a as u64;
        cla[idx(pair.b.origin)] += r.clarity_b as u64;
        let p = match r.preference {
            Preference::A => idx(pair.a.origin),
            Preference::B => idx(pair.b.origin),
            Preference::Tie => 2,
        };
        pref[p] += 1;
        rub[0] += r.rubrics.human_like as u64;
        rub[1] += r.rubrics.appropriate as u64;
        rub[2] += r.rubrics.complete as u64;
    }
    let n = records.len();
    let mean = |s: u64| (n > 0).then(|| s as f64 / n as f64);
    let pct = |c: u64| (n > 0).then(|| 100.0 * c as f64 / n as f64);
    Ok(Summary {
        n_ratings: n,
        naturalness_human: mean(nat[0]),
        naturalness_model: mean(nat[1]),
        clarity_human: mean(cla[0]),
        clarity_model: mean(cla[1]),
        preference_human_pct: pct(pref[0]),
        preference_model_pct: pct(pref[1]),
        preference_tie_pct: pct(pref[2]),
        human_like_pct: pct(rub[0]),
        appropriate_pct: pct(rub[1]),
        complete_pct: pct(rub[2]),
    })
}

impl Summary {
    /// Two-section table: scales per origin, then preference and rubric rates.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>, d: usize| v.map_or("-".to_string(), |x| format!("{x:.d$}"));
        let mut out = String::new();
        let _ = writeln!(out, "Ratings: {}", self.n_ratings);
        let _ = writeln!(out, "{:<12} {:>18}", "Metric", "Human / Model");
        let _ = writeln!(out, "{:<12} {:>18}", "Naturalness", format!("{} / {}", f(self.naturalness_human, 2), f(self.naturalness_model, 2)));
        let _ = writeln!(out, "{:<12} {:>18}", "Clarity", format!("{} / {}", f(self.clarity_human, 2), f(self.clarity_model, 2)));
        let _ = writeln!(
            out,
            "{:<12} {:>18}",
            "Preference",
            format!(
                "{}% / {}% / {}%",
                f(self.preference_human_pct, 1),
                f(self.preference_model_pct, 1),
                f(self.preference_tie_pct, 1)
            )
        );
        let _ = writeln!(out, "\n{:<12} {:>9}", "Rubric", "Pass rate");
        for (name, v) in [("Human-like", self.human_like_pct), ("Appropriate", self.appropriate_pct), ("Complete", self.complete_pct)] {
            let _ = writeln!(out, "{:<12} {:>8}%", name, f(v, 1));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entries(n: u32) -> Vec<PairManifestEntry> {
        (1..=n)
            .map(|i| PairManifestEntry { pair_id: i, human_audio: format!("h{i}.wav"), model_audio: format!("m{i}.wav") })
            .collect()
    }

    fn record(pair: &EvalPair, rater: &str, nat_h: u8, nat_m: u8, pref: Option<Origin>) -> RatingRecord {
        let (na, nb) = if pair.a.origin == Origin::Human { (nat_h, nat_m) } else { (nat_m, nat_h) };
        let preference = match pref {
            None => Preference::Tie,
            Some(o) if pair.position_of(o) == Position::A => Preference::A,
            Some(_) => Preference::B,
        };
        RatingRecord {
            pair_id: pair.pair_id,
            rater_id: rater.into(),
            naturalness_a: na,
            naturalness_b: nb,
            clarity_a: 3,
            clarity_b: 3,
            preference,
            rubrics: Rubrics { human_like: true, appropriate: false, complete: true },
            timestamp: 1,
        }
    }

    #[test]
    fn blinding_is_stable_and_balanced() {
        let a = PairSet::new(&entries(200), 42).unwrap();
        let b = PairSet::new(&entries(200), 42).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
        assert!(a.iter().all(|p| p.a.origin != p.b.origin));
        let human_a = a.iter().filter(|p| p.a.origin == Origin::Human).count();
        assert!((80..=120).contains(&human_a), "{human_a}");
    }

    #[test]
    fn next_pair_and_done() {
        let pairs = PairSet::new(&entries(2), 1).unwrap();
        let mut store = RatingStore::in_memory();
        assert_eq!(pairs.next_for("r1", &store).unwrap().pair_id, 1);
        let p1 = pairs.get(1).unwrap().clone();
        store.submit(&pairs, record(&p1, "r1", 5, 4, None)).unwrap();
        assert_eq!(pairs.next_for("r1", &store).unwrap().pair_id, 2);
        assert_eq!(pairs.next_for("r2", &store).unwrap().pair_id, 1);
        let p2 = pairs.get(2).unwrap().clone();
        store.submit(&pairs, record(&p2, "r1", 5, 4, None)).unwrap();
        assert!(pairs.next_for("r1", &store).is_none());
    }

    #[test]
    fn submission_errors() {
        let pairs = PairSet::new(&entries(1), 1).unwrap();
        let p = pairs.get(1).unwrap().clone();
        let mut store = RatingStore::in_memory();
        store.submit(&pairs, record(&p, "r", 5, 4, None)).unwrap();
        assert!(matches!(store.submit(&pairs, record(&p, "r", 5, 4, None)), Err(RatingError::Duplicate { .. })));
        let mut bad = record(&p, "s", 5, 4, None);
        bad.naturalness_a = 6;
        assert!(matches!(store.submit(&pairs, bad), Err(RatingError::Validation(_))));
        let mut unknown = record(&p, "s", 5, 4, None);
        unknown.pair_id = 9;
        assert!(matches!(store.submit(&pairs, unknown), Err(RatingError::UnknownPair(9))));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn hand_computed_summary() {
        let pairs = PairSet::new(&entries(2), 7).unwrap();
        let recs = vec![
            record(pairs.get(1).unwrap(), "r", 5, 4, Some(Origin::Human)),
            record(pairs.get(2).unwrap(), "r", 4, 4, None),
        ];
        let s = summarize(&pairs, &recs).unwrap();
        assert_eq!(s.naturalness_human, Some(4.5));
        assert_eq!(s.naturalness_model, Some(4.0));
        assert_eq!(s.preference_human_pct, Some(50.0));
        assert_eq!(s.preference_model_pct, Some(0.0));
        assert_eq!(s.preference_tie_pct, Some(50.0));
        assert_eq!(s.appropriate_pct, Some(0.0));
        let empty = summarize(&pairs, &[]).unwrap();
        assert_eq!(empty.n_ratings, 0);
        assert!(empty.naturalness_human.is_none());
        assert!(s.to_text().contains("Naturalness"));
    }

    #[test]
    fn store_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.jsonl");
        let pairs = PairSet::new(&entries(3), 5).unwrap();
        let before = {
            let mut store = RatingStore::open(&path).unwrap();
            for p in pairs.iter() {
                store.submit(&pairs, record(p, "r", 4, 3, Some(Origin::Model))).unwrap();
            }
            summarize(&pairs, store.records()).unwrap()
        };
        let store = RatingStore::open(&path).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(summarize(&pairs, store.records()).unwrap(), before);
    }

    proptest! {
        #[test]
        fn summary_ignores_order(seed in 0u64..1000, raw in prop::collection::vec((1u8..=5, 1u8..=5, 0u8..3), 1..30)) {
            let pairs = PairSet::new(&entries(raw.len() as u32), seed).unwrap();
            let recs: Vec<RatingRecord> = raw.iter().enumerate().map(|(i, (h, m, p))| {
                let pref = [None, Some(Origin::Human), Some(Origin::Model)][*p as usize];
                record(pairs.get(i as u32 + 1).unwrap(), "r", *h, *m, pref)
            }).collect();
            let mut rev = recs.clone();
            rev.reverse();
            let s = summarize(&pairs, &recs).unwrap();
            prop_assert_eq!(&s, &summarize(&pairs, &rev).unwrap());
            let total = s.preference_human_pct.unwrap() + s.preference_model_pct.unwrap() + s.preference_tie_pct.unwrap();
            prop_assert!((total - 100.0).abs() < 0.1);
        }

        #[test]
        fn always_prefer_human_survives_blinding(seed in any::<u64>()) {
            let pairs = PairSet::new(&entries(20), seed).unwrap();
            let recs: Vec<_> = pairs.iter().map(|p| record(p, "r", 5, 2, Some(Origin::Human))).collect();
            let s = summarize(&pairs, &recs).unwrap();
            prop_assert_eq!(s.preference_human_pct, Some(100.0));
            prop_assert_eq!(s.naturalness_human, Some(5.0));
        }
    }
}
