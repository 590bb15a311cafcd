//! Checkpoint migration for a replaced text vocabulary.
//!
//! Tensors whose leading dimension is the text vocabulary (the text
//! embedding tables of the temporal and depth transformers, and the
//! output-major text projection) are re-initialised at the new size;
//! everything else is copied byte for byte.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Vocab;
use crate::checkpoint::{Checkpoint, NamedTensor, TensorData};
use crate::seed::substream;

#[derive(Debug, Error, PartialEq)]
pub enum MigrationError {
    #[error("tensor {0} has no role assigned")]
    MissingRole(String),
    #[error("tensor {name}: unknown role {role}")]
    UnknownRole { name: String, role: String },
    #[error("tensor {name}: vocabulary dimension {found} does not match old vocabulary size {expected}")]
    VocabDimension { name: String, found: usize, expected: usize },
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("tensor {0} has no action in the plan")]
    NoAction(String),
    #[error("plan action for {0} does not match any checkpoint tensor")]
    UnknownTensor(String),
    #[error("tensor {0} has a non-positive dimension")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TensorRole {
    TextEmbedTemporal,
    TextEmbedDepth,
    TextLinear,
    Audio,
    Other,
}

impl TensorRole {
    pub fn is_text(self) -> bool {
        matches!(self, TensorRole::TextEmbedTemporal | TensorRole::TextEmbedDepth | TensorRole::TextLinear)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorRole::TextEmbedTemporal => "TEXT_EMBED_TEMPORAL",
            TensorRole::TextEmbedDepth => "TEXT_EMBED_DEPTH",
            TensorRole::TextLinear => "TEXT_LINEAR",
            TensorRole::Audio => "AUDIO",
            TensorRole::Other => "OTHER",
        }
    }
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TensorRole {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "TEXT_EMBED_TEMPORAL" => TensorRole::TextEmbedTemporal,
            "TEXT_EMBED_DEPTH" => TensorRole::TextEmbedDepth,
            "TEXT_LINEAR" => TensorRole::TextLinear,
            "AUDIO" => TensorRole::Audio,
            "OTHER" => TensorRole::Other,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    pub checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub entries: Vec<TensorEntry>,
}

impl TensorManifest {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, MigrationError> {
        let mut seen = HashSet::new();
        let entries = ckpt
            .tensors
            .iter()
            .map(|t| {
                if !seen.insert(t.name.as_str()) {
                    return Err(MigrationError::Duplicate(t.name.clone()));
                }
                if t.shape.is_empty() || t.shape.contains(&0) {
                    return Err(MigrationError::Shape(t.name.clone()));
                }
                let role = t.role.as_deref().ok_or_else(|| MigrationError::MissingRole(t.name.clone()))?;
                let role = role
                    .parse()
                    .map_err(|_| MigrationError::UnknownRole { name: t.name.clone(), role: role.into() })?;
                Ok(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), role, checksum: t.checksum() })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

impl InitSpec {
    pub fn standard(seed: u64) -> Self {
        Self { mean: 0.0, std: 0.02, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "UPPERCASE")]
pub enum MigrationAction {
    Copy,
    Reinit { shape: Vec<usize>, init: InitSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub name: String,
    pub role: TensorRole,
    #[serde(flatten)]
    pub action: MigrationAction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub entries: Vec<PlanEntry>,
}

impl MigrationPlan {
    pub fn action(&self, name: &str) -> Option<&MigrationAction> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.action)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries =
            text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }
}

/// Plan for replacing a vocabulary of `old_vocab_size` with `new_vocab`.
pub fn make_migration_plan(
    manifest: &TensorManifest,
    old_vocab_size: usize,
    new_vocab: &Vocab,
    force: bool,
    init: InitSpec,
) -> Result<MigrationPlan, MigrationError> {
    plan_for_vocab_size(manifest, old_vocab_size, new_vocab.size(), force, init)
}

/// As [`make_migration_plan`], with the new vocabulary given by its size.
///
/// When sizes match, text tensors are copied unless `force` is set (a
/// same-size but different vocabulary still needs fresh rows).
pub fn plan_for_vocab_size(
    manifest: &TensorManifest,
    old_vocab_size: usize,
    new_vocab_size: usize,
    force: bool,
    init: InitSpec,
) -> Result<MigrationPlan, MigrationError> {
    let reinit_text = force || new_vocab_size != old_vocab_size;
    let entries = manifest
        .entries
        .iter()
        .map(|e| {
            let action = if e.role.is_text() {
                if e.shape[0] != old_vocab_size {
                    return Err(MigrationError::VocabDimension {
                        name: e.name.clone(),
                        found: e.shape[0],
                        expected: old_vocab_size,
                    });
                }
                if reinit_text {
                    let mut shape = e.shape.clone();
                    shape[0] = new_vocab_size;
                    MigrationAction::Reinit { shape, init }
                } else {
                    MigrationAction::Copy
                }
            } else {
                MigrationAction::Copy
            };
            Ok(PlanEntry { name: e.name.clone(), role: e.role, action })
        })
        .collect::<Result<_, _>>()?;
    Ok(MigrationPlan { entries })
}

/// Produce the migrated checkpoint. Every tensor must have exactly one action.
pub fn apply_plan(ckpt: &Checkpoint, plan: &MigrationPlan) -> Result<Checkpoint, MigrationError> {
    for e in &plan.entries {
        if ckpt.get(&e.name).is_none() {
            return Err(MigrationError::UnknownTensor(e.name.clone()));
        }
    }
    let mut out = Checkpoint::default();
    for t in &ckpt.tensors {
        let action = plan.action(&t.name).ok_or_else(|| MigrationError::NoAction(t.name.clone()))?;
        let tensor = match action {
            MigrationAction::Copy => t.clone(),
            MigrationAction::Reinit { shape, init } => {
                let n: usize = shape.iter().product();
                let mut rng = substream(init.seed, &format!("reinit/{}", t.name));
                let normal = Normal::new(init.mean, init.std).expect("finite init std");
                let values: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                let data = match t.data {
                    TensorData::F32(_) => TensorData::F32(values.iter().map(|&v| v as f32).collect()),
                    TensorData::F64(_) => TensorData::F64(values),
                };
                NamedTensor { name: t.name.clone(), shape: shape.clone(), role: t.role.clone(), data }
            }
        };
        out.push(tensor).map_err(|_| MigrationError::Duplicate(t.name.clone()))?;
    }
    Ok(out)
}
