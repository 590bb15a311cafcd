//! Run configuration: one seed plus the knobs of every stage, loadable from
//! a `key = value` file with dotted keys (`vad.hop_ms = 10`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::duplexlm::{LossWeights, OptimConfig, ToyDuplexConfig, TrainPreset};
use crate::framebuilder::FrameConfig;
use crate::ingest::QaPolicy;
use crate::vad::VadConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {msg}")]
    Value { key: String, value: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainKnobs {
    pub steps: usize,
    pub batch_size: usize,
    pub window: usize,
    pub max_val_windows: usize,
}

impl Default for TrainKnobs {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 8, window: 33, max_val_windows: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub vad: VadConfig,
    pub qa: QaPolicy,
    pub frame: FrameConfig,
    pub vocab_size: usize,
    pub model: ToyDuplexConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub train: TrainKnobs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vad: VadConfig::default(),
            qa: QaPolicy::default(),
            frame: FrameConfig::default(),
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            model: ToyDuplexConfig::default(),
            optim: TrainPreset::Pretrain.optim(),
            loss: LossWeights::default(),
            train: TrainKnobs::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines in order; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Set one dotted key. `preset` replaces the whole optimizer block.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::Value { key: key.into(), value: value.into(), msg };
        if key == "preset" {
            self.optim = value.parse::<TrainPreset>().map_err(bad)?.optim();
            return Ok(());
        }
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        }
        *slot = match slot {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?),
            Value::Number(_) => serde_json::from_str::<serde_json::Number>(value)
                .map(Value::Number)
                .map_err(|e| bad(e.to_string()))?,
            Value::String(_) => Value::String(value.into()),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        };
        *self = serde_json::from_value(tree).map_err(|e| bad(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# run\nseed = 7\nvad.hop_ms = 5 # finer\nmodel.d_model=32\nloss.mask_user_audio = true\n")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.vad.hop_ms, 5.0);
        assert_eq!(c.model.d_model, 32);
        assert!(c.loss.mask_user_audio);
    }

    #[test]
    fn preset_then_override() {
        let mut c = RunConfig::default();
        c.apply_text("preset = finetune\noptim.warmup_steps = 10").unwrap();
        assert_eq!(c.optim.lr_depth, 4e-6);
        assert_eq!(c.optim.warmup_steps, 10);
    }

    #[test]
    fn errors() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("vad.nope", "1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.set("model.d_model", "-3"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.set("seed", "x"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.apply_text("justtext"), Err(ConfigError::Syntax { line: 1 })));
        assert_eq!(c, RunConfig::default());
    }
}
