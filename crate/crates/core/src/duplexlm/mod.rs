//! Toy hierarchical duplex language model with hand-written gradients.

mod layers;
mod gradcheck;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{finite_difference_check, TensorGradCheck};
pub use layers::{Group, Param, ParamStore};
pub use model::{draw, position_weight, softmax, weighted_loss, DuplexLm, LossBreakdown, TemporalOutput};
pub use train::{
    copy_task_chunks, evaluate, select_checkpoint, train, AdamW, MetricLog, MetricRow, OptimConfig, TrainConfig,
    TrainOutcome, TrainPreset, COPY_TEXT_PATTERN,
};

pub const N_AUDIO: usize = crate::framebuilder::N_AUDIO_STREAMS;
pub const N_STREAMS: usize = crate::framebuilder::N_STREAMS;

#[derive(Debug, Error)]
pub enum DuplexError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {id} out of range in stream {stream} at step {step}")]
    TokenOutOfRange { stream: usize, step: usize, id: u32 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("depth position {0} out of range 0..16")]
    DepthPosition(usize),
    #[error("total loss weight is zero")]
    ZeroWeight,
    #[error("temperature must be non-negative, got {0}")]
    Temperature(f64),
    #[error("no training chunks")]
    NoData,
    #[error("loss diverged at step {step}: {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("metric log: {0}")]
    MetricLog(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDuplexConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_depth: usize,
    pub depth_layers: usize,
    pub depth_heads: usize,
    /// Longest temporal input, in steps.
    pub context: usize,
    pub text_vocab: usize,
    pub audio_vocab: usize,
}

impl Default for ToyDuplexConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_depth: 32,
            depth_layers: 1,
            depth_heads: 2,
            context: 128,
            text_vocab: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            audio_vocab: crate::framebuilder::DEFAULT_AUDIO_VOCAB,
        }
    }
}

impl ToyDuplexConfig {
    pub fn validate(&self) -> Result<(), DuplexError> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_depth", self.d_depth),
            ("depth_layers", self.depth_layers),
            ("depth_heads", self.depth_heads),
            ("context", self.context),
            ("audio_vocab", self.audio_vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(DuplexError::Config(format!("{name} must be positive")));
        }
        if self.text_vocab <= crate::tokenizer::UNK_ID as usize {
            return Err(DuplexError::Config("text_vocab must include the special ids".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) || !self.d_depth.is_multiple_of(self.depth_heads) {
            return Err(DuplexError::Config("model width not divisible by heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    Text,
    /// Audio stream index 0..16 in layout order (0 and 8 are semantic).
    Audio(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pad_scale: f64,
    pub semantic_weight: f64,
    pub acoustic_weight: f64,
    pub text_weight: f64,
    pub mask_user_audio: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pad_scale: 0.5, semantic_weight: 100.0, acoustic_weight: 1.0, text_weight: 1.0, mask_user_audio: false }
    }
}
