//! Hindi full-duplex dialogue pipeline: corpus ingest and QA, energy VAD,
//! turn-taking statistics, byte-level BPE with vocabulary migration,
//! 17-stream frame building, a toy hierarchical duplex LM, evaluation
//! metrics and blinded pair ratings.

pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod duplexlm;
pub mod eval;
pub mod framebuilder;
pub mod grid;
pub mod ingest;
pub mod rating;
pub mod seed;
pub mod synth;
pub mod tokenizer;
pub mod turntaking;
pub mod vad;
pub mod wav;

pub use audio::AudioBuffer;
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use framebuilder::{AlignedWord, Channel, FrameChunk, StreamLayout};
pub use grid::TimeGrid;
pub use turntaking::{TurnEvent, TurnStats};
pub use vad::SpeechSegment;
