use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Group, ParamStore};
use super::{DuplexError, DuplexLm, LossBreakdown, LossWeights, N_AUDIO};
use crate::framebuilder::{apply_acoustic_delay, FrameChunk};
use crate::seed::substream;
use crate::tokenizer::PAD_ID;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_temporal: f64,
    pub lr_depth: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear ramp from 0 over this many updates, constant afterwards.
    pub warmup_steps: usize,
    pub eval_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TrainPreset {
    Pretrain,
    Finetune,
}

impl TrainPreset {
    pub fn optim(self) -> OptimConfig {
        let base = OptimConfig {
            lr_temporal: 3e-5,
            lr_depth: 3e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-5,
            weight_decay: 0.1,
            warmup_steps: 0,
            eval_every: 100,
        };
        match self {
            TrainPreset::Pretrain => base,
            TrainPreset::Finetune => {
                OptimConfig { lr_temporal: 2e-6, lr_depth: 4e-6, warmup_steps: 50, eval_every: 802, ..base }
            }
        }
    }
}

impl std::str::FromStr for TrainPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pretrain" => Ok(TrainPreset::Pretrain),
            "finetune" => Ok(TrainPreset::Finetune),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

/// AdamW with decoupled weight decay and per-group learning rates.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn lr_factor(&self, step: usize) -> f64 {
        if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.cfg.warmup_steps as f64).min(1.0)
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.t += 1;
        let c = self.cfg;
        let factor = self.lr_factor(self.t);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.params.iter_mut().zip(&grads.params).enumerate() {
            let lr = factor
                * match p.group {
                    Group::Temporal => c.lr_temporal,
                    Group::Depth => c.lr_depth,
                };
            let decay = if p.decays() { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * p.data[j]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_accuracy_nonpad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_accuracy: Option<f64>,
}

impl MetricRow {
    pub fn total_val_loss(&self) -> Option<f64> {
        Some(self.text_val_loss? + self.audio_val_loss?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn push(&mut self, row: MetricRow) -> Result<(), DuplexError> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(DuplexError::MetricLog(format!("step {} after step {}", row.step, last.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("serializable") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DuplexError> {
        let mut log = MetricLog::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = serde_json::from_str(line).map_err(|e| DuplexError::MetricLog(format!("line {}: {e}", i + 1)))?;
            log.push(row)?;
        }
        Ok(log)
    }
}

/// Step with the lowest text + audio validation loss; ties go to the
/// earliest step.
pub fn select_checkpoint(log: &MetricLog) -> Result<(usize, f64), DuplexError> {
    let mut best: Option<(usize, f64)> = None;
    for row in &log.rows {
        let total = row
            .total_val_loss()
            .ok_or_else(|| DuplexError::MetricLog(format!("step {} lacks validation losses", row.step)))?;
        if best.is_none_or(|(_, b)| total < b) {
            best = Some((row.step, total));
        }
    }
    best.ok_or_else(|| DuplexError::MetricLog("empty log".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Steps per training window, including the final target step.
    pub window: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub max_val_windows: usize,
}

impl TrainConfig {
    pub fn from_preset(preset: TrainPreset, seed: u64) -> Self {
        Self {
            optim: preset.optim(),
            steps: 1000,
            batch_size: 8,
            window: 33,
            weights: LossWeights::default(),
            seed,
            max_val_windows: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: MetricLog,
    pub best_step: usize,
    pub best_params: ParamStore,
}

fn val_windows(chunks: &[FrameChunk], window: usize, max: usize) -> Vec<ArrayView2<'_, u32>> {
    chunks
        .iter()
        .flat_map(|c| (0..c.steps() / window).map(move |i| c.tokens.slice(s![.., i * window..(i + 1) * window])))
        .take(max)
        .collect()
}

pub fn evaluate(model: &DuplexLm, windows: &[ArrayView2<u32>], weights: &LossWeights) -> Result<LossBreakdown, DuplexError> {
    model.batch_loss(windows, weights, None)
}

fn opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Train on random windows of `train_chunks`, evaluating on `val_chunks`
/// at step 0 and every `eval_every` updates (and after the last). The model
/// is left at its final state; the best evaluated parameters are returned.
pub fn train(
    model: &mut DuplexLm,
    train_chunks: &[FrameChunk],
    val_chunks: &[FrameChunk],
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&MetricRow),
) -> Result<TrainOutcome, DuplexError> {
    let usable: Vec<&FrameChunk> = train_chunks.iter().filter(|c| c.steps() >= cfg.window).collect();
    if usable.is_empty() {
        return Err(DuplexError::NoData);
    }
    let val = val_windows(val_chunks, cfg.window, cfg.max_val_windows);
    if val.is_empty() {
        return Err(DuplexError::NoData);
    }
    let mut rng = substream(cfg.seed, "duplexlm.batches");
    let mut adam = AdamW::new(cfg.optim, model.params());
    let mut grads = model.params().zeros_like();
    let mut log = MetricLog::default();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let (mut train_sum, mut train_n) = (0.0, 0usize);

    for step in 0..=cfg.steps {
        if step > 0 {
            let windows: Vec<ArrayView2<u32>> = (0..cfg.batch_size)
                .map(|_| {
                    let c = usable[rng.random_range(0..usable.len())];
                    let start = rng.random_range(0..=c.steps() - cfg.window);
                    c.tokens.slice(s![.., start..start + cfg.window])
                })
                .collect();
            grads.fill(0.0);
            let b = model.batch_loss(&windows, &cfg.weights, Some(&mut grads))?;
            let loss = b.total();
            if !loss.is_finite() {
                return Err(DuplexError::Diverged { step, loss });
            }
            adam.step(model.params_mut(), &grads);
            train_sum += loss;
            train_n += 1;
        }
        let eval_now = step == 0 || step == cfg.steps || step % cfg.optim.eval_every.max(1) == 0;
        if !eval_now {
            continue;
        }
        let b = evaluate(model, &val, &cfg.weights)?;
        let row = MetricRow {
            step,
            train_loss: (train_n > 0).then(|| train_sum / train_n as f64),
            text_val_loss: opt(b.text_loss()),
            audio_val_loss: opt(b.audio_loss()),
            text_accuracy_nonpad: opt(b.text_accuracy()),
            audio_accuracy: opt(b.audio_accuracy()),
        };
        (train_sum, train_n) = (0.0, 0);
        on_eval(&row);
        if let Some(total) = row.total_val_loss() {
            if best.as_ref().is_none_or(|(_, b, _)| total < *b) {
                best = Some((step, total, model.params().clone()));
            }
        }
        log.push(row)?;
    }
    let (best_step, _, best_params) = best.unwrap_or_else(|| (cfg.steps, f64::NAN, model.params().clone()));
    Ok(TrainOutcome { log, best_step, best_params })
}

/// Text pattern of the copy task, repeated with period 4.
pub const COPY_TEXT_PATTERN: [u32; 4] = [3, 4, PAD_ID, 5];

/// Synthetic chunks where every token is determined by the previous step:
/// text cycles through [`COPY_TEXT_PATTERN`] from a random phase, and audio
/// stream `k` holds `(c + t + k) mod audio_vocab` for a per-chunk offset `c`,
/// before the acoustic delay.
pub fn copy_task_chunks(n_chunks: usize, steps: usize, audio_vocab: usize, seed: u64) -> Vec<FrameChunk> {
    let mut rng = substream(seed, "duplexlm.copytask");
    (0..n_chunks)
        .map(|_| {
            let phase = rng.random_range(0..4);
            let offset = rng.random_range(0..audio_vocab);
            let raw = Array2::from_shape_fn((N_AUDIO, steps), |(k, t)| ((offset + t + k) % audio_vocab) as u32);
            let audio = apply_acoustic_delay(raw.view(), audio_vocab as u32, false).expect("16 non-empty streams");
            let mut tokens = Array2::zeros((N_AUDIO + 1, steps));
            for t in 0..steps {
                tokens[[0, t]] = COPY_TEXT_PATTERN[(phase + t) % 4];
            }
            tokens.slice_mut(s![1.., ..]).assign(&audio);
            FrameChunk { tokens, text_vocab: 6, audio_vocab }
        })
        .collect()
}
