use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::layers::{
    linear_bwd, linear_fwd, stack_bwd, stack_fwd, Builder, Group, Init, LinearIx, ParamStore, StackCache, StackIx,
};
use super::{DuplexError, LossWeights, PositionKind, ToyDuplexConfig, N_AUDIO, N_STREAMS};
use crate::checkpoint::{Checkpoint, NamedTensor, TensorData};
use crate::seed::substream;
use crate::tokenizer::{TensorRole, PAD_ID};

#[derive(Debug, Clone)]
struct ModelIx {
    text_emb: usize,
    audio_emb: Vec<usize>,
    pos_emb: usize,
    temporal: StackIx,
    text_linear: usize,
    z_proj: LinearIx,
    depth_text_emb: usize,
    depth_pos: usize,
    depth_audio_emb: Vec<usize>,
    depth: StackIx,
    heads: Vec<usize>,
}

/// Temporal transformer over steps, depth transformer over the 16 audio
/// tokens within a step.
#[derive(Debug, Clone)]
pub struct DuplexLm {
    cfg: ToyDuplexConfig,
    params: ParamStore,
    ix: ModelIx,
}

#[derive(Debug, Clone)]
pub struct TemporalOutput {
    /// One hidden row per input step.
    pub z: Array2<f64>,
    pub text_logits: Array2<f64>,
}

/// Sums behind a weighted loss, kept separate so batches can be pooled.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub text_wce: f64,
    pub text_w: f64,
    pub audio_wce: f64,
    pub audio_w: f64,
    pub text_correct: usize,
    pub text_nonpad: usize,
    pub audio_correct: usize,
    pub audio_count: usize,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        (self.text_wce + self.audio_wce) / (self.text_w + self.audio_w)
    }

    pub fn text_loss(&self) -> f64 {
        self.text_wce / self.text_w
    }

    pub fn audio_loss(&self) -> f64 {
        self.audio_wce / self.audio_w
    }

    pub fn text_accuracy(&self) -> f64 {
        self.text_correct as f64 / self.text_nonpad as f64
    }

    pub fn audio_accuracy(&self) -> f64 {
        self.audio_correct as f64 / self.audio_count as f64
    }

    pub fn merge(&mut self, o: &LossBreakdown) {
        self.text_wce += o.text_wce;
        self.text_w += o.text_w;
        self.audio_wce += o.audio_wce;
        self.audio_w += o.audio_w;
        self.text_correct += o.text_correct;
        self.text_nonpad += o.text_nonpad;
        self.audio_correct += o.audio_correct;
        self.audio_count += o.audio_count;
    }
}

/// Stable softmax of `row / temperature`.
pub fn softmax(row: ArrayView1<f64>, temperature: f64) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = row.mapv(|v| ((v - max) / temperature).exp());
    let sum = e.sum();
    e / sum
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Weight of one prediction. Audio targets equal to the row width are the
/// delay filler and carry no loss.
pub fn position_weight(kind: PositionKind, target: u32, width: usize, w: &LossWeights) -> f64 {
    match kind {
        PositionKind::Text if target == PAD_ID => w.text_weight * w.pad_scale,
        PositionKind::Text => w.text_weight,
        PositionKind::Audio(_) if target as usize >= width => 0.0,
        PositionKind::Audio(k) if w.mask_user_audio && k >= N_AUDIO / 2 => 0.0,
        PositionKind::Audio(k) if k % (N_AUDIO / 2) == 0 => w.semantic_weight,
        PositionKind::Audio(_) => w.acoustic_weight,
    }
}

/// Cross-entropy of one logit row, with the softmax for reuse in backward.
fn cross_entropy(row: ArrayView1<f64>, target: usize) -> (f64, Array1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
    let probs = row.mapv(|v| (v - lse).exp());
    (lse - row[target], probs)
}

/// `(Σ wᵢ·ceᵢ) / (Σ wᵢ)` over arbitrary prediction rows.
pub fn weighted_loss(
    rows: &[(ArrayView1<f64>, PositionKind, u32)],
    weights: &LossWeights,
) -> Result<LossBreakdown, DuplexError> {
    let mut out = LossBreakdown::default();
    for (row, kind, target) in rows {
        let w = position_weight(*kind, *target, row.len(), weights);
        if w == 0.0 {
            continue;
        }
        let (ce, _) = cross_entropy(*row, *target as usize);
        match kind {
            PositionKind::Text => {
                out.text_wce += w * ce;
                out.text_w += w;
            }
            PositionKind::Audio(_) => {
                out.audio_wce += w * ce;
                out.audio_w += w;
            }
        }
    }
    if out.text_w + out.audio_w == 0.0 {
        return Err(DuplexError::ZeroWeight);
    }
    Ok(out)
}

struct DepthCache {
    z_proj_in: Array2<f64>,
    stack: StackCache,
    out: Array2<f64>,
}

impl DuplexLm {
    pub fn new(cfg: ToyDuplexConfig, seed: u64) -> Result<Self, DuplexError> {
        cfg.validate()?;
        let mut rng = substream(seed, "duplexlm.init");
        let mut params = ParamStore::default();
        let (d, dd, vt, va) = (cfg.d_model, cfg.d_depth, cfg.text_vocab, cfg.audio_vocab);
        let std = 0.02;

        let mut b = Builder { store: &mut params, rng: &mut rng, group: Group::Temporal, std };
        let text_emb = b.tensor("temporal.text_emb".into(), TensorRole::TextEmbedTemporal, vec![vt, d], Init::Normal(std));
        let audio_emb = (0..N_AUDIO)
            .map(|k| b.tensor(format!("temporal.audio_emb.{k}"), TensorRole::Audio, vec![va + 1, d], Init::Normal(std)))
            .collect();
        let pos_emb = b.weight("temporal.pos_emb".into(), vec![cfg.context, d]);
        let temporal = b.stack("temporal", d, cfg.n_layers, cfg.n_heads);
        let text_linear = b.tensor("text_linear.weight".into(), TensorRole::TextLinear, vec![vt, d], Init::Normal(std));

        let mut b = Builder { store: &mut params, rng: &mut rng, group: Group::Depth, std };
        let z_proj = b.linear("depth.z_proj", d, dd);
        let depth_text_emb = b.tensor("depth.text_emb".into(), TensorRole::TextEmbedDepth, vec![vt, dd], Init::Normal(std));
        let depth_pos = b.weight("depth.pos_emb".into(), vec![N_AUDIO, dd]);
        let depth_audio_emb = (0..N_AUDIO - 1)
            .map(|k| b.tensor(format!("depth.audio_emb.{k}"), TensorRole::Audio, vec![va + 1, dd], Init::Normal(std)))
            .collect();
        let depth = b.stack("depth", dd, cfg.depth_layers, cfg.depth_heads);
        let heads = (0..N_AUDIO)
            .map(|k| b.tensor(format!("depth.heads.{k}"), TensorRole::Audio, vec![va, dd], Init::Normal(std)))
            .collect();

        let ix = ModelIx {
            text_emb,
            audio_emb,
            pos_emb,
            temporal,
            text_linear,
            z_proj,
            depth_text_emb,
            depth_pos,
            depth_audio_emb,
            depth,
            heads,
        };
        Ok(Self { cfg, params, ix })
    }

    pub fn config(&self) -> &ToyDuplexConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_tokens(&self, tokens: ArrayView2<u32>) -> Result<(), DuplexError> {
        if tokens.nrows() != N_STREAMS {
            return Err(DuplexError::Shape(format!("expected {N_STREAMS} streams, got {}", tokens.nrows())));
        }
        for (t, col) in tokens.axis_iter(Axis(1)).enumerate() {
            if col[0] as usize >= self.cfg.text_vocab {
                return Err(DuplexError::TokenOutOfRange { stream: 0, step: t, id: col[0] });
            }
            for k in 1..N_STREAMS {
                if col[k] as usize > self.cfg.audio_vocab {
                    return Err(DuplexError::TokenOutOfRange { stream: k, step: t, id: col[k] });
                }
            }
        }
        Ok(())
    }

    fn embed(&self, tokens: ArrayView2<u32>) -> Array2<f64> {
        let t = tokens.ncols();
        let mut x = self.params.mat(self.ix.pos_emb).slice(s![..t, ..]).to_owned();
        for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            row += &self.params.row(self.ix.text_emb, tokens[[0, i]] as usize);
            for k in 0..N_AUDIO {
                row += &self.params.row(self.ix.audio_emb[k], tokens[[k + 1, i]] as usize);
            }
        }
        x
    }

    /// Hidden state and next-step text logits for every step of `tokens`
    /// (`17 × t`, `1 ≤ t ≤ context`).
    pub fn temporal_forward(&self, tokens: ArrayView2<u32>) -> Result<TemporalOutput, DuplexError> {
        self.check_tokens(tokens)?;
        let t = tokens.ncols();
        if t == 0 || t > self.cfg.context {
            return Err(DuplexError::Shape(format!("{t} steps outside 1..={}", self.cfg.context)));
        }
        let (z, _) = stack_fwd(&self.params, &self.ix.temporal, self.embed(tokens));
        let text_logits = z.dot(&self.params.mat(self.ix.text_linear).t());
        Ok(TemporalOutput { z, text_logits })
    }

    fn depth_inputs(&self, z: ArrayView1<f64>, text: u32, prefix: &[u32], len: usize) -> (Array2<f64>, Array2<f64>) {
        let z_in = z.insert_axis(Axis(0)).to_owned();
        let zp = linear_fwd(&self.params, self.ix.z_proj, z_in.view());
        let mut x = self.params.mat(self.ix.depth_pos).slice(s![..len, ..]).to_owned();
        x += &zp.row(0);
        x.row_mut(0).scaled_add(1.0, &self.params.row(self.ix.depth_text_emb, text as usize));
        for k in 1..len {
            x.row_mut(k).scaled_add(1.0, &self.params.row(self.ix.depth_audio_emb[k - 1], prefix[k - 1] as usize));
        }
        (x, z_in)
    }

    fn depth_run(&self, z: ArrayView1<f64>, text: u32, prefix: &[u32], len: usize) -> DepthCache {
        let (x, z_proj_in) = self.depth_inputs(z, text, prefix, len);
        let (out, stack) = stack_fwd(&self.params, &self.ix.depth, x);
        DepthCache { z_proj_in, stack, out }
    }

    /// Logits for audio position `prefix.len()` of a step, given that step's
    /// hidden state, its text token and the audio tokens already produced.
    pub fn depth_forward(&self, z: ArrayView1<f64>, text: u32, prefix: &[u32]) -> Result<Array1<f64>, DuplexError> {
        let k = prefix.len();
        if k >= N_AUDIO {
            return Err(DuplexError::DepthPosition(k));
        }
        if z.len() != self.cfg.d_model {
            return Err(DuplexError::Shape(format!("hidden width {} != {}", z.len(), self.cfg.d_model)));
        }
        if text as usize >= self.cfg.text_vocab {
            return Err(DuplexError::TokenOutOfRange { stream: 0, step: 0, id: text });
        }
        if let Some((j, &id)) = prefix.iter().enumerate().find(|(_, &id)| id as usize > self.cfg.audio_vocab) {
            return Err(DuplexError::TokenOutOfRange { stream: j + 1, step: 0, id });
        }
        let c = self.depth_run(z, text, prefix, k + 1);
        Ok(self.params.mat(self.ix.heads[k]).dot(&c.out.row(k)))
    }

    /// Teacher-forced loss over a window: steps `0..t-1` predict steps
    /// `1..t`. With `grads`, accumulates `d(Σ w·ce)/dθ · scale`.
    pub fn window_loss(
        &self,
        tokens: ArrayView2<u32>,
        weights: &LossWeights,
        grads: Option<(&mut ParamStore, f64)>,
    ) -> Result<LossBreakdown, DuplexError> {
        self.check_tokens(tokens)?;
        let n = tokens.ncols();
        if n < 2 || n - 1 > self.cfg.context {
            return Err(DuplexError::Shape(format!("window of {n} steps; need 2..={}", self.cfg.context + 1)));
        }
        let inputs = tokens.slice(s![.., ..n - 1]);
        let (z, tcache) = stack_fwd(&self.params, &self.ix.temporal, self.embed(inputs));
        let text_logits = z.dot(&self.params.mat(self.ix.text_linear).t());
        let (vt, va) = (self.cfg.text_vocab, self.cfg.audio_vocab);

        let mut out = LossBreakdown::default();
        let mut grads = grads;
        let backward = grads.is_some();
        let mut dz = Array2::<f64>::zeros(z.raw_dim());
        let mut dtext_logits = Array2::<f64>::zeros(text_logits.raw_dim());

        for t in 0..n - 1 {
            let target = tokens[[0, t + 1]];
            let row = text_logits.row(t);
            let w = position_weight(PositionKind::Text, target, vt, weights);
            let (ce, probs) = cross_entropy(row, target as usize);
            out.text_wce += w * ce;
            out.text_w += w;
            if target != PAD_ID {
                out.text_nonpad += 1;
                out.text_correct += (argmax(row) == target as usize) as usize;
            }
            if backward {
                let mut d = probs;
                d[target as usize] -= 1.0;
                dtext_logits.row_mut(t).assign(&(d * w));
            }

            let audio_targets: Vec<u32> = (1..N_STREAMS).map(|k| tokens[[k, t + 1]]).collect();
            let c = self.depth_run(z.row(t), target, &audio_targets, N_AUDIO);
            let mut dout = Array2::<f64>::zeros(c.out.raw_dim());
            let mut any = false;
            for k in 0..N_AUDIO {
                let tgt = audio_targets[k];
                let w = position_weight(PositionKind::Audio(k), tgt, va, weights);
                if tgt as usize >= va {
                    continue;
                }
                let logits = self.params.mat(self.ix.heads[k]).dot(&c.out.row(k));
                out.audio_count += (w > 0.0) as usize;
                if w > 0.0 {
                    out.audio_correct += (argmax(logits.view()) == tgt as usize) as usize;
                }
                if w == 0.0 {
                    continue;
                }
                let (ce, probs) = cross_entropy(logits.view(), tgt as usize);
                out.audio_wce += w * ce;
                out.audio_w += w;
                if let Some((g, scale)) = grads.as_mut() {
                    let mut dl = probs;
                    dl[tgt as usize] -= 1.0;
                    dl *= w * *scale;
                    g.mat_mut(self.ix.heads[k])
                        .scaled_add(1.0, &dl.view().insert_axis(Axis(1)).dot(&c.out.row(k).insert_axis(Axis(0))));
                    dout.row_mut(k).assign(&self.params.mat(self.ix.heads[k]).t().dot(&dl));
                    any = true;
                }
            }
            if let (Some((g, _)), true) = (grads.as_mut(), any) {
                let dx = stack_bwd(&self.params, g, &self.ix.depth, &c.stack, dout.view());
                g.mat_mut(self.ix.depth_pos).scaled_add(1.0, &dx);
                g.row_mut(self.ix.depth_text_emb, target as usize).scaled_add(1.0, &dx.row(0));
                for k in 1..N_AUDIO {
                    g.row_mut(self.ix.depth_audio_emb[k - 1], audio_targets[k - 1] as usize)
                        .scaled_add(1.0, &dx.row(k));
                }
                let dzp = dx.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dzt = linear_bwd(&self.params, g, self.ix.z_proj, c.z_proj_in.view(), dzp.view());
                dz.row_mut(t).scaled_add(1.0, &dzt.row(0));
            }
        }

        if let Some((g, scale)) = grads {
            dtext_logits *= scale;
            g.mat_mut(self.ix.text_linear).scaled_add(1.0, &dtext_logits.t().dot(&z));
            dz += &dtext_logits.dot(&self.params.mat(self.ix.text_linear));
            let dx = stack_bwd(&self.params, g, &self.ix.temporal, &tcache, dz.view());
            g.mat_mut(self.ix.pos_emb).slice_mut(s![..n - 1, ..]).scaled_add(1.0, &dx);
            for i in 0..n - 1 {
                g.row_mut(self.ix.text_emb, inputs[[0, i]] as usize).scaled_add(1.0, &dx.row(i));
                for k in 0..N_AUDIO {
                    g.row_mut(self.ix.audio_emb[k], inputs[[k + 1, i]] as usize).scaled_add(1.0, &dx.row(i));
                }
            }
        }
        Ok(out)
    }

    /// Pooled weighted loss over windows; gradients (if requested) are of
    /// the pooled loss `Σ w·ce / Σ w`.
    pub fn batch_loss(
        &self,
        windows: &[ArrayView2<u32>],
        weights: &LossWeights,
        grads: Option<&mut ParamStore>,
    ) -> Result<LossBreakdown, DuplexError> {
        let total_w: f64 = windows.iter().map(|w| self.target_weight(*w, weights)).sum();
        if total_w == 0.0 {
            return Err(DuplexError::ZeroWeight);
        }
        let mut out = LossBreakdown::default();
        let mut grads = grads;
        for w in windows {
            let b = self.window_loss(*w, weights, grads.as_deref_mut().map(|g| (g, 1.0 / total_w)))?;
            out.merge(&b);
        }
        Ok(out)
    }

    fn target_weight(&self, tokens: ArrayView2<u32>, weights: &LossWeights) -> f64 {
        let mut w = 0.0;
        for t in 1..tokens.ncols() {
            w += position_weight(PositionKind::Text, tokens[[0, t]], self.cfg.text_vocab, weights);
            for k in 0..N_AUDIO {
                w += position_weight(PositionKind::Audio(k), tokens[[k + 1, t]], self.cfg.audio_vocab, weights);
            }
        }
        w
    }

    /// Next step after `history` (`17 × t`, only the last `context` steps
    /// are used): text first, then the 16 audio tokens in stream order.
    /// `temperature == 0` takes the argmax.
    pub fn sample_step(
        &self,
        history: ArrayView2<u32>,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<(u32, [u32; N_AUDIO]), DuplexError> {
        if !(temperature >= 0.0) {
            return Err(DuplexError::Temperature(temperature));
        }
        let t = history.ncols();
        let from = t.saturating_sub(self.cfg.context);
        let out = self.temporal_forward(history.slice(s![.., from..]))?;
        let z = out.z.row(out.z.nrows() - 1);
        let text = draw(out.text_logits.row(out.text_logits.nrows() - 1), temperature, rng) as u32;
        let mut audio = [0u32; N_AUDIO];
        for k in 0..N_AUDIO {
            let logits = self.depth_forward(z, text, &audio[..k])?;
            audio[k] = draw(logits.view(), temperature, rng) as u32;
        }
        Ok((text, audio))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        for p in &self.params.params {
            ckpt.push(NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                role: Some(p.role.as_str().to_string()),
                data: TensorData::F64(p.data.clone()),
            })
            .expect("unique names and consistent shapes");
        }
        ckpt
    }

    /// Rebuild a model of shape `cfg` from checkpointed tensors.
    pub fn from_checkpoint(cfg: ToyDuplexConfig, ckpt: &Checkpoint) -> Result<Self, DuplexError> {
        let mut model = Self::new(cfg, 0)?;
        for p in &mut model.params.params {
            let t = ckpt.get(&p.name).ok_or_else(|| DuplexError::Checkpoint(format!("missing tensor {}", p.name)))?;
            if t.shape != p.shape {
                return Err(DuplexError::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name, t.shape, p.shape
                )));
            }
            p.data = t.data.to_f64();
        }
        Ok(model)
    }
}

/// Draw an index from `softmax(logits / temperature)`; argmax when the
/// temperature is zero.
pub fn draw(logits: ArrayView1<f64>, temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let p = softmax(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}
