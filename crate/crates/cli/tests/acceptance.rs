//! Release acceptance suite. Every criterion prints one `PASS` / `FAIL` line
//! with its measured values; the process fails if any criterion fails.
//!
//! Run alone with `cargo test -p duplexkit-cli --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use duplexkit_core::audio::AudioBuffer;
use duplexkit_core::duplexlm::{
    copy_task_chunks, finite_difference_check, select_checkpoint, softmax, train, weighted_loss, AdamW, DuplexLm,
    Group, LossWeights, MetricLog, MetricRow, OptimConfig, PositionKind, ToyDuplexConfig, TrainConfig, TrainPreset,
    N_STREAMS,
};
use duplexkit_core::eval::{perplexity, stoi_samples, NllRecord};
use duplexkit_core::framebuilder::{
    apply_acoustic_delay, build_chunks, pad_ratio, parse_alignment, place_text_tokens, synth_audio_tokens,
    FrameConfig,
};
use duplexkit_core::grid::TimeGrid;
use duplexkit_core::rating::{Origin, PairManifestEntry, PairSet, Position, RatingStore, Summary};
use duplexkit_core::synth::{gaussian_noise, scripted_channel, speech_like};
use duplexkit_core::tokenizer::{
    apply_plan, fragmentation, plan_for_vocab_size, train_bpe, InitSpec, TensorManifest, Vocab, PAD_ID,
};
use duplexkit_core::turntaking::{classify_frames, oracle_events, stats_per_minute, turn_events, TurnTable, TurnTotals};
use duplexkit_core::vad::{vad_channel, SpeechSegment, VadConfig};
use duplexkit_core::wav::{read_wav, write_wav_pcm16};
use duplexkit_ratesvc::{router, AppState, NextPair};

type Check = fn() -> Result<String>;

fn main() -> ExitCode {
    let checks: [(&str, Check); 12] = [
        ("turn-taking oracle equivalence", turn_oracle),
        ("turn-taking scripted construction", turn_construction),
        ("PAD ratio determinism", pad_ratio_exact),
        ("tokenizer laws", tokenizer_laws),
        ("migration plan safety", migration_safety),
        ("gradient suite", gradient_suite),
        ("loss-weight contract", loss_contract),
        ("toy training", toy_training),
        ("checkpoint selection replay", selection_replay),
        ("STOI properties", stoi_properties),
        ("PPL harness", ppl_harness),
        ("rating service", rating_service),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(anyhow::anyhow!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<36} {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name:<36} {e:#} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// --- turn-taking ---------------------------------------------------------

const HOP_MS: f64 = 10.0;

/// Boundary times toggling A (bit 0) and/or B (bit 1); open segments close at
/// the end of the conversation.
fn toggled_segments(times: &[f64], masks: &[u8], dur: f64) -> [Vec<SpeechSegment>; 2] {
    let mut segs = [Vec::new(), Vec::new()];
    let mut open = [None, None];
    for (&t, &m) in times.iter().zip(masks) {
        for ch in 0..2 {
            if m & (1 << ch) != 0 {
                match open[ch].take() {
                    Some(s) => segs[ch].push(SpeechSegment::new(s, t)),
                    None => open[ch] = Some(t),
                }
            }
        }
    }
    for ch in 0..2 {
        if let Some(s) = open[ch] {
            segs[ch].push(SpeechSegment::new(s, dur));
        }
    }
    segs
}

fn turn_oracle() -> Result<String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let hop = HOP_MS / 1000.0;
    let (mut cases, mut events, mut worst) = (0, 0, 0.0f64);
    for case in 0..1200 {
        // even cases sit on frame edges and allow simultaneous changes (tie
        // rules); odd cases use arbitrary times at least 2.5 frames apart
        let on_grid = case % 2 == 0;
        let n = rng.random_range(0..30);
        let (mut t, mut times, mut masks) = (0.0, Vec::new(), Vec::new());
        for _ in 0..n {
            if on_grid {
                t += rng.random_range(1..300) as f64 * hop;
                masks.push(rng.random_range(1..4u8));
            } else {
                t += rng.random_range(2.5..300.0) * hop;
                masks.push(rng.random_range(1..3u8));
            }
            times.push(t);
        }
        let dur = t + 0.5;
        let [a, b] = toggled_segments(&times, &masks, dur);
        let fast = turn_events(&a, &b, dur);
        let slow = oracle_events(&classify_frames(&a, &b, dur, HOP_MS)?);
        ensure!(fast.len() == slow.len(), "case {case}: {} events vs {} from the oracle", fast.len(), slow.len());
        for (f, o) in fast.iter().zip(&slow) {
            ensure!(f.kind == o.kind, "case {case}: {:?} vs oracle {:?}", f, o);
            let err = (f.start_s - o.start_s).abs().max((f.end_s - o.end_s).abs());
            ensure!(err <= hop + 1e-9, "case {case}: boundary off by {err:.4} s");
            worst = worst.max(err);
        }
        cases += 1;
        events += fast.len();
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("{cases} cases, {events} events, worst boundary error {:.1} ms", worst * 1000.0))
}

fn turn_construction() -> Result<String> {
    let (sr, dur) = (16_000, 60.0);
    let a = scripted_channel(dur, sr, &[(0.0, 30.0), (45.0, 48.0)], 130.0, 1);
    let b = scripted_channel(dur, sr, &[(32.0, 60.0)], 210.0, 2);
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("scripted.wav");
    write_wav_pcm16(&path, &AudioBuffer::stereo(sr, a, b)?)?;
    let wav = read_wav(&path)?;
    let mut detail = Vec::new();
    let mut table = None;
    for min_silence_ms in [100.0, 200.0, 300.0, 500.0] {
        let cfg = VadConfig { min_silence_ms, ..VadConfig::default() };
        let sa = vad_channel(wav.channel(0), sr, &cfg)?;
        let sb = vad_channel(wav.channel(1), sr, &cfg)?;
        let events = turn_events(&sa, &sb, wav.duration_s());
        let st = stats_per_minute(&events, wav.duration_s())?;
        ensure!(
            (st.gap_s_per_min - 2.0).abs() <= 0.05,
            "min_silence {min_silence_ms} ms: gap {:.3} s/min",
            st.gap_s_per_min
        );
        ensure!(
            (st.overlap_s_per_min - 3.0).abs() <= 0.1,
            "min_silence {min_silence_ms} ms: overlap {:.3} s/min",
            st.overlap_s_per_min
        );
        detail.push(format!("{min_silence_ms}ms gap {:.3} ovl {:.3}", st.gap_s_per_min, st.overlap_s_per_min));
        table.get_or_insert_with(|| {
            TurnTable::from_totals(&[("scripted".into(), TurnTotals::from_events(&events, wav.duration_s()))])
        });
    }
    let text = table.context("no table")??.to_text();
    for col in ["IPU", "Pause", "Gap", "Ovl", "corpus"] {
        ensure!(text.contains(col), "table lacks {col}");
    }
    Ok(detail.join("; "))
}

// --- framing -------------------------------------------------------------

fn pad_ratio_exact() -> Result<String> {
    let vocab = Vocab::byte_level();
    // "a" plus its end-of-word space is two tokens; 256 words every 8 steps
    let lines: Vec<String> = (0..256)
        .map(|i| {
            let t = (8 * i) as f64 / 12.5;
            let ch = if i % 2 == 0 { "SYSTEM" } else { "USER" };
            json!({"channel": ch, "text": "a", "start_s": t, "end_s": t + 0.3}).to_string()
        })
        .collect();
    let words = parse_alignment(&lines.join("\n"))?;
    let grid = TimeGrid::at_token_rate(2048);
    let text = place_text_tokens(&words, &vocab, &grid)?;
    let placed = text.iter().filter(|&&t| t != PAD_ID).count();
    ensure!(placed == 512, "{placed} text tokens placed");
    let cfg = FrameConfig { text_vocab: vocab.size(), ..FrameConfig::default() };
    let audio = synth_audio_tokens(grid.n_steps, cfg.audio_vocab, 5);
    let delayed = apply_acoustic_delay(audio.view(), cfg.init_id(), cfg.delay_semantic)?;
    let chunks = build_chunks(&text, delayed.view(), &cfg)?;
    ensure!(chunks.len() == 1, "{} chunks", chunks.len());
    let r = pad_ratio(&chunks)?;
    ensure!(r == 0.75, "pad ratio {r}");
    Ok(format!("{placed} tokens in {} steps, pad ratio {r}", grid.n_steps))
}

// --- tokenizer -----------------------------------------------------------

const HINDI: &[&str] = &[
    "नमस्ते", "आप", "कैसे", "हैं", "मैं", "ठीक", "हूँ", "धन्यवाद", "क्या", "हाल", "है", "आज", "मौसम", "अच्छा", "बहुत",
    "गर्मी", "बारिश", "होगी", "कल", "हम", "बाज़ार", "जाएंगे", "खाना", "खाया", "नहीं", "पानी", "चाहिए", "घर", "कहाँ",
    "दिल्ली", "मुंबई", "रहते", "काम", "करते", "स्कूल", "किताब", "पढ़", "रहा", "रही", "थे", "थी", "लेकिन", "और",
    "फिर", "अभी", "बात", "करो", "सुनो", "समझ", "गया", "दोस्त", "परिवार", "बच्चे", "खेल", "रहे", "सुबह", "शाम", "रात",
    "ज़रूर", "शायद", "हाँ", "बिल्कुल", "सही", "गलत", "मुझे", "तुम्हें", "उन्हें", "हमारा", "तुम्हारा", "अपना",
];

const LATIN: &[&str] = &[
    "hello", "how", "are", "you", "fine", "thanks", "what", "weather", "today", "very", "good", "rain", "will",
    "come", "tomorrow", "we", "market", "going", "food", "eaten", "water", "need", "home", "where", "city", "live",
    "work", "school", "book", "reading", "were", "but", "and", "then", "now", "talk", "listen", "understand",
    "friend", "family", "children", "playing", "morning", "evening", "night", "sure", "maybe", "yes", "right",
    "wrong", "mine", "yours", "theirs", "ours", "always", "never", "sometimes", "quickly", "slowly", "together",
];

fn corpus(words: &[&str], sentences: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..sentences {
        let n = rng.random_range(4..12);
        let s: Vec<&str> = (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    out
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..40);
    (0..len)
        .map(|_| match rng.random_range(0..10) {
            0..4 => char::from_u32(rng.random_range(0x0900..0x0980)).unwrap(),
            4..6 => rng.random_range(' '..='~'),
            6 => [' ', '\t', '\n', '\u{200d}'][rng.random_range(0..4)],
            _ => rng.random::<char>(),
        })
        .collect()
}

fn tokenizer_laws() -> Result<String> {
    let size = 512;
    let hindi = train_bpe(&corpus(HINDI, 3000, 1), size)?;
    let latin = train_bpe(&corpus(LATIN, 3000, 2), size)?;
    ensure!(
        hindi.size() == size && latin.size() == size,
        "vocab sizes {} and {}, wanted {size}",
        hindi.size(),
        latin.size()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..10_000 {
        let s = random_string(&mut rng);
        let vocab = if i % 2 == 0 { &hindi } else { &latin };
        let back = vocab.decode(&vocab.encode(&s))?;
        ensure!(back == s, "round trip failed for {s:?}");
    }
    let held_out = corpus(HINDI, 500, 99);
    let fh = fragmentation(&held_out, &hindi)?;
    let fl = fragmentation(&held_out, &latin)?;
    ensure!(
        fh.tokens_per_word < fl.tokens_per_word,
        "Devanagari-trained {:.3} vs Latin-trained {:.3} tokens/word",
        fh.tokens_per_word,
        fl.tokens_per_word
    );
    Ok(format!(
        "10000 round trips; tokens/word {:.3} (Devanagari vocab) < {:.3} (Latin vocab)",
        fh.tokens_per_word, fl.tokens_per_word
    ))
}

// --- model ---------------------------------------------------------------

fn migration_safety() -> Result<String> {
    let cfg = ToyDuplexConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_depth: 8,
        depth_layers: 1,
        depth_heads: 2,
        context: 8,
        text_vocab: 300,
        audio_vocab: 16,
    };
    let ckpt = DuplexLm::new(cfg.clone(), 1)?.to_checkpoint();
    let manifest = TensorManifest::from_checkpoint(&ckpt)?;
    let plan = plan_for_vocab_size(&manifest, 300, 512, false, InitSpec::standard(9))?;
    let migrated = apply_plan(&ckpt, &plan)?;
    let after = TensorManifest::from_checkpoint(&migrated)?;
    ensure!(after.entries.len() == manifest.entries.len(), "tensor count changed");
    let mut reshaped = Vec::new();
    for (old, new) in manifest.entries.iter().zip(&after.entries) {
        ensure!(old.name == new.name && old.role == new.role, "tensor order or role changed at {}", old.name);
        if old.role.is_text() {
            ensure!(new.shape[0] == 512 && new.shape[1..] == old.shape[1..], "{} reshaped to {:?}", new.name, new.shape);
            reshaped.push(old.role);
        } else {
            ensure!(old.checksum == new.checksum && old.shape == new.shape, "{} was modified", old.name);
        }
    }
    reshaped.sort_by_key(|r| r.as_str());
    reshaped.dedup();
    ensure!(reshaped.len() == 3, "{} distinct text roles reshaped", reshaped.len());
    DuplexLm::from_checkpoint(ToyDuplexConfig { text_vocab: 512, ..cfg }, &migrated)?;
    let kept = manifest.entries.len() - 3;
    Ok(format!("{kept} tensors checksum-identical, 3 text tensors 300 -> 512 rows"))
}

fn micro() -> ToyDuplexConfig {
    ToyDuplexConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_depth: 8,
        depth_layers: 1,
        depth_heads: 2,
        context: 4,
        text_vocab: 6,
        audio_vocab: 4,
    }
}

fn random_tokens(cfg: &ToyDuplexConfig, steps: usize, rng: &mut ChaCha8Rng) -> Array2<u32> {
    Array2::from_shape_fn((N_STREAMS, steps), |(k, _)| {
        let v = if k == 0 { cfg.text_vocab } else { cfg.audio_vocab };
        rng.random_range(0..v as u32)
    })
}

fn gradient_suite() -> Result<String> {
    let start = Instant::now();
    let cfg = micro();
    let mut model = DuplexLm::new(cfg.clone(), 1)?;
    // push values off the small init so no tensor's gradient is negligible
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in &mut model.params_mut().params {
        for v in &mut p.data {
            *v += rng.random_range(-0.7..0.7);
        }
    }
    // three tokens: two predicted steps
    let mut tokens = random_tokens(&cfg, 3, &mut rng);
    tokens[[0, 1]] = PAD_ID;
    let checks = finite_difference_check(&model, &[tokens.view()], &LossWeights::default(), 1e-5)?;
    ensure!(checks.len() == model.params().len(), "{} of {} tensors checked", checks.len(), model.params().len());
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).context("no tensors")?;
    ensure!(worst.rel_err <= 1e-3, "{}: relative error {:.2e}", worst.name, worst.rel_err);
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!("{} tensors, worst {:.2e} ({})", checks.len(), worst.rel_err, worst.name))
}

fn loss_contract() -> Result<String> {
    let logits = [
        ndarray::arr1(&[0.3, -1.2, 2.0, 0.5]),
        ndarray::arr1(&[1.0, 0.0, -0.5, 0.25]),
        ndarray::arr1(&[-0.3, 0.8, 0.1, 0.0]),
    ];
    let rows = [
        (logits[0].view(), PositionKind::Text, PAD_ID),
        (logits[1].view(), PositionKind::Audio(0), 2),
        (logits[2].view(), PositionKind::Audio(5), 1),
    ];
    // worked by hand: CE = [2.06920, 2.22434, 0.82364], weights [0.5, 100, 1]
    let expected = 2.2097792838763652;
    let got = weighted_loss(&rows, &LossWeights::default())?.total();
    ensure!((got - expected).abs() <= 1e-6, "weighted loss {got} vs {expected}");

    let mut model = DuplexLm::new(micro(), 3)?;
    model.params_mut().fill(0.0);
    let mut grads = model.params().zeros_like();
    grads.fill(0.37);
    let optim: OptimConfig = TrainPreset::Finetune.optim();
    let mut opt = AdamW::new(optim, model.params());
    opt.step(model.params_mut(), &grads);
    let temporal = model.params().params.iter().find(|p| p.group == Group::Temporal).context("no temporal")?.data[0];
    ensure!(temporal != 0.0, "no temporal update");
    for p in &model.params().params {
        let want = if p.group == Group::Depth { 2.0 * temporal } else { temporal };
        ensure!(p.data.iter().all(|&v| v == want), "{} update differs from {want:e}", p.name);
    }
    Ok(format!("loss {got:.9}; depth step {:.3e} = 2 x temporal {:.3e}", 2.0 * temporal, temporal))
}

/// Changing inputs at step `t` must leave every earlier temporal output, and
/// every depth output before the changed codebook, untouched.
fn causality(model: &DuplexLm, window: &Array2<u32>) -> Result<()> {
    let cfg = model.config();
    let base = model.temporal_forward(window.view())?;
    for t in [1, window.ncols() / 2, window.ncols() - 1] {
        let mut w = window.clone();
        w[[0, t]] = (w[[0, t]] + 1) % cfg.text_vocab as u32;
        for k in 1..N_STREAMS {
            w[[k, t]] = (w[[k, t]] + 1) % cfg.audio_vocab as u32;
        }
        let out = model.temporal_forward(w.view())?;
        ensure!(out.z.slice(s![..t, ..]) == base.z.slice(s![..t, ..]), "temporal step {t} leaked backwards");
    }
    let z = base.z.row(3);
    let prefix: Vec<u32> = (0..15).map(|k| window[[k + 1, 3]]).collect();
    for j in [0, 7, 14] {
        let mut changed = prefix.clone();
        changed[j] = (changed[j] + 1) % cfg.audio_vocab as u32;
        for k in 0..=j {
            let a = model.depth_forward(z, window[[0, 4]], &prefix[..k])?;
            let b = model.depth_forward(z, window[[0, 4]], &changed[..k])?;
            ensure!(a == b, "depth position {k} saw codebook {j}");
        }
    }
    Ok(())
}

fn toy_training() -> Result<String> {
    let start = Instant::now();
    let audio_vocab = 16;
    let cfg = ToyDuplexConfig { text_vocab: 6, audio_vocab, context: 32, ..ToyDuplexConfig::default() };
    let train_set = copy_task_chunks(16, 256, audio_vocab, 1);
    let val_set = copy_task_chunks(4, 256, audio_vocab, 2);
    let mut tc = TrainConfig::from_preset(TrainPreset::Pretrain, 7);
    tc.optim.lr_temporal = 3e-3;
    tc.optim.lr_depth = 3e-3;
    tc.optim.eval_every = 50;
    tc.steps = 250;
    let mut model = DuplexLm::new(cfg, 7)?;
    let probe = val_set[0].tokens.slice(s![.., 10..10 + tc.window - 1]).to_owned();
    causality(&model, &probe).context("before training")?;
    let outcome = train(&mut model, &train_set, &val_set, &tc, |_| {})?;
    let best = outcome.log.rows.iter().find(|r| r.step == outcome.best_step).context("best row missing")?;
    *model.params_mut() = outcome.best_params.clone();
    causality(&model, &probe).context("after training")?;
    let text = best.text_accuracy_nonpad.context("no text accuracy")?;
    let audio = best.audio_accuracy.context("no audio accuracy")?;
    let elapsed = start.elapsed();
    ensure!(text >= 0.90 && audio >= 0.90, "text accuracy {text:.3}, audio accuracy {audio:.3}");
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!("step {}: text {text:.3}, audio {audio:.3}; causal before and after", outcome.best_step))
}

fn selection_replay() -> Result<String> {
    let row = |step, text: f64, audio: f64| MetricRow {
        step,
        train_loss: Some(text + audio + 0.2),
        text_val_loss: Some(text),
        audio_val_loss: Some(audio),
        text_accuracy_nonpad: None,
        audio_accuracy: None,
    };
    let mut log = MetricLog::default();
    for r in [
        row(3208, 1.502, 1.931),
        row(4010, 1.481, 1.907),
        row(4812, 1.474, 1.896),
        row(5614, 1.479, 1.899),
        row(6416, 1.486, 1.904),
    ] {
        log.push(r)?;
    }
    let log = MetricLog::from_jsonl(&log.to_jsonl())?;
    let (step, total) = select_checkpoint(&log)?;
    ensure!(step == 4812 && (total - 3.370).abs() < 1e-9, "selected step {step} total {total}");
    Ok(format!("step {step} total {total:.3}"))
}

// --- evaluation ----------------------------------------------------------

fn stoi_properties() -> Result<String> {
    let sr = 16_000;
    let clean: Vec<f64> = speech_like(3 * sr as usize, sr, 1).iter().map(|&v| v as f64).collect();
    let same = stoi_samples(&clean, &clean, sr)?;
    ensure!((same - 1.0).abs() <= 1e-6, "identical signals score {same}");
    let power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    let noise = gaussian_noise(clean.len(), 1.0, 2);
    let mut scores = Vec::new();
    let mut gain_err = 0.0f64;
    for snr in [20.0, 10.0, 0.0, -10.0] {
        let scale = (power / 10f64.powf(snr / 10.0)).sqrt();
        let degraded: Vec<f64> = clean.iter().zip(&noise).map(|(c, &n)| c + scale * n as f64).collect();
        let d = stoi_samples(&clean, &degraded, sr)?;
        let louder: Vec<f64> = degraded.iter().map(|v| v * 0.37).collect();
        gain_err = gain_err.max((stoi_samples(&clean, &louder, sr)? - d).abs());
        scores.push(d);
    }
    ensure!(scores.windows(2).all(|w| w[1] < w[0]), "not monotone: {scores:?}");
    ensure!(gain_err <= 1e-6, "gain changed the score by {gain_err:e}");
    let s: Vec<String> = scores.iter().map(|v| format!("{v:.3}")).collect();
    Ok(format!("identical {same:.6}; +20/+10/0/-10 dB: {}; gain drift {gain_err:.1e}", s.join(" ")))
}

fn ppl_harness() -> Result<String> {
    let uniform = softmax(ndarray::Array1::zeros(32_000).view(), 1.0);
    let nll = -uniform[123].ln();
    let records: Vec<NllRecord> = [100u64, 250, 650]
        .iter()
        .enumerate()
        .map(|(i, &n)| NllRecord { segment_id: format!("s{i}"), n_tokens: n, nll_sum: nll * n as f64 })
        .collect();
    let ppl = perplexity(&records)?;
    ensure!((ppl - 32_000.0).abs() <= 1e-6, "uniform PPL {ppl}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..200 {
        let whole: Vec<NllRecord> = (0..rng.random_range(1..20))
            .map(|i| NllRecord {
                segment_id: format!("w{i}"),
                n_tokens: rng.random_range(2..500),
                nll_sum: rng.random_range(0.5..3000.0),
            })
            .collect();
        let mut split = Vec::new();
        for r in &whole {
            // the first part keeps at least half the total, so the remainder is exact
            let first = r.nll_sum * rng.random_range(0.5..1.0);
            let k = rng.random_range(1..r.n_tokens);
            split.push(NllRecord { segment_id: format!("{}a", r.segment_id), n_tokens: k, nll_sum: first });
            split.push(NllRecord {
                segment_id: format!("{}b", r.segment_id),
                n_tokens: r.n_tokens - k,
                nll_sum: r.nll_sum - first,
            });
        }
        split.reverse();
        let (a, b) = (perplexity(&whole)?, perplexity(&split)?);
        ensure!(a.to_bits() == b.to_bits(), "trial {trial}: {a} vs {b} after splitting");
    }
    Ok(format!("uniform PPL {ppl:.9}; 200 random splits bit-identical"))
}

// --- rating service ------------------------------------------------------

async fn call(app: &axum::Router, req: Request<Body>) -> Result<(StatusCode, Vec<u8>)> {
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status();
    Ok((status, resp.into_body().collect().await?.to_bytes().to_vec()))
}

fn post_rating(body: &Value) -> Result<Request<Body>> {
    Ok(Request::post("/api/ratings")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))?)
}

fn rating_service() -> Result<String> {
    let entries: Vec<PairManifestEntry> = (1..=200)
        .map(|i| PairManifestEntry { pair_id: i, human_audio: format!("h{i}.wav"), model_audio: format!("m{i}.wav") })
        .collect();
    let seed = 31;
    let pairs = PairSet::new(&entries, seed)?;
    let human_first = pairs.iter().filter(|p| p.origin(Position::A) == Origin::Human).count();
    // 200 fair coins: mean 100, sd 7.07; allow 3 sd
    ensure!((79..=121).contains(&human_first), "human clip first in {human_first} of 200 pairs");

    let dir = tempfile::tempdir()?;
    let store_path = dir.path().join("ratings.jsonl");
    let rt = tokio::runtime::Runtime::new()?;
    let before: Summary = rt.block_on(async {
        let state = Arc::new(AppState::new(PairSet::new(&entries, seed)?, RatingStore::open(&store_path)?, dir.path()));
        let app = router(state.clone());
        // this rater always prefers the human clip, wherever blinding put it
        loop {
            let (status, body) = call(&app, Request::get("/api/pairs/next?rater=r1").body(Body::empty())?).await?;
            ensure!(status == StatusCode::OK, "next pair: {status}");
            let next: NextPair = serde_json::from_slice(&body)?;
            let Some(view) = next.pair else { break };
            let human = pairs.get(view.pair_id).context("unknown pair served")?.position_of(Origin::Human);
            let (pref, nat) = match human {
                Position::A => ("A", (5, 2)),
                Position::B => ("B", (2, 5)),
            };
            let body = json!({
                "pair_id": view.pair_id, "rater_id": "r1",
                "naturalness_a": nat.0, "naturalness_b": nat.1, "clarity_a": 4, "clarity_b": 3,
                "preference": pref,
                "rubrics": {"human_like": false, "appropriate": true, "complete": true}
            });
            let (status, _) = call(&app, post_rating(&body)?).await?;
            ensure!(status == StatusCode::CREATED, "submit: {status}");
        }
        let dup = json!({
            "pair_id": 1, "rater_id": "r1", "naturalness_a": 1, "naturalness_b": 1, "clarity_a": 1,
            "clarity_b": 1, "preference": "TIE",
            "rubrics": {"human_like": false, "appropriate": false, "complete": false}
        });
        let (status, _) = call(&app, post_rating(&dup)?).await?;
        ensure!(status == StatusCode::CONFLICT, "duplicate submission answered {status}");
        let (_, body) = call(&app, Request::get("/api/summary").body(Body::empty())?).await?;
        Ok::<_, anyhow::Error>(serde_json::from_slice(&body)?)
    })?;
    ensure!(before.n_ratings == 200, "{} ratings stored", before.n_ratings);
    ensure!(before.preference_human_pct == Some(100.0), "human preferred in {:?}%", before.preference_human_pct);
    ensure!(before.naturalness_human == Some(5.0), "human naturalness {:?}", before.naturalness_human);

    let reopened = AppState::new(PairSet::new(&entries, seed)?, RatingStore::open(&store_path)?, dir.path());
    let after = reopened.summary()?;
    ensure!(
        serde_json::to_string(&after)? == serde_json::to_string(&before)? && after == before,
        "summary changed across restart"
    );
    Ok(format!(
        "human first in {human_first}/200; human preferred {:.0}%; duplicate -> 409; restart summary identical",
        before.preference_human_pct.unwrap_or_default()
    ))
}
