use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::Subcommand;
use rayon::prelude::*;

use duplexkit_core::checkpoint::Checkpoint;
use duplexkit_core::duplexlm::{
    copy_task_chunks, select_checkpoint, train, DuplexLm, MetricLog, ToyDuplexConfig, TrainConfig, TrainPreset,
};
use duplexkit_core::eval::{
    make_report, parse_nll_records, perplexity, segment_for_continuation, stoi, CodecRow, TEMPERATURES,
};
use duplexkit_core::framebuilder::{
    apply_acoustic_delay, build_chunks, pad_ratio, parse_alignment, parse_audio_tokens, place_text_tokens,
    read_chunks, synth_audio_tokens, write_chunks, FrameChunk,
};
use duplexkit_core::grid::TimeGrid;
use duplexkit_core::ingest::{inspect_entry, scan_pairs, CorpusManifest};
use duplexkit_core::rating::{PairSet, RatingStore};
use duplexkit_core::tokenizer::{
    apply_plan, fragmentation, plan_for_vocab_size, train_bpe, InitSpec, TensorManifest, Vocab,
};
use duplexkit_core::turntaking::{turn_events, TurnTable, TurnTotals};
use duplexkit_core::vad::{segments_to_jsonl, vad_channel};
use duplexkit_core::wav::read_wav;
use duplexkit_core::RunConfig;

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Quality-check a corpus directory of `<id>.wav` / `<id>.align` pairs.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Speech segments for each channel of a WAV file, as JSON lines.
    Vad {
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hop_ms: Option<f64>,
    },
    /// Per-minute IPU / pause / gap / overlap table for stereo conversations.
    Turnstats {
        #[arg(long, required = true, num_args = 1..)]
        audio: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write rows as JSON lines.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train a byte-level BPE vocabulary on a text corpus.
    TokTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Encode text (or decode ids) with a trained vocabulary.
    TokEncode {
        #[arg(long)]
        vocab: PathBuf,
        /// Text to encode; reads `--input` when absent.
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Treat the input as space-separated ids and decode.
        #[arg(long)]
        decode: bool,
        /// Print tokens per word and per character instead of ids.
        #[arg(long)]
        stats: bool,
    },
    /// Plan (and optionally apply) re-initialisation of text tensors for a new vocabulary.
    ReinitPlan {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        old_vocab_size: usize,
        /// New vocabulary file; `--new-vocab-size` may be given instead.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        new_vocab_size: Option<usize>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: PathBuf,
        /// Write the migrated checkpoint here.
        #[arg(long)]
        apply: Option<PathBuf>,
    },
    /// Build 17-stream chunks from word alignments and audio tokens.
    Frames {
        #[arg(long)]
        alignment: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// 16 ids per line, one line per step; seeded random tokens when absent.
        #[arg(long)]
        audio_tokens: Option<PathBuf>,
        /// Conversation length; defaults to the audio token count or the last word end.
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy duplex model (synthetic copy task unless `--chunks` is given).
    ToyTrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        chunks: Option<PathBuf>,
        #[arg(long)]
        val_chunks: Option<PathBuf>,
        #[arg(long)]
        preset: Option<TrainPreset>,
        #[arg(long)]
        steps: Option<usize>,
        /// Sets both temporal and depth learning rates.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Pick the step with the lowest total validation loss.
    SelectCkpt {
        #[arg(long)]
        log: PathBuf,
    },
    /// 30 s prompted-continuation windows for a conversation.
    Segment {
        #[arg(long)]
        id: String,
        /// Duration in seconds, or read from `--audio`.
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// STOI of a degraded mono WAV against its clean reference.
    Stoi {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        degraded: PathBuf,
    },
    /// Pooled perplexity from `{segment_id, n_tokens, nll_sum}` lines.
    Ppl {
        #[arg(long)]
        nll: PathBuf,
    },
    /// Assemble codec, perplexity and turn-taking tables.
    Report {
        /// Files of per-segment STOI scores, one per line.
        #[arg(long)]
        stoi_scores: Option<PathBuf>,
        /// Externally computed PESQ scores, one per line.
        #[arg(long)]
        pesq_scores: Option<PathBuf>,
        /// `CONDITION=nll.jsonl`, CONDITION being `gt` or a temperature.
        #[arg(long)]
        ppl: Vec<String>,
        /// `CONDITION=turnstats.jsonl`; the `corpus` row of each file is used.
        #[arg(long)]
        turns: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Serve blinded pairs and collect ratings over HTTP.
    ServeRatings {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        audio_root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cmd: Command, cfg: &mut RunConfig) -> Result<()> {
    match cmd {
        Command::Ingest { root, out } => ingest(&root, &out, cfg),
        Command::Vad { audio, out, hop_ms } => {
            if let Some(h) = hop_ms {
                cfg.vad.hop_ms = h;
            }
            let wav = read_wav(&audio).with_context(|| format!("decoding {}", audio.display()))?;
            let mut lines = String::new();
            for c in 0..wav.n_channels() {
                let segs = vad_channel(wav.channel(c), wav.sample_rate(), &cfg.vad)?;
                println!("channel {c}: {} segments", segs.len());
                lines.push_str(&segments_to_jsonl(c, &segs));
            }
            write(&out, lines)
        }
        Command::Turnstats { audio, out, json } => {
            let parts: Vec<(String, TurnTotals)> = audio
                .par_iter()
                .map(|p| Ok((stem(p), conversation_totals(p, cfg)?)))
                .collect::<Result<_>>()?;
            let table = TurnTable::from_totals(&parts)?;
            write(&out, table.to_text())?;
            if let Some(j) = json {
                write(&j, table.to_jsonl())?;
            }
            print!("{}", table.to_text());
            Ok(())
        }
        Command::TokTrain { corpus, out, vocab_size } => {
            let size = vocab_size.unwrap_or(cfg.vocab_size);
            let vocab = train_bpe(&read(&corpus)?, size)?;
            if vocab.size() < size {
                eprintln!("warning: corpus exhausted at {} pieces (target {size})", vocab.size());
            }
            write(&out, vocab.to_text())?;
            println!("vocabulary of {} pieces written to {}", vocab.size(), out.display());
            Ok(())
        }
        Command::TokEncode { vocab, text, input, decode, stats } => {
            let vocab = Vocab::from_text(&read(&vocab)?)?;
            let text = match (text, input) {
                (Some(t), _) => t,
                (None, Some(p)) => read(&p)?,
                (None, None) => bail!("give --text or --input"),
            };
            if decode {
                let ids = text
                    .split_whitespace()
                    .map(|t| t.parse::<u32>().with_context(|| format!("bad id {t:?}")))
                    .collect::<Result<Vec<_>>>()?;
                println!("{}", vocab.decode(&ids)?);
            } else if stats {
                let f = fragmentation(&text, &vocab)?;
                println!("tokens/word {:.4}\ntokens/char {:.4}", f.tokens_per_word, f.tokens_per_char);
            } else {
                let ids: Vec<String> = vocab.encode(&text).iter().map(u32::to_string).collect();
                println!("{}", ids.join(" "));
            }
            Ok(())
        }
        Command::ReinitPlan { checkpoint, old_vocab_size, vocab, new_vocab_size, force, out, apply } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let new_size = match (vocab, new_vocab_size) {
                (Some(v), _) => Vocab::from_text(&read(&v)?)?.size(),
                (None, Some(n)) => n,
                (None, None) => bail!("give --vocab or --new-vocab-size"),
            };
            let manifest = TensorManifest::from_checkpoint(&ckpt)?;
            let plan = plan_for_vocab_size(&manifest, old_vocab_size, new_size, force, InitSpec::standard(cfg.seed))?;
            write(&out, plan.to_jsonl())?;
            if let Some(dst) = apply {
                apply_plan(&ckpt, &plan)?.save(&dst).with_context(|| format!("writing {}", dst.display()))?;
            }
            Ok(())
        }
        Command::Frames { alignment, vocab, audio_tokens, duration_s, out } => {
            frames(&alignment, &vocab, audio_tokens.as_deref(), duration_s, &out, cfg)
        }
        Command::ToyTrain { out, chunks, val_chunks, preset, steps, lr } => {
            if let Some(p) = preset {
                cfg.optim = p.optim();
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(lr) = lr {
                cfg.optim.lr_temporal = lr;
                cfg.optim.lr_depth = lr;
            }
            toy_train(&out, chunks.as_deref(), val_chunks.as_deref(), cfg)
        }
        Command::SelectCkpt { log } => {
            let log = MetricLog::from_jsonl(&read(&log)?)?;
            let (step, total) = select_checkpoint(&log)?;
            println!("step {step} total {total:.3}");
            Ok(())
        }
        Command::Segment { id, duration_s, audio, temperature } => {
            let d = match (duration_s, audio) {
                (Some(d), _) => d,
                (None, Some(p)) => read_wav(&p).with_context(|| format!("decoding {}", p.display()))?.duration_s(),
                (None, None) => bail!("give --duration-s or --audio"),
            };
            for s in segment_for_continuation(&id, d, temperature)? {
                println!("{}", serde_json::to_string(&s)?);
            }
            Ok(())
        }
        Command::Stoi { clean, degraded } => {
            let decode = |p: &Path| read_wav(p).with_context(|| format!("decoding {}", p.display()));
            let score = stoi(&decode(&clean)?, &decode(&degraded)?)?;
            println!("{score:.6}");
            Ok(())
        }
        Command::Ppl { nll } => {
            println!("{:.4}", perplexity(&parse_nll_records(&read(&nll)?)?)?);
            Ok(())
        }
        Command::Report { stoi_scores, pesq_scores, ppl, turns, out, json } => {
            report(stoi_scores.as_deref(), pesq_scores.as_deref(), &ppl, &turns, &out, json.as_deref())
        }
        Command::ServeRatings { pairs, store, audio_root, addr } => {
            let pairs = PairSet::from_manifest(&read(&pairs)?, cfg.seed)?;
            let store = RatingStore::open(&store)?;
            let state = Arc::new(duplexkit_ratesvc::AppState::new(pairs, store, audio_root));
            eprintln!("serving ratings on http://{addr}");
            tokio::runtime::Runtime::new()?.block_on(duplexkit_ratesvc::serve(addr, state))?;
            Ok(())
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// VAD both channels of a stereo file and total its turn events.
pub fn conversation_totals(path: &Path, cfg: &RunConfig) -> Result<TurnTotals> {
    let wav = read_wav(path).with_context(|| format!("decoding {}", path.display()))?;
    ensure!(wav.n_channels() == 2, "{} is not stereo", path.display());
    let a = vad_channel(wav.channel(0), wav.sample_rate(), &cfg.vad)?;
    let b = vad_channel(wav.channel(1), wav.sample_rate(), &cfg.vad)?;
    let d = wav.duration_s();
    Ok(TurnTotals::from_events(&turn_events(&a, &b, d), d))
}

fn ingest(root: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let pairs: Vec<_> = scan_pairs(root)?.into_iter().collect();
    let entries = pairs
        .into_par_iter()
        .map(|(id, (audio, align))| inspect_entry(id, audio, align, &cfg.qa))
        .collect();
    let manifest = CorpusManifest { entries };
    write(out, manifest.to_jsonl())?;
    println!("{} active, {} excluded", manifest.active().count(), manifest.excluded().count());
    Ok(())
}

fn frames(
    alignment: &Path,
    vocab: &Path,
    audio_tokens: Option<&Path>,
    duration_s: Option<f64>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let words = parse_alignment(&read(alignment)?)?;
    let vocab = Vocab::from_text(&read(vocab)?)?;
    let mut fc = cfg.frame.clone();
    fc.text_vocab = vocab.size();
    let audio = match audio_tokens {
        Some(p) => Some(parse_audio_tokens(&read(p)?, fc.audio_vocab)?),
        None => None,
    };
    let grid = match (duration_s, &audio) {
        (Some(d), _) => TimeGrid::covering(duplexkit_core::grid::DEFAULT_RATE_HZ, d)?,
        (None, Some(a)) => TimeGrid::at_token_rate(a.ncols()),
        (None, None) => {
            let end = words.iter().map(|w| w.end_s).fold(0.0, f64::max);
            TimeGrid::covering(duplexkit_core::grid::DEFAULT_RATE_HZ, end)?
        }
    };
    let text = place_text_tokens(&words, &vocab, &grid)?;
    let audio = match audio {
        Some(a) => {
            ensure!(a.ncols() == grid.n_steps, "{} audio token steps for a {}-step grid", a.ncols(), grid.n_steps);
            a
        }
        None => synth_audio_tokens(grid.n_steps, fc.audio_vocab, cfg.seed),
    };
    let delayed = apply_acoustic_delay(audio.view(), fc.init_id(), fc.delay_semantic)?;
    let chunks = build_chunks(&text, delayed.view(), &fc)?;
    if chunks.is_empty() {
        eprintln!("warning: {} steps is shorter than one {}-step chunk; nothing written", grid.n_steps, fc.chunk_steps);
        return Ok(());
    }
    let mut buf = Vec::new();
    write_chunks(&mut buf, &chunks)?;
    write(out, buf)?;
    println!("{} chunks, PAD ratio {:.4}", chunks.len(), pad_ratio(&chunks)?);
    Ok(())
}

fn load_chunks(path: &Path) -> Result<Vec<FrameChunk>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_chunks(bytes.as_slice())?)
}

fn toy_train(out: &Path, chunks: Option<&Path>, val_chunks: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let (train_set, val_set, model_cfg) = match chunks {
        Some(p) => {
            let train_set = load_chunks(p)?;
            let first = train_set.first().context("no chunks in file")?;
            let model_cfg = ToyDuplexConfig {
                text_vocab: first.text_vocab,
                audio_vocab: first.audio_vocab,
                ..cfg.model.clone()
            };
            let val_set = match val_chunks {
                Some(v) => load_chunks(v)?,
                None => train_set.clone(),
            };
            (train_set, val_set, model_cfg)
        }
        None => {
            let audio_vocab = 16;
            let model_cfg = ToyDuplexConfig { text_vocab: 6, audio_vocab, context: 32, ..cfg.model.clone() };
            (
                copy_task_chunks(16, 256, audio_vocab, cfg.seed),
                copy_task_chunks(4, 256, audio_vocab, cfg.seed.wrapping_add(1)),
                model_cfg,
            )
        }
    };
    let window = cfg.train.window.min(model_cfg.context + 1);
    let tc = TrainConfig {
        optim: cfg.optim,
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        window,
        weights: cfg.loss,
        seed: cfg.seed,
        max_val_windows: cfg.train.max_val_windows,
    };
    let mut model = DuplexLm::new(model_cfg.clone(), cfg.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = train(&mut model, &train_set, &val_set, &tc, |r| {
        let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
        println!(
            "step {:>6}  train {}  text_val {}  audio_val {}  text_acc {}  audio_acc {}",
            r.step,
            f(r.train_loss),
            f(r.text_val_loss),
            f(r.audio_val_loss),
            f(r.text_accuracy_nonpad),
            f(r.audio_accuracy)
        );
    })?;
    write(&out.join("metrics.jsonl"), outcome.log.to_jsonl())?;
    write(&out.join("model.json"), serde_json::to_string_pretty(&model_cfg)?)?;
    *model.params_mut() = outcome.best_params;
    model.to_checkpoint().save(out.join("model.ckpt")).context("writing model.ckpt")?;
    println!("best step {}", outcome.best_step);
    Ok(())
}

fn scores(path: &Path) -> Result<Vec<f64>> {
    read(path)?
        .split_whitespace()
        .map(|t| t.parse::<f64>().with_context(|| format!("bad score {t:?} in {}", path.display())))
        .collect()
}

fn condition(spec: &str) -> Result<(Option<f64>, PathBuf)> {
    let (c, p) = spec.split_once('=').with_context(|| format!("expected CONDITION=FILE, got {spec:?}"))?;
    let t = match c {
        "gt" | "ground-truth" => None,
        t => {
            let v: f64 = t.parse().with_context(|| format!("bad condition {t:?}"))?;
            if !TEMPERATURES.iter().any(|x| (x - v).abs() < 1e-9) {
                eprintln!("warning: temperature {v} is outside the standard set {TEMPERATURES:?}");
            }
            Some(v)
        }
    };
    Ok((t, PathBuf::from(p)))
}

fn report(
    stoi_scores: Option<&Path>,
    pesq_scores: Option<&Path>,
    ppl: &[String],
    turns: &[String],
    out: &Path,
    json: Option<&Path>,
) -> Result<()> {
    let mut codec = Vec::new();
    for (metric, p) in [("STOI", stoi_scores), ("PESQ", pesq_scores)] {
        if let Some(p) = p {
            codec.extend(CodecRow::from_scores(metric, &scores(p)?));
        }
    }
    let ppl_inputs = ppl
        .iter()
        .map(|s| {
            let (t, p) = condition(s)?;
            Ok((t, parse_nll_records(&read(&p)?)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let turn_inputs = turns
        .iter()
        .map(|s| {
            let (t, p) = condition(s)?;
            let text = read(&p)?;
            let last = text.lines().rev().find(|l| !l.trim().is_empty()).context("empty turn-stats file")?;
            let row: duplexkit_core::turntaking::TurnRow = serde_json::from_str(last)?;
            Ok((t, row.stats))
        })
        .collect::<Result<Vec<_>>>()?;
    let rep = make_report(codec, &ppl_inputs, &turn_inputs)?;
    write(out, rep.to_text())?;
    if let Some(j) = json {
        write(j, rep.to_json())?;
    }
    print!("{}", rep.to_text());
    Ok(())
}
