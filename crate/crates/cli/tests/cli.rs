use std::path::Path;
use std::process::{Command, Output};

use duplexkit_core::audio::AudioBuffer;
use duplexkit_core::synth::scripted_channel;
use duplexkit_core::wav::write_wav_pcm16;
use serde_json::{json, Value};

fn duplexkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duplexkit")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(duplexkit(&[]).status.code(), Some(1));
    assert_eq!(duplexkit(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(duplexkit(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_exits_two() {
    let o = duplexkit(&["ppl", "--nll", "/definitely/not/here.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not/here.jsonl"));
}

#[test]
fn bad_override_exits_one() {
    let o = duplexkit(&["--set", "vad.no_such_knob=3", "select-ckpt", "--log", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn turnstats_on_scripted_conversation() {
    let dir = tempfile::tempdir().unwrap();
    let sr = 16_000;
    let a = scripted_channel(60.0, sr, &[(0.0, 30.0), (45.0, 48.0)], 130.0, 1);
    let b = scripted_channel(60.0, sr, &[(32.0, 60.0)], 210.0, 2);
    let wav = dir.path().join("conv1.wav");
    write_wav_pcm16(&wav, &AudioBuffer::stereo(sr, a, b).unwrap()).unwrap();
    let (table, rows) = (dir.path().join("turns.txt"), dir.path().join("turns.jsonl"));
    let o = duplexkit(&["turnstats", "--audio", p(&wav), "--out", p(&table), "--json", p(&rows)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.lines().any(|l| l.starts_with("conv1")));
    assert!(text.lines().any(|l| l.starts_with("corpus")));
    let last: Value = serde_json::from_str(std::fs::read_to_string(&rows).unwrap().lines().last().unwrap()).unwrap();
    assert_eq!(last["label"], "corpus");
    assert!((last["stats"]["gap_s_per_min"].as_f64().unwrap() - 2.0).abs() <= 0.05);
    assert!((last["stats"]["overlap_s_per_min"].as_f64().unwrap() - 3.0).abs() <= 0.1);

    // the same rows feed the report
    let nll = dir.path().join("nll.jsonl");
    let rec = json!({"segment_id": "conv1/0", "n_tokens": 10, "nll_sum": 10.0 * 32000f64.ln()});
    std::fs::write(&nll, rec.to_string()).unwrap();
    let report = dir.path().join("report.txt");
    let turns_arg = format!("gt={}", p(&rows));
    let ppl_arg = format!("0.9={}", p(&nll));
    let o = duplexkit(&["report", "--ppl", &ppl_arg, "--turns", &turns_arg, "--out", p(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("ground truth") && text.contains("0.9"), "{text}");
}

#[test]
fn select_ckpt_replays_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("metrics.jsonl");
    let rows = [(4010, 1.481, 1.907), (4812, 1.474, 1.896), (5614, 1.479, 1.899)]
        .map(|(s, t, a)| json!({"step": s, "text_val_loss": t, "audio_val_loss": a}).to_string());
    std::fs::write(&log, rows.join("\n")).unwrap();
    let o = duplexkit(&["select-ckpt", "--log", p(&log)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "step 4812 total 3.370");
}

#[test]
fn tokenizer_and_frames_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "नमस्ते आप कैसे हैं\nमैं ठीक हूँ धन्यवाद\nआप कैसे हैं\n".repeat(20)).unwrap();
    let vocab = dir.path().join("vocab.txt");
    let o = duplexkit(&["tok-train", "--corpus", p(&corpus), "--out", p(&vocab), "--vocab-size", "300"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = duplexkit(&["tok-encode", "--vocab", p(&vocab), "--text", "आप कैसे हैं"]);
    assert!(o.status.success());
    let ids = stdout(&o);
    let o = duplexkit(&["tok-encode", "--vocab", p(&vocab), "--decode", "--text", ids.trim()]);
    assert_eq!(stdout(&o).trim_end_matches('\n'), "आप कैसे हैं");

    let align = dir.path().join("conv.align");
    let words = [("SYSTEM", "नमस्ते", 0.5), ("USER", "आप", 1.0), ("USER", "कैसे", 1.4)]
        .map(|(c, w, t)| json!({"channel": c, "text": w, "start_s": t, "end_s": t + 0.3}).to_string());
    std::fs::write(&align, words.join("\n")).unwrap();
    let frames = dir.path().join("conv.dpxf");
    let o = duplexkit(&[
        "--set", "frame.chunk_steps=32", "frames", "--alignment", p(&align), "--vocab", p(&vocab),
        "--duration-s", "5.2", "--out", p(&frames),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("2 chunks"), "{}", stdout(&o));
    let chunks = duplexkit_core::framebuilder::read_chunks(std::fs::read(&frames).unwrap().as_slice()).unwrap();
    assert_eq!(chunks.len(), 2);
    assert_eq!(chunks[0].tokens.dim(), (17, 32));
}
