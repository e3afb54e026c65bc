use std::path::Path;
use std::process::Command;

use ssmstyler::dsp::{read_wav, write_wav, StftConfig, Waveform};
use ssmstyler::model::Model;
use ssmstyler_cli::run_from;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["ssmstyler"];
    argv.extend_from_slice(args);
    let code = run_from(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["nope"]).0, 2);
    assert_eq!(run(&["train"]).0, 2, "missing --out");
    assert_eq!(run(&["train", "--out", "x", "--variant", "hybrid"]).0, 2);
    assert_eq!(run(&["train", "--out", "x", "--lambda", "1,2"]).0, 2);
    assert_eq!(run(&["gradcheck", "--epsilon", "1e-2"]).0, 2);
    assert_eq!(run(&["bench", "--seq-lens", "4096,512", "--repeats", "3"]).0, 2);
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("gradcheck"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&[
        "transfer",
        "--ckpt",
        p(&dir.path().join("absent.ckpt")),
        "--in",
        p(&dir.path().join("absent.wav")),
        "--prompt",
        "angry",
        "--out",
        p(&dir.path().join("o.wav")),
    ]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"));
}

#[test]
fn zero_epochs_reports_no_change() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let (code, out, _) = run(&["train", "--epochs", "0", "--n-per-style", "1", "--out", p(&ckpt)]);
    assert_eq!(code, 0);
    assert!(!out.contains("step="));
    let summary = out.lines().last().unwrap();
    assert!(summary.ends_with("ratio=1.000000"), "{summary}");
    assert!(Model::load(&ckpt).is_ok());
}

#[test]
fn train_logs_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let (code, out, _) = run(&["train", "--epochs", "2", "--n-per-style", "1", "--seed", "3", "--out", p(&ckpt)]);
    assert_eq!(code, 0);
    let steps: Vec<&str> = out.lines().filter(|l| l.starts_with("step=")).collect();
    assert_eq!(steps.len(), 8);
    let fields: Vec<&str> = steps[7].split(' ').map(|f| f.split('=').next().unwrap()).collect();
    assert_eq!(fields, ["step", "content", "style", "smooth", "total"]);
}

#[test]
fn identity_checkpoint_transfers_audio_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("id.ckpt");
    Model::identity(StftConfig::new(64, 16).unwrap()).unwrap().save(&ckpt).unwrap();
    let input: Vec<f64> = (0..1600).map(|i| 0.5 * (i as f64 * 0.05).sin()).collect();
    let wav_in = dir.path().join("in.wav");
    write_wav(&wav_in, &Waveform::new(input, 8000).unwrap()).unwrap();
    let wav_out = dir.path().join("out.wav");
    let (code, out, err) = run(&[
        "transfer", "--ckpt", p(&ckpt), "--in", p(&wav_in), "--prompt", "soothing", "--out", p(&wav_out),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("duration_s=0.200000"), "{out}");
    let a = read_wav(&wav_in).unwrap();
    let b = read_wav(&wav_out).unwrap();
    assert_eq!(b.sample_rate_hz, 8000);
    assert_eq!(a.samples, b.samples);

    let (code, _, _) = run(&[
        "transfer", "--ckpt", p(&ckpt), "--in", p(&wav_in), "--prompt", "", "--out", p(&wav_out),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn gradcheck_reports_every_prefix() {
    let (code, out, _) = run(&["gradcheck", "--samples", "120"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.lines().filter(|l| l.starts_with("prefix=")).count() >= 9);
    assert!(out.lines().last().unwrap().starts_with("max_rel_error="));
}

#[test]
fn bench_json_lines_parse() {
    let (code, out, err) = run(&["bench", "--seq-lens", "32,64", "--repeats", "3", "--json"]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        assert!(r["wall_time_s"].as_f64().unwrap() > 0.0);
        assert!(r["param_count"].as_u64().unwrap() > 0);
        assert_eq!(r["parallel"], false);
    }
}

#[test]
fn ablate_prints_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for v in ["pure_transformer", "pure_ssm", "transformer_ssm"] {
        let path = dir.path().join(format!("{v}.ckpt"));
        let (code, _, _) = run(&["train", "--epochs", "0", "--n-per-style", "1", "--variant", v, "--out", p(&path)]);
        assert_eq!(code, 0);
        paths.push(path);
    }
    let (code, out, err) = run(&[
        "ablate",
        "--pure-transformer",
        p(&paths[0]),
        "--pure-ssm",
        p(&paths[1]),
        "--transformer-ssm",
        p(&paths[2]),
        "--json",
    ]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["variant"], "transformer_ssm");
    assert_eq!(rows[0]["examples"], 32);
}

#[test]
fn gen_corpus_writes_wavs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = run(&["gen-corpus", "--seed", "4", "--n-per-style", "2", "--out-dir", p(dir.path())]);
    assert_eq!(code, 0);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let entries: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), 8);
    for e in &entries {
        let w = read_wav(dir.path().join(e["file"].as_str().unwrap())).unwrap();
        assert_eq!(w.sample_rate_hz, 8000);
    }
}

#[test]
fn binary_checkpoints_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let train = |name: &str| {
        let path = dir.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_ssmstyler"))
            .args(["train", "--epochs", "1", "--n-per-style", "1", "--seed", "7", "--out"])
            .arg(&path)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        std::fs::read(path).unwrap()
    };
    assert_eq!(train("a.ckpt"), train("b.ckpt"));
}
