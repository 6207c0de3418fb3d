//! Black-box tests of the `conformer-lm` binary: exit codes, artifacts,
//! determinism, and the config-echo reproduction contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_conformer-lm"))
}

fn corpus(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join("corpus.txt");
    std::fs::write(&path, conformer::data::synthetic::synthetic_text8(n, seed)).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// Tiny but complete training run shared by several tests.
fn tiny_train(data: &Path, out: &Path, seed: u64) -> Output {
    run(&[
        "train",
        "--dataset", "text8",
        "--data", data.to_str().unwrap(),
        "--layers", "2",
        "--heads", "2",
        "--embed", "16",
        "--context", "32",
        "--conv", "small",
        "--epochs", "2",
        "--batch", "8",
        "--lr-schedule", "0:1e-3",
        "--seed", &seed.to_string(),
        "--deterministic",
        "--out", out.to_str().unwrap(),
    ])
}

#[test]
fn missing_data_flag_is_usage_error() {
    let out = run(&["train", "--dataset", "text8", "--out", "/tmp/nowhere"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("--data"));
}

#[test]
fn indivisible_heads_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 1000, 1);
    let out = run(&[
        "train",
        "--dataset", "text8",
        "--data", data.to_str().unwrap(),
        "--embed", "100",
        "--heads", "8",
        "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("not divisible"), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 2);
}

#[test]
fn train_writes_artifacts_and_is_reproducible_from_echo() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 12_000, 3);
    let out1 = dir.path().join("run1");
    let res = tiny_train(&data, &out1, 5);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for artifact in ["metrics.csv", "runspec.txt", "best.cflm", "final.cflm"] {
        assert!(out1.join(artifact).exists(), "missing {artifact}");
    }

    // Re-run purely from the echoed runspec, overriding only --out.
    let out2 = dir.path().join("run2");
    let res2 = run(&[
        "train",
        "--config", out1.join("runspec.txt").to_str().unwrap(),
        "--out", out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&res2), 0, "{}", stderr(&res2));
    let m1 = std::fs::read(out1.join("metrics.csv")).unwrap();
    let m2 = std::fs::read(out2.join("metrics.csv")).unwrap();
    assert_eq!(m1, m2, "echo-reproduced run differs");
}

#[test]
fn eval_is_deterministic_and_appends_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 12_000, 7);
    let out = dir.path().join("run");
    assert_eq!(code(&tiny_train(&data, &out, 9)), 0);
    let ck = out.join("final.cflm");
    let args = [
        "eval",
        "--checkpoint", ck.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--split", "test",
    ];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b), "eval rows differ across runs");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().filter(|l| l.contains(",test,")).count() >= 2);
}

#[test]
fn eval_rejects_corrupt_and_truncated_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 2_000, 11);
    let bad = dir.path().join("bad.cflm");
    std::fs::write(&bad, b"NOPE").unwrap();
    let out = run(&[
        "eval",
        "--checkpoint", bad.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("magic"), "{}", stderr(&out));

    let run_dir = dir.path().join("run");
    assert_eq!(code(&tiny_train(&data, &run_dir, 1)), 0);
    let ck = run_dir.join("final.cflm");
    let bytes = std::fs::read(&ck).unwrap();
    let truncated = dir.path().join("trunc.cflm");
    std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint", truncated.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("unexpected end of tensor data"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn generate_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 12_000, 13);
    let out = dir.path().join("run");
    assert_eq!(code(&tiny_train(&data, &out, 2)), 0);
    let ck = out.join("final.cflm");
    let ck = ck.to_str().unwrap();

    // --steps 0 echoes the prompt.
    let echo = run(&["generate", "--checkpoint", ck, "--prompt", "hello there", "--steps", "0"]);
    assert_eq!(code(&echo), 0);
    assert_eq!(stdout(&echo).trim_end(), "hello there");

    // Greedy decoding ignores the seed.
    let g1 = run(&["generate", "--checkpoint", ck, "--prompt", "abc", "--steps", "12", "--temperature", "0", "--seed", "1"]);
    let g2 = run(&["generate", "--checkpoint", ck, "--prompt", "abc", "--steps", "12", "--temperature", "0", "--seed", "2"]);
    assert_eq!(stdout(&g1), stdout(&g2));

    // Sampling is seed-deterministic.
    let s1 = run(&["generate", "--checkpoint", ck, "--prompt", "abc", "--steps", "12", "--temperature", "1", "--seed", "5"]);
    let s2 = run(&["generate", "--checkpoint", ck, "--prompt", "abc", "--steps", "12", "--temperature", "1", "--seed", "5"]);
    assert_eq!(stdout(&s1), stdout(&s2));

    // Out-of-vocabulary prompt fails with the offset.
    let bad = run(&["generate", "--checkpoint", ck, "--prompt", "Hello", "--steps", "1"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("offset 0"), "{}", stderr(&bad));
}

#[test]
fn eval_zero_output_head_reports_ln_vocab() {
    use conformer::model::{save_checkpoint, ConvBlockSpec, ModelConfig, ModelParams};
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 4_000, 23);
    let mut cfg = ModelConfig::new(2, 2, 16, 27).with_conv(ConvBlockSpec::small(16));
    cfg.context = 32;
    cfg.seed = 1;
    let mut params: ModelParams<f32> = ModelParams::init(&cfg).unwrap();
    params.out_weight = tensorcore::Tensor::zeros(vec![16, 27]);
    params.out_bias = tensorcore::Tensor::zeros(vec![27]);
    let ck = dir.path().join("zero.cflm");
    save_checkpoint(&ck, &cfg, &params, 0).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint", ck.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--split", "test",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let row = stdout(&out).lines().nth(1).unwrap().to_string();
    let nll: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!((nll - 27f64.ln()).abs() < 1e-6, "nll {nll} vs ln 27");
}

#[test]
fn params_prints_breakdown_and_total() {
    let out = run(&["params", "--layers", "6", "--heads", "8", "--embed", "128", "--ff", "512", "--conv", "small"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("token_embedding"), "{text}");
    assert!(text.contains("1885723"), "{text}");
}

#[test]
fn ablate_conv_grid_desk_scale_tiny() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 16_000, 17);
    let out_dir = dir.path().join("ablate");
    let res = run(&[
        "ablate",
        "--grid", "conv",
        "--scale", "desk",
        "--data", data.to_str().unwrap(),
        "--limit", "8000",
        "--epochs", "1",
        "--layers", "3",
        "--embed", "16",
        "--heads", "2",
        "--batch", "8",
        "--context", "32",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let params: Vec<u64> = rows
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(params[0] < params[1] && params[1] < params[2], "{params:?}");
    // Reference values are printed beside the measurements.
    let table = stdout(&res);
    assert!(table.contains("paper NLL"), "{table}");
    assert!(table.contains("0.965"), "{table}");
    // Per-arm artifacts exist.
    assert!(out_dir.join("arm-small-seed0/metrics.csv").exists());
}

#[test]
fn ablate_rejects_unknown_grid() {
    let out = run(&["ablate", "--grid", "nonsense", "--data", "/tmp/x", "--out", "/tmp/y"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn out_env_variable_provides_default_root() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 8_000, 19);
    let res = bin()
        .args([
            "train",
            "--dataset", "text8",
            "--data", data.to_str().unwrap(),
            "--layers", "1",
            "--heads", "2",
            "--embed", "8",
            "--context", "16",
            "--epochs", "1",
            "--batch", "8",
            "--seed", "3",
        ])
        .env("CONFORMER_LM_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(dir.path().join("train-seed3/metrics.csv").exists());
}

#[test]
fn wav_input_with_wrong_bit_depth_names_field() {
    let dir = tempfile::tempdir().unwrap();
    // 16-bit mono 8 kHz WAV.
    let mut wav: Vec<u8> = Vec::new();
    wav.extend_from_slice(b"RIFF");
    wav.extend_from_slice(&(36u32 + 4).to_le_bytes());
    wav.extend_from_slice(b"WAVE");
    wav.extend_from_slice(b"fmt ");
    wav.extend_from_slice(&16u32.to_le_bytes());
    wav.extend_from_slice(&1u16.to_le_bytes());
    wav.extend_from_slice(&1u16.to_le_bytes());
    wav.extend_from_slice(&8000u32.to_le_bytes());
    wav.extend_from_slice(&16000u32.to_le_bytes());
    wav.extend_from_slice(&2u16.to_le_bytes());
    wav.extend_from_slice(&16u16.to_le_bytes());
    wav.extend_from_slice(b"data");
    wav.extend_from_slice(&4u32.to_le_bytes());
    wav.extend_from_slice(&[1, 2, 3, 4]);
    let path = dir.path().join("bad.wav");
    std::fs::write(&path, wav).unwrap();
    let out = run(&[
        "train",
        "--dataset", "audio",
        "--data", path.to_str().unwrap(),
        "--audio-format", "wav",
        "--layers", "1",
        "--heads", "2",
        "--embed", "8",
        "--epochs", "1",
        "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bits_per_sample"), "{}", stderr(&out));
}
