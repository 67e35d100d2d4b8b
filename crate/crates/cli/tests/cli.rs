//! Black-box tests of the `t2s` binary: exit codes, artifact layout,
//! config-file precedence, and byte-level determinism of repeated runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn t2s(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t2s"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn assert_ok(out: &Output) {
    assert_eq!(
        code(out),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Fresh scratch directory per test.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("t2s-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CORPUS: &[&str] = &[
    "corpus-gen",
    "--out",
    "corpus",
    "--languages",
    "qaa:high",
    "--high-pairs",
    "24",
    "--dev-pairs",
    "4",
    "--test-pairs",
    "4",
    "--vocab-size",
    "12",
    "--num-units",
    "16",
    "--seed",
    "7",
];

const TINY_MODEL: &[&str] = &[
    "--layers-enc",
    "1",
    "--layers-dec",
    "1",
    "--d-model",
    "32",
    "--d-ff",
    "64",
];

fn tiny_train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--corpus",
        "corpus",
        "--out",
        out,
        "--total-steps",
        "5",
        "--eval-every",
        "0",
        "--seed",
        "7",
    ];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(extra);
    t2s(dir, &args)
}

/// First source sentence of the train manifest.
fn sample_sentence(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("corpus/train.tsv")).unwrap();
    let line = text.lines().next().unwrap();
    line.split('\t').nth(2).unwrap().to_string()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        assert!(path.is_file(), "nested artifact at {}", path.display());
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.insert(name, std::fs::read(&path).unwrap());
    }
    files
}

#[test]
fn help_exits_zero_and_lists_every_subcommand() {
    let dir = scratch("help");
    let out = t2s(&dir, &["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in [
        "corpus-gen",
        "units-fit",
        "units-encode",
        "pretrain",
        "train",
        "translate",
        "synth",
        "evaluate",
    ] {
        assert!(text.contains(name), "--help does not mention {name}");
    }
    // every subcommand documents its flags
    let out = t2s(&dir, &["train", "--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--lr", "--total-steps", "--d-model", "--init", "--seed", "--config"] {
        assert!(text.contains(flag), "train --help does not mention {flag}");
    }
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = scratch("usage");
    let out = t2s(&dir, &["corpus-gen", "--out", "c", "--frobnicate", "9"]);
    assert_eq!(code(&out), 1);
    let out = t2s(&dir, &["no-such-command"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn corpus_gen_is_byte_deterministic() {
    let dir = scratch("corpus-det");
    let mut first = TINY_CORPUS.to_vec();
    first[2] = "a";
    assert_ok(&t2s(&dir, &first));
    let mut second = TINY_CORPUS.to_vec();
    second[2] = "b";
    assert_ok(&t2s(&dir, &second));
    let a = snapshot(&dir.join("a"));
    let b = snapshot(&dir.join("b"));
    assert_eq!(a.len(), b.len());
    for (name, bytes) in &a {
        assert_eq!(Some(bytes), b.get(name).map(|v| v), "{name} differs across runs");
    }
    assert!(a.contains_key("run.json"));
}

#[test]
fn pipeline_leaves_artifacts_at_every_stage() {
    let dir = scratch("pipeline");
    assert_ok(&t2s(&dir, TINY_CORPUS));
    assert_ok(&tiny_train(&dir, "run", &[]));
    for name in ["checkpoint.bin", "metrics.jsonl", "dev.jsonl", "run.json"] {
        assert!(dir.join("run").join(name).is_file(), "missing run/{name}");
    }

    std::fs::write(dir.join("input.txt"), sample_sentence(&dir) + "\n").unwrap();
    assert_ok(&t2s(
        &dir,
        &[
            "translate",
            "--checkpoint",
            "run/checkpoint.bin",
            "--corpus",
            "corpus",
            "--input",
            "input.txt",
            "--lang",
            "qaa",
            "--out-dir",
            "trans",
            "--beam-size",
            "2",
        ],
    ));
    let units = std::fs::read_to_string(dir.join("trans/units.txt")).unwrap();
    assert_eq!(units.trim().lines().count(), 1);
    assert!(dir.join("trans/run.json").is_file());

    assert_ok(&t2s(
        &dir,
        &["synth", "--units", "trans/units.txt", "--out-dir", "wavs"],
    ));
    assert!(dir.join("wavs/utt_00000.wav").is_file());
    assert!(dir.join("wavs/run.json").is_file());

    let out = t2s(
        &dir,
        &[
            "evaluate", "--corpus", "corpus", "--split", "test", "--out-dir", "eval", "--oracle",
        ],
    );
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("eval/report.json")).unwrap())
            .unwrap();
    // ground-truth units round-trip the audio path losslessly
    assert_eq!(report["overall"], 100.0);
    assert_eq!(report["languages"]["qaa"]["bleu"], 100.0);
    assert!(dir.join("eval/examples.tsv").is_file());
    assert!(dir.join("eval/run.json").is_file());
    let printed = String::from_utf8_lossy(&out.stdout);
    assert!(printed.contains("overall"));
}

#[test]
fn nbest_translation_emits_json_lines() {
    let dir = scratch("nbest");
    assert_ok(&t2s(&dir, TINY_CORPUS));
    assert_ok(&tiny_train(&dir, "run", &[]));
    std::fs::write(dir.join("input.txt"), sample_sentence(&dir) + "\n").unwrap();
    assert_ok(&t2s(
        &dir,
        &[
            "translate",
            "--checkpoint",
            "run/checkpoint.bin",
            "--corpus",
            "corpus",
            "--input",
            "input.txt",
            "--lang",
            "qaa",
            "--out-dir",
            "trans",
            "--beam-size",
            "3",
            "--nbest",
        ],
    ));
    let text = std::fs::read_to_string(dir.join("trans/nbest.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let nbest = record["nbest"].as_array().unwrap();
    assert!(!nbest.is_empty() && nbest.len() <= 3);
    assert!(nbest[0]["score"].is_f64());
}

#[test]
fn config_file_yields_to_explicit_flags() {
    let dir = scratch("config");
    assert_ok(&t2s(&dir, TINY_CORPUS));
    std::fs::write(
        dir.join("t.conf"),
        "total_steps = 9\nlr = 0.5\nseed = 3\n# comment\n",
    )
    .unwrap();
    let mut args = vec![
        "train",
        "--corpus",
        "corpus",
        "--out",
        "run",
        "--eval-every",
        "0",
        "--config",
        "t.conf",
        "--total-steps",
        "2",
    ];
    args.extend_from_slice(TINY_MODEL);
    assert_ok(&t2s(&dir, &args));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/run.json")).unwrap()).unwrap();
    // flag beats file, file beats default
    assert_eq!(run["config"]["training"]["total_steps"], 2);
    assert_eq!(run["config"]["training"]["lr"], 0.5);
    assert_eq!(run["seed"], 3);
}

#[test]
fn unknown_config_keys_fail_before_any_work() {
    let dir = scratch("badkey");
    assert_ok(&t2s(&dir, TINY_CORPUS));
    std::fs::write(dir.join("bad.conf"), "totle_steps = 3\n").unwrap();
    let out = tiny_train(&dir, "run", &["--config", "bad.conf"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("totle_steps"));
    assert!(!dir.join("run").exists(), "failed run left artifacts");
}

#[test]
fn evaluate_rejects_checkpoints_from_another_vocabulary() {
    let dir = scratch("mismatch");
    assert_ok(&t2s(&dir, TINY_CORPUS));
    assert_ok(&tiny_train(&dir, "run", &[]));
    let other = [
        "corpus-gen",
        "--out",
        "corpus2",
        "--languages",
        "qaa:high",
        "--high-pairs",
        "24",
        "--dev-pairs",
        "4",
        "--test-pairs",
        "4",
        "--vocab-size",
        "14",
        "--num-units",
        "16",
        "--seed",
        "9",
    ];
    assert_ok(&t2s(&dir, &other));
    let out = t2s(
        &dir,
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint.bin",
            "--corpus",
            "corpus2",
            "--out-dir",
            "eval",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab hash mismatch"));
    assert!(!dir.join("eval").exists(), "mismatch still wrote a report");
}

#[test]
fn model_flags_conflict_with_checkpoint_init() {
    let dir = scratch("init-conflict");
    assert_ok(&t2s(&dir, TINY_CORPUS));
    assert_ok(&tiny_train(&dir, "base", &[]));
    let out = tiny_train(&dir, "cont", &["--init", "base/checkpoint.bin"]);
    assert_eq!(code(&out), 2, "TINY_MODEL flags must clash with --init");
    // without shape flags the checkpoint architecture carries over
    let out = t2s(
        &dir,
        &[
            "train",
            "--corpus",
            "corpus",
            "--out",
            "cont",
            "--init",
            "base/checkpoint.bin",
            "--total-steps",
            "2",
            "--eval-every",
            "0",
        ],
    );
    assert_ok(&out);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("cont/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["model"]["d_model"], 32);
}

#[test]
fn synth_rejects_uncollapsed_unit_lines() {
    let dir = scratch("uncollapsed");
    std::fs::write(dir.join("units.txt"), "4 4 5\n").unwrap();
    let out = t2s(
        &dir,
        &["synth", "--units", "units.txt", "--out-dir", "wavs"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not collapsed"));
}

#[test]
fn units_fit_and_encode_run_on_synthetic_audio() {
    let dir = scratch("units");
    assert_ok(&t2s(
        &dir,
        &[
            "units-fit",
            "--synthetic",
            "12",
            "--k",
            "8",
            "--out",
            "cb",
            "--seed",
            "3",
        ],
    ));
    assert!(dir.join("cb/codebook.bin").is_file());
    assert!(dir.join("cb/run.json").is_file());
    assert_ok(&t2s(
        &dir,
        &[
            "units-encode",
            "--codebook",
            "cb/codebook.bin",
            "--synthetic",
            "5",
            "--out",
            "enc",
            "--seed",
            "3",
        ],
    ));
    let manifest = std::fs::read_to_string(dir.join("enc/units.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    for line in manifest.lines() {
        let (name, units) = line.split_once('\t').unwrap();
        assert!(name.starts_with("synthetic-"));
        let ids: Vec<u32> = units
            .split_whitespace()
            .map(|u| u.parse().unwrap())
            .collect();
        assert!(!ids.is_empty());
        assert!(ids.iter().all(|&u| u < 8), "unit id out of codebook range");
        assert!(ids.windows(2).all(|w| w[0] != w[1]), "uncollapsed output");
    }
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let dir = scratch("diverge");
    assert_ok(&t2s(&dir, TINY_CORPUS));
    let out = tiny_train(
        &dir,
        "run",
        &["--lr", "1e30", "--clip-norm", "0", "--warmup-steps", "0"],
    );
    assert_eq!(code(&out), 3, "overflowing step must exit 3");
}

#[test]
fn wav_and_checkpoint_artifacts_are_deterministic() {
    let dir = scratch("artifact-det");
    assert_ok(&t2s(&dir, TINY_CORPUS));
    assert_ok(&tiny_train(&dir, "runA", &[]));
    assert_ok(&tiny_train(&dir, "runB", &[]));
    let a = std::fs::read(dir.join("runA/checkpoint.bin")).unwrap();
    let b = std::fs::read(dir.join("runB/checkpoint.bin")).unwrap();
    assert_eq!(a, b, "same seed produced different checkpoints");

    std::fs::write(dir.join("units.txt"), "3 1 4 1 5\n").unwrap();
    assert_ok(&t2s(&dir, &["synth", "--units", "units.txt", "--out-dir", "wavA"]));
    assert_ok(&t2s(&dir, &["synth", "--units", "units.txt", "--out-dir", "wavB"]));
    assert_eq!(
        std::fs::read(dir.join("wavA/utt_00000.wav")).unwrap(),
        std::fs::read(dir.join("wavB/utt_00000.wav")).unwrap()
    );
}
