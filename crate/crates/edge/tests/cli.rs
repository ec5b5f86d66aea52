//! End-to-end tests of the command-line interface, driving the real binary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_edge")
}

fn toy_records(n: usize) -> Vec<serde_json::Value> {
    (0..n)
        .map(|i| {
            serde_json::json!({
                "id": format!("toy{i}"),
                "passage": format!("ctx{i} holds item{i} near mark{} .", i % 4),
                "question": format!("which ctx{i}"),
                "answer": format!("mark{}", i % 4),
                "distractors": [format!("item{i} here")],
            })
        })
        .collect()
}

fn write_jsonl(path: &Path, records: &[serde_json::Value]) {
    let mut f = std::fs::File::create(path).unwrap();
    for r in records {
        writeln!(f, "{r}").unwrap();
    }
}

struct TrainedFixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    checkpoint: PathBuf,
    out_dir: PathBuf,
}

/// One small trained run shared by the generate/evaluate/inspect tests.
fn fixture() -> &'static TrainedFixture {
    static FIXTURE: OnceLock<TrainedFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("toy.jsonl");
        write_jsonl(&data, &toy_records(8));
        let config = dir.path().join("run.toml");
        std::fs::write(
            &config,
            format!(
                r#"
[data]
train = {data:?}
valid = {data:?}

[vocab]
min_freq = 1

[model]
dim = 16

[train]
batch_size = 2
max_epochs = 40
patience = 100
seed = 11

[inference]
max_len = 6
"#
            ),
        )
        .unwrap();
        let out_dir = dir.path().join("run");
        let output = Command::new(bin())
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "fixture training failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        TrainedFixture {
            data,
            checkpoint: out_dir.join("model.ckpt"),
            out_dir,
            _dir: dir,
        }
    })
}

fn run_ok(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(bin());
    for a in args {
        cmd.arg(a.as_ref());
    }
    let output = cmd.output().unwrap();
    assert!(
        output.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

#[test]
fn train_writes_checkpoint_log_vocab_and_manifest() {
    let fx = fixture();
    assert!(fx.checkpoint.exists());
    let log = std::fs::read_to_string(fx.out_dir.join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "train_loss", "val_ppl", "seconds"] {
            assert!(v.get(key).is_some(), "log line missing {key}");
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let vocab = std::fs::read_to_string(fx.out_dir.join("vocab.txt")).unwrap();
    assert!(vocab.starts_with("edge-vocab-v1"));
}

#[test]
fn unknown_config_key_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[train]\nlerning_rate = 0.1\n").unwrap();
    let output = Command::new(bin())
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("lerning_rate"), "stderr: {stderr}");
}

#[test]
fn missing_train_data_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("empty.toml");
    std::fs::write(&config, "[model]\ndim = 16\n").unwrap();
    let output = Command::new(bin())
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn generate_emits_one_record_per_question() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen.jsonl");
    run_ok(&[
        &"generate",
        &"--checkpoint",
        &fx.checkpoint,
        &"--input",
        &fx.data,
        &"--out",
        &out,
        &"--beam",
        &"5",
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let records: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 8);
    for r in &records {
        for key in ["example_id", "d1", "d2", "d3", "beam_scores", "fallback"] {
            assert!(r.get(key).is_some(), "record missing {key}");
        }
        assert_eq!(r["beam_scores"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn generate_with_beam_one_matches_greedy_decoding() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen1.jsonl");
    run_ok(&[
        &"generate",
        &"--checkpoint",
        &fx.checkpoint,
        &"--input",
        &fx.data,
        &"--out",
        &out,
        &"--beam",
        &"1",
    ]);
    let ckpt = edge::checkpoint::Checkpoint::load(&fx.checkpoint).unwrap();
    let (model, vocab) = ckpt.restore().unwrap();
    let examples = edge::corpus::load_corpus(
        &fx.data,
        &ckpt.config.caps,
        ckpt.config.lowercase,
        edge::corpus::Split::Test,
    )
    .unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    for (line, ex) in text.lines().zip(&examples) {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        let hyp = edge::inference::greedy_decode(
            &model,
            &vocab.encode(&ex.passage_tokens),
            &vocab.encode(&ex.question_tokens),
            &vocab.encode(&ex.answer_tokens),
            ckpt.config.caps.distractor,
        )
        .unwrap();
        let surface = vocab.decode(&hyp.token_ids, true).unwrap().join(" ");
        assert_eq!(record["d1"].as_str().unwrap(), surface);
    }
}

#[test]
fn generate_is_deterministic_across_worker_counts() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let serial = dir.path().join("serial.jsonl");
    let parallel = dir.path().join("parallel.jsonl");
    for (out, workers) in [(&serial, "1"), (&parallel, "3")] {
        run_ok(&[
            &"generate",
            &"--checkpoint",
            &fx.checkpoint,
            &"--input",
            &fx.data,
            &"--out",
            out,
            &"--beam",
            &"4",
            &"--workers",
            &workers,
        ]);
    }
    assert_eq!(
        std::fs::read(&serial).unwrap(),
        std::fs::read(&parallel).unwrap()
    );
}

#[test]
fn generate_with_missing_checkpoint_exits_1() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(bin())
        .args(["generate", "--checkpoint"])
        .arg(dir.path().join("nope.ckpt"))
        .arg("--input")
        .arg(&fx.data)
        .arg("--out")
        .arg(dir.path().join("gen.jsonl"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn evaluate_perfect_generation_scores_100_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    write_jsonl(&gold, &toy_records(4));
    // echo the gold distractor into all three positions
    let generated = dir.path().join("gen.jsonl");
    let records: Vec<serde_json::Value> = (0..4)
        .map(|i| {
            let d = format!("item{i} here");
            serde_json::json!({
                "example_id": format!("toy{i}"),
                "d1": d, "d2": d, "d3": d,
                "beam_scores": [0.0, 0.0, 0.0],
                "fallback": false,
            })
        })
        .collect();
    write_jsonl(&generated, &records);
    let report_path = dir.path().join("report.json");
    let output = run_ok(&[
        &"evaluate",
        &"--generated",
        &generated,
        &"--gold",
        &gold,
        &"--out",
        &report_path,
    ]);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("1st distractor"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["count"], 4);
    let positions = report["positions"].as_array().unwrap();
    assert_eq!(positions.len(), 3);
    for pos in positions {
        for (_, score) in pos.as_object().unwrap() {
            assert!((score.as_f64().unwrap() - 100.0).abs() < 1e-9);
        }
    }
}

#[test]
fn evaluate_mismatched_ids_exits_1_with_the_diff() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    write_jsonl(&gold, &toy_records(2));
    let generated = dir.path().join("gen.jsonl");
    write_jsonl(
        &generated,
        &[serde_json::json!({
            "example_id": "stranger",
            "d1": "x", "d2": "y", "d3": "z",
            "beam_scores": [0.0, 0.0, 0.0],
            "fallback": false,
        })],
    );
    let output = Command::new(bin())
        .args(["evaluate", "--generated"])
        .arg(&generated)
        .arg("--gold")
        .arg(&gold)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("stranger"), "stderr: {stderr}");
    assert!(stderr.contains("toy0"), "stderr: {stderr}");
}

#[test]
fn evaluate_with_corpus_bleu_flag_adds_the_pooled_score() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    write_jsonl(&gold, &toy_records(2));
    let generated = dir.path().join("gen.jsonl");
    let records: Vec<serde_json::Value> = (0..2)
        .map(|i| {
            serde_json::json!({
                "example_id": format!("toy{i}"),
                "d1": format!("item{i} here"), "d2": "x", "d3": "y",
                "beam_scores": [0.0, 0.0, 0.0],
                "fallback": false,
            })
        })
        .collect();
    write_jsonl(&generated, &records);
    let report_path = dir.path().join("report.json");
    let output = run_ok(&[
        &"evaluate",
        &"--generated",
        &generated,
        &"--gold",
        &gold,
        &"--out",
        &report_path,
        &"--corpus-bleu",
    ]);
    assert!(String::from_utf8_lossy(&output.stdout).contains("corpus BLEU-4"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["corpus_bleu4_first"].is_number());
}

#[test]
fn inspect_emits_gate_values_and_attention_averages() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("inspect.json");
    run_ok(&[
        &"inspect",
        &"--checkpoint",
        &fx.checkpoint,
        &"--input",
        &fx.data,
        &"--example-id",
        &"toy3",
        &"--beam",
        &"4",
        &"--out",
        &out,
    ]);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(record["example_id"], "toy3");
    let passage_len = record["passage_tokens"].as_array().unwrap().len();
    assert_eq!(
        record["gate_values_passage"].as_array().unwrap().len(),
        passage_len
    );
    let distractors = record["distractors"].as_array().unwrap();
    assert_eq!(distractors.len(), 3);
    for d in distractors {
        for step in d["attention_per_step"].as_array().unwrap() {
            let row: Vec<f64> = step
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            assert_eq!(row.len(), passage_len);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    // sentence averages recompute from the token means
    let sentences = record["sentences"].as_array().unwrap();
    let d0 = &distractors[0];
    let token_mean: Vec<f64> = d0["attention_token_mean"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let by_sentence = d0["attention_by_sentence"].as_array().unwrap();
    assert_eq!(by_sentence.len(), sentences.len());
    let (s, e) = (
        sentences[0]["start"].as_u64().unwrap() as usize,
        sentences[0]["end"].as_u64().unwrap() as usize,
    );
    let expect = token_mean[s..e].iter().sum::<f64>() / (e - s) as f64;
    assert!((by_sentence[0].as_f64().unwrap() - expect).abs() < 1e-9);
}

#[test]
fn inspect_unknown_id_exits_1() {
    let fx = fixture();
    let output = Command::new(bin())
        .args(["inspect", "--checkpoint"])
        .arg(&fx.checkpoint)
        .arg("--input")
        .arg(&fx.data)
        .args(["--example-id", "missing"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("missing"));
}

#[test]
fn stats_reports_counts_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("records.jsonl");
    write_jsonl(&data, &toy_records(3));
    let out = dir.path().join("stats.json");
    run_ok(&[
        &"stats",
        &"--input",
        &data,
        &"--split",
        &"test",
        &"--out",
        &out,
    ]);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(stats["counts"]["test"], 3);
    let total: u64 = stats["passage_lengths"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 3);
}

#[test]
fn stats_requires_exactly_one_source() {
    let output = Command::new(bin()).arg("stats").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}
