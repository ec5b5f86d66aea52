//! Command-line entry points: train, generate, evaluate, inspect, stats.
//!
//! Exit codes: 0 on success, 1 for runtime or data errors, 2 for
//! configuration errors.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointConfig};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{corpus_stats, expand_pairs, load_corpus, DistractorExample, Split};
use crate::inference::{generate_for_example, BeamConfig, GeneratedRecord};
use crate::inspect::inspect_example;
use crate::metrics::{corpus_bleu, evaluate, render_table};
use crate::model::Model;
use crate::text::{build_vocabulary, load_embeddings};
use crate::trainer::train;

#[derive(Debug)]
pub enum CliError {
    /// Configuration problems exit with code 2.
    Config(String),
    /// Data or runtime problems exit with code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    crate::corpus::CorpusError,
    crate::text::TextError,
    crate::model::ModelError,
    crate::trainer::TrainError,
    crate::checkpoint::CheckpointError,
    crate::inference::InferenceError,
    crate::metrics::MetricsError,
    std::io::Error
);

#[derive(Parser)]
#[command(name = "edge", version, about = "Distractor generation for multiple-choice reading comprehension")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the checkpoint with the best validation perplexity.
    Train(TrainArgs),
    /// Generate three diverse distractors per question from a checkpoint.
    Generate(GenerateArgs),
    /// Score generated distractors against gold ones.
    Evaluate(EvaluateArgs),
    /// Emit attention and gate values for one example.
    Inspect(InspectArgs),
    /// Report per-split counts and length histograms.
    Stats(StatsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the checkpoint, log, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Override the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Line-delimited record file to generate distractors for.
    #[arg(long)]
    input: PathBuf,
    /// Output path for the generated records (line-delimited JSON).
    #[arg(long)]
    out: PathBuf,
    /// Beam width; defaults to the width stored in the checkpoint.
    #[arg(long)]
    beam: Option<usize>,
    /// Maximum decoded length; defaults to the distractor length cap.
    #[arg(long)]
    max_len: Option<usize>,
    /// Rank beam results by length-averaged score.
    #[arg(long)]
    length_normalize: bool,
    /// Worker threads for decoding (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Generated records (output of the generate command).
    #[arg(long)]
    generated: PathBuf,
    /// Gold record file in the corpus format.
    #[arg(long)]
    gold: PathBuf,
    /// Write the report as JSON here (the table always prints to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also compute corpus-level (pooled) BLEU-4 over first distractors.
    #[arg(long)]
    corpus_bleu: bool,
    /// Worker threads for scoring (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Record id to inspect.
    #[arg(long)]
    example_id: String,
    /// Beam width; defaults to the width stored in the checkpoint.
    #[arg(long)]
    beam: Option<usize>,
    /// Write the inspection record here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Read the split paths from a run config.
    #[arg(long, conflicts_with = "input")]
    config: Option<PathBuf>,
    /// Or compute stats over a single record file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Split label for --input.
    #[arg(long, default_value = "train")]
    split: String,
    /// Write the report as JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Stats(args) => cmd_stats(args),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    package: &'a str,
    version: &'a str,
    command: &'a str,
    config_path: String,
    config_sha256: String,
    inputs: Vec<String>,
    seed: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn require_path<'a>(
    path: &'a Option<PathBuf>,
    what: &str,
) -> Result<&'a PathBuf, CliError> {
    path.as_ref()
        .ok_or_else(|| CliError::Config(format!("config is missing the {what} data path")))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let train_path = require_path(&cfg.data.train, "train")?.clone();
    let valid_path = require_path(&cfg.data.valid, "valid")?.clone();

    let train_examples = load_corpus(&train_path, &cfg.limits, cfg.vocab.lowercase, Split::Train)?;
    let valid_examples =
        load_corpus(&valid_path, &cfg.limits, cfg.vocab.lowercase, Split::Validation)?;
    if train_examples.is_empty() {
        return Err(CliError::Runtime(format!(
            "no records in {}",
            train_path.display()
        )));
    }
    if valid_examples.is_empty() {
        return Err(CliError::Runtime(format!(
            "no records in {}",
            valid_path.display()
        )));
    }

    let vocab = build_vocabulary(&train_examples, cfg.vocab.min_freq, cfg.vocab.max_size);
    let embeddings = load_embeddings(
        &vocab,
        &cfg.embeddings.parsed_source(),
        cfg.model.dim,
        cfg.train.seed,
        cfg.embeddings.trainable,
    )?;
    let mut model = Model::new(embeddings, cfg.model, cfg.train.seed)?;
    let train_pairs = expand_pairs(&train_examples, &vocab);
    let valid_pairs = expand_pairs(&valid_examples, &vocab);

    std::fs::create_dir_all(&args.out)?;
    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: "train",
        config_path: args.config.display().to_string(),
        config_sha256: sha256_hex(&std::fs::read(&args.config)?),
        inputs: vec![
            train_path.display().to_string(),
            valid_path.display().to_string(),
        ],
        seed: cfg.train.seed,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    let mut vocab_file = BufWriter::new(File::create(args.out.join("vocab.txt"))?);
    vocab.write_text(&mut vocab_file)?;
    vocab_file.flush()?;

    let ckpt_config = CheckpointConfig {
        model: cfg.model,
        caps: cfg.limits,
        lowercase: cfg.vocab.lowercase,
        train: cfg.train.clone(),
        inference: cfg.inference,
    };
    let mut log_file = BufWriter::new(File::create(args.out.join("train_log.jsonl"))?);
    let outcome = train(
        &mut model,
        &vocab,
        &ckpt_config,
        &train_pairs,
        &valid_pairs,
        Some(&mut log_file),
    )?;
    log_file.flush()?;

    let ckpt_path = args.out.join("model.ckpt");
    outcome.best.save(&ckpt_path)?;
    println!(
        "trained {} epochs; best validation perplexity {:.4} at epoch {}; checkpoint: {}",
        outcome.epochs.len(),
        outcome.best.val_ppl,
        outcome.best.epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn with_worker_pool<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> T + Send,
) -> Result<T, CliError> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (model, vocab) = ckpt.restore()?;
    let examples = load_corpus(
        &args.input,
        &ckpt.config.caps,
        ckpt.config.lowercase,
        Split::Test,
    )?;
    let beam = BeamConfig {
        width: args.beam.unwrap_or(ckpt.config.train.beam_size),
        max_len: args.max_len.unwrap_or(ckpt.config.inference.max_len),
        length_normalize: args.length_normalize || ckpt.config.inference.length_normalize,
    };
    let records: Result<Vec<GeneratedRecord>, _> = with_worker_pool(args.workers, || {
        examples
            .par_iter()
            .map(|ex| {
                generate_for_example(
                    &model,
                    &vocab,
                    &ex.example_id,
                    &vocab.encode(&ex.passage_tokens),
                    &vocab.encode(&ex.question_tokens),
                    &vocab.encode(&ex.answer_tokens),
                    &beam,
                )
                .map(|out| out.record)
            })
            .collect()
    })?;
    let records = records?;

    let mut out = BufWriter::new(File::create(&args.out)?);
    for record in &records {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::other)?;
        writeln!(out)?;
    }
    out.flush()?;
    println!(
        "generated distractors for {} questions -> {}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn read_generated(path: &Path) -> Result<Vec<GeneratedRecord>, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GeneratedRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::Runtime(format!("{}: record {i}: {e}", path.display()))
        })?;
        records.push(record);
    }
    Ok(records)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let generated = read_generated(&args.generated)?;
    let gold = load_corpus(
        &args.gold,
        &crate::corpus::LengthCaps::default(),
        true,
        Split::Test,
    )?;
    let report = with_worker_pool(args.workers, || evaluate(&generated, &gold))??;
    print!("{}", render_table(&report));

    #[derive(Serialize)]
    struct EvalOutput {
        #[serde(flatten)]
        report: crate::metrics::EvalReport,
        #[serde(skip_serializing_if = "Option::is_none")]
        corpus_bleu4_first: Option<f64>,
    }
    let corpus_bleu4_first = if args.corpus_bleu {
        let gold_by_id: std::collections::HashMap<&str, &DistractorExample> =
            gold.iter().map(|ex| (ex.example_id.as_str(), ex)).collect();
        let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = generated
            .iter()
            .map(|g| {
                let cand = g.d1.split_whitespace().map(|t| t.to_lowercase()).collect();
                let refs = gold_by_id[g.example_id.as_str()]
                    .gold_distractors
                    .clone();
                (cand, refs)
            })
            .collect();
        let score = corpus_bleu(&pairs, 4) * 100.0;
        println!("corpus BLEU-4 (1st distractor): {score:.2}");
        Some(score)
    } else {
        None
    };
    if let Some(out) = &args.out {
        write_json(
            out,
            &EvalOutput {
                report,
                corpus_bleu4_first,
            },
        )?;
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (model, vocab) = ckpt.restore()?;
    let examples = load_corpus(
        &args.input,
        &ckpt.config.caps,
        ckpt.config.lowercase,
        Split::Test,
    )?;
    let example = examples
        .iter()
        .find(|ex| ex.example_id == args.example_id)
        .ok_or_else(|| {
            CliError::Runtime(format!(
                "example id {:?} not found in {}",
                args.example_id,
                args.input.display()
            ))
        })?;
    let beam = BeamConfig {
        width: args.beam.unwrap_or(ckpt.config.train.beam_size),
        max_len: ckpt.config.inference.max_len,
        length_normalize: ckpt.config.inference.length_normalize,
    };
    let record = inspect_example(&model, &vocab, example, &beam)?;
    match &args.out {
        Some(path) => write_json(path, &record)?,
        None => println!("{}", serde_json::to_string_pretty(&record).map_err(std::io::Error::other)?),
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), CliError> {
    let mut all = Vec::new();
    match (&args.config, &args.input) {
        (Some(config), None) => {
            let cfg = RunConfig::load(config)?;
            for (path, split) in [
                (&cfg.data.train, Split::Train),
                (&cfg.data.valid, Split::Validation),
                (&cfg.data.test, Split::Test),
            ] {
                if let Some(path) = path {
                    all.extend(load_corpus(path, &cfg.limits, cfg.vocab.lowercase, split)?);
                }
            }
        }
        (None, Some(input)) => {
            let split = match args.split.as_str() {
                "train" => Split::Train,
                "validation" | "valid" => Split::Validation,
                "test" => Split::Test,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown split {other:?}; expected train, validation, or test"
                    )))
                }
            };
            all.extend(load_corpus(
                input,
                &crate::corpus::LengthCaps::default(),
                true,
                split,
            )?);
        }
        _ => {
            return Err(CliError::Config(
                "stats needs exactly one of --config or --input".into(),
            ))
        }
    }
    let stats = corpus_stats(&all);
    match &args.out {
        Some(path) => write_json(path, &stats)?,
        None => println!("{}", serde_json::to_string_pretty(&stats).map_err(std::io::Error::other)?),
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value).map_err(std::io::Error::other)?;
    writeln!(file)?;
    file.flush()?;
    Ok(())
}
