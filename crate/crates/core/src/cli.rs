//! The `xtqa` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{self, ConfigFile};
use crate::corpus::{build_vocab, load_corpus, load_diagram_features, Dataset, DiagramFeatureStore, Split};
use crate::error::{Error, Result};
use crate::evidence::EntropyMode;
use crate::model::Variant;
use crate::pipeline::{
    self, load_checkpoint, predict_one, prepare, synthetic::load_gold, GoldMap, SynthConfig, TrainConfig, TrainData,
};
use crate::text_index::TfIdfIndex;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "xtqa", version, about = "Textbook question answering with evidence spans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus, print its statistics and write its vocabulary and
    /// per-lesson retrieval indexes.
    Ingest(IngestArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Answer one question and show the selected evidence.
    Explain(ExplainArgs),
    /// Generate a synthetic corpus with planted evidence.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory; receives the run manifest.
    #[arg(long, default_value = "xtqa-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Corpus file, or a directory holding `<split>.jsonl`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat `key = value` file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus file, or a directory holding `train.jsonl` (and
    /// optionally `val.jsonl` and `gold.json`).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Validation corpus file.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Planted evidence map; enables the evidence hit rate.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evidence spans per question.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_width: Option<usize>,
    #[arg(long)]
    aux_weight: Option<f64>,
    #[arg(long)]
    entropy: Option<EntropyMode>,
    /// Output directory for checkpoints, metrics and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus file, or a directory holding `<split>.jsonl`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: Split,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    gold: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: Split,
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    lessons: usize,
    /// Size of the pseudo-word pool.
    #[arg(long = "vocab", default_value_t = 500)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    questions: usize,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[command(flatten)]
    common: Common,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericalAbort { .. } => EXIT_NUMERICAL,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Runs the command line and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let words: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a, &words, out),
        Command::Train(a) => train(a, &words, out, err),
        Command::Eval(a) => eval(a, &words, out),
        Command::Explain(a) => explain(a, &words, out),
        Command::Synth(a) => synth(a, &words, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn print_json(out: &mut dyn Write, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `run-<command>.json` with everything needed to repeat the run.
fn write_manifest(dir: &Path, command: &str, argv: &[String], settings: Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "argv": argv,
        "version": env!("CARGO_PKG_VERSION"),
        "settings": settings,
    });
    write_file(
        &dir.join(format!("run-{command}.json")),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )
}

fn split_path(corpus: &Path, split: Split) -> PathBuf {
    if corpus.is_dir() {
        corpus.join(format!("{split}.jsonl"))
    } else {
        corpus.to_path_buf()
    }
}

fn gold_for(corpus: Option<&Path>, explicit: Option<&Path>) -> Result<Option<GoldMap>> {
    let path = match (explicit, corpus) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(c)) if c.is_dir() && c.join("gold.json").is_file() => Some(c.join("gold.json")),
        _ => None,
    };
    path.map(|p| load_gold(&p)).transpose()
}

fn features(path: Option<&Path>) -> Result<Option<DiagramFeatureStore>> {
    path.map(load_diagram_features).transpose()
}

fn ingest(a: IngestArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let path = split_path(&a.corpus, a.split);
    let ds = load_corpus(&path, a.split)?;
    let counts = ds.kind_counts();
    let paragraphs: usize = ds.lessons().iter().map(|l| l.paragraphs.len()).sum();
    let stats = json!({
        "split": a.split.to_string(),
        "lessons": ds.lessons().len(),
        "paragraphs": paragraphs,
        "sentences": ds.num_sentences(),
        "questions": { "tf": counts.tf, "mc": counts.mc, "diagram": counts.diagram, "total": counts.total() },
    });
    let dir = &a.common.out;
    let mut index = String::new();
    for lesson in ds.lessons() {
        let idx = TfIdfIndex::for_paragraphs(&lesson.paragraphs)?;
        let dump: Value = serde_json::from_str(&idx.to_json()).expect("index dump is JSON");
        index.push_str(&json!({ "lesson_id": lesson.lesson_id, "index": dump }).to_string());
        index.push('\n');
    }
    write_file(&dir.join("index.jsonl"), &index)?;
    if a.split == Split::Train {
        let vocab = build_vocab(&ds, a.min_freq);
        write_file(&dir.join("vocab.json"), &vocab.to_json())?;
    }
    write_file(&dir.join("stats.json"), &(stats.to_string() + "\n"))?;
    write_manifest(
        dir,
        "ingest",
        argv,
        json!({ "corpus": path, "split": a.split.to_string(), "min_freq": a.min_freq }),
    )?;
    print_json(out, &stats)
}

fn train(a: TrainArgs, argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    macro_rules! flag {
        ($($name:ident),*) => {$(
            if let Some(v) = &a.$name {
                file.set(stringify!($name), v);
            }
        )*};
    }
    flag!(variant, epochs, batch, seed, k, max_width, aux_weight, entropy);
    for (key, v) in [("corpus", &a.corpus), ("val", &a.val), ("features", &a.features), ("gold", &a.gold), ("out", &a.out)] {
        if let Some(p) = v {
            file.set(key, p.display());
        }
    }
    let variant: Variant = match file.get("variant") {
        Some(v) => v.parse().map_err(|e| Error::Config(format!("variant: {e}")))?,
        None => Variant::NonDiagram,
    };
    let mut tc = TrainConfig::new(variant);
    config::apply(&file, &mut tc)?;
    if tc.out.is_none() {
        tc.out = Some(PathBuf::from("xtqa-out"));
    }
    let corpus = file
        .get("corpus")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("--corpus is required".into()))?;
    let train_ds = load_corpus(&split_path(&corpus, Split::Train), Split::Train)?;
    let val_path = match file.get("val") {
        Some(v) => Some(PathBuf::from(v)),
        None if corpus.is_dir() && corpus.join("val.jsonl").is_file() => Some(corpus.join("val.jsonl")),
        None => None,
    };
    let val_ds = val_path.as_deref().map(|p| load_corpus(p, Split::Val)).transpose()?;
    let feats = features(file.get("features").map(Path::new))?;
    let gold = gold_for(Some(&corpus), file.get("gold").map(Path::new))?;

    let dir = tc.out.clone().expect("set above");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    write_file(&dir.join("config.txt"), &config::describe(&tc).to_text())?;
    let seeds = pipeline::Seeds::derive(tc.seed);
    write_manifest(
        &dir,
        "train",
        argv,
        json!({
            "config": config::describe(&tc).values,
            "corpus": corpus,
            "val": val_path,
            "features": file.get("features"),
            "gold": file.get("gold"),
            "seeds": seeds,
        }),
    )?;
    let outcome = pipeline::train(
        &tc,
        TrainData {
            train: &train_ds,
            val: val_ds.as_ref(),
            features: feats.as_ref(),
            gold: gold.as_ref(),
        },
        |r| {
            let _ = writeln!(err, "{}", r.to_json());
        },
    )?;
    let last = outcome.epochs.last().expect("at least one epoch");
    print_json(
        out,
        &json!({
            "epochs": outcome.epochs.len(),
            "best_epoch": outcome.best_epoch,
            "final": last.to_json(),
            "out": dir,
        }),
    )
}

fn load_split(corpus: Option<&Path>, checkpoint: &Path, split: Split) -> Result<(PathBuf, Dataset)> {
    let corpus = corpus.ok_or_else(|| Error::Config(format!("--corpus is required to evaluate {}", checkpoint.display())))?;
    let path = split_path(corpus, split);
    let ds = load_corpus(&path, split)?;
    Ok((path, ds))
}

fn eval(a: EvalArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let (path, ds) = load_split(a.corpus.as_deref(), &a.checkpoint, a.split)?;
    let feats = features(a.features.as_deref())?;
    let gold = gold_for(a.corpus.as_deref(), a.gold.as_deref())?;
    write_manifest(
        &a.common.out,
        "eval",
        argv,
        json!({ "checkpoint": a.checkpoint, "corpus": path, "split": a.split.to_string(), "threads": pipeline::eval_threads() }),
    )?;
    let (report, _) = pipeline::evaluate(&a.checkpoint, &ds, feats.as_ref(), gold.as_ref())?;
    let value: Value = serde_json::from_str(&report.to_json()).expect("report is JSON");
    write_file(&a.common.out.join(format!("metrics-{}.json", a.split)), &(report.to_json() + "\n"))?;
    print_json(out, &value)
}

fn explain(a: ExplainArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let (path, ds) = load_split(a.corpus.as_deref(), &a.checkpoint, a.split)?;
    let r = ds
        .find_question(&a.question)
        .ok_or_else(|| Error::UnknownQuestion(a.question.clone()))?;
    let lesson = ds.lesson(r.lesson).clone();
    let single = Dataset::from_lessons(
        a.split,
        vec![crate::corpus::Lesson {
            questions: vec![ds.question(r).clone()],
            ..lesson
        }],
    )?;
    let feats = features(a.features.as_deref())?;
    write_manifest(
        &a.common.out,
        "explain",
        argv,
        json!({ "checkpoint": a.checkpoint, "corpus": path, "split": a.split.to_string(), "question": a.question }),
    )?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let prepared = prepare(&single, &ckpt.vocab, &ckpt.model.config, feats.as_ref())?;
    let ex = prepared.first().ok_or_else(|| {
        Error::Config(format!(
            "question {} is not answered by a {} model",
            a.question, ckpt.model.config.variant
        ))
    })?;
    let outcome = predict_one(&ckpt.model, ex)?;
    print_json(out, &serde_json::to_value(&outcome.explanation).expect("explanation serializes"))
}

fn synth(a: SynthArgs, argv: &[String], out: &mut dyn Write) -> Result<()> {
    let config = SynthConfig {
        lessons: a.lessons,
        vocab_size: a.vocab_size,
        seed: a.seed,
        questions_per_lesson: a.questions,
        val_fraction: a.val_fraction,
        ..SynthConfig::default()
    };
    let corpus = pipeline::generate_synthetic(&config)?;
    corpus.write(&a.common.out)?;
    write_manifest(&a.common.out, "synth", argv, serde_json::to_value(&config).expect("config serializes"))?;
    let questions = |ls: &[crate::corpus::Lesson]| ls.iter().map(|l| l.questions.len()).sum::<usize>();
    print_json(
        out,
        &json!({
            "train_lessons": corpus.train.len(),
            "val_lessons": corpus.val.len(),
            "train_questions": questions(&corpus.train),
            "val_questions": questions(&corpus.val),
            "out": a.common.out,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(std::iter::once("xtqa").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (code, _, err) = run_capture(&["synth", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--bogus"));
        assert_eq!(run_capture(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn missing_corpus_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let (code, _, _) = run_capture(&["ingest", "--corpus", "/nonexistent/x.jsonl", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_DATA);
    }

    #[test]
    fn error_codes() {
        let numerical = Error::NumericalAbort {
            question_id: "q".into(),
            detail: "nan".into(),
        };
        assert_eq!(exit_code(&numerical), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::DuplicateId("x".into())), EXIT_DATA);
    }
}
