//! Training, evaluation, checkpoints and the synthetic corpus.

pub mod checkpoint;
pub mod metrics;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, Dataset, DiagramFeatureStore, Paragraph, Split, Vocab};
use crate::error::{Error, Result};
use crate::model::{encode_text, load_embedding_file, ModelConfig, Prepared, Variant, XtqaModel};
use crate::nn::checkpoint::round_to_f32;
use crate::nn::{Adam, AdamConfig, LrSchedule, Mode, Tape};
use crate::text_index::{truncate, RetrievalScope, TfIdfIndex};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, Seeds};
pub use metrics::{evidence_hit_rate, EvidenceSpan, Explanation, MetricsReport, Tally};
pub use synthetic::{generate_synthetic, GoldEvidence, GoldMap, SynthConfig, SynthCorpus};

/// Retrieves, truncates and encodes every question of `ds` that `config`'s
/// variant answers, in file order.
pub fn prepare(
    ds: &Dataset,
    vocab: &Vocab,
    config: &ModelConfig,
    features: Option<&DiagramFeatureStore>,
) -> Result<Vec<Prepared>> {
    let corpus_paragraphs: Vec<&Paragraph> = ds.lessons().iter().flat_map(|l| &l.paragraphs).collect();
    let corpus_index = match config.retrieval {
        RetrievalScope::Corpus => {
            let texts: Vec<String> = corpus_paragraphs.iter().map(|p| p.text()).collect();
            Some(TfIdfIndex::build(&texts)?)
        }
        RetrievalScope::Lesson => None,
    };
    let mut out = Vec::new();
    for lesson in ds.lessons() {
        let wanted: Vec<_> = lesson
            .questions
            .iter()
            .filter(|q| config.variant.handles(q.kind))
            .collect();
        if wanted.is_empty() {
            continue;
        }
        let lesson_paragraphs: Vec<&Paragraph> = lesson.paragraphs.iter().collect();
        let lesson_index;
        let (index, paragraphs) = match &corpus_index {
            Some(idx) => (idx, &corpus_paragraphs),
            None => {
                lesson_index = TfIdfIndex::for_paragraphs(&lesson.paragraphs)?;
                (&lesson_index, &lesson_paragraphs)
            }
        };
        for q in wanted {
            let ranked = index.top_m(&q.text, config.paragraphs);
            let context = truncate(&ranked, paragraphs, vocab, config.sentences, config.sentence_tokens);
            let paragraph_ids = ranked.docs().map(|d| paragraphs[d].paragraph_id.clone()).collect();
            let sentence_text = ranked
                .docs()
                .map(|d| {
                    paragraphs[d]
                        .sentences
                        .iter()
                        .take(config.sentences)
                        .cloned()
                        .collect()
                })
                .collect();
            let diagram = match &q.diagram_id {
                Some(id) => {
                    let store = features.ok_or_else(|| Error::MissingDiagramFeature(id.clone()))?;
                    if store.dim() != config.diagram_dim {
                        return Err(Error::FeatureFormat(format!(
                            "features have dimension {}, model expects {}",
                            store.dim(),
                            config.diagram_dim
                        )));
                    }
                    Some(store.get(id)?.to_vec())
                }
                None => None,
            };
            out.push(Prepared {
                question_id: q.question_id.clone(),
                kind: q.kind,
                question: encode_text(vocab, &q.text, config.question_tokens),
                options: q
                    .options
                    .iter()
                    .map(|o| encode_text(vocab, &o.text, config.answer_tokens))
                    .collect(),
                gold: q.gold_index(),
                context,
                paragraph_ids,
                sentence_text,
                diagram,
            });
        }
    }
    Ok(out)
}

/// Prediction and explanation for one question.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub kind: crate::corpus::QuestionKind,
    pub gold: usize,
    pub prediction: usize,
    pub probabilities: Vec<f64>,
    pub explanation: Explanation,
}

impl Outcome {
    pub fn correct(&self) -> bool {
        self.prediction == self.gold
    }
}

pub fn label(index: usize) -> String {
    ((b'a' + index as u8) as char).to_string()
}

fn explain(ex: &Prepared, fwd: &crate::model::Forward) -> Explanation {
    Explanation {
        question_id: ex.question_id.clone(),
        predicted_label: label(fwd.prediction),
        evidence: fwd
            .evidence
            .selected_spans()
            .map(|s| {
                let rank = s.span.paragraph_rank;
                EvidenceSpan {
                    paragraph_id: ex.paragraph_ids[rank].clone(),
                    start: s.span.start,
                    end: s.span.end,
                    gain: s.gain,
                    text: ex.sentence_text[rank][s.span.start - 1..s.span.end].join(" "),
                }
            })
            .collect(),
    }
}

/// Answers one question in inference mode.
pub fn predict_one(model: &XtqaModel, ex: &Prepared) -> Result<Outcome> {
    let mut tape = Tape::new(&model.store);
    let fwd = model.forward(&mut tape, ex, &mut Mode::eval())?;
    if fwd.probabilities.iter().any(|p| !p.is_finite()) {
        return Err(Error::NumericalAbort {
            question_id: ex.question_id.clone(),
            detail: "non-finite candidate probabilities".into(),
        });
    }
    Ok(Outcome {
        kind: ex.kind,
        gold: ex.gold,
        prediction: fwd.prediction,
        probabilities: fwd.probabilities.clone(),
        explanation: explain(ex, &fwd),
    })
}

/// Worker count for evaluation: `XTQA_THREADS` if set, else the number of
/// available cores.
pub fn eval_threads() -> usize {
    std::env::var("XTQA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Answers every question; results keep the input order.
pub fn predict(model: &XtqaModel, prepared: &[Prepared]) -> Result<Vec<Outcome>> {
    let threads = eval_threads();
    if threads <= 1 {
        return prepared.iter().map(|ex| predict_one(model, ex)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| prepared.par_iter().map(|ex| predict_one(model, ex)).collect())
}

/// Tallies outcomes per kind, plus evidence hits when `gold` is given.
pub fn score(outcomes: &[Outcome], gold: Option<&GoldMap>) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for o in outcomes {
        report.record(o.kind, o.correct());
    }
    if let Some(g) = gold {
        report.evidence = Some(metrics::evidence_tally(
            outcomes.iter().map(|o| (&o.explanation, o.correct())),
            g,
        )?);
    }
    Ok(report)
}

/// Evaluates `model` on prepared questions.
pub fn evaluate_prepared(
    model: &XtqaModel,
    prepared: &[Prepared],
    gold: Option<&GoldMap>,
) -> Result<(MetricsReport, Vec<Outcome>)> {
    if prepared.is_empty() {
        return Err(Error::Empty("no questions to evaluate".into()));
    }
    let outcomes = predict(model, prepared)?;
    Ok((score(&outcomes, gold)?, outcomes))
}

/// Loads a checkpoint and evaluates it on `ds`.
pub fn evaluate(
    checkpoint: &Path,
    ds: &Dataset,
    features: Option<&DiagramFeatureStore>,
    gold: Option<&GoldMap>,
) -> Result<(MetricsReport, Vec<Outcome>)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let prepared = prepare(ds, &ckpt.vocab, &ckpt.model.config, features)?;
    evaluate_prepared(&ckpt.model, &prepared, gold)
}

/// Training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub min_freq: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Architecture; `vocab_size` is replaced by the size of the vocabulary
    /// built from the training split.
    pub model: ModelConfig,
    /// Where checkpoints go; nothing is written when absent.
    pub out: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            epochs: 10,
            batch: 2,
            seed: 1,
            min_freq: 1,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            model: ModelConfig::new(variant, 2),
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.min_freq == 0 {
            return Err(Error::Config("epochs, batch and min_freq must be at least 1".into()));
        }
        // The vocabulary size is taken from the training split.
        ModelConfig {
            vocab_size: 2,
            ..self.model.clone()
        }
        .validate()
    }
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub train: MetricsReport,
    pub val: Option<MetricsReport>,
    pub seconds: f64,
}

impl EpochReport {
    pub fn to_json(&self) -> serde_json::Value {
        let parse = |r: &MetricsReport| serde_json::from_str::<serde_json::Value>(&r.to_json()).expect("valid JSON");
        serde_json::json!({
            "epoch": self.epoch,
            "learning_rate": self.learning_rate,
            "mean_loss": self.mean_loss,
            "train": parse(&self.train),
            "val": self.val.as_ref().map(parse),
        })
    }
}

pub struct TrainOutcome {
    pub model: XtqaModel,
    pub vocab: Vocab,
    pub seeds: Seeds,
    pub epochs: Vec<EpochReport>,
    /// Epoch whose weights are in `best/` (highest validation accuracy,
    /// earliest on ties); the last epoch when there is no validation split.
    pub best_epoch: usize,
}

/// Inputs to [`train`] besides the configuration.
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub features: Option<&'a DiagramFeatureStore>,
    pub gold: Option<&'a GoldMap>,
}

/// Trains a model. Each epoch shuffles the training questions, steps Adam
/// on the mean gradient of every batch, rounds the weights to f32 (the
/// checkpoint precision) and, with an output directory, writes
/// `epoch-NN/` and refreshes `best/`.
pub fn train(
    config: &TrainConfig,
    data: TrainData<'_>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.split != Split::Train {
        return Err(Error::Config("the vocabulary must come from the training split".into()));
    }
    let vocab = build_vocab(data.train, config.min_freq);
    let mut model_config = config.model.clone();
    model_config.vocab_size = vocab.len();
    let seeds = Seeds::derive(config.seed);
    let mut model = XtqaModel::new(model_config, seeds.init)?;
    if let Some(path) = &model.config.embeddings {
        let (dim, vectors) = load_embedding_file(Path::new(path))?;
        model.load_embeddings(&vocab, dim, &vectors)?;
    }
    round_to_f32(&mut model.store);

    let train_set = prepare(data.train, &vocab, &model.config, data.features)?;
    if train_set.is_empty() {
        return Err(Error::Empty(format!(
            "no {} training questions",
            model.config.variant
        )));
    }
    let val_set = match data.val {
        Some(v) => Some(prepare(v, &vocab, &model.config, data.features)?).filter(|s| !s.is_empty()),
        None => None,
    };

    let mut adam = Adam::new(&model.store, config.adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut mode = Mode::train(ChaCha8Rng::seed_from_u64(seeds.dropout));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut reports = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = config.schedule.rate(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total_loss = 0.0;
        let mut train_report = MetricsReport::default();
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            model.store.zero_grads();
            let mut grads = model.store.take_grads();
            let losses = {
                let mut tape = Tape::new(&model.store);
                let fwds = model.forward_batch(&mut tape, &batch, &mut mode)?;
                let mut terms = Vec::with_capacity(batch.len());
                let mut values = Vec::with_capacity(batch.len());
                for (ex, fwd) in batch.iter().zip(&fwds) {
                    let loss = model.loss(&mut tape, fwd, ex.gold)?;
                    let value = tape.value(loss).item();
                    if !value.is_finite() {
                        return Err(Error::NumericalAbort {
                            question_id: ex.question_id.clone(),
                            detail: format!("loss is {value}"),
                        });
                    }
                    train_report.record(ex.kind, fwd.prediction == ex.gold);
                    terms.push(loss);
                    values.push(value);
                }
                let total = if terms.len() == 1 {
                    terms[0]
                } else {
                    let stacked = tape.stack_rows(&terms)?;
                    tape.sum(stacked)
                };
                tape.backward_into(total, 1.0 / batch.len() as f64, &mut grads);
                values
            };
            model.store.restore_grads(grads);
            if let Some(p) = model.store.iter().find(|p| !p.grad.is_finite()) {
                let ids: Vec<&str> = batch.iter().map(|ex| ex.question_id.as_str()).collect();
                return Err(Error::NumericalAbort {
                    question_id: ids.join(","),
                    detail: format!("non-finite gradient for {}", p.name),
                });
            }
            total_loss += losses.iter().sum::<f64>();
            adam.step(&mut model.store, lr);
        }
        round_to_f32(&mut model.store);

        let val = match &val_set {
            Some(v) => Some(evaluate_prepared(&model, v, data.gold)?.0),
            None => None,
        };
        let report = EpochReport {
            epoch,
            learning_rate: lr,
            mean_loss: total_loss / train_set.len() as f64,
            train: train_report,
            val,
            seconds: started.elapsed().as_secs_f64(),
        };
        let key = report
            .val
            .as_ref()
            .and_then(MetricsReport::all_acc)
            .unwrap_or(f64::NEG_INFINITY);
        let improved = match best {
            None => true,
            Some((_, b)) => key > b || (report.val.is_none()),
        };
        if improved {
            best = Some((epoch, key));
        }
        if let Some(out) = &config.out {
            let dir = out.join(format!("epoch-{epoch:02}"));
            save_checkpoint(&dir, &model, &vocab, epoch, seeds)?;
            if improved {
                let best_dir = out.join("best");
                if best_dir.exists() {
                    fs::remove_dir_all(&best_dir).map_err(|e| Error::io(&best_dir, e))?;
                }
                save_checkpoint(&best_dir, &model, &vocab, epoch, seeds)?;
            }
            append_line(&out.join("metrics.jsonl"), &report.to_json().to_string())?;
        }
        on_epoch(&report);
        reports.push(report);
    }

    Ok(TrainOutcome {
        model,
        vocab,
        seeds,
        epochs: reports,
        best_epoch: best.map_or(config.epochs, |(e, _)| e),
    })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
