//! Flat `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys use the long flag names with `-` or `_` (`max-width`, `max_width`).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;

/// Parsed key/value pairs in key order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = normalize(key);
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: {key} set twice", i + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(normalize(key), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize(key)).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn parsed<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

/// Training keys understood by [`apply`].
pub const TRAIN_KEYS: &[&str] = &[
    "corpus",
    "val",
    "features",
    "gold",
    "out",
    "variant",
    "epochs",
    "batch",
    "seed",
    "min_freq",
    "k",
    "max_width",
    "aux_weight",
    "entropy",
    "retrieval",
    "embeddings",
    "embed_dim",
    "hidden_dim",
    "diagram_dim",
    "pool_hidden",
    "entropy_hidden",
    "classifier_hidden",
    "dropout",
    "paragraphs",
    "sentences",
    "sentence_tokens",
    "question_tokens",
    "answer_tokens",
    "lr_warmup_rate",
    "lr_base",
    "lr_decay",
    "lr_decay_after",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
];

/// Applies every training key of `file` to `config`. `variant` is applied
/// first, since it resets the per-variant context sizes. Path keys
/// (`corpus`, `val`, `features`, `gold`) are left to the caller.
pub fn apply(file: &ConfigFile, config: &mut TrainConfig) -> Result<()> {
    for key in file.values.keys() {
        if !TRAIN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown key {key}")));
        }
    }
    if let Some(v) = file.get("variant") {
        let variant = parsed("variant", v)?;
        let mut fresh = crate::model::ModelConfig::new(variant, config.model.vocab_size);
        fresh.embeddings = config.model.embeddings.take();
        config.model = fresh;
    }
    let m = &mut config.model;
    for (key, v) in &file.values {
        let k = key.as_str();
        match k {
            "corpus" | "val" | "features" | "gold" | "variant" => {}
            "out" => config.out = Some(PathBuf::from(v)),
            "epochs" => config.epochs = parsed(k, v)?,
            "batch" => config.batch = parsed(k, v)?,
            "seed" => config.seed = parsed(k, v)?,
            "min_freq" => config.min_freq = parsed(k, v)?,
            "k" => m.evidence_spans = parsed(k, v)?,
            "max_width" => m.max_width = parsed(k, v)?,
            "aux_weight" => m.aux_weight = parsed(k, v)?,
            "entropy" => m.entropy = parsed(k, v)?,
            "retrieval" => m.retrieval = parsed(k, v)?,
            "embeddings" => m.embeddings = Some(v.clone()),
            "embed_dim" => m.embed_dim = parsed(k, v)?,
            "hidden_dim" => m.hidden_dim = parsed(k, v)?,
            "diagram_dim" => m.diagram_dim = parsed(k, v)?,
            "pool_hidden" => m.pool_hidden = parsed(k, v)?,
            "entropy_hidden" => m.entropy_hidden = parsed(k, v)?,
            "classifier_hidden" => m.classifier_hidden = parsed(k, v)?,
            "dropout" => m.dropout = parsed(k, v)?,
            "paragraphs" => m.paragraphs = parsed(k, v)?,
            "sentences" => m.sentences = parsed(k, v)?,
            "sentence_tokens" => m.sentence_tokens = parsed(k, v)?,
            "question_tokens" => m.question_tokens = parsed(k, v)?,
            "answer_tokens" => m.answer_tokens = parsed(k, v)?,
            "lr_warmup_rate" => config.schedule.warmup_rate = parsed(k, v)?,
            "lr_base" => config.schedule.base = parsed(k, v)?,
            "lr_decay" => config.schedule.decay = parsed(k, v)?,
            "lr_decay_after" => config.schedule.decay_after = parsed(k, v)?,
            "adam_beta1" => config.adam.beta1 = parsed(k, v)?,
            "adam_beta2" => config.adam.beta2 = parsed(k, v)?,
            "adam_eps" => config.adam.eps = parsed(k, v)?,
            _ => unreachable!("checked above"),
        }
    }
    Ok(())
}

/// The effective training settings as a config file that [`apply`] reads
/// back to the same [`TrainConfig`].
pub fn describe(config: &TrainConfig) -> ConfigFile {
    let m = &config.model;
    let mut f = ConfigFile::default();
    f.set("variant", m.variant);
    f.set("epochs", config.epochs);
    f.set("batch", config.batch);
    f.set("seed", config.seed);
    f.set("min_freq", config.min_freq);
    f.set("k", m.evidence_spans);
    f.set("max_width", m.max_width);
    f.set("aux_weight", m.aux_weight);
    f.set("entropy", m.entropy);
    f.set("retrieval", m.retrieval);
    if let Some(e) = &m.embeddings {
        f.set("embeddings", e);
    }
    f.set("embed_dim", m.embed_dim);
    f.set("hidden_dim", m.hidden_dim);
    f.set("diagram_dim", m.diagram_dim);
    f.set("pool_hidden", m.pool_hidden);
    f.set("entropy_hidden", m.entropy_hidden);
    f.set("classifier_hidden", m.classifier_hidden);
    f.set("dropout", m.dropout);
    f.set("paragraphs", m.paragraphs);
    f.set("sentences", m.sentences);
    f.set("sentence_tokens", m.sentence_tokens);
    f.set("question_tokens", m.question_tokens);
    f.set("answer_tokens", m.answer_tokens);
    f.set("lr_warmup_rate", config.schedule.warmup_rate);
    f.set("lr_base", config.schedule.base);
    f.set("lr_decay", config.schedule.decay);
    f.set("lr_decay_after", config.schedule.decay_after);
    f.set("adam_beta1", config.adam.beta1);
    f.set("adam_beta2", config.adam.beta2);
    f.set("adam_eps", config.adam.eps);
    if let Some(out) = &config.out {
        f.set("out", out.display());
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn parses_comments_and_dashes() {
        let f = ConfigFile::parse("# run\nmax-width = 3  # wide\n\nseed=9\n").unwrap();
        assert_eq!(f.get("max_width"), Some("3"));
        assert_eq!(f.get("seed"), Some("9"));
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(ConfigFile::parse("seed 9").is_err());
        assert!(ConfigFile::parse("seed = 1\nseed = 2").is_err());
        let f = ConfigFile::parse("colour = blue").unwrap();
        assert!(apply(&f, &mut TrainConfig::new(Variant::NonDiagram)).is_err());
        let f = ConfigFile::parse("epochs = many").unwrap();
        assert!(apply(&f, &mut TrainConfig::new(Variant::NonDiagram)).is_err());
    }

    #[test]
    fn describe_round_trips() {
        let mut c = TrainConfig::new(Variant::Diagram);
        c.epochs = 3;
        c.model.max_width = 4;
        c.model.aux_weight = 0.25;
        c.schedule.base = 3e-4;
        let text = describe(&c).to_text();
        let mut back = TrainConfig::new(Variant::NonDiagram);
        apply(&ConfigFile::parse(&text).unwrap(), &mut back).unwrap();
        assert_eq!(back, c);
    }
}
