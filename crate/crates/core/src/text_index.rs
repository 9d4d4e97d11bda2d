//! Coarse retrieval: a TF-IDF inverted index over paragraphs and cosine
//! ranking of paragraphs against a question.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Paragraph, Vocab, PAD_ID};
use crate::error::{Error, Result};

/// Which paragraphs a question is matched against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalScope {
    /// Paragraphs of the question's own lesson.
    #[default]
    Lesson,
    /// Every paragraph of the split.
    Corpus,
}

impl std::str::FromStr for RetrievalScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lesson" => Ok(Self::Lesson),
            "corpus" => Ok(Self::Corpus),
            other => Err(Error::Config(format!("unknown retrieval scope {other}"))),
        }
    }
}

impl std::fmt::Display for RetrievalScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lesson => "lesson",
            Self::Corpus => "corpus",
        })
    }
}

/// Inverted index over a list of documents. Documents are referred to by
/// their position in the list handed to [`TfIdfIndex::build`].
#[derive(Clone, Debug)]
pub struct TfIdfIndex {
    doc_count: usize,
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    doc_freq: BTreeMap<String, usize>,
    idf: BTreeMap<String, f64>,
    doc_norm: Vec<f64>,
}

#[derive(Serialize)]
struct IndexDump<'a> {
    doc_count: usize,
    doc_freq: &'a BTreeMap<String, usize>,
    doc_norm: &'a [f64],
}

/// `ln((1 + n) / (1 + df)) + 1`.
pub fn smooth_idf(doc_count: usize, doc_freq: usize) -> f64 {
    ((1.0 + doc_count as f64) / (1.0 + doc_freq as f64)).ln() + 1.0
}

fn term_counts(text: &str) -> BTreeMap<String, u32> {
    let mut tf = BTreeMap::new();
    for t in tokenize(text) {
        *tf.entry(t).or_insert(0) += 1;
    }
    tf
}

impl TfIdfIndex {
    /// Indexes raw document texts.
    pub fn build<S: AsRef<str>>(docs: &[S]) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Empty("cannot index an empty paragraph list".into()));
        }
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        let per_doc: Vec<BTreeMap<String, u32>> =
            docs.iter().map(|d| term_counts(d.as_ref())).collect();
        if per_doc.iter().all(BTreeMap::is_empty) {
            return Err(Error::Empty("every paragraph is empty after tokenization".into()));
        }
        for (doc, tf) in per_doc.iter().enumerate() {
            for (term, &count) in tf {
                postings.entry(term.clone()).or_default().push((doc, count));
            }
        }
        let doc_count = docs.len();
        let doc_freq: BTreeMap<String, usize> =
            postings.iter().map(|(t, p)| (t.clone(), p.len())).collect();
        let idf: BTreeMap<String, f64> = doc_freq
            .iter()
            .map(|(t, &df)| (t.clone(), smooth_idf(doc_count, df)))
            .collect();
        // Terms are visited in sorted order so every sum has a fixed order.
        let doc_norm = per_doc
            .iter()
            .map(|tf| {
                tf.iter()
                    .map(|(t, &c)| {
                        let w = c as f64 * idf[t];
                        w * w
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(Self {
            doc_count,
            postings,
            doc_freq,
            idf,
            doc_norm,
        })
    }

    /// Indexes each paragraph's sentences joined by spaces.
    pub fn for_paragraphs(paragraphs: &[Paragraph]) -> Result<Self> {
        let texts: Vec<String> = paragraphs.iter().map(Paragraph::text).collect();
        Self::build(&texts)
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.idf.get(term).copied()
    }

    pub fn doc_norm(&self, doc: usize) -> f64 {
        self.doc_norm[doc]
    }

    pub fn postings(&self, term: &str) -> &[(usize, u32)] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Debug dump; not a stable format.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&IndexDump {
            doc_count: self.doc_count,
            doc_freq: &self.doc_freq,
            doc_norm: &self.doc_norm,
        })
        .expect("index dump serializes")
    }

    /// Cosine similarity of `query` with every document. Query terms absent
    /// from the index contribute nothing. `None` when no query term is
    /// indexed.
    pub fn scores(&self, query: &str) -> Option<Vec<f64>> {
        let mut weights = Vec::new();
        for (term, count) in term_counts(query) {
            if let Some(&idf) = self.idf.get(&term) {
                weights.push((term, count as f64 * idf));
            }
        }
        if weights.is_empty() {
            return None;
        }
        let q_norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        let mut dot = vec![0.0; self.doc_count];
        for (term, qw) in &weights {
            let idf = self.idf[term];
            for &(doc, tf) in &self.postings[term] {
                dot[doc] += qw * (tf as f64 * idf);
            }
        }
        Some(
            dot.iter()
                .zip(&self.doc_norm)
                .map(|(&d, &n)| if d > 0.0 { d / (q_norm * n) } else { 0.0 })
                .collect(),
        )
    }

    /// The `m` best documents for `query`. Positive scores come first in
    /// descending order (ties by position); remaining slots are filled with
    /// unranked documents in position order.
    pub fn top_m(&self, query: &str, m: usize) -> RankedParagraphs {
        assert!(m >= 1, "m must be at least 1");
        let want = m.min(self.doc_count);
        let Some(scores) = self.scores(query) else {
            return RankedParagraphs {
                entries: (0..want).map(|doc| (doc, 0.0)).collect(),
                padded: want > 0,
                empty_query: true,
            };
        };
        let mut ranked: Vec<(usize, f64)> = scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.0)
            .map(|(d, &s)| (d, s))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(want);
        let padded = ranked.len() < want;
        if padded {
            let mut taken = vec![false; self.doc_count];
            for &(d, _) in &ranked {
                taken[d] = true;
            }
            let fill: Vec<usize> = (0..self.doc_count).filter(|&d| !taken[d]).collect();
            for d in fill.into_iter().take(want - ranked.len()) {
                ranked.push((d, 0.0));
            }
        }
        RankedParagraphs {
            entries: ranked,
            padded,
            empty_query: false,
        }
    }
}

/// Ranked document positions with their scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedParagraphs {
    pub entries: Vec<(usize, f64)>,
    /// Some slots were filled in position order because fewer documents
    /// scored above zero.
    pub padded: bool,
    /// No query term occurs in the index.
    pub empty_query: bool,
}

impl RankedParagraphs {
    pub fn docs(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(d, _)| d)
    }
}

/// One kept sentence: token ids padded to the slot width plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceSlot {
    /// Position of the source paragraph in the indexed list.
    pub doc: usize,
    /// 0-based sentence index within its paragraph.
    pub sentence: usize,
    pub ids: Vec<u32>,
    /// Real token count, at most the slot width. Zero marks an empty
    /// sentence.
    pub len: usize,
}

/// Retrieved paragraphs cut to at most `max_sentences` sentences of at most
/// `max_tokens` tokens each.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedContext {
    pub max_sentences: usize,
    pub max_tokens: usize,
    /// One entry per retrieved paragraph, in rank order.
    pub paragraphs: Vec<Vec<SentenceSlot>>,
}

impl TruncatedContext {
    /// Dense `M x L x O` id tensor (pad id in unused positions) and the
    /// matching `M x L` length mask.
    pub fn dense(&self) -> (Vec<u32>, Vec<usize>) {
        let (l, o) = (self.max_sentences, self.max_tokens);
        let mut ids = vec![PAD_ID; self.paragraphs.len() * l * o];
        let mut lens = vec![0; self.paragraphs.len() * l];
        for (m, para) in self.paragraphs.iter().enumerate() {
            for (s, slot) in para.iter().enumerate() {
                let base = (m * l + s) * o;
                ids[base..base + o].copy_from_slice(&slot.ids);
                lens[m * l + s] = slot.len;
            }
        }
        (ids, lens)
    }
}

/// Keeps the first `max_sentences` sentences of each ranked paragraph and
/// the first `max_tokens` tokens of each sentence.
pub fn truncate(
    ranked: &RankedParagraphs,
    paragraphs: &[&Paragraph],
    vocab: &Vocab,
    max_sentences: usize,
    max_tokens: usize,
) -> TruncatedContext {
    assert!(max_sentences >= 1 && max_tokens >= 1, "truncation sizes must be positive");
    let paragraphs = ranked
        .docs()
        .map(|doc| {
            paragraphs[doc]
                .sentences
                .iter()
                .take(max_sentences)
                .enumerate()
                .map(|(sentence, text)| {
                    let mut ids = vocab.encode(text);
                    ids.truncate(max_tokens);
                    let len = ids.len();
                    ids.resize(max_tokens, PAD_ID);
                    SentenceSlot {
                        doc,
                        sentence,
                        ids,
                        len,
                    }
                })
                .collect()
        })
        .collect();
    TruncatedContext {
        max_sentences,
        max_tokens,
        paragraphs,
    }
}
