//! Fine-grained evidence selection: candidate sentence spans inside the
//! retrieved paragraphs are scored by how much they raise the entropy
//! head's confidence in the question, and the best `K` are pooled.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{tape::Var, AttentionPool, Mlp, Mode, ParamStore, Tape, Tensor};

/// Probabilities from the entropy head are clamped into
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// A sentence span inside one retrieved paragraph. Sentence indices are
/// 1-based and inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanIndex {
    pub paragraph_rank: usize,
    pub start: usize,
    pub end: usize,
}

impl SpanIndex {
    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, sentence: usize) -> bool {
        (self.start..=self.end).contains(&sentence)
    }
}

/// All `(start, end)` with `1 <= start <= end <= len` and width at most
/// `max_width`, ordered by start then end.
pub fn enumerate_spans(len: usize, max_width: usize) -> Vec<(usize, usize)> {
    assert!(max_width >= 1, "max_width must be at least 1");
    let mut out = Vec::with_capacity(span_count(len, max_width));
    for s in 1..=len {
        for e in s..=len.min(s + max_width - 1) {
            out.push((s, e));
        }
    }
    out
}

/// Closed form of `enumerate_spans(len, max_width).len()`.
pub fn span_count(len: usize, max_width: usize) -> usize {
    let w = max_width.min(len);
    len * w - w * w.saturating_sub(1) / 2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    /// `-ln p`
    #[default]
    Point,
    /// `-p ln p - (1 - p) ln(1 - p)`
    Bernoulli,
}

impl std::str::FromStr for EntropyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(Self::Point),
            "bernoulli" => Ok(Self::Bernoulli),
            other => Err(Error::Config(format!("unknown entropy mode {other}"))),
        }
    }
}

impl std::fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Point => "point",
            Self::Bernoulli => "bernoulli",
        })
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Entropy of an already clamped probability.
pub fn entropy(p: f64, mode: EntropyMode) -> f64 {
    match mode {
        EntropyMode::Point => -p.ln(),
        EntropyMode::Bernoulli => -p * p.ln() - (1.0 - p) * (1.0 - p).ln(),
    }
}

pub fn info_gain(h_q: f64, h_qe: f64) -> f64 {
    h_q - h_qe
}

/// `AP([u; v])` for a pair of equally long vectors: the coordinates are
/// interleaved and averaged in pairs, giving `(u + v) / 2`.
pub fn pair_average(u: &[f64], v: &[f64]) -> Result<Tensor> {
    if u.len() != v.len() {
        return Err(Error::Shape("pair_average: lengths differ".into()));
    }
    let mut joined = Vec::with_capacity(2 * u.len());
    for (a, b) in u.iter().zip(v) {
        joined.push(*a);
        joined.push(*b);
    }
    crate::nn::avg_pool_pairs(&Tensor::vector(joined))
}

/// Representation of `(start, end)` over the sentence rows `p` (`L x d`).
pub fn span_representation(p: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    if start == 0 || start > end || end > p.rows() {
        return Err(Error::Shape(format!(
            "span ({start}, {end}) outside {} sentences",
            p.rows()
        )));
    }
    pair_average(p.row(start - 1), p.row(end - 1))
}

/// A candidate span together with its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSpan {
    pub span: SpanIndex,
    pub representation: Tensor,
    pub gain: f64,
    pub p_q: f64,
    pub p_qe: f64,
}

/// Total order used for selection: higher gain first, then lower paragraph
/// rank, lower start, shorter span.
pub fn selection_order(a: (&SpanIndex, f64), b: (&SpanIndex, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then(a.0.paragraph_rank.cmp(&b.0.paragraph_rank))
        .then(a.0.start.cmp(&b.0.start))
        .then(a.0.width().cmp(&b.0.width()))
}

/// Indices of the `k` best candidates in selection order.
pub fn select_top_k(spans: &[SpanIndex], gains: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&i, &j| selection_order((&spans[i], gains[i]), (&spans[j], gains[j])));
    order.truncate(k);
    order
}

/// Pooled sentence encodings of the retrieved paragraphs.
pub struct SentenceRows {
    /// One row per non-empty sentence.
    pub pooled: Var,
    /// Per paragraph rank, per kept sentence slot: the row in `pooled`, or
    /// `None` for an empty sentence.
    pub paragraphs: Vec<Vec<Option<usize>>>,
}

impl SentenceRows {
    /// Every span whose first and last sentence are non-empty.
    pub fn candidates(&self, max_width: usize) -> Vec<SpanIndex> {
        let mut out = Vec::new();
        for (rank, slots) in self.paragraphs.iter().enumerate() {
            for (start, end) in enumerate_spans(slots.len(), max_width) {
                if slots[start - 1].is_some() && slots[end - 1].is_some() {
                    out.push(SpanIndex {
                        paragraph_rank: rank,
                        start,
                        end,
                    });
                }
            }
        }
        out
    }
}

/// The entropy head `p = sigma(MLP_h(x))` with its entropy reading.
#[derive(Clone, Copy, Debug)]
pub struct EntropyHead {
    pub mlp: Mlp,
    pub mode: EntropyMode,
}

impl EntropyHead {
    /// Clamped probabilities for every row of `x`, as an `n x 1` node.
    pub fn probabilities(&self, tape: &mut Tape<'_>, x: Var, mode: &mut Mode) -> Result<Var> {
        let logits = self.mlp.forward(tape, x, mode)?;
        let p = tape.sigmoid(logits);
        Ok(tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))
    }

    fn read(&self, store: &ParamStore, x: Tensor) -> Result<(f64, f64)> {
        let mut tape = Tape::new(store);
        let x = tape.constant(x);
        let p = self.probabilities(&mut tape, x, &mut Mode::eval())?;
        let p = tape.value(p).item();
        Ok((entropy(p, self.mode), p))
    }

    /// `(H(q), p(q))` for a pooled question vector, without dropout.
    pub fn entropy_q(&self, store: &ParamStore, question: &[f64]) -> Result<(f64, f64)> {
        self.read(store, Tensor::matrix(1, question.len(), question.to_vec())?)
    }

    /// `(H(q | e), p(q | e))` for a question and a span representation.
    pub fn cond_entropy(&self, store: &ParamStore, question: &[f64], span: &[f64]) -> Result<(f64, f64)> {
        let joint = pair_average(question, span)?;
        let n = joint.len();
        self.read(store, joint.reshape(vec![1, n])?)
    }
}

/// Selected evidence recorded on a tape.
pub struct Evidence {
    /// Every candidate, in enumeration order.
    pub candidates: Vec<ScoredSpan>,
    /// Indices into `candidates`, best first.
    pub selected: Vec<usize>,
    /// Pooled representation of the selected spans.
    pub pooled: Var,
    /// `p(q)` as a scalar node.
    pub p_q: Var,
    /// `p(q | e)` for each selected span, in selection order.
    pub p_qe: Vec<Var>,
}

impl Evidence {
    pub fn selected_spans(&self) -> impl Iterator<Item = &ScoredSpan> {
        self.selected.iter().map(|&i| &self.candidates[i])
    }
}

/// Scores every candidate span and pools the best `k`.
///
/// `question` is the pooled question vector. Span representations average
/// the start and end sentence rows; the joint question/span input to the
/// head averages the question with the span.
#[allow(clippy::too_many_arguments)]
pub fn generate_evidence(
    tape: &mut Tape<'_>,
    head: &EntropyHead,
    pool: &AttentionPool,
    question: Var,
    sentences: &SentenceRows,
    k: usize,
    max_width: usize,
    mode: &mut Mode,
) -> Result<Evidence> {
    assert!(k >= 1, "k must be at least 1");
    let spans = sentences.candidates(max_width);
    if spans.is_empty() {
        return Err(Error::EmptyContext(String::new()));
    }
    let row_of = |rank: usize, sentence: usize| {
        sentences.paragraphs[rank][sentence - 1].expect("candidate endpoints are non-empty")
    };
    let starts: Vec<usize> = spans.iter().map(|s| row_of(s.paragraph_rank, s.start)).collect();
    let ends: Vec<usize> = spans.iter().map(|s| row_of(s.paragraph_rank, s.end)).collect();
    let first = tape.rows(sentences.pooled, &starts)?;
    let last = tape.rows(sentences.pooled, &ends)?;
    let sum = tape.add(first, last)?;
    let reps = tape.scale(sum, 0.5);

    let q_rows = tape.broadcast_rows(question, spans.len())?;
    let sum = tape.add(q_rows, reps)?;
    let joint = tape.scale(sum, 0.5);
    let head_in = tape.stack_rows(&[question, joint])?;
    let probs = head.probabilities(tape, head_in, mode)?;

    let p = tape.value(probs).data().to_vec();
    let h_q = entropy(p[0], head.mode);
    let gains: Vec<f64> = p[1..].iter().map(|&pe| info_gain(h_q, entropy(pe, head.mode))).collect();
    let selected = select_top_k(&spans, &gains, k);

    let rep_values = tape.value(reps).clone();
    let candidates = spans
        .iter()
        .enumerate()
        .map(|(i, &span)| ScoredSpan {
            span,
            representation: Tensor::vector(rep_values.row(i).to_vec()),
            gain: gains[i],
            p_q: p[0],
            p_qe: p[i + 1],
        })
        .collect();

    let chosen = tape.rows(reps, &selected)?;
    let pooled = pool.forward(tape, chosen, &vec![true; selected.len()], mode)?;
    let p_q = tape.pick(probs, 0)?;
    let p_qe = selected
        .iter()
        .map(|&i| tape.pick(probs, i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evidence {
        candidates,
        selected,
        pooled,
        p_q,
        p_qe,
    })
}
