//! The answering model: shared GRU encoder with attention pooling, the
//! evidence selector, the fusion feature and the candidate classifier.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{QuestionKind, Vocab, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::evidence::{generate_evidence, EntropyHead, EntropyMode, Evidence, SentenceRows};
use crate::nn::{
    tape::Var, AttentionPool, BilinearAttention, Gru, Linear, Mlp, Mode, ParamId, ParamStore,
    Tape, Tensor,
};
use crate::text_index::{RetrievalScope, TruncatedContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    NonDiagram,
    Diagram,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nondiagram" => Ok(Self::NonDiagram),
            "diagram" => Ok(Self::Diagram),
            other => Err(Error::Config(format!("unknown variant {other}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::NonDiagram => "nondiagram",
            Variant::Diagram => "diagram",
        })
    }
}

impl Variant {
    /// Whether questions of `kind` are answered by this variant.
    pub fn handles(self, kind: QuestionKind) -> bool {
        (kind == QuestionKind::Diagram) == (self == Variant::Diagram)
    }

    /// Number of `hidden_dim` blocks in the fusion feature.
    pub fn fusion_blocks(self) -> usize {
        match self {
            Variant::NonDiagram => 6,
            Variant::Diagram => 9,
        }
    }
}

/// Architecture and input-shape settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub diagram_dim: usize,
    /// Hidden width of the attention scorer.
    pub pool_hidden: usize,
    /// Hidden width of the entropy head.
    pub entropy_hidden: usize,
    /// Hidden width of the candidate classifier.
    pub classifier_hidden: usize,
    pub dropout: f64,
    /// Paragraphs kept by retrieval.
    pub paragraphs: usize,
    /// Sentences kept per paragraph.
    pub sentences: usize,
    /// Tokens kept per sentence.
    pub sentence_tokens: usize,
    /// Evidence spans selected per question.
    pub evidence_spans: usize,
    pub max_width: usize,
    pub question_tokens: usize,
    pub answer_tokens: usize,
    pub entropy: EntropyMode,
    pub retrieval: RetrievalScope,
    /// Weight of the auxiliary correctness loss on the entropy head; zero
    /// disables it.
    pub aux_weight: f64,
    /// Optional whitespace-separated text embedding file.
    pub embeddings: Option<String>,
}

impl ModelConfig {
    pub fn new(variant: Variant, vocab_size: usize) -> Self {
        let (paragraphs, sentences, sentence_tokens) = match variant {
            Variant::NonDiagram => (1, 5, 20),
            Variant::Diagram => (1, 15, 15),
        };
        Self {
            variant,
            vocab_size,
            embed_dim: 128,
            hidden_dim: 1024,
            diagram_dim: 2048,
            pool_hidden: 1024,
            entropy_hidden: 1024,
            classifier_hidden: 2048,
            dropout: 0.2,
            paragraphs,
            sentences,
            sentence_tokens,
            evidence_spans: 1,
            max_width: 2,
            question_tokens: 40,
            answer_tokens: 20,
            entropy: EntropyMode::Point,
            retrieval: RetrievalScope::Lesson,
            aux_weight: 0.5,
            embeddings: None,
        }
    }

    /// Small dimensions for tests and sketches.
    pub fn tiny(variant: Variant, vocab_size: usize) -> Self {
        Self {
            embed_dim: 4,
            hidden_dim: 6,
            diagram_dim: 5,
            pool_hidden: 5,
            entropy_hidden: 5,
            classifier_hidden: 7,
            ..Self::new(variant, vocab_size)
        }
    }

    pub fn fusion_dim(&self) -> usize {
        self.variant.fusion_blocks() * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("diagram_dim", self.diagram_dim),
            ("pool_hidden", self.pool_hidden),
            ("entropy_hidden", self.entropy_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("paragraphs", self.paragraphs),
            ("sentences", self.sentences),
            ("sentence_tokens", self.sentence_tokens),
            ("evidence_spans", self.evidence_spans),
            ("max_width", self.max_width),
            ("question_tokens", self.question_tokens),
            ("answer_tokens", self.answer_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must cover the reserved ids".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config("aux_weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One question turned into model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub question_id: String,
    pub kind: QuestionKind,
    pub question: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub gold: usize,
    pub context: TruncatedContext,
    /// Paragraph id of each retrieved paragraph, in rank order.
    pub paragraph_ids: Vec<String>,
    /// Text of each kept sentence, per retrieved paragraph.
    pub sentence_text: Vec<Vec<String>>,
    pub diagram: Option<Vec<f64>>,
}

/// Encodes `text` as at most `max` ids; text without tokens becomes a
/// single unknown id so that every sequence has a position to pool.
pub fn encode_text(vocab: &Vocab, text: &str, max: usize) -> Vec<u32> {
    let mut ids = vocab.encode(text);
    ids.truncate(max);
    if ids.is_empty() {
        ids.push(UNK_ID);
    }
    ids
}

/// Reads `token v1 v2 ...` lines. Returns the dimension and the vectors.
pub fn load_embedding_file(path: &Path) -> Result<(usize, HashMap<String, Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dim = None;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        if values.iter().any(|v| !v.is_finite()) || values.is_empty() {
            return Err(Error::invalid(
                format!("{}:{}", path.display(), i + 1),
                "embedding values must be finite and present",
            ));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::invalid(
                    format!("{}:{}", path.display(), i + 1),
                    format!("expected {d} values, found {}", values.len()),
                ))
            }
            _ => {}
        }
        out.insert(token.to_lowercase(), values);
    }
    let dim = dim.ok_or_else(|| Error::Empty(format!("no embeddings in {}", path.display())))?;
    Ok((dim, out))
}

/// Everything the model computed for one question on a tape.
pub struct Forward {
    /// `n x 1` candidate scores.
    pub scores: Var,
    pub probabilities: Vec<f64>,
    pub prediction: usize,
    pub evidence: Evidence,
}

/// All parameters plus the layer layout.
#[derive(Clone, Debug)]
pub struct XtqaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub encoder: Gru,
    pub pool: AttentionPool,
    pub entropy_head: EntropyHead,
    pub diagram_projection: Option<Linear>,
    pub bilinear: Option<BilinearAttention>,
    pub similarity: Linear,
    pub classifier: Mlp,
}

impl XtqaModel {
    /// Builds a freshly initialized model. Weight matrices are uniform in
    /// `+-1/sqrt(fan_in)`, biases zero and embeddings standard normal; the
    /// padding row is zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;

        let mut table: Vec<f64> = (0..c.vocab_size * c.embed_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        table[..c.embed_dim].fill(0.0);
        let embedding = store.add(
            "embedding",
            Tensor::matrix(c.vocab_size, c.embed_dim, table)?,
        );
        let encoder = Gru::new(&mut store, "encoder", c.embed_dim, c.hidden_dim, &mut rng);
        let pool = AttentionPool::new(&mut store, "pool", c.hidden_dim, c.pool_hidden, c.dropout, &mut rng);
        let entropy_head = EntropyHead {
            mlp: Mlp::new(
                &mut store,
                "entropy_head",
                (c.hidden_dim, c.entropy_hidden, 1),
                c.dropout,
                &mut rng,
            ),
            mode: c.entropy,
        };
        let (diagram_projection, bilinear) = match c.variant {
            Variant::Diagram => (
                Some(Linear::new(&mut store, "diagram_projection", c.diagram_dim, c.hidden_dim, true, &mut rng)),
                Some(BilinearAttention::new(&mut store, "bilinear", c.hidden_dim, &mut rng)),
            ),
            Variant::NonDiagram => (None, None),
        };
        let similarity = Linear::new(&mut store, "similarity", c.hidden_dim, c.hidden_dim, false, &mut rng);
        let classifier = Mlp::new(
            &mut store,
            "classifier",
            (c.fusion_dim(), c.classifier_hidden, 1),
            c.dropout,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            embedding,
            encoder,
            pool,
            entropy_head,
            diagram_projection,
            bilinear,
            similarity,
            classifier,
        })
    }

    /// Overwrites embedding rows of tokens found in `vectors`. Returns how
    /// many rows were replaced.
    pub fn load_embeddings(&mut self, vocab: &Vocab, dim: usize, vectors: &HashMap<String, Vec<f64>>) -> Result<usize> {
        if dim != self.config.embed_dim {
            return Err(Error::Config(format!(
                "embedding file has dimension {dim}, model expects {}",
                self.config.embed_dim
            )));
        }
        let table = &mut self.store.get_mut(self.embedding).value;
        let mut replaced = 0;
        for id in 2..vocab.len() as u32 {
            let token = vocab.token(id).expect("id in range");
            if let Some(v) = vectors.get(token) {
                table.row_mut(id as usize).copy_from_slice(v);
                replaced += 1;
            }
        }
        Ok(replaced)
    }

    /// Runs the shared encoder over several id sequences at once. Returns
    /// the per-position states (`batch * steps` rows, row `b * steps + t`),
    /// the pooled vectors (`batch x hidden`) and `steps`.
    pub fn encode(&self, tape: &mut Tape<'_>, seqs: &[&[u32]], mode: &mut Mode) -> Result<(Var, Var, usize)> {
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if steps == 0 || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("cannot encode an empty sequence".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * steps);
        let mut mask = Vec::with_capacity(seqs.len() * steps);
        for s in seqs {
            for t in 0..steps {
                let id = s.get(t).copied();
                if id.is_some_and(|i| i as usize >= self.config.vocab_size) {
                    return Err(Error::Shape(format!("token id {} outside vocabulary", id.unwrap())));
                }
                ids.push(id.unwrap_or(PAD_ID) as usize);
                mask.push(id.is_some());
            }
        }
        let table = tape.param(self.embedding);
        let x = tape.rows(table, &ids)?;
        let states = self.encoder.forward(tape, x, &mask, seqs.len())?;
        let pooled = self.pool.forward_batch(tape, states, &mask, seqs.len(), mode)?;
        Ok((states, pooled, steps))
    }

    /// `W_d d + b_d`.
    pub fn project_diagram(&self, tape: &mut Tape<'_>, raw: Var) -> Result<Var> {
        let proj = self
            .diagram_projection
            .as_ref()
            .ok_or_else(|| Error::Config("non-diagram model has no diagram projection".into()))?;
        if tape.value(raw).len() != self.config.diagram_dim {
            return Err(Error::Shape(format!(
                "diagram feature has {} entries, expected {}",
                tape.value(raw).len(),
                self.config.diagram_dim
            )));
        }
        proj.forward(tape, raw)
    }

    /// Fusion features for every candidate, one row each.
    ///
    /// Without a diagram the blocks are `[q; a; e; Wq*Wa; Wq*We; We*Wa]`.
    /// With a diagram they are `[q; d; a; e; b; Wq*Wa; Wq*We; We*Wa;
    /// Wq*Wa*b]`, where `b` is bilinear attention between the question
    /// positions and the projected diagram.
    pub fn fuse(
        &self,
        tape: &mut Tape<'_>,
        question_states: Var,
        question: Var,
        diagram: Option<Var>,
        answers: Var,
        evidence: Var,
    ) -> Result<Var> {
        let n = tape.value(answers).rows();
        let wq = self.similarity.forward(tape, question)?;
        let wa = self.similarity.forward(tape, answers)?;
        let we = self.similarity.forward(tape, evidence)?;
        let wq_rows = tape.broadcast_rows(wq, n)?;
        let we_rows = tape.broadcast_rows(we, n)?;
        let gamma = tape.mul(wq_rows, wa)?;
        let mu = tape.mul(wq, we)?;
        let mu_rows = tape.broadcast_rows(mu, n)?;
        let eta = tape.mul(we_rows, wa)?;
        let q_rows = tape.broadcast_rows(question, n)?;
        let e_rows = tape.broadcast_rows(evidence, n)?;
        match (self.config.variant, diagram) {
            (Variant::NonDiagram, None) => {
                tape.concat_cols(&[q_rows, answers, e_rows, gamma, mu_rows, eta])
            }
            (Variant::Diagram, Some(d)) => {
                let bilinear = self.bilinear.as_ref().expect("diagram model has bilinear block");
                let d_row = tape.broadcast_rows(d, 1)?;
                let beta = bilinear.forward(tape, question_states, d_row)?;
                let beta_rows = tape.broadcast_rows(beta, n)?;
                let psi = tape.mul(gamma, beta_rows)?;
                let d_rows = tape.broadcast_rows(d, n)?;
                tape.concat_cols(&[q_rows, d_rows, answers, e_rows, beta_rows, gamma, mu_rows, eta, psi])
            }
            (v, d) => Err(Error::Config(format!(
                "{v} model given {} diagram input",
                if d.is_some() { "a" } else { "no" }
            ))),
        }
    }

    /// Full forward pass for one question.
    pub fn forward(&self, tape: &mut Tape<'_>, ex: &Prepared, mode: &mut Mode) -> Result<Forward> {
        Ok(self.forward_batch(tape, &[ex], mode)?.pop().expect("one example in, one out"))
    }

    /// Forward passes for several questions sharing one encoder call and
    /// one classifier call. Each question's outputs depend only on its own
    /// inputs; batching only changes the order dropout masks are drawn.
    pub fn forward_batch(&self, tape: &mut Tape<'_>, exs: &[&Prepared], mode: &mut Mode) -> Result<Vec<Forward>> {
        struct Layout {
            question: usize,
            options: Vec<usize>,
            paragraphs: Vec<Vec<Option<usize>>>,
        }
        let mut seqs: Vec<&[u32]> = Vec::new();
        let mut layouts = Vec::with_capacity(exs.len());
        for ex in exs {
            if ex.options.len() < 2 {
                return Err(Error::invalid(&ex.question_id, "fewer than two candidates"));
            }
            let question = seqs.len();
            seqs.push(&ex.question);
            let options = (0..ex.options.len()).map(|i| question + 1 + i).collect();
            seqs.extend(ex.options.iter().map(Vec::as_slice));
            let mut paragraphs = Vec::with_capacity(ex.context.paragraphs.len());
            for para in &ex.context.paragraphs {
                let mut slots = Vec::with_capacity(para.len());
                for s in para {
                    if s.len == 0 {
                        slots.push(None);
                    } else {
                        slots.push(Some(seqs.len()));
                        seqs.push(&s.ids[..s.len]);
                    }
                }
                paragraphs.push(slots);
            }
            layouts.push(Layout {
                question,
                options,
                paragraphs,
            });
        }
        let (states, pooled, steps) = self.encode(tape, &seqs, mode)?;

        let mut fusions = Vec::with_capacity(exs.len());
        let mut evidences = Vec::with_capacity(exs.len());
        for (ex, layout) in exs.iter().zip(layouts) {
            let question = tape.row(pooled, layout.question)?;
            let answers = tape.rows(pooled, &layout.options)?;
            let sentences = SentenceRows {
                pooled,
                paragraphs: layout.paragraphs,
            };
            let evidence = generate_evidence(
                tape,
                &self.entropy_head,
                &self.pool,
                question,
                &sentences,
                self.config.evidence_spans,
                self.config.max_width,
                mode,
            )
            .map_err(|e| match e {
                Error::EmptyContext(_) => Error::EmptyContext(ex.question_id.clone()),
                other => other,
            })?;

            let diagram = match (&ex.diagram, self.config.variant) {
                (Some(raw), Variant::Diagram) => {
                    let raw = tape.constant(Tensor::vector(raw.clone()));
                    Some(self.project_diagram(tape, raw)?)
                }
                (None, Variant::Diagram) => {
                    return Err(Error::MissingDiagramFeature(ex.question_id.clone()))
                }
                _ => None,
            };
            let question_states = if diagram.is_some() {
                let first = layout.question * steps;
                let idx: Vec<usize> = (first..first + ex.question.len()).collect();
                tape.rows(states, &idx)?
            } else {
                question
            };
            fusions.push(self.fuse(tape, question_states, question, diagram, answers, evidence.pooled)?);
            evidences.push(evidence);
        }

        let stacked = if fusions.len() == 1 {
            fusions[0]
        } else {
            tape.stack_rows(&fusions)?
        };
        let all_scores = self.classifier.forward(tape, stacked, mode)?;
        let mut out = Vec::with_capacity(exs.len());
        let mut offset = 0;
        for (ex, evidence) in exs.iter().zip(evidences) {
            let n = ex.options.len();
            let scores = if exs.len() == 1 {
                all_scores
            } else {
                let idx: Vec<usize> = (offset..offset + n).collect();
                tape.rows(all_scores, &idx)?
            };
            offset += n;
            let probabilities = crate::nn::softmax(tape.value(scores).data());
            let prediction = argmax(&probabilities);
            out.push(Forward {
                scores,
                probabilities,
                prediction,
                evidence,
            });
        }
        Ok(out)
    }

    /// `-ln p[gold] + aux_weight * (BCE(p_q, c) + mean BCE(p_qe, c)) / 2`
    /// with `c = 1` iff the prediction is correct.
    pub fn loss(&self, tape: &mut Tape<'_>, fwd: &Forward, gold: usize) -> Result<Var> {
        let log_p = tape.log_softmax_pick(fwd.scores, gold)?;
        let ce = tape.scale(log_p, -1.0);
        let lambda = self.config.aux_weight;
        if lambda == 0.0 {
            return Ok(ce);
        }
        let correct = fwd.prediction == gold;
        let bce_q = bce(tape, fwd.evidence.p_q, correct)?;
        let mut terms = Vec::with_capacity(fwd.evidence.p_qe.len());
        for &p in &fwd.evidence.p_qe {
            terms.push(bce(tape, p, correct)?);
        }
        let stacked = tape.stack_rows(&terms)?;
        let total = tape.sum(stacked);
        let bce_qe = tape.scale(total, 1.0 / terms.len() as f64);
        let both = tape.add(bce_q, bce_qe)?;
        let aux = tape.scale(both, lambda / 2.0);
        let loss = tape.add(ce, aux)?;
        Ok(loss)
    }
}

fn bce(tape: &mut Tape<'_>, p: Var, label: bool) -> Result<Var> {
    let target = if label {
        p
    } else {
        let neg = tape.scale(p, -1.0);
        let one = tape.constant(Tensor::scalar(1.0));
        tape.add(one, neg)?
    };
    let l = tape.ln(target);
    Ok(tape.scale(l, -1.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
