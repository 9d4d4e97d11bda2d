//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xtqa::corpus::{build_vocab, Dataset, QuestionKind, Split};
use xtqa::evidence::{
    entropy, generate_evidence, info_gain, EntropyHead, EntropyMode, SentenceRows, SpanIndex,
};
use xtqa::model::{ModelConfig, Prepared, Variant, XtqaModel};
use xtqa::nn::gradcheck::{check_params, GradCheckReport};
use xtqa::nn::{AttentionPool, BilinearAttention, Gru, Mlp, Mode, ParamId, ParamStore, Tape, Tensor, Var};
use xtqa::pipeline::{self, generate_synthetic, MetricsReport, SynthConfig, Tally, TrainConfig, TrainData};

pub const STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, uniform(rng, rows * cols, 1.0)).unwrap()
}

/// Replaces every parameter value (zero biases included) with uniform noise.
pub fn scramble(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// `sum(x * w)` for a fixed random `w`, so every output coordinate matters.
pub fn weighted_sum(tape: &mut Tape<'_>, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let w = Tensor::new(shape, uniform(&mut rng(seed), n, 1.0)).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

/// Tape gradients of `loss_fn` checked against central differences over
/// every parameter in `store`.
pub fn check_all(
    store: &mut ParamStore,
    max_per_param: usize,
    loss_fn: impl Fn(&mut Tape<'_>) -> Var,
) -> GradCheckReport {
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape);
        tape.backward(loss).into_params()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    check_params(store, &ids, &analytic, STEP, max_per_param, |s| {
        let mut tape = Tape::new(s);
        let loss = loss_fn(&mut tape);
        tape.value(loss).item()
    })
}

fn gru_case() -> GradCheckReport {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "gru", 3, 4, &mut r);
    let x = store.add("x", random_matrix(&mut r, 6, 3));
    scramble(&mut store, &mut r, 0.8);
    // Two sequences of three steps; the second ends in padding.
    let mask = [true, true, true, true, true, false];
    check_all(&mut store, usize::MAX, |tape| {
        let xv = tape.param(x);
        let h = gru.forward(tape, xv, &mask, 2).unwrap();
        weighted_sum(tape, h, 1)
    })
}

fn attention_pool_case() -> GradCheckReport {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let pool = AttentionPool::new(&mut store, "pool", 4, 5, 0.0, &mut r);
    let h = store.add("h", random_matrix(&mut r, 6, 4));
    scramble(&mut store, &mut r, 0.8);
    let mask = [true, false, true, true, true, true];
    check_all(&mut store, usize::MAX, |tape| {
        let hv = tape.param(h);
        let out = pool.forward_batch(tape, hv, &mask, 2, &mut Mode::eval()).unwrap();
        weighted_sum(tape, out, 2)
    })
}

fn mlp_case() -> GradCheckReport {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", (4, 5, 3), 0.2, &mut r);
    let x = store.add("x", random_matrix(&mut r, 3, 4));
    scramble(&mut store, &mut r, 0.8);
    check_all(&mut store, usize::MAX, |tape| {
        let xv = tape.param(x);
        let y = mlp.forward(tape, xv, &mut Mode::eval()).unwrap();
        weighted_sum(tape, y, 3)
    })
}

fn bilinear_case() -> GradCheckReport {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let att = BilinearAttention::new(&mut store, "bil", 4, &mut r);
    let q = store.add("q", random_matrix(&mut r, 3, 4));
    let d = store.add("d", random_matrix(&mut r, 2, 4));
    scramble(&mut store, &mut r, 0.8);
    check_all(&mut store, usize::MAX, |tape| {
        let (qv, dv) = (tape.param(q), tape.param(d));
        let y = att.forward(tape, qv, dv).unwrap();
        weighted_sum(tape, y, 4)
    })
}

fn avg_pool_case() -> GradCheckReport {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let u = store.add("u", Tensor::vector(uniform(&mut r, 5, 1.0)));
    let v = store.add("v", Tensor::vector(uniform(&mut r, 5, 1.0)));
    let x = store.add("x", random_matrix(&mut r, 2, 6));
    check_all(&mut store, usize::MAX, |tape| {
        let (uv, vv, xv) = (tape.param(u), tape.param(v), tape.param(x));
        let joined = tape.interleave(uv, vv).unwrap();
        let a = tape.avg_pool_pairs(joined).unwrap();
        let b = tape.avg_pool_pairs(xv).unwrap();
        let la = weighted_sum(tape, a, 5);
        let lb = weighted_sum(tape, b, 6);
        tape.add(la, lb).unwrap()
    })
}

fn entropy_head_case(mode: EntropyMode) -> GradCheckReport {
    let mut r = rng(16);
    let mut store = ParamStore::new();
    let head = EntropyHead {
        mlp: Mlp::new(&mut store, "head", (4, 5, 1), 0.2, &mut r),
        mode,
    };
    let pool = AttentionPool::new(&mut store, "pool", 4, 5, 0.2, &mut r);
    let q = store.add("q", Tensor::vector(uniform(&mut r, 4, 1.0)));
    let s = store.add("s", random_matrix(&mut r, 5, 4));
    scramble(&mut store, &mut r, 0.8);
    let rows = vec![vec![Some(0), Some(1), None], vec![Some(2), Some(3), Some(4)]];
    check_all(&mut store, usize::MAX, |tape| {
        let (qv, sv) = (tape.param(q), tape.param(s));
        let sentences = SentenceRows {
            pooled: sv,
            paragraphs: rows.clone(),
        };
        let ev = generate_evidence(tape, &head, &pool, qv, &sentences, 2, 2, &mut Mode::eval()).unwrap();
        let mut terms = vec![weighted_sum(tape, ev.pooled, 7)];
        for p in std::iter::once(ev.p_q).chain(ev.p_qe.iter().copied()) {
            let l = tape.ln(p);
            terms.push(l);
        }
        let stacked = tape.stack_rows(&terms).unwrap();
        tape.sum(stacked)
    })
}

/// A tiny model (embedding 4, hidden 6, diagram 5, three sentences of four
/// tokens) and prepared questions from a small synthetic corpus.
pub fn toy_model(variant: Variant, seed: u64) -> (XtqaModel, Vec<Prepared>) {
    let corpus = generate_synthetic(&SynthConfig {
        lessons: 3,
        vocab_size: 20,
        seed,
        paragraphs_per_lesson: 2,
        sentences_per_paragraph: 3,
        questions_per_lesson: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = Dataset::from_lessons(Split::Train, corpus.train).unwrap();
    let vocab = build_vocab(&ds, 1);
    let mut config = ModelConfig::tiny(Variant::NonDiagram, vocab.len());
    config.sentences = 3;
    config.sentence_tokens = 4;
    config.question_tokens = 6;
    config.answer_tokens = 3;
    let mut prepared = pipeline::prepare(&ds, &vocab, &config, None).unwrap();
    config.variant = variant;
    if variant == Variant::Diagram {
        let mut r = rng(seed ^ 0xd1a9);
        for p in &mut prepared {
            p.kind = QuestionKind::Diagram;
            p.diagram = Some(uniform(&mut r, config.diagram_dim, 1.0));
        }
    }
    let model = XtqaModel::new(config, seed).unwrap();
    (model, prepared)
}

fn fusion_case(variant: Variant) -> GradCheckReport {
    let (mut model, _) = toy_model(variant, 3);
    let mut r = rng(17);
    let d1 = model.config.hidden_dim;
    let mut store = std::mem::take(&mut model.store);
    let states = store.add("in.states", random_matrix(&mut r, 3, d1));
    let question = store.add("in.question", Tensor::vector(uniform(&mut r, d1, 1.0)));
    let answers = store.add("in.answers", random_matrix(&mut r, 4, d1));
    let evidence = store.add("in.evidence", Tensor::vector(uniform(&mut r, d1, 1.0)));
    let diagram = store.add("in.diagram", Tensor::vector(uniform(&mut r, model.config.diagram_dim, 1.0)));
    check_all(&mut store, 40, |tape| {
        let (s, q, a, e) = (
            tape.param(states),
            tape.param(question),
            tape.param(answers),
            tape.param(evidence),
        );
        let d = (variant == Variant::Diagram).then(|| {
            let raw = tape.param(diagram);
            model.project_diagram(tape, raw).unwrap()
        });
        let f = model.fuse(tape, s, q, d, a, e).unwrap();
        weighted_sum(tape, f, 8)
    })
}

fn classifier_case() -> GradCheckReport {
    let (mut model, _) = toy_model(Variant::NonDiagram, 4);
    let mut r = rng(18);
    let width = model.config.fusion_dim();
    let mut store = std::mem::take(&mut model.store);
    let fused = store.add("in.fused", random_matrix(&mut r, 4, width));
    check_all(&mut store, 60, |tape| {
        let x = tape.param(fused);
        let scores = model.classifier.forward(tape, x, &mut Mode::eval()).unwrap();
        let lp = tape.log_softmax_pick(scores, 2).unwrap();
        tape.scale(lp, -1.0)
    })
}

fn full_model_case(variant: Variant) -> GradCheckReport {
    let (mut model, prepared) = toy_model(variant, 5);
    let mut store = std::mem::take(&mut model.store);
    let ex = &prepared[0];
    check_all(&mut store, 60, |tape| {
        let fwd = model.forward(tape, ex, &mut Mode::eval()).unwrap();
        model.loss(tape, &fwd, ex.gold).unwrap()
    })
}

/// Every layer and the composed model, by name.
pub fn gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("gru", gru_case()),
        ("attention_pool", attention_pool_case()),
        ("mlp", mlp_case()),
        ("bilinear_attention", bilinear_case()),
        ("avg_pool", avg_pool_case()),
        ("entropy_head_point", entropy_head_case(EntropyMode::Point)),
        ("entropy_head_bernoulli", entropy_head_case(EntropyMode::Bernoulli)),
        ("fusion_text", fusion_case(Variant::NonDiagram)),
        ("fusion_diagram", fusion_case(Variant::Diagram)),
        ("classifier", classifier_case()),
        ("model_text", full_model_case(Variant::NonDiagram)),
        ("model_diagram", full_model_case(Variant::Diagram)),
    ]
}

/// Step-by-step scalar GRU: `z = s(W_z [x; h] + b_z)`, `r = s(W_r [x; h] +
/// b_r)`, `n = tanh(W_n [x; r h] + b_n)`, `h' = (1 - z) n + z h`, holding `h`
/// on padded steps.
pub fn gru_oracle(store: &ParamStore, gru: &Gru, xs: &[Vec<f64>], mask: &[bool]) -> Vec<Vec<f64>> {
    let p = &gru.params;
    let hid = p.hidden_dim;
    let w = |id: ParamId| store.value(id).data().to_vec();
    let (wz, wr, wn) = (w(p.w_update), w(p.w_reset), w(p.w_candidate));
    let (bz, br, bn) = (w(p.b_update), w(p.b_reset), w(p.b_candidate));
    let stride = p.input_dim + hid;
    let affine = |m: &[f64], b: &[f64], v: &[f64], j: usize| -> f64 {
        b[j] + (0..stride).map(|k| m[j * stride + k] * v[k]).sum::<f64>()
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = vec![0.0; hid];
    let mut out = Vec::new();
    for (x, &live) in xs.iter().zip(mask) {
        if live {
            let xh: Vec<f64> = x.iter().chain(&h).copied().collect();
            let z: Vec<f64> = (0..hid).map(|j| sig(affine(&wz, &bz, &xh, j))).collect();
            let r: Vec<f64> = (0..hid).map(|j| sig(affine(&wr, &br, &xh, j))).collect();
            let xrh: Vec<f64> = x.iter().copied().chain((0..hid).map(|j| r[j] * h[j])).collect();
            let n: Vec<f64> = (0..hid).map(|j| affine(&wn, &bn, &xrh, j).tanh()).collect();
            h = (0..hid).map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j]).collect();
        }
        out.push(h.clone());
    }
    out
}

/// Dense TF-IDF ranking over whitespace-separated lowercase terms: every
/// document and the query become full vectors over the sorted term list.
pub fn dense_top_m(docs: &[String], query: &str, m: usize) -> Vec<(usize, f64)> {
    let terms: Vec<String> = {
        let mut t: Vec<String> = docs.iter().flat_map(|d| d.split_whitespace().map(str::to_string)).collect();
        t.sort();
        t.dedup();
        t
    };
    let count = |text: &str, term: &str| text.split_whitespace().filter(|w| *w == term).count() as f64;
    let n = docs.len() as f64;
    let idf: Vec<f64> = terms
        .iter()
        .map(|t| {
            let df = docs.iter().filter(|d| count(d, t) > 0.0).count() as f64;
            ((1.0 + n) / (1.0 + df)).ln() + 1.0
        })
        .collect();
    let vectors: Vec<Vec<f64>> = docs
        .iter()
        .map(|d| terms.iter().zip(&idf).map(|(t, i)| count(d, t) * i).collect())
        .collect();
    let q: Vec<f64> = terms.iter().zip(&idf).map(|(t, i)| count(query, t) * i).collect();
    let want = m.min(docs.len());
    let norm = |v: &[f64]| v.iter().filter(|x| **x != 0.0).map(|x| x * x).sum::<f64>().sqrt();
    let q_norm = norm(&q);
    if q_norm == 0.0 {
        return (0..want).map(|d| (d, 0.0)).collect();
    }
    let mut scored: Vec<(usize, f64)> = vectors
        .iter()
        .enumerate()
        .map(|(d, v)| {
            let dot: f64 = q.iter().zip(v).filter(|(a, _)| **a != 0.0).map(|(a, b)| a * b).sum();
            (d, if dot > 0.0 { dot / (q_norm * norm(v)) } else { 0.0 })
        })
        .collect();
    // Stable sort: equal scores keep position order, zero scores trail.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(want);
    scored
}

/// A random corpus over at most 30 terms `t0..t29`, with some duplicated
/// documents so that ties occur.
pub fn random_corpus(r: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let vocab = r.gen_range(1..=30);
    let n = r.gen_range(1..=50);
    let mut docs: Vec<String> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && r.gen_bool(0.15) {
            let j = r.gen_range(0..i);
            docs.push(docs[j].clone());
            continue;
        }
        let len = r.gen_range(1..=12);
        let words: Vec<String> = (0..len).map(|_| format!("t{}", r.gen_range(0..vocab))).collect();
        docs.push(words.join(" "));
    }
    let queries = (0..5)
        .map(|_| {
            let len = r.gen_range(1..=6);
            // Terms up to t34 so that some query terms are unindexed.
            (0..len).map(|_| format!("t{}", r.gen_range(0..vocab + 5))).collect::<Vec<_>>().join(" ")
        })
        .collect();
    (docs, queries)
}

/// Exhaustive span enumeration by filtering every pair of sentences.
pub fn brute_spans(len: usize, max_width: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in 1..=len {
        for e in 1..=len {
            if s <= e && e - s < max_width {
                out.push((s, e));
            }
        }
    }
    out
}

/// A random entropy head and pooling layer in their own store.
pub fn random_head(r: &mut ChaCha8Rng, dim: usize, mode: EntropyMode) -> (ParamStore, EntropyHead, AttentionPool) {
    let mut store = ParamStore::new();
    let head = EntropyHead {
        mlp: Mlp::new(&mut store, "head", (dim, 8, 1), 0.2, r),
        mode,
    };
    let pool = AttentionPool::new(&mut store, "pool", dim, 4, 0.2, r);
    scramble(&mut store, r, 1.0);
    (store, head, pool)
}

/// One random selection instance: per-paragraph sentence slots (some
/// empty), the stacked non-empty rows and a question vector. Rows are drawn
/// from a small pool so that equal gains occur.
pub struct SelectionCase {
    pub paragraphs: Vec<Vec<Option<usize>>>,
    pub rows: Vec<Vec<f64>>,
    pub question: Vec<f64>,
}

pub fn random_selection_case(r: &mut ChaCha8Rng, dim: usize, max_sentences: usize) -> SelectionCase {
    let pool: Vec<Vec<f64>> = (0..r.gen_range(2..=6)).map(|_| uniform(r, dim, 1.0)).collect();
    let total = r.gen_range(1..=max_sentences);
    let paragraph_count = r.gen_range(1..=total.min(3));
    let mut sizes = vec![1; paragraph_count];
    for _ in paragraph_count..total {
        sizes[r.gen_range(0..paragraph_count)] += 1;
    }
    let mut rows = Vec::new();
    let mut paragraphs = Vec::new();
    for size in sizes {
        let mut slots = Vec::new();
        for _ in 0..size {
            if r.gen_bool(0.15) {
                slots.push(None);
            } else {
                slots.push(Some(rows.len()));
                rows.push(pool[r.gen_range(0..pool.len())].clone());
            }
        }
        paragraphs.push(slots);
    }
    if rows.is_empty() {
        paragraphs[0][0] = Some(0);
        rows.push(pool[0].clone());
    }
    SelectionCase {
        paragraphs,
        rows,
        question: uniform(r, dim, 1.0),
    }
}

/// Scores every candidate with the head's value-level readings and sorts
/// by gain, then paragraph rank, start and width.
pub fn exhaustive_selection(
    store: &ParamStore,
    head: &EntropyHead,
    case: &SelectionCase,
    max_width: usize,
    k: usize,
) -> Vec<(SpanIndex, f64)> {
    let (h_q, _) = head.entropy_q(store, &case.question).unwrap();
    let mut scored = Vec::new();
    for (rank, slots) in case.paragraphs.iter().enumerate() {
        for (s, e) in brute_spans(slots.len(), max_width) {
            let (Some(a), Some(b)) = (slots[s - 1], slots[e - 1]) else {
                continue;
            };
            let rep: Vec<f64> = case.rows[a].iter().zip(&case.rows[b]).map(|(x, y)| (x + y) / 2.0).collect();
            let (h_qe, _) = head.cond_entropy(store, &case.question, &rep).unwrap();
            let span = SpanIndex {
                paragraph_rank: rank,
                start: s,
                end: e,
            };
            scored.push((span, info_gain(h_q, h_qe)));
        }
    }
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(a.0.paragraph_rank.cmp(&b.0.paragraph_rank))
            .then(a.0.start.cmp(&b.0.start))
            .then(a.0.end.cmp(&b.0.end))
    });
    scored.truncate(k);
    scored
}

/// Selection made by the library on the same instance.
pub fn library_selection(
    store: &ParamStore,
    head: &EntropyHead,
    pool: &AttentionPool,
    case: &SelectionCase,
    max_width: usize,
    k: usize,
) -> Vec<(SpanIndex, f64)> {
    let mut tape = Tape::new(store);
    let dim = case.question.len();
    let flat: Vec<f64> = case.rows.iter().flatten().copied().collect();
    let pooled = tape.constant(Tensor::matrix(case.rows.len(), dim, flat).unwrap());
    let q = tape.constant(Tensor::vector(case.question.clone()));
    let sentences = SentenceRows {
        pooled,
        paragraphs: case.paragraphs.clone(),
    };
    let ev = generate_evidence(&mut tape, head, pool, q, &sentences, k, max_width, &mut Mode::eval()).unwrap();
    ev.selected_spans().map(|s| (s.span, s.gain)).collect()
}

/// Checks the gain identity on every candidate of random instances until
/// `evaluations` head readings were made; returns the largest deviation.
pub fn gain_identity_deviation(seed: u64, evaluations: usize) -> (usize, f64) {
    let mut r = rng(seed);
    let (mut done, mut worst) = (0, 0.0f64);
    while done < evaluations {
        let (store, head, pool) = random_head(&mut r, 6, EntropyMode::Point);
        let case = random_selection_case(&mut r, 6, 15);
        let mut tape = Tape::new(&store);
        let flat: Vec<f64> = case.rows.iter().flatten().copied().collect();
        let pooled = tape.constant(Tensor::matrix(case.rows.len(), 6, flat).unwrap());
        let q = tape.constant(Tensor::vector(case.question.clone()));
        let sentences = SentenceRows {
            pooled,
            paragraphs: case.paragraphs.clone(),
        };
        let ev = generate_evidence(&mut tape, &head, &pool, q, &sentences, 1, 2, &mut Mode::eval()).unwrap();
        for c in &ev.candidates {
            let expected = c.p_qe.ln() - c.p_q.ln();
            worst = worst.max((c.gain - expected).abs());
            done += 1;
        }
    }
    (done, worst)
}

/// `entropy_q(q)` against `cond_entropy(q, q)` on random heads, both
/// entropy readings; returns the number of mismatches.
pub fn shared_head_mismatches(seed: u64, trials: usize) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for i in 0..trials {
        let mode = if i % 2 == 0 { EntropyMode::Point } else { EntropyMode::Bernoulli };
        let (store, head, _) = random_head(&mut r, 6, mode);
        let q = uniform(&mut r, 6, 2.0);
        let a = head.entropy_q(&store, &q).unwrap();
        let b = head.cond_entropy(&store, &q, &q).unwrap();
        if a != b || a.0 != entropy(a.1, mode) {
            bad += 1;
        }
    }
    bad
}

/// A random fixture: counts per kind and the hand-computed percentages.
pub struct MetricFixture {
    pub outcomes: Vec<(QuestionKind, bool)>,
    pub counts: BTreeMap<&'static str, (usize, usize)>,
}

pub fn random_metric_fixture(r: &mut ChaCha8Rng) -> MetricFixture {
    let kinds = [QuestionKind::TrueFalse, QuestionKind::MultipleChoice, QuestionKind::Diagram];
    let n = r.gen_range(0..60);
    let outcomes: Vec<(QuestionKind, bool)> = (0..n)
        .map(|_| (kinds[r.gen_range(0..3)], r.gen_bool(0.5)))
        .collect();
    let mut counts = BTreeMap::new();
    for (name, kind) in [("tf", kinds[0]), ("mc", kinds[1]), ("diagram", kinds[2])] {
        let of: Vec<bool> = outcomes.iter().filter(|(k, _)| *k == kind).map(|(_, c)| *c).collect();
        counts.insert(name, (of.iter().filter(|c| **c).count(), of.len()));
    }
    MetricFixture { outcomes, counts }
}

pub fn percent(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

/// Builds a report from the fixture and compares every column with the
/// hand-computed value; returns a description of the first difference.
pub fn check_metric_fixture(f: &MetricFixture) -> Option<String> {
    let mut report = MetricsReport::default();
    for &(kind, correct) in &f.outcomes {
        report.record(kind, correct);
    }
    let (tc, tt) = f.counts["tf"];
    let (mc, mt) = f.counts["mc"];
    let (dc, dt) = f.counts["diagram"];
    let expected = [
        ("tf", percent(tc, tt), report.tf_acc()),
        ("mc", percent(mc, mt), report.mc_acc()),
        ("nondiagram", percent(tc + mc, tt + mt), report.nondiagram_acc()),
        ("diagram", percent(dc, dt), report.diagram_acc()),
        ("all", percent(tc + mc + dc, tt + mt + dt), report.all_acc()),
    ];
    for (name, want, got) in expected {
        if want != got {
            return Some(format!("{name}: expected {want:?}, got {got:?}"));
        }
    }
    if report.nondiagram() != (Tally { correct: tc + mc, total: tt + mt }) {
        return Some("nondiagram tally".into());
    }
    // Splitting the questions into two reports and merging gives the same
    // report.
    let cut = f.outcomes.len() / 2;
    let (mut a, mut b) = (MetricsReport::default(), MetricsReport::default());
    for (i, &(kind, correct)) in f.outcomes.iter().enumerate() {
        if i < cut { &mut a } else { &mut b }.record(kind, correct);
    }
    if a.merge(&b) != report {
        return Some("merge differs".into());
    }
    None
}

/// A small, fast training configuration for pipeline tests.
pub fn small_train_config(variant: Variant, vocab_hint: usize) -> TrainConfig {
    let mut c = TrainConfig::new(variant);
    c.model = ModelConfig::tiny(variant, vocab_hint);
    c.model.embed_dim = 8;
    c.model.hidden_dim = 12;
    c.model.sentences = 3;
    c.model.sentence_tokens = 8;
    c.epochs = 2;
    c
}

pub fn small_corpus(seed: u64) -> (Dataset, Dataset, pipeline::GoldMap) {
    let corpus = generate_synthetic(&SynthConfig {
        lessons: 10,
        vocab_size: 60,
        seed,
        paragraphs_per_lesson: 2,
        sentences_per_paragraph: 3,
        questions_per_lesson: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    (
        Dataset::from_lessons(Split::Train, corpus.train).unwrap(),
        Dataset::from_lessons(Split::Val, corpus.val).unwrap(),
        corpus.gold,
    )
}

/// Trains the small configuration into `out` and returns the final
/// validation metrics JSON.
pub fn train_small(out: &Path, seed: u64) -> String {
    let (train, val, gold) = small_corpus(7);
    let mut config = small_train_config(Variant::NonDiagram, 2);
    config.seed = seed;
    config.out = Some(out.to_path_buf());
    let outcome = pipeline::train(
        &config,
        TrainData {
            train: &train,
            val: Some(&val),
            features: None,
            gold: Some(&gold),
        },
        |_| {},
    )
    .unwrap();
    outcome.epochs.last().unwrap().val.as_ref().unwrap().to_json()
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
