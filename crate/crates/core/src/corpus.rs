//! Lesson corpus: JSON-lines loading and validation, tokenization, the
//! vocabulary, and precomputed diagram feature vectors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionKind {
    #[serde(rename = "tf")]
    TrueFalse,
    #[serde(rename = "mc")]
    MultipleChoice,
    #[serde(rename = "diagram")]
    Diagram,
}

impl QuestionKind {
    /// Allowed option counts, inclusive.
    pub fn option_range(self) -> (usize, usize) {
        match self {
            QuestionKind::TrueFalse => (2, 2),
            QuestionKind::MultipleChoice => (2, 7),
            QuestionKind::Diagram => (4, 4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub kind: QuestionKind,
    pub text: String,
    pub options: Vec<AnswerOption>,
    #[serde(rename = "answer")]
    pub gold_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagram_id: Option<String>,
}

impl Question {
    /// Index of the gold option.
    pub fn gold_index(&self) -> usize {
        self.options
            .iter()
            .position(|o| o.label == self.gold_label)
            .expect("validated question has its gold label among the options")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub paragraph_id: String,
    pub sentences: Vec<String>,
}

impl Paragraph {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lesson {
    pub lesson_id: String,
    pub title: String,
    pub paragraphs: Vec<Paragraph>,
    pub questions: Vec<Question>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub tf: usize,
    pub mc: usize,
    pub diagram: usize,
}

impl KindCounts {
    pub fn total(&self) -> usize {
        self.tf + self.mc + self.diagram
    }
}

/// Location of a question inside a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuestionRef {
    pub lesson: usize,
    pub question: usize,
}

/// A validated split. Immutable once loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    lessons: Vec<Lesson>,
    questions: Vec<QuestionRef>,
    by_id: HashMap<String, QuestionRef>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.split == other.split && self.lessons == other.lessons
    }
}

impl Dataset {
    /// Validates `lessons` and indexes their questions.
    pub fn from_lessons(split: Split, lessons: Vec<Lesson>) -> Result<Self> {
        let mut lesson_ids = HashSet::new();
        let mut paragraph_ids = HashSet::new();
        let mut by_id = HashMap::new();
        let mut questions = Vec::new();
        for (li, lesson) in lessons.iter().enumerate() {
            if !lesson_ids.insert(lesson.lesson_id.as_str()) {
                return Err(Error::DuplicateId(format!("lesson {}", lesson.lesson_id)));
            }
            validate_lesson(lesson)?;
            for p in &lesson.paragraphs {
                if !paragraph_ids.insert(p.paragraph_id.as_str()) {
                    return Err(Error::DuplicateId(format!("paragraph {}", p.paragraph_id)));
                }
            }
            for (qi, q) in lesson.questions.iter().enumerate() {
                let r = QuestionRef {
                    lesson: li,
                    question: qi,
                };
                if by_id.insert(q.question_id.clone(), r).is_some() {
                    return Err(Error::DuplicateId(format!("question {}", q.question_id)));
                }
                questions.push(r);
            }
        }
        Ok(Self {
            split,
            lessons,
            questions,
            by_id,
        })
    }

    pub fn lessons(&self) -> &[Lesson] {
        &self.lessons
    }

    pub fn lesson(&self, i: usize) -> &Lesson {
        &self.lessons[i]
    }

    /// Every question in file order.
    pub fn question_refs(&self) -> &[QuestionRef] {
        &self.questions
    }

    pub fn question(&self, r: QuestionRef) -> &Question {
        &self.lessons[r.lesson].questions[r.question]
    }

    pub fn find_question(&self, id: &str) -> Option<QuestionRef> {
        self.by_id.get(id).copied()
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn kind_counts(&self) -> KindCounts {
        let mut c = KindCounts::default();
        for &r in &self.questions {
            match self.question(r).kind {
                QuestionKind::TrueFalse => c.tf += 1,
                QuestionKind::MultipleChoice => c.mc += 1,
                QuestionKind::Diagram => c.diagram += 1,
            }
        }
        c
    }

    pub fn num_sentences(&self) -> usize {
        self.lessons
            .iter()
            .flat_map(|l| &l.paragraphs)
            .map(|p| p.sentences.len())
            .sum()
    }

    /// One JSON object per lesson, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        lessons_to_jsonl(&self.lessons)
    }
}

pub fn lessons_to_jsonl(lessons: &[Lesson]) -> String {
    let mut out = String::new();
    for lesson in lessons {
        out.push_str(&serde_json::to_string(lesson).expect("lesson serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, lessons: &[Lesson]) -> Result<()> {
    fs::write(path, lessons_to_jsonl(lessons)).map_err(|e| Error::io(path, e))
}

/// Parses JSON-lines text; blank lines are skipped.
pub fn parse_corpus(text: &str, split: Split, origin: &Path) -> Result<Dataset> {
    let mut lessons = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lesson: Lesson =
            serde_json::from_str(line).map_err(|source| Error::Json { line: i + 1, source })?;
        lessons.push(lesson);
    }
    if lessons.is_empty() {
        return Err(Error::NoLessons(origin.to_path_buf()));
    }
    Dataset::from_lessons(split, lessons)
}

pub fn load_corpus(path: &Path, split: Split) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_corpus(&text, split, path)
}

fn validate_lesson(lesson: &Lesson) -> Result<()> {
    let loc = |what: &str| format!("lesson {}{what}", lesson.lesson_id);
    if lesson.paragraphs.is_empty() {
        return Err(Error::invalid(loc(""), "lesson has no paragraphs"));
    }
    if lesson.questions.is_empty() {
        return Err(Error::invalid(loc(""), "lesson has no questions"));
    }
    for p in &lesson.paragraphs {
        if p.sentences.is_empty() {
            return Err(Error::invalid(
                loc(&format!(", paragraph {}", p.paragraph_id)),
                "paragraph has no sentences",
            ));
        }
        if p.sentences.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::invalid(
                loc(&format!(", paragraph {}", p.paragraph_id)),
                "empty sentence",
            ));
        }
    }
    for q in &lesson.questions {
        validate_question(q).map_err(|reason| {
            Error::invalid(loc(&format!(", question {}", q.question_id)), reason)
        })?;
    }
    Ok(())
}

fn validate_question(q: &Question) -> std::result::Result<(), String> {
    let (lo, hi) = q.kind.option_range();
    let n = q.options.len();
    if n < lo || n > hi {
        return Err(format!(
            "{:?} question needs {lo}..={hi} options, has {n}",
            q.kind
        ));
    }
    for (i, o) in q.options.iter().enumerate() {
        let expected = (b'a' + i as u8) as char;
        if o.label != expected.to_string() {
            return Err(format!(
                "option labels must run a, b, c, ...; found {:?} at position {}",
                o.label,
                i + 1
            ));
        }
    }
    if !q.options.iter().any(|o| o.label == q.gold_label) {
        return Err(format!("answer {:?} is not an option label", q.gold_label));
    }
    match (q.kind, &q.diagram_id) {
        (QuestionKind::Diagram, None) => Err("diagram question without diagram_id".into()),
        (QuestionKind::Diagram, Some(_)) => Ok(()),
        (_, Some(_)) => Err("diagram_id on a non-diagram question".into()),
        (_, None) => Ok(()),
    }
}

/// Lowercases and splits on every maximal run of non-alphanumeric
/// characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Token ids. Id 0 is padding and id 1 the unknown token; every other id
/// maps to exactly one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds from tokens already in id order (first token gets id 2).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32 + 2).is_some() {
                return Err(Error::DuplicateId(format!("vocabulary token {t}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Number of ids including the two reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            UNK_ID => Some("<unk>"),
            _ => self.tokens.get(id as usize - 2).map(String::as_str),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|source| Error::Json { line: 1, source })?;
        Self::from_tokens(file.tokens)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Counts every token the model reads (sentences, question and option
/// text) and assigns ids by descending frequency, ties broken
/// lexicographically. Tokens below `min_freq` map to the unknown id.
/// Callers pass the training split only.
pub fn build_vocab(train: &Dataset, min_freq: usize) -> Vocab {
    assert!(min_freq >= 1, "min_freq must be at least 1");
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut add = |text: &str| {
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
    };
    for lesson in train.lessons() {
        for p in &lesson.paragraphs {
            for s in &p.sentences {
                add(s);
            }
        }
        for q in &lesson.questions {
            add(&q.text);
            for o in &q.options {
                add(&o.text);
            }
        }
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
        .expect("counted tokens are distinct")
}

const FEATURE_MAGIC: &[u8; 4] = b"XTQD";
const FEATURE_VERSION: u32 = 1;
pub const DEFAULT_DIAGRAM_DIM: usize = 2048;

/// Precomputed diagram feature vectors keyed by diagram id.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagramFeatureStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl DiagramFeatureStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::FeatureFormat("dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            vectors: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::FeatureFormat(format!(
                "vector for {id} has {} entries, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::FeatureFormat(format!("non-finite value for {id}")));
        }
        if self.vectors.contains_key(&id) {
            return Err(Error::DuplicateId(format!("diagram {id}")));
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.vectors
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingDiagramFeature(id.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vectors.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, v) in &self.vectors {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != FEATURE_MAGIC {
            return Err(Error::FeatureFormat("magic mismatch".into()));
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::FeatureFormat(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let mut store = Self::new(dim)?;
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::FeatureFormat("diagram id is not UTF-8".into()))?
                .to_string();
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(r.f32()? as f64);
            }
            store.insert(id, v)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::FeatureFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_diagram_features(path: &Path) -> Result<DiagramFeatureStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DiagramFeatureStore::from_bytes(&bytes)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::FeatureFormat("truncated payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
