//! Seeded synthetic lessons with planted evidence.
//!
//! Every sentence reads `the A of the E is V.` with words drawn from a pool
//! of pseudo-words. A question asks `what is the A of the E?`; its gold
//! option is `V` and its distractors are values from other lessons. The
//! sentence holding `V` is recorded as the gold evidence. Attribute and
//! entity words are shared across lessons while values differ, so an answer
//! can only be read from the lesson, not recalled from the question.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{lessons_to_jsonl, AnswerOption, Lesson, Paragraph, Question, QuestionKind};
use crate::error::{Error, Result};

const TEMPLATE_WORDS: [&str; 4] = ["the", "of", "is", "what"];
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub lessons: usize,
    /// Size of the pseudo-word pool.
    pub vocab_size: usize,
    pub seed: u64,
    pub paragraphs_per_lesson: usize,
    pub sentences_per_paragraph: usize,
    pub questions_per_lesson: usize,
    pub options: usize,
    /// Fraction of lessons, taken from the end, that form the validation
    /// split.
    pub val_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            lessons: 200,
            vocab_size: 500,
            seed: 1,
            paragraphs_per_lesson: 3,
            sentences_per_paragraph: 5,
            questions_per_lesson: 1,
            options: 4,
            val_fraction: 0.2,
        }
    }
}

/// Where a question's answer was planted. `sentence` is 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEvidence {
    pub paragraph_id: String,
    pub sentence: usize,
}

pub type GoldMap = BTreeMap<String, GoldEvidence>;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<Lesson>,
    pub val: Vec<Lesson>,
    pub gold: GoldMap,
}

impl SynthCorpus {
    /// Writes `train.jsonl`, `val.jsonl` and `gold.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("train.jsonl", lessons_to_jsonl(&self.train))?;
        write("val.jsonl", lessons_to_jsonl(&self.val))?;
        write(
            "gold.json",
            serde_json::to_string_pretty(&self.gold).expect("gold map serializes") + "\n",
        )
    }
}

pub fn load_gold(path: &Path) -> Result<GoldMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { line: 1, source })
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if !TEMPLATE_WORDS.contains(&w.as_str()) && seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

struct Fact {
    paragraph: usize,
    sentence: usize,
    attribute: usize,
    entity: usize,
    value: usize,
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.lessons == 0 {
        return Err(Error::Config("at least one lesson is required".into()));
    }
    if config.vocab_size < 20 {
        return Err(Error::Config("the word pool needs at least 20 words".into()));
    }
    if config.options < 2 || config.questions_per_lesson == 0 {
        return Err(Error::Config("need at least two options and one question".into()));
    }
    if config.sentences_per_paragraph == 0 || config.paragraphs_per_lesson == 0 {
        return Err(Error::Config("lessons need paragraphs and sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let words = pseudo_words(config.vocab_size, &mut rng);

    // Three words per sentence, all distinct inside a lesson, leaving room
    // for distractors from outside the lesson.
    let spare = config.options - 1;
    let max_sentences = (config.vocab_size - spare) / 3;
    let per_para = config.sentences_per_paragraph.min(max_sentences);
    let paragraphs = config.paragraphs_per_lesson.min(max_sentences / per_para).max(1);
    let facts_per_lesson = paragraphs * per_para;
    let questions = config.questions_per_lesson.min(facts_per_lesson);

    // Attributes and entities come from two small shared pools, so the same
    // question recurs across lessons with different answers; values take
    // the rest of the words.
    let names = (config.vocab_size / 16)
        .max(facts_per_lesson)
        .min((config.vocab_size - facts_per_lesson - spare) / 2);
    let attributes: Vec<usize> = (0..names).collect();
    let entities: Vec<usize> = (names..2 * names).collect();
    let values: Vec<usize> = (2 * names..words.len()).collect();

    let mut lesson_facts = Vec::with_capacity(config.lessons);
    for _ in 0..config.lessons {
        let a: Vec<&usize> = attributes.choose_multiple(&mut rng, facts_per_lesson).collect();
        let e: Vec<&usize> = entities.choose_multiple(&mut rng, facts_per_lesson).collect();
        let v: Vec<&usize> = values.choose_multiple(&mut rng, facts_per_lesson).collect();
        let facts: Vec<Fact> = (0..facts_per_lesson)
            .map(|i| Fact {
                paragraph: i / per_para,
                sentence: i % per_para,
                attribute: *a[i],
                entity: *e[i],
                value: *v[i],
            })
            .collect();
        lesson_facts.push(facts);
    }

    let mut lessons = Vec::with_capacity(config.lessons);
    let mut gold = GoldMap::new();
    for (li, facts) in lesson_facts.iter().enumerate() {
        let lesson_id = format!("L{:04}", li + 1);
        let paras: Vec<Paragraph> = (0..paragraphs)
            .map(|p| Paragraph {
                paragraph_id: format!("{lesson_id}.p{}", p + 1),
                sentences: facts
                    .iter()
                    .filter(|f| f.paragraph == p)
                    .map(|f| {
                        format!(
                            "The {} of the {} is {}.",
                            words[f.attribute], words[f.entity], words[f.value]
                        )
                    })
                    .collect(),
            })
            .collect();
        let in_lesson: BTreeSet<usize> = facts
            .iter()
            .flat_map(|f| [f.attribute, f.entity, f.value])
            .collect();
        let asked = rand::seq::index::sample(&mut rng, facts.len(), questions).into_vec();
        let mut qs = Vec::with_capacity(questions);
        for (qi, &fi) in asked.iter().enumerate() {
            let fact = &facts[fi];
            let question_id = format!("{lesson_id}.q{}", qi + 1);
            // Distractors: values planted in other lessons when there are
            // any, otherwise any word outside this lesson.
            let mut pool: Vec<usize> = lesson_facts
                .iter()
                .enumerate()
                .filter(|&(other, _)| other != li)
                .flat_map(|(_, fs)| fs.iter().map(|f| f.value))
                .filter(|w| !in_lesson.contains(w))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if pool.len() < spare {
                pool = (0..words.len()).filter(|w| !in_lesson.contains(w)).collect();
            }
            let mut choices: Vec<usize> = pool.choose_multiple(&mut rng, spare).copied().collect();
            let gold_pos = rng.gen_range(0..config.options);
            choices.insert(gold_pos, fact.value);
            let options = choices
                .iter()
                .enumerate()
                .map(|(i, &w)| AnswerOption {
                    label: ((b'a' + i as u8) as char).to_string(),
                    text: words[w].clone(),
                })
                .collect();
            gold.insert(
                question_id.clone(),
                GoldEvidence {
                    paragraph_id: paras[fact.paragraph].paragraph_id.clone(),
                    sentence: fact.sentence + 1,
                },
            );
            qs.push(Question {
                question_id,
                kind: QuestionKind::MultipleChoice,
                text: format!("What is the {} of the {}?", words[fact.attribute], words[fact.entity]),
                options,
                gold_label: ((b'a' + gold_pos as u8) as char).to_string(),
                diagram_id: None,
            });
        }
        lessons.push(Lesson {
            lesson_id: lesson_id.clone(),
            title: format!("Synthetic lesson {}", li + 1),
            paragraphs: paras,
            questions: qs,
        });
    }

    let n_val = ((config.lessons as f64) * config.val_fraction).round() as usize;
    let n_val = n_val.min(config.lessons.saturating_sub(1));
    let val = lessons.split_off(config.lessons - n_val);
    Ok(SynthCorpus {
        train: lessons,
        val,
        gold,
    })
}
