//! Accuracy per question kind and the evidence hit rate.

use serde::{Deserialize, Serialize, Serializer};

use super::synthetic::GoldMap;
use crate::corpus::QuestionKind;
use crate::error::{Error, Result};
use crate::evidence::SpanIndex;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn record(&mut self, correct: bool) {
        self.total += 1;
        self.correct += correct as usize;
    }

    pub fn merge(self, other: Tally) -> Tally {
        Tally {
            correct: self.correct + other.correct,
            total: self.total + other.total,
        }
    }

    /// `100 * correct / total`, or `None` for an empty tally.
    pub fn percent(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

/// Counts per question kind. Aggregate accuracies are derived from the
/// counts, never averaged from percentages.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricsReport {
    pub tf: Tally,
    pub mc: Tally,
    pub diagram: Tally,
    /// Hits among correctly answered questions, when gold evidence is known.
    pub evidence: Option<Tally>,
}

impl MetricsReport {
    pub fn record(&mut self, kind: QuestionKind, correct: bool) {
        match kind {
            QuestionKind::TrueFalse => self.tf.record(correct),
            QuestionKind::MultipleChoice => self.mc.record(correct),
            QuestionKind::Diagram => self.diagram.record(correct),
        }
    }

    pub fn nondiagram(&self) -> Tally {
        self.tf.merge(self.mc)
    }

    pub fn all(&self) -> Tally {
        self.nondiagram().merge(self.diagram)
    }

    pub fn tf_acc(&self) -> Option<f64> {
        self.tf.percent()
    }

    pub fn mc_acc(&self) -> Option<f64> {
        self.mc.percent()
    }

    pub fn nondiagram_acc(&self) -> Option<f64> {
        self.nondiagram().percent()
    }

    pub fn diagram_acc(&self) -> Option<f64> {
        self.diagram.percent()
    }

    pub fn all_acc(&self) -> Option<f64> {
        self.all().percent()
    }

    pub fn evidence_hit_rate(&self) -> Option<f64> {
        self.evidence.and_then(|t| t.percent())
    }

    /// Combines reports of disjoint question sets, such as the outputs of a
    /// text model and a diagram model on one split.
    pub fn merge(&self, other: &MetricsReport) -> MetricsReport {
        MetricsReport {
            tf: self.tf.merge(other.tf),
            mc: self.mc.merge(other.mc),
            diagram: self.diagram.merge(other.diagram),
            evidence: match (self.evidence, other.evidence) {
                (Some(a), Some(b)) => Some(a.merge(b)),
                (a, b) => a.or(b),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ReportJson::from(self)).expect("report serializes")
    }
}

fn two_decimals<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64((x * 100.0).round() / 100.0),
        None => s.serialize_none(),
    }
}

#[derive(Serialize)]
struct ReportJson {
    #[serde(serialize_with = "two_decimals")]
    tf_acc: Option<f64>,
    #[serde(serialize_with = "two_decimals")]
    mc_acc: Option<f64>,
    #[serde(serialize_with = "two_decimals")]
    nondiagram_acc: Option<f64>,
    #[serde(serialize_with = "two_decimals")]
    diagram_acc: Option<f64>,
    #[serde(serialize_with = "two_decimals")]
    all_acc: Option<f64>,
    #[serde(serialize_with = "two_decimals")]
    evidence_hit_rate: Option<f64>,
    counts: Counts,
}

#[derive(Serialize)]
struct Counts {
    tf: Tally,
    mc: Tally,
    nondiagram: Tally,
    diagram: Tally,
    all: Tally,
    #[serde(skip_serializing_if = "Option::is_none")]
    evidence: Option<Tally>,
}

impl From<&MetricsReport> for ReportJson {
    fn from(r: &MetricsReport) -> Self {
        Self {
            tf_acc: r.tf_acc(),
            mc_acc: r.mc_acc(),
            nondiagram_acc: r.nondiagram_acc(),
            diagram_acc: r.diagram_acc(),
            all_acc: r.all_acc(),
            evidence_hit_rate: r.evidence_hit_rate(),
            counts: Counts {
                tf: r.tf,
                mc: r.mc,
                nondiagram: r.nondiagram(),
                diagram: r.diagram,
                all: r.all(),
                evidence: r.evidence,
            },
        }
    }
}

/// One selected span resolved to its paragraph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSpan {
    pub paragraph_id: String,
    pub start: usize,
    pub end: usize,
    pub gain: f64,
    pub text: String,
}

impl EvidenceSpan {
    pub fn contains(&self, paragraph_id: &str, sentence: usize) -> bool {
        self.paragraph_id == paragraph_id
            && SpanIndex {
                paragraph_rank: 0,
                start: self.start,
                end: self.end,
            }
            .contains(sentence)
    }
}

/// The answer and explanation for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub question_id: String,
    pub predicted_label: String,
    pub evidence: Vec<EvidenceSpan>,
}

/// Hits over correctly answered questions: a hit means some selected span
/// of the right paragraph contains the planted sentence.
pub fn evidence_tally<'a>(
    answered: impl IntoIterator<Item = (&'a Explanation, bool)>,
    gold: &GoldMap,
) -> Result<Tally> {
    let mut tally = Tally::default();
    for (exp, correct) in answered {
        if !correct {
            continue;
        }
        let g = gold
            .get(&exp.question_id)
            .ok_or_else(|| Error::UnknownQuestion(format!("{} has no gold evidence", exp.question_id)))?;
        tally.record(exp.evidence.iter().any(|s| s.contains(&g.paragraph_id, g.sentence)));
    }
    Ok(tally)
}

/// Percentage form of [`evidence_tally`]; `None` when nothing was answered
/// correctly.
pub fn evidence_hit_rate<'a>(
    answered: impl IntoIterator<Item = (&'a Explanation, bool)>,
    gold: &GoldMap,
) -> Result<Option<f64>> {
    Ok(evidence_tally(answered, gold)?.percent())
}
