//! Multiple-choice questionnaires and the answer-code space shared with
//! reference tables.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker used for skipped questions and missing reference cells.
pub const MISSING: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Nominal,
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    /// Canonical value code; joins model output to reference table cells.
    pub code: String,
    pub text: String,
}

impl AnswerOption {
    pub fn new(code: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            text: text.into(),
        }
    }
}

/// Bin edges for a numeric question turned multiple-choice. Answer `i`
/// covers `[edges[i], edges[i + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub edges: Vec<f64>,
    /// Set when the edges are a local choice rather than an established
    /// convention.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub non_canonical: bool,
}

/// Ask a question only when an earlier question was answered with one of
/// `codes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AskIf {
    pub question: String,
    pub codes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub kind: QuestionKind,
    pub answers: Vec<AnswerOption>,
    /// Second-person phrasing ("What is your sex?").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_second_person: Option<String>,
    /// Short descriptor used when summarizing prior answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binning: Option<Binning>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ask_if: Option<AskIf>,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        kind: QuestionKind,
        answers: Vec<AnswerOption>,
    ) -> Result<Self> {
        let q = Self {
            id: id.into(),
            text: text.into(),
            kind,
            answers,
            text_second_person: None,
            summary_label: None,
            binning: None,
            ask_if: None,
        };
        q.validate()?;
        Ok(q)
    }

    /// Number of answer choices.
    pub fn k(&self) -> usize {
        self.answers.len()
    }

    pub fn code_index(&self, code: &str) -> Option<usize> {
        self.answers.iter().position(|a| a.code == code)
    }

    pub fn summary_label(&self) -> &str {
        self.summary_label.as_deref().unwrap_or(&self.id)
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidQuestion {
            question: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::MalformedQuestionnaire("question with empty id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(self.invalid("empty question text"));
        }
        if self.answers.len() < 2 {
            return Err(self.invalid(format!(
                "fewer than 2 answers ({})",
                self.answers.len()
            )));
        }
        let mut seen = HashSet::new();
        for a in &self.answers {
            if a.code.is_empty() {
                return Err(self.invalid("empty answer code"));
            }
            if a.text.trim().is_empty() {
                return Err(self.invalid(format!("answer {} has empty text", a.code)));
            }
            if a.code == MISSING {
                return Err(self.invalid(format!("answer code {MISSING} is reserved")));
            }
            if !seen.insert(a.code.as_str()) {
                return Err(self.invalid(format!("duplicate answer code {}", a.code)));
            }
        }
        if self.kind == QuestionKind::Ordinal {
            let numeric: Option<Vec<f64>> =
                self.answers.iter().map(|a| a.code.parse::<f64>().ok()).collect();
            if let Some(values) = numeric {
                if values.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(self.invalid(
                        "ordinal question lists numeric codes out of order",
                    ));
                }
            }
        }
        if let Some(b) = &self.binning {
            check_edges(&b.edges)?;
            if b.edges.len() != self.answers.len() + 1 {
                return Err(self.invalid(format!(
                    "{} bin edges for {} answers",
                    b.edges.len(),
                    self.answers.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Questionnaire {
    pub name: String,
    questions: Vec<Question>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Questionnaire {
    pub fn new(name: impl Into<String>, questions: Vec<Question>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, q) in questions.iter().enumerate() {
            q.validate()?;
            if index.insert(q.id.clone(), i).is_some() {
                return Err(Error::DuplicateQuestion(q.id.clone()));
            }
        }
        for (i, q) in questions.iter().enumerate() {
            if let Some(cond) = &q.ask_if {
                let j = *index.get(&cond.question).ok_or_else(|| Error::InvalidQuestion {
                    question: q.id.clone(),
                    reason: format!("ask_if refers to unknown question {}", cond.question),
                })?;
                if j >= i {
                    return Err(Error::InvalidQuestion {
                        question: q.id.clone(),
                        reason: format!("ask_if refers to later question {}", cond.question),
                    });
                }
                if let Some(bad) = cond.codes.iter().find(|c| questions[j].code_index(c).is_none()) {
                    return Err(Error::InvalidQuestion {
                        question: q.id.clone(),
                        reason: format!("ask_if code {bad} is not an answer of {}", cond.question),
                    });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            questions,
            index,
        })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.index.get(id).map(|&i| &self.questions[i])
    }

    /// Position of a question in presentation order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.questions.iter().map(|q| q.id.as_str())
    }

    /// Keeps only the listed questions, in questionnaire order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        for id in ids {
            if self.get(id).is_none() {
                return Err(Error::UnknownQuestion(id.clone()));
            }
        }
        let questions = self
            .questions
            .iter()
            .filter(|q| ids.contains(&q.id))
            .cloned()
            .map(|mut q| {
                if q.ask_if.as_ref().is_some_and(|c| !ids.contains(&c.question)) {
                    q.ask_if = None;
                }
                q
            })
            .collect();
        Self::new(self.name.clone(), questions)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_questionnaire(&text)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionnaireDoc {
    name: String,
    questions: Vec<Question>,
}

/// Parses and validates a JSON questionnaire document.
pub fn parse_questionnaire(document: &str) -> Result<Questionnaire> {
    let doc: QuestionnaireDoc = serde_json::from_str(document)
        .map_err(|e| Error::MalformedQuestionnaire(e.to_string()))?;
    Questionnaire::new(doc.name, doc.questions)
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.is_empty()
        || edges.iter().any(|e| !e.is_finite())
        || edges.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::InvalidBinEdges(edges.to_vec()));
    }
    Ok(())
}

/// Index of the half-open bin `[e_i, e_{i+1})` holding `value`.
pub fn bin_index(value: f64, edges: &[f64]) -> Option<usize> {
    if edges.len() < 2 || !(value >= edges[0]) || value >= edges[edges.len() - 1] {
        return None;
    }
    // First edge strictly greater than value, minus one.
    Some(edges.partition_point(|e| *e <= value) - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCounts {
    pub bins: Vec<AnswerOption>,
    pub counts: Vec<usize>,
}

fn format_edge(e: f64) -> String {
    if e.fract() == 0.0 && e.abs() < 1e15 {
        format!("{}", e as i64)
    } else {
        format!("{e}")
    }
}

/// Bins numeric answers into half-open ranges. Bin `i` gets code `i + 1` and
/// a range label. Values outside `[edges[0], edges[last])` are rejected.
pub fn bin_numeric(values: &[f64], edges: &[f64]) -> Result<BinnedCounts> {
    check_edges(edges)?;
    let bins: Vec<AnswerOption> = edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            AnswerOption::new(
                (i + 1).to_string(),
                format!("[{}, {})", format_edge(w[0]), format_edge(w[1])),
            )
        })
        .collect();
    let mut counts = vec![0usize; bins.len()];
    for &v in values {
        let i = bin_index(v, edges).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "value {v} outside binned range [{}, {})",
                edges[0],
                edges[edges.len() - 1]
            ))
        })?;
        counts[i] += 1;
    }
    Ok(BinnedCounts { bins, counts })
}
