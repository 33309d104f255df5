//! A simulated respondent with known content preferences and known labeling
//! and position biases. Its slot probabilities are
//! `softmax((content + label bonus + position bonus) / temperature)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, LabelLogProbs, QueryRequest};
use crate::error::{Error, Result};
use crate::prompt::{LabelSet, Presentation, RenderedPrompt, Slot};
use crate::questionnaire::Question;
use crate::stats::softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    /// Per question, one score per answer in canonical order.
    #[serde(default)]
    pub content: BTreeMap<String, Vec<f64>>,
    /// Bonus added to whichever slot carries the label.
    #[serde(default)]
    pub label_bonus: BTreeMap<String, f64>,
    /// Bonus per slot, first slot first. Missing slots get 0.
    #[serde(default)]
    pub position_bonus: Vec<f64>,
    #[serde(default = "one")]
    pub temperature: f64,
    /// Treat questions without scores as all-zero instead of failing.
    #[serde(default)]
    pub zero_default: bool,
}

fn one() -> f64 {
    1.0
}

impl Default for SyntheticModelSpec {
    fn default() -> Self {
        Self {
            content: BTreeMap::new(),
            label_bonus: BTreeMap::new(),
            position_bonus: Vec::new(),
            temperature: 1.0,
            zero_default: true,
        }
    }
}

impl SyntheticModelSpec {
    pub fn with_content(mut self, question: impl Into<String>, scores: Vec<f64>) -> Self {
        self.content.insert(question.into(), scores);
        self
    }

    pub fn with_label_bonus(mut self, label: impl Into<String>, bonus: f64) -> Self {
        self.label_bonus.insert(label.into(), bonus);
        self
    }

    pub fn with_position_bonus(mut self, bonus: Vec<f64>) -> Self {
        self.position_bonus = bonus;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        let finite = self.content.values().flatten().all(|s| s.is_finite())
            && self.label_bonus.values().all(|s| s.is_finite())
            && self.position_bonus.iter().all(|s| s.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("synthetic scores must be finite".into()));
        }
        Ok(())
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    fn scores(&self, question: &str, k: usize) -> Result<Vec<f64>> {
        match self.content.get(question) {
            Some(s) if s.len() == k => Ok(s.clone()),
            Some(s) => Err(Error::InvalidArgument(format!(
                "{} content scores for {question}, which has {k} answers",
                s.len()
            ))),
            None if self.zero_default => Ok(vec![0.0; k]),
            None => Err(Error::MissingScores(question.to_string())),
        }
    }
}

/// Slot probabilities for an already laid-out question.
pub fn simulate_slots(spec: &SyntheticModelSpec, question: &str, slots: &[Slot]) -> Result<Vec<f64>> {
    let content = spec.scores(question, slots.len())?;
    let logits: Vec<f64> = slots
        .iter()
        .enumerate()
        .map(|(slot, s)| {
            let label = spec.label_bonus.get(&s.label).copied().unwrap_or(0.0);
            let position = spec.position_bonus.get(slot).copied().unwrap_or(0.0);
            (content[s.answer_index] + label + position) / spec.temperature
        })
        .collect();
    Ok(softmax(&logits))
}

/// Full-visibility label probabilities for `question` shown under
/// `presentation`.
pub fn simulate_response(
    spec: &SyntheticModelSpec,
    question: &Question,
    labels: &LabelSet,
    presentation: &Presentation,
) -> Result<LabelLogProbs> {
    let k = question.k();
    if presentation.k() != k {
        return Err(Error::InvalidPermutation {
            perm: presentation.order.as_slice().to_vec(),
            k,
        });
    }
    if labels.len() < k {
        return Err(Error::LabelSetTooShort {
            have: labels.len(),
            need: k,
        });
    }
    let slots: Vec<Slot> = (0..k)
        .map(|slot| {
            let answer_index = presentation.order.at(slot);
            Slot {
                label: labels.get(presentation.labels.at(slot)).unwrap_or_default().to_string(),
                answer_index,
                code: question.answers[answer_index].code.clone(),
            }
        })
        .collect();
    let probs = simulate_slots(spec, &question.id, &slots)?;
    Ok(LabelLogProbs::full(slots.into_iter().map(|s| s.label).collect(), probs))
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    spec: SyntheticModelSpec,
    name: String,
}

impl SyntheticBackend {
    pub fn new(spec: SyntheticModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            name: "synthetic".into(),
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    pub fn score(&self, question: &str, prompt: &RenderedPrompt) -> Result<LabelLogProbs> {
        let probs = simulate_slots(&self.spec, question, &prompt.slots)?;
        Ok(LabelLogProbs::full(prompt.labels(), probs))
    }
}

impl Backend for SyntheticBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: "synthetic".into(),
            model: self.name.clone(),
            params: serde_json::to_value(&self.spec).unwrap_or_default(),
        }
    }

    fn query(&self, request: &QueryRequest<'_>) -> Result<LabelLogProbs> {
        self.score(request.question, request.prompt)
    }
}
