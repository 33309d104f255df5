//! Rendering of questions into model prompts.
//!
//! A question is shown under a [`Presentation`]: the order in which its
//! answers occupy the slots, and which label each slot carries. Rendering is a
//! pure function of question, labels, presentation, style and history.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::questionnaire::{Question, Questionnaire, MISSING};

/// Default system prompt for chat endpoints that only expose top-k tokens.
pub const SINGLE_LETTER_SYSTEM_PROMPT: &str = "Please respond with a single letter.";

/// Default token budget for a full sequential prompt.
pub const DEFAULT_TOKEN_BUDGET: usize = 1024;

/// Ordered choice labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidLabelSet("no labels".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.trim().is_empty() || l.chars().any(char::is_whitespace) {
                return Err(Error::InvalidLabelSet(format!("label {l:?} is blank or has whitespace")));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidLabelSet(format!("duplicate label {l}")));
            }
        }
        Ok(Self(labels))
    }

    /// "A", "B", "C", ...
    pub fn alphabetical() -> Self {
        Self(('A'..='Z').map(String::from).collect())
    }

    /// Letters of similar frequency in written English.
    pub fn similar_frequency() -> Self {
        Self(
            ["R", "S", "N", "L", "O", "T", "M", "P", "W", "U", "Y", "V"]
                .into_iter()
                .map(String::from)
                .collect(),
        )
    }

    /// Alphabetical with "B" replaced by "I".
    pub fn a_i_swap() -> Self {
        Self(
            ('A'..='Z')
                .filter(|c| *c != 'I')
                .map(|c| if c == 'B' { "I".to_string() } else { c.to_string() })
                .collect(),
        )
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "alphabetical" | "abc" => Ok(Self::alphabetical()),
            "similar-frequency" | "rsn" => Ok(Self::similar_frequency()),
            "a-i" | "ai" => Ok(Self::a_i_swap()),
            other => Err(Error::InvalidLabelSet(format!("unknown label set {other}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.0.get(i).map(String::as_str)
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    /// The first `k` labels.
    pub fn take(&self, k: usize) -> Result<Vec<String>> {
        if self.0.len() < k {
            return Err(Error::LabelSetTooShort {
                have: self.0.len(),
                need: k,
            });
        }
        Ok(self.0[..k].to_vec())
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.0
    }
}

/// Bijection slot -> index, for one question.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let k = map.len();
        let mut seen = vec![false; k];
        for &i in &map {
            if i >= k || seen[i] {
                return Err(Error::InvalidPermutation { perm: map, k });
            }
            seen[i] = true;
        }
        Ok(Self(map))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    /// Lexicographic rank `rank` in `0..k!`.
    pub fn unrank(k: usize, mut rank: u128) -> Self {
        let mut pool: Vec<usize> = (0..k).collect();
        let mut out = Vec::with_capacity(k);
        for i in (0..k).rev() {
            let f = factorial(i).expect("rank within range");
            let idx = (rank / f) as usize;
            rank %= f;
            out.push(pool.remove(idx));
        }
        Self(out)
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    /// Index shown in `slot`.
    pub fn at(&self, slot: usize) -> usize {
        self.0[slot]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Slot holding `index`.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (slot, &i) in self.0.iter().enumerate() {
            inv[i] = slot;
        }
        Self(inv)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(s, &i)| s == i)
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

pub fn factorial(n: usize) -> Option<u128> {
    (1..=n as u128).try_fold(1u128, |acc, x| acc.checked_mul(x))
}

/// How a question is laid out: `order` maps slot -> answer index and `labels`
/// maps slot -> label index. With identity `labels` the labels run
/// alphabetically down the slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Presentation {
    pub order: Permutation,
    pub labels: Permutation,
}

impl Presentation {
    pub fn new(order: Permutation, labels: Permutation) -> Result<Self> {
        if order.k() != labels.k() {
            return Err(Error::InvalidArgument(format!(
                "order covers {} answers, labels {}",
                order.k(),
                labels.k()
            )));
        }
        Ok(Self { order, labels })
    }

    pub fn identity(k: usize) -> Self {
        Self::ordered(Permutation::identity(k))
    }

    /// Choice order permuted, labels kept alphabetical.
    pub fn ordered(order: Permutation) -> Self {
        let k = order.k();
        Self {
            order,
            labels: Permutation::identity(k),
        }
    }

    pub fn k(&self) -> usize {
        self.order.k()
    }
}

impl From<Permutation> for Presentation {
    fn from(order: Permutation) -> Self {
        Self::ordered(order)
    }
}

/// Whether randomization touches only the choice order or also the label
/// assigned to each slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomizationMode {
    /// Answers shuffled across slots; labels stay alphabetical.
    #[default]
    Order,
    /// Answers shuffled across slots and labels shuffled across slots.
    OrderAndLabel,
}

impl FromStr for RandomizationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order" => Ok(Self::Order),
            "order-and-label" => Ok(Self::OrderAndLabel),
            other => Err(Error::InvalidArgument(format!("unknown randomization mode {other}"))),
        }
    }
}

impl fmt::Display for RandomizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Order => "order",
            Self::OrderAndLabel => "order-and-label",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub permutations: Vec<Permutation>,
    /// True when every one of the `k!` orderings is present exactly once.
    pub full_enumeration: bool,
}

fn sample_distinct_ranks(total: u128, cap: usize, rng: &mut ChaCha8Rng) -> Option<Vec<u128>> {
    let total = usize::try_from(total).ok()?;
    Some(
        rand::seq::index::sample(rng, total, cap)
            .into_iter()
            .map(|i| i as u128)
            .collect(),
    )
}

fn random_distinct_perms(k: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<Permutation> {
    let mut seen = HashSet::with_capacity(cap);
    let mut out = Vec::with_capacity(cap);
    let mut v: Vec<usize> = (0..k).collect();
    while out.len() < cap {
        v.shuffle(rng);
        if seen.insert(v.clone()) {
            out.push(Permutation(v.clone()));
        }
    }
    out
}

/// Every ordering when `k! <= cap`, otherwise `cap` distinct orderings drawn
/// without replacement. Deterministic for a fixed seed.
pub fn enumerate_permutations(k: usize, cap: usize, seed: u64) -> Result<PermutationPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need k >= 2, got {k}")));
    }
    if cap == 0 {
        return Err(Error::InvalidArgument("permutation cap must be >= 1".into()));
    }
    let total = factorial(k);
    if let Some(total) = total.filter(|t| *t <= cap as u128) {
        let permutations = (0..total).map(|r| Permutation::unrank(k, r)).collect();
        return Ok(PermutationPlan {
            permutations,
            full_enumeration: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let permutations = match total.and_then(|t| sample_distinct_ranks(t, cap, &mut rng)) {
        Some(ranks) => ranks.into_iter().map(|r| Permutation::unrank(k, r)).collect(),
        None => random_distinct_perms(k, cap, &mut rng),
    };
    Ok(PermutationPlan {
        permutations,
        full_enumeration: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentationPlan {
    pub presentations: Vec<Presentation>,
    pub full_enumeration: bool,
    pub mode: RandomizationMode,
}

impl PresentationPlan {
    pub fn len(&self) -> usize {
        self.presentations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.presentations.is_empty()
    }
}

/// Plan of presentations for one question. In `Order` mode this is
/// [`enumerate_permutations`] with alphabetical labels; in `OrderAndLabel`
/// mode the pairs (order, label assignment) are enumerated or sampled jointly.
pub fn plan_presentations(
    k: usize,
    cap: usize,
    seed: u64,
    mode: RandomizationMode,
) -> Result<PresentationPlan> {
    match mode {
        RandomizationMode::Order => {
            let plan = enumerate_permutations(k, cap, seed)?;
            Ok(PresentationPlan {
                presentations: plan.permutations.into_iter().map(Presentation::ordered).collect(),
                full_enumeration: plan.full_enumeration,
                mode,
            })
        }
        RandomizationMode::OrderAndLabel => {
            if k < 2 || cap == 0 {
                return Err(Error::InvalidArgument(format!("need k >= 2 and cap >= 1, got k={k} cap={cap}")));
            }
            let per = factorial(k);
            let total = per.and_then(|p| p.checked_mul(p));
            let split = |r: u128, p: u128| {
                Presentation {
                    order: Permutation::unrank(k, r / p),
                    labels: Permutation::unrank(k, r % p),
                }
            };
            if let (Some(p), Some(t)) = (per, total) {
                if t <= cap as u128 {
                    return Ok(PresentationPlan {
                        presentations: (0..t).map(|r| split(r, p)).collect(),
                        full_enumeration: true,
                        mode,
                    });
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let presentations = match (per, total.and_then(|t| sample_distinct_ranks(t, cap, &mut rng))) {
                (Some(p), Some(ranks)) => ranks.into_iter().map(|r| split(r, p)).collect(),
                _ => {
                    let mut seen = HashSet::new();
                    let mut out = Vec::with_capacity(cap);
                    let mut a: Vec<usize> = (0..k).collect();
                    let mut b: Vec<usize> = (0..k).collect();
                    while out.len() < cap {
                        a.shuffle(&mut rng);
                        b.shuffle(&mut rng);
                        if seen.insert((a.clone(), b.clone())) {
                            out.push(Presentation {
                                order: Permutation(a.clone()),
                                labels: Permutation(b.clone()),
                            });
                        }
                    }
                    out
                }
            };
            Ok(PresentationPlan {
                presentations,
                full_enumeration: false,
                mode,
            })
        }
    }
}

/// Uniformly random presentation.
pub fn random_presentation<R: rand::Rng>(k: usize, mode: RandomizationMode, rng: &mut R) -> Presentation {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let labels = match mode {
        RandomizationMode::Order => (0..k).collect(),
        RandomizationMode::OrderAndLabel => {
            let mut l: Vec<usize> = (0..k).collect();
            l.shuffle(rng);
            l
        }
    };
    Presentation {
        order: Permutation(order),
        labels: Permutation(labels),
    }
}

/// Question templates. The variants with a preamble prepend one fixed
/// sentence to the standard layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    /// `Question: ...\nA. ...\nAnswer:`
    #[default]
    Standard,
    /// P1: survey-origin note.
    SurveyNote,
    /// P2: answer-the-survey instruction.
    SurveyInstruction,
    /// P3: answer as a U.S. household.
    Household,
    /// P4: second-person question wording.
    SecondPerson,
    /// P5: select-one instruction.
    SelectOne,
    /// P6: select-one instruction with a one-shot format example.
    SelectOneExample,
    /// P7: Human/Assistant chat transcript.
    HumanAssistant,
    /// P8: Interviewer/Me transcript.
    Interview,
}

impl Template {
    fn preamble(self) -> Option<&'static str> {
        match self {
            Template::SurveyNote => Some("Bellow is a question from the American Community Survey."),
            Template::SurveyInstruction => {
                Some("Answer the following question from the American Community Survey.")
            }
            Template::Household => Some(
                "Answer the following question as if you lived at a household in the United States.",
            ),
            Template::SelectOne => Some(
                "Please read the following multiple-choice question carefully and select ONE of the listed options.",
            ),
            Template::SelectOneExample => Some(
                "Please read the multiple-choice question below carefully and select ONE of the listed options. \
                 Here is an example of the format:\nQuestion: Question 1\nA. Option 1\nB. Option 2\nC. Option 3\nAnswer: C",
            ),
            _ => None,
        }
    }
}

/// Layout of prior answers in sequential prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequentialMode {
    /// One `- <label>: <answer>` line per prior answer.
    #[default]
    BulletSummary,
    /// Full prior question blocks, each completed with the chosen label.
    QaHistory,
    /// Like `QaHistory` but every block uses the interview transcript.
    InterviewHistory,
}

impl FromStr for SequentialMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bullet-summary" | "bullets" => Ok(Self::BulletSummary),
            "qa-history" | "qa" => Ok(Self::QaHistory),
            "interview-history" | "interview" => Ok(Self::InterviewHistory),
            other => Err(Error::UnknownStyle(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptStyle {
    pub template: Template,
    /// System message for chat endpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    /// Render `Answer: ` instead of `Answer:`.
    #[serde(default)]
    pub trailing_space: bool,
    #[serde(default)]
    pub sequential: SequentialMode,
}

impl Default for PromptStyle {
    fn default() -> Self {
        Self::from_template(Template::Standard)
    }
}

impl PromptStyle {
    pub fn from_template(template: Template) -> Self {
        Self {
            template,
            system_prompt: None,
            trailing_space: false,
            sequential: SequentialMode::default(),
        }
    }

    /// Standard layout plus the single-letter system prompt.
    pub fn chat() -> Self {
        Self {
            system_prompt: Some(SINGLE_LETTER_SYSTEM_PROMPT.to_string()),
            ..Self::from_template(Template::Standard)
        }
    }

    pub fn with_sequential(mut self, mode: SequentialMode) -> Self {
        self.sequential = mode;
        self
    }

    /// Canonical style name.
    pub fn name(&self) -> String {
        let base = match self.template {
            Template::Standard if self.system_prompt.is_some() => "chat",
            Template::Standard => "standard",
            Template::SurveyNote => "p1",
            Template::SurveyInstruction => "p2",
            Template::Household => "p3",
            Template::SecondPerson => "p4",
            Template::SelectOne => "p5",
            Template::SelectOneExample => "p6",
            Template::HumanAssistant => "p7",
            Template::Interview => "interview",
        };
        base.to_string()
    }
}

impl FromStr for PromptStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let template = match s.to_ascii_lowercase().as_str() {
            "standard" => Template::Standard,
            "chat" => return Ok(Self::chat()),
            "p1" => Template::SurveyNote,
            "p2" => Template::SurveyInstruction,
            "p3" => Template::Household,
            "p4" => Template::SecondPerson,
            "p5" => Template::SelectOne,
            "p6" => Template::SelectOneExample,
            "p7" => Template::HumanAssistant,
            "p8" | "interview" => Template::Interview,
            _ => return Err(Error::UnknownStyle(s.to_string())),
        };
        Ok(Self::from_template(template))
    }
}

/// One slot of a rendered question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub label: String,
    pub answer_index: usize,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub text: String,
    /// Slots in presentation order.
    pub slots: Vec<Slot>,
}

impl RenderedPrompt {
    pub fn labels(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.label.clone()).collect()
    }

    /// Answer index behind a label.
    pub fn answer_for_label(&self, label: &str) -> Option<usize> {
        self.slots.iter().find(|s| s.label == label).map(|s| s.answer_index)
    }
}

fn layout(question: &Question, labels: &LabelSet, presentation: &Presentation) -> Result<Vec<Slot>> {
    let k = question.k();
    if labels.len() < k {
        return Err(Error::LabelSetTooShort {
            have: labels.len(),
            need: k,
        });
    }
    if presentation.k() != k {
        return Err(Error::InvalidPermutation {
            perm: presentation.order.as_slice().to_vec(),
            k,
        });
    }
    Ok((0..k)
        .map(|slot| {
            let answer_index = presentation.order.at(slot);
            Slot {
                label: labels.get(presentation.labels.at(slot)).unwrap_or_default().to_string(),
                answer_index,
                code: question.answers[answer_index].code.clone(),
            }
        })
        .collect())
}

fn question_text(question: &Question, template: Template) -> Result<&str> {
    if template == Template::SecondPerson {
        question
            .text_second_person
            .as_deref()
            .ok_or_else(|| Error::InvalidQuestion {
                question: question.id.clone(),
                reason: "no second-person wording for this style".into(),
            })
    } else {
        Ok(&question.text)
    }
}

fn body(question: &Question, slots: &[Slot], template: Template, trailing_space: bool) -> Result<String> {
    let text = question_text(question, template)?;
    let options = slots
        .iter()
        .map(|s| format!("{}. {}", s.label, question.answers[s.answer_index].text))
        .collect::<Vec<_>>()
        .join("\n");
    let cue = |c: &str| if trailing_space { format!("{c} ") } else { c.to_string() };
    Ok(match template {
        Template::HumanAssistant => format!(
            "Human: {text}\nHere are the options:\n{options}\n{}",
            cue("Assistant: If had to select one of the options, my answer would be")
        ),
        Template::Interview => format!("Interviewer: {text}\n{options}\n{}", cue("Me:")),
        _ => format!("Question: {text}\n{options}\n{}", cue("Answer:")),
    })
}

fn with_preamble(template: Template, rest: String) -> String {
    match template.preamble() {
        Some(p) => format!("{p}\n{rest}"),
        None => rest,
    }
}

/// Renders a single question. The returned slots map each label back to its
/// answer.
pub fn render_prompt(
    question: &Question,
    labels: &LabelSet,
    presentation: &Presentation,
    style: &PromptStyle,
) -> Result<RenderedPrompt> {
    let slots = layout(question, labels, presentation)?;
    let text = with_preamble(
        style.template,
        body(question, &slots, style.template, style.trailing_space)?,
    );
    Ok(RenderedPrompt {
        system: style.system_prompt.clone(),
        text,
        slots,
    })
}

/// An answer already given earlier in the questionnaire. `code` is
/// [`MISSING`] for skipped questions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PriorAnswer {
    pub question: String,
    pub code: String,
}

impl PriorAnswer {
    pub fn new(question: impl Into<String>, code: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            code: code.into(),
        }
    }

    pub fn is_skipped(&self) -> bool {
        self.code == MISSING
    }
}

fn check_prefix<'q>(
    questionnaire: &'q Questionnaire,
    prefix: &[PriorAnswer],
    next: &Question,
) -> Result<Vec<(&'q Question, usize)>> {
    let pos = questionnaire
        .position(&next.id)
        .ok_or_else(|| Error::UnknownQuestion(next.id.clone()))?;
    if prefix.len() > pos {
        return Err(Error::InvalidPrefix(format!(
            "{} prior answers before question {} at position {pos}",
            prefix.len(),
            next.id
        )));
    }
    let mut answered = Vec::new();
    for (i, q) in questionnaire.questions()[..pos].iter().enumerate() {
        let prior = prefix.get(i).ok_or_else(|| {
            Error::InvalidPrefix(format!("missing prior answer for {}", q.id))
        })?;
        if prior.question != q.id {
            return Err(Error::InvalidPrefix(format!(
                "expected answer to {} at position {i}, found {}",
                q.id, prior.question
            )));
        }
        if prior.is_skipped() {
            continue;
        }
        let idx = q.code_index(&prior.code).ok_or_else(|| {
            Error::InvalidPrefix(format!("{} is not an answer code of {}", prior.code, q.id))
        })?;
        answered.push((q, idx));
    }
    Ok(answered)
}

/// Renders `next` with the earlier answers in context. Prior questions are
/// shown in their canonical order with the style's labels; skipped questions
/// are left out. With an empty prefix the result equals [`render_prompt`].
pub fn render_sequential_prompt(
    questionnaire: &Questionnaire,
    prefix: &[PriorAnswer],
    next: &Question,
    labels: &LabelSet,
    presentation: &Presentation,
    style: &PromptStyle,
) -> Result<RenderedPrompt> {
    let answered = check_prefix(questionnaire, prefix, next)?;
    if answered.is_empty() {
        return render_prompt(next, labels, presentation, style);
    }
    match style.sequential {
        SequentialMode::BulletSummary => {
            let mut rendered = render_prompt(next, labels, presentation, style)?;
            let summary = answered
                .iter()
                .map(|(q, idx)| format!("- {}: {}", q.summary_label(), q.answers[*idx].text))
                .collect::<Vec<_>>()
                .join("\n");
            rendered.text = format!("{summary}\n{}", rendered.text);
            Ok(rendered)
        }
        SequentialMode::QaHistory | SequentialMode::InterviewHistory => {
            let template = if style.sequential == SequentialMode::InterviewHistory {
                Template::Interview
            } else {
                style.template
            };
            let mut blocks = Vec::with_capacity(answered.len() + 1);
            for (q, idx) in &answered {
                let slots = layout(q, labels, &Presentation::identity(q.k()))?;
                let block = body(q, &slots, template, style.trailing_space)?;
                let sep = if block.ends_with(' ') { "" } else { " " };
                blocks.push(format!("{block}{sep}{}", slots[*idx].label));
            }
            let slots = layout(next, labels, presentation)?;
            blocks.push(body(next, &slots, template, style.trailing_space)?);
            Ok(RenderedPrompt {
                system: style.system_prompt.clone(),
                text: with_preamble(template, blocks.join("\n")),
                slots,
            })
        }
    }
}

/// Counts prompt tokens for budget checks.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-separated words times a safety factor, rounded up.
#[derive(Debug, Clone, Copy)]
pub struct WhitespaceTokenCounter {
    pub factor: f64,
}

impl Default for WhitespaceTokenCounter {
    fn default() -> Self {
        Self { factor: 1.5 }
    }
}

impl TokenCounter for WhitespaceTokenCounter {
    fn count(&self, text: &str) -> usize {
        (text.split_whitespace().count() as f64 * self.factor).ceil() as usize
    }
}

/// Errors when the prompt (system message included) exceeds `budget`.
pub fn check_token_budget(prompt: &RenderedPrompt, counter: &dyn TokenCounter, budget: usize) -> Result<usize> {
    let tokens = counter.count(&prompt.text) + prompt.system.as_deref().map_or(0, |s| counter.count(s));
    if tokens > budget {
        return Err(Error::TokenBudgetExceeded { tokens, budget });
    }
    Ok(tokens)
}
