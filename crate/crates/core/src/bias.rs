//! Choice-order adjustment and labeling/position bias measures.
//!
//! A question is shown under many presentations. For each one the backend's
//! slot distribution is mapped three ways: onto answers (giving the adjusted
//! response), onto labels, and onto slots. The means over the plan are the
//! adjusted response `R̄`, the label distribution `Ō`, and the slot marginal.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::backend::{query_slot_distribution, Backend};
use crate::error::{Error, Result};
use crate::prompt::{
    random_presentation, render_prompt, LabelSet, Presentation, PresentationPlan, PromptStyle,
    RandomizationMode,
};
use crate::questionnaire::Question;
use crate::stats::{Provenance, ResponseDistribution};

/// Records beyond this many per question are folded into the running means.
pub const DEFAULT_RECORD_LIMIT: usize = 5000;

/// Number of randomized responses collected for each bias test.
pub const DEFAULT_BIAS_SAMPLES: usize = 3000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresentationRecord {
    pub presentation: Presentation,
    /// Renormalized probabilities in slot order.
    pub slot_probs: Vec<f64>,
}

impl PresentationRecord {
    fn answer_probs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.slot_probs.len()];
        for (slot, p) in self.slot_probs.iter().enumerate() {
            out[self.presentation.order.at(slot)] += p;
        }
        out
    }

    fn label_probs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.slot_probs.len()];
        for (slot, p) in self.slot_probs.iter().enumerate() {
            out[self.presentation.labels.at(slot)] += p;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedResponse {
    pub question: String,
    /// The `k` labels in use, label index order.
    pub labels: Vec<String>,
    pub mode: RandomizationMode,
    /// Mean answer-indexed distribution.
    pub answer_mean: Vec<f64>,
    /// Mean label-indexed distribution.
    pub label_mean: Vec<f64>,
    /// Mean slot-indexed distribution.
    pub slot_mean: Vec<f64>,
    pub n_presentations: usize,
    pub full_enumeration: bool,
    /// Per-presentation records; `None` once the plan exceeds the limit.
    pub records: Option<Vec<PresentationRecord>>,
}

impl AdjustedResponse {
    pub fn k(&self) -> usize {
        self.answer_mean.len()
    }

    /// `R̄` as a distribution.
    pub fn adjusted(&self) -> Result<ResponseDistribution> {
        ResponseDistribution::from_weights(&self.question, &self.answer_mean, Provenance::ModelAdjusted)
    }

    /// Averages slot distributions observed under `records`.
    pub fn from_records(
        question: impl Into<String>,
        labels: Vec<String>,
        mode: RandomizationMode,
        full_enumeration: bool,
        records: Vec<PresentationRecord>,
        record_limit: usize,
    ) -> Result<Self> {
        let question = question.into();
        let n = records.len();
        let k = labels.len();
        if n == 0 {
            return Err(Error::InvalidArgument(format!("no presentations for {question}")));
        }
        let mut answer_mean = vec![0.0; k];
        let mut label_mean = vec![0.0; k];
        let mut slot_mean = vec![0.0; k];
        for r in &records {
            if r.slot_probs.len() != k || r.presentation.k() != k {
                return Err(Error::InvalidArgument(format!(
                    "record for {question} does not cover {k} answers"
                )));
            }
            for (acc, p) in answer_mean.iter_mut().zip(r.answer_probs()) {
                *acc += p;
            }
            for (acc, p) in label_mean.iter_mut().zip(r.label_probs()) {
                *acc += p;
            }
            for (acc, p) in slot_mean.iter_mut().zip(&r.slot_probs) {
                *acc += p;
            }
        }
        for v in [&mut answer_mean, &mut label_mean, &mut slot_mean] {
            v.iter_mut().for_each(|x| *x /= n as f64);
        }
        Ok(Self {
            question,
            labels,
            mode,
            answer_mean,
            label_mean,
            slot_mean,
            n_presentations: n,
            full_enumeration,
            records: (n <= record_limit).then_some(records),
        })
    }
}

/// Queries every presentation in `plan` and averages. Any failed presentation
/// fails the whole question; the error lists how many failed.
pub fn adjusted_response(
    backend: &dyn Backend,
    question: &Question,
    plan: &PresentationPlan,
    labels: &LabelSet,
    style: &PromptStyle,
) -> Result<AdjustedResponse> {
    adjusted_response_with_limit(backend, question, plan, labels, style, DEFAULT_RECORD_LIMIT)
}

pub fn adjusted_response_with_limit(
    backend: &dyn Backend,
    question: &Question,
    plan: &PresentationPlan,
    labels: &LabelSet,
    style: &PromptStyle,
    record_limit: usize,
) -> Result<AdjustedResponse> {
    let k = question.k();
    let used = labels.take(k)?;
    let results: Vec<Result<PresentationRecord>> = plan
        .presentations
        .par_iter()
        .map(|pres| {
            let prompt = render_prompt(question, labels, pres, style)?;
            let slot_probs = query_slot_distribution(backend, &question.id, &prompt)?;
            Ok(PresentationRecord {
                presentation: pres.clone(),
                slot_probs,
            })
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(e),
        }
    }
    if let Some(first) = failures.into_iter().next() {
        let failed = plan.len() - records.len();
        return Err(match first {
            Error::Backend { backend, message } => Error::Backend {
                backend,
                message: format!("{failed} of {} presentations of {} failed; first: {message}", plan.len(), question.id),
            },
            other if failed == 1 => other,
            other => Error::Backend {
                backend: backend.descriptor().kind,
                message: format!("{failed} of {} presentations of {} failed; first: {other}", plan.len(), question.id),
            },
        });
    }
    AdjustedResponse::from_records(&question.id, used, plan.mode, plan.full_enumeration, records, record_limit)
}

/// `|Ō(label) - 1/k|`.
pub fn label_bias(adj: &AdjustedResponse, label: &str) -> Result<f64> {
    let i = adj
        .labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Error::LabelAbsent(label.to_string()))?;
    Ok((adj.label_mean[i] - 1.0 / adj.k() as f64).abs())
}

/// Deviation of the expected probability of choosing label "A" from `1/k`.
pub fn a_bias(adj: &AdjustedResponse) -> Result<f64> {
    label_bias(adj, "A")
}

/// `|P(selected slot = slot) - 1/k|`, from the retained records.
pub fn position_bias(adj: &AdjustedResponse, slot: usize) -> Result<f64> {
    let records = adj.records.as_ref().ok_or(Error::RecordsDropped)?;
    if slot >= adj.k() {
        return Err(Error::InvalidArgument(format!("slot {slot} out of range for k={}", adj.k())));
    }
    let mean = records.iter().map(|r| r.slot_probs[slot]).sum::<f64>() / records.len() as f64;
    Ok((mean - 1.0 / adj.k() as f64).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasAxis {
    Label,
    Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTestResult {
    pub axis: BiasAxis,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub samples: usize,
    /// Some expected cell count is below 5, so the chi-square approximation
    /// is unreliable.
    pub low_expected_count: bool,
}

/// Pearson chi-square of `counts` against equal expected counts.
pub fn chi_square_uniform(counts: &[usize], axis: BiasAxis) -> Result<BiasTestResult> {
    let k = counts.len();
    if k < 2 {
        return Err(Error::DegenerateSupport(k));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let expected = n as f64 / k as f64;
    let statistic = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum::<f64>();
    let dof = k - 1;
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p_value = chi.sf(statistic).clamp(0.0, 1.0);
    let low_expected_count = expected < 5.0;
    if low_expected_count {
        log::warn!("chi-square with expected count {expected:.2} < 5 per cell");
    }
    Ok(BiasTestResult {
        axis,
        statistic,
        dof,
        p_value,
        samples: n,
        low_expected_count,
    })
}

/// Chi-square test that `selections` (values in `0..k`) are uniform.
pub fn uniformity_test(selections: &[usize], k: usize, axis: BiasAxis) -> Result<BiasTestResult> {
    if k < 2 {
        return Err(Error::DegenerateSupport(k));
    }
    let mut counts = vec![0usize; k];
    for &s in selections {
        *counts
            .get_mut(s)
            .ok_or_else(|| Error::InvalidArgument(format!("selection {s} out of range for k={k}")))? += 1;
    }
    chi_square_uniform(&counts, axis)
}

/// One sampled response per randomized presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selections {
    pub k: usize,
    /// Label index chosen in each draw.
    pub labels: Vec<usize>,
    /// Slot chosen in each draw.
    pub slots: Vec<usize>,
}

impl Selections {
    pub fn label_test(&self) -> Result<BiasTestResult> {
        uniformity_test(&self.labels, self.k, BiasAxis::Label)
    }

    pub fn position_test(&self) -> Result<BiasTestResult> {
        uniformity_test(&self.slots, self.k, BiasAxis::Position)
    }
}

/// Draws `n` independent uniformly random presentations, queries each (the
/// distinct ones once), and samples one response from each.
pub fn sample_selections(
    backend: &dyn Backend,
    question: &Question,
    labels: &LabelSet,
    style: &PromptStyle,
    mode: RandomizationMode,
    n: usize,
    seed: u64,
) -> Result<Selections> {
    let k = question.k();
    labels.take(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(Presentation, f64)> = (0..n)
        .map(|_| {
            let pres = random_presentation(k, mode, &mut rng);
            let u: f64 = rng.gen();
            (pres, u)
        })
        .collect();
    let mut distinct: Vec<&Presentation> = Vec::new();
    let mut index: HashMap<&Presentation, usize> = HashMap::new();
    for (p, _) in &draws {
        index.entry(p).or_insert_with(|| {
            distinct.push(p);
            distinct.len() - 1
        });
    }
    let dists: Vec<Vec<f64>> = distinct
        .par_iter()
        .map(|pres| {
            let prompt = render_prompt(question, labels, pres, style)?;
            query_slot_distribution(backend, &question.id, &prompt)
        })
        .collect::<Result<_>>()?;
    let mut out = Selections {
        k,
        labels: Vec::with_capacity(n),
        slots: Vec::with_capacity(n),
    };
    for (pres, u) in &draws {
        let slot = sample_index(&dists[index[pres]], *u);
        out.slots.push(slot);
        out.labels.push(pres.labels.at(slot));
    }
    Ok(out)
}

/// Inverse-CDF draw from `probs` with a uniform variate `u` in `[0, 1)`.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if target < acc {
            return i;
        }
    }
    // Rounding left `target` at the very top; take the last non-zero cell.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// One row of the bias report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub question: String,
    pub k: usize,
    pub n_perms: usize,
    pub full_enum: bool,
    pub a_bias: f64,
    pub first_choice_bias: f64,
    pub chi2_label_p: f64,
    pub chi2_pos_p: f64,
}

impl BiasRow {
    pub fn new(adj: &AdjustedResponse, selections: &Selections) -> Result<Self> {
        Ok(Self {
            question: adj.question.clone(),
            k: adj.k(),
            n_perms: adj.n_presentations,
            full_enum: adj.full_enumeration,
            a_bias: a_bias(adj)?,
            first_choice_bias: match position_bias(adj, 0) {
                Ok(b) => b,
                // Running slot mean equals the record mean.
                Err(Error::RecordsDropped) => (adj.slot_mean[0] - 1.0 / adj.k() as f64).abs(),
                Err(e) => return Err(e),
            },
            chi2_label_p: selections.label_test()?.p_value,
            chi2_pos_p: selections.position_test()?.p_value,
        })
    }
}
