//! Categorical distribution measures: normalized entropy, KL divergence and
//! the ordinal (1-D earth mover) distance.
//!
//! All logarithms are natural; KL values are in nats. Normalized entropy is a
//! ratio, so the base cancels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability vector.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Default smoothing applied to the reference side of model-vs-reference KL
/// when the reference has empty categories.
pub const DEFAULT_REFERENCE_EPSILON: f64 = 1e-9;

/// Where a distribution came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ModelRaw,
    ModelAdjusted,
    Reference,
    Uniform,
}

/// A probability vector over one question's answers, indexed by answer
/// (canonical question order), never by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDistribution {
    pub question: String,
    probs: Vec<f64>,
    pub provenance: Provenance,
}

impl ResponseDistribution {
    pub fn new(question: impl Into<String>, probs: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let question = question.into();
        validate_probs(&question, &probs)?;
        Ok(Self {
            question,
            probs,
            provenance,
        })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(
        question: impl Into<String>,
        weights: &[f64],
        provenance: Provenance,
    ) -> Result<Self> {
        let question = question.into();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution {
                question,
                reason: "weights must be finite and non-negative".into(),
            });
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution {
                question,
                reason: "weights sum to zero".into(),
            });
        }
        let probs = weights.iter().map(|w| w / total).collect();
        Self::new(question, probs, provenance)
    }

    pub fn uniform(question: impl Into<String>, k: usize) -> Result<Self> {
        let question = question.into();
        if k == 0 {
            return Err(Error::InvalidDistribution {
                question,
                reason: "empty support".into(),
            });
        }
        Ok(Self {
            question,
            probs: vec![1.0 / k as f64; k],
            provenance: Provenance::Uniform,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

fn validate_probs(question: &str, probs: &[f64]) -> Result<()> {
    let bad = |reason: String| Error::InvalidDistribution {
        question: question.to_string(),
        reason,
    };
    if probs.is_empty() {
        return Err(bad("empty support".into()));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(bad(format!("entry {p} is not a probability")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(bad(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Entropy relative to the uniform distribution on the same support: 1 for
/// uniform, 0 for a point mass.
pub fn normalized_entropy(d: &ResponseDistribution) -> Result<f64> {
    normalized_entropy_of(d.probs())
}

pub fn normalized_entropy_of(probs: &[f64]) -> Result<f64> {
    let k = probs.len();
    if k < 2 {
        return Err(Error::DegenerateSupport(k));
    }
    let h = entropy(probs) / (k as f64).ln();
    Ok(h.clamp(0.0, 1.0))
}

/// Outcome of a KL evaluation. `Infinite` is returned when `p` puts mass where
/// the (unsmoothed) reference has none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Finite(f64),
    Infinite,
}

impl Divergence {
    pub fn value(self) -> f64 {
        match self {
            Divergence::Finite(v) => v,
            Divergence::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Divergence::Finite(_))
    }
}

/// `KL(p || q)` in nats. With `epsilon > 0` the reference is smoothed as
/// `(q + epsilon) / (1 + k epsilon)` before evaluation.
pub fn kl_divergence(p: &ResponseDistribution, q: &ResponseDistribution, epsilon: f64) -> Result<Divergence> {
    if p.question != q.question {
        return Err(Error::SupportMismatch(format!(
            "questions {} and {}",
            p.question, q.question
        )));
    }
    kl_divergence_of(p.probs(), q.probs(), epsilon)
}

pub fn kl_divergence_of(p: &[f64], q: &[f64], epsilon: f64) -> Result<Divergence> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch(format!(
            "support sizes {} and {}",
            p.len(),
            q.len()
        )));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be >= 0")));
    }
    let k = q.len() as f64;
    let denom = 1.0 + k * epsilon;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        let qi = if epsilon > 0.0 { (qi + epsilon) / denom } else { qi };
        if qi <= 0.0 {
            return Ok(Divergence::Infinite);
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can push KL(p||p) a hair below zero.
    Ok(Divergence::Finite(total.max(0.0)))
}

/// Reference-side epsilon policy: smooth only when the reference has an
/// empty category.
pub fn reference_epsilon(reference: &[f64], epsilon: f64) -> f64 {
    if reference.iter().any(|q| *q <= 0.0) {
        epsilon
    } else {
        0.0
    }
}

/// Earth mover distance between two distributions over ordered answers, in
/// answer-rank steps.
pub fn wasserstein_ordinal(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch(format!(
            "support sizes {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut cdf_p = 0.0;
    let mut cdf_q = 0.0;
    let mut total = 0.0;
    for i in 0..p.len().saturating_sub(1) {
        cdf_p += p[i];
        cdf_q += q[i];
        total += (cdf_p - cdf_q).abs();
    }
    Ok(total)
}

/// Total variation distance, `0.5 * sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch(format!(
            "support sizes {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> ResponseDistribution {
        ResponseDistribution::new("Q", p.to_vec(), Provenance::Reference).unwrap()
    }

    #[test]
    fn normalized_entropy_examples() {
        for k in 2..=20 {
            let u = ResponseDistribution::uniform("Q", k).unwrap();
            assert_abs_diff_eq!(normalized_entropy(&u).unwrap(), 1.0, epsilon = 1e-12);
        }
        assert_eq!(normalized_entropy(&dist(&[1.0, 0.0, 0.0])).unwrap(), 0.0);
        // -(0.9 ln 0.9 + 0.1 ln 0.1) / ln 2 = 0.468995593589281...
        assert_abs_diff_eq!(
            normalized_entropy(&dist(&[0.9, 0.1])).unwrap(),
            0.468_995_593_589_281,
            epsilon = 1e-12
        );
    }

    #[test]
    fn normalized_entropy_rejects_single_answer() {
        assert!(matches!(
            normalized_entropy(&dist(&[1.0])),
            Err(Error::DegenerateSupport(1))
        ));
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[0.3, 0.7]);
        assert_eq!(kl_divergence(&p, &p, 0.0).unwrap(), Divergence::Finite(0.0));
        // 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25) = 0.5 ln(4/3) = 0.143841036225890...
        let kl = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[0.75, 0.25]), 0.0).unwrap();
        assert_abs_diff_eq!(kl.value(), 0.143_841_036_225_890_3, epsilon = 1e-12);
        let kl = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]), 0.0).unwrap();
        assert_eq!(kl, Divergence::Infinite);
        let kl = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]), 1e-9).unwrap();
        assert!(kl.is_finite());
    }

    #[test]
    fn kl_rejects_mismatched_support() {
        assert!(kl_divergence_of(&[0.5, 0.5], &[1.0 / 3.0; 3], 0.0).is_err());
        let other = ResponseDistribution::new("R", vec![0.5, 0.5], Provenance::Reference).unwrap();
        assert!(kl_divergence(&dist(&[0.5, 0.5]), &other, 0.0).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_ordinal(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            wasserstein_ordinal(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap(),
            2.0
        );
        assert_abs_diff_eq!(
            wasserstein_ordinal(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]).unwrap(),
            1.0
        );
    }

    #[test]
    fn distribution_validation() {
        assert!(ResponseDistribution::new("Q", vec![0.5, 0.6], Provenance::Reference).is_err());
        assert!(ResponseDistribution::new("Q", vec![-0.1, 1.1], Provenance::Reference).is_err());
        assert!(ResponseDistribution::new("Q", vec![], Provenance::Reference).is_err());
        let d = ResponseDistribution::from_weights("Q", &[1.0, 3.0], Provenance::Reference).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.75]);
    }

    fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, k).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>)> {
        (2usize..8).prop_flat_map(|k| {
            (
                simplex(k),
                simplex(k),
                Just((0..k).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn kl_is_nonnegative_and_zero_only_on_identity((p, q, _) in pair()) {
            let kl = kl_divergence_of(&p, &q, 0.0).unwrap().value();
            prop_assert!(kl >= 0.0);
            let same = p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12);
            if !same {
                prop_assert!(kl > 0.0);
            }
            prop_assert_eq!(kl_divergence_of(&p, &p, 0.0).unwrap().value(), 0.0);
        }

        #[test]
        fn measures_invariant_to_reindexing((p, q, perm) in pair()) {
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let qq: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
            let h1 = normalized_entropy_of(&p).unwrap();
            let h2 = normalized_entropy_of(&pp).unwrap();
            prop_assert!((h1 - h2).abs() < 1e-12);
            let k1 = kl_divergence_of(&p, &q, 0.0).unwrap().value();
            let k2 = kl_divergence_of(&pp, &qq, 0.0).unwrap().value();
            prop_assert!((k1 - k2).abs() < 1e-12);
            let t1 = total_variation(&p, &q).unwrap();
            let t2 = total_variation(&pp, &qq).unwrap();
            prop_assert!((t1 - t2).abs() < 1e-12);
        }

        #[test]
        fn wasserstein_is_symmetric_and_reversal_invariant((p, q, _) in pair()) {
            let a = wasserstein_ordinal(&p, &q).unwrap();
            let b = wasserstein_ordinal(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            // Only order-preserving or order-reversing re-indexing keeps the
            // ordinal distance.
            let pr: Vec<f64> = p.iter().rev().copied().collect();
            let qr: Vec<f64> = q.iter().rev().copied().collect();
            let c = wasserstein_ordinal(&pr, &qr).unwrap();
            prop_assert!((a - c).abs() < 1e-12);
        }
    }
}
