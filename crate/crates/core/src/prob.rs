//! Log-space probability algebra.
//!
//! A [`ProbVector`] is a categorical distribution over `k >= 2` classes whose
//! entries are floored away from zero, so its logarithm is always finite. The
//! eraser subtracts the log of a bias rule from the log of a model output and
//! maps the result back through a stabilized softmax:
//!
//! ```text
//! fair_j = exp(log model_j - log rule_j) / sum_i exp(log model_i - log rule_i)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest probability admitted after ingest.
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Tolerance on `|sum - 1|` for vectors that claim to be normalized already.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// A categorical distribution over `k >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

/// Unnormalized log-odds for `k >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl ProbVector {
    /// Accepts a vector that already sums to one (within [`SUM_TOLERANCE`]),
    /// then floors and renormalizes it.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_entries(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self::normalized(probs, DEFAULT_FLOOR))
    }

    /// Divides nonnegative scores by their sum, then floors and renormalizes.
    pub fn from_unnormalized(scores: Vec<f64>) -> Result<Self> {
        Self::from_unnormalized_with_floor(scores, DEFAULT_FLOOR)
    }

    pub fn from_unnormalized_with_floor(scores: Vec<f64>, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::InvalidInput(format!("floor {floor} outside (0, 1)")));
        }
        validate_entries(&scores)?;
        let sum: f64 = scores.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidInput("scores sum to zero".into()));
        }
        let scaled = scores.into_iter().map(|s| s / sum).collect();
        Ok(Self::normalized(scaled, floor))
    }

    /// Normalizes independent per-class sigmoid scores.
    ///
    /// A single score `s` is a binary classifier and expands to `[1 - s, s]`;
    /// longer vectors are divided by their sum.
    pub fn from_sigmoid_scores(scores: &[f64]) -> Result<Self> {
        match scores {
            [s] => {
                if !(s.is_finite() && (0.0..=1.0).contains(s)) {
                    return Err(Error::InvalidInput(format!("sigmoid score {s} outside [0, 1]")));
                }
                Self::from_unnormalized(vec![1.0 - s, *s])
            }
            _ => Self::from_unnormalized(scores.to_vec()),
        }
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 classes, got {k}")));
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    fn normalized(mut probs: Vec<f64>, floor: f64) -> Self {
        let mut sum = 0.0;
        for p in probs.iter_mut() {
            *p = p.max(floor);
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        Self(probs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.ln()).collect()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        ProbVector::new(value)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(value: ProbVector) -> Self {
        value.0
    }
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 logits, got {}",
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
        }
        Ok(Self(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn validate_entries(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes, got {}",
            values.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidInput(format!("invalid probability entry {bad}")));
    }
    Ok(())
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax over a raw slice; the caller guarantees finiteness.
pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

pub(crate) fn log_softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub(crate) fn softmax_to_prob(logits: &[f64]) -> Result<ProbVector> {
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
    }
    Ok(ProbVector::normalized(softmax_slice(logits), DEFAULT_FLOOR))
}

pub fn softmax(logits: &LogitVector) -> ProbVector {
    ProbVector::normalized(softmax_slice(&logits.0), DEFAULT_FLOOR)
}

/// Removes a bias rule from a model output in log space.
pub fn erase(model: &ProbVector, bias_rule: &ProbVector) -> Result<ProbVector> {
    erase_multi(model, std::slice::from_ref(bias_rule))
}

/// Removes several bias rules at once by subtracting the sum of their logs.
/// An empty rule list returns the model output unchanged.
pub fn erase_multi(model: &ProbVector, bias_rules: &[ProbVector]) -> Result<ProbVector> {
    if bias_rules.is_empty() {
        return Ok(model.clone());
    }
    let mut logits = model.log_probs();
    for rule in bias_rules {
        if rule.len() != model.len() {
            return Err(Error::shape(model.len(), rule.len()));
        }
        for (z, r) in logits.iter_mut().zip(rule.as_slice()) {
            *z -= r.ln();
        }
    }
    softmax_to_prob(&logits)
}

/// Multiplies a prior into a model output (the algebraic inverse of [`erase`]).
pub fn inject_prior(model: &ProbVector, prior: &ProbVector) -> Result<ProbVector> {
    if prior.len() != model.len() {
        return Err(Error::shape(model.len(), prior.len()));
    }
    let logits: Vec<f64> = model
        .as_slice()
        .iter()
        .zip(prior.as_slice())
        .map(|(m, q)| m.ln() + q.ln())
        .collect();
    softmax_to_prob(&logits)
}
