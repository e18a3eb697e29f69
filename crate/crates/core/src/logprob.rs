//! Log-probability and probability vectors over the vocabulary.

use thiserror::Error;

/// Probabilities below this are clamped before logs are taken, keeping the
/// contrastive ratio finite when one stream assigns ~0 mass to a token.
pub const PROB_FLOOR: f64 = 1e-12;

/// Slack allowed when checking that probabilities sum to one.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LogProbError {
    #[error("logit at index {0} is not finite")]
    InvalidLogit(usize),
    #[error("log-probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("log-probability at index {0} is positive ({1})")]
    PositiveEntry(usize, f64),
    #[error("probability at index {0} is negative ({1})")]
    NegativeEntry(usize, f64),
    #[error("empty vector")]
    Empty,
}

/// Natural-log probabilities over the vocabulary. `exp()` sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbVector {
    values: Vec<f64>,
}

impl LogProbVector {
    /// Validates and wraps. Entries must be ≤ 0 (tiny positive slack at the
    /// max is tolerated) and their exponentials must sum to 1 ± 1e-9.
    /// `f64::NEG_INFINITY` entries are permitted and carry zero mass.
    pub fn new(values: Vec<f64>) -> Result<Self, LogProbError> {
        if values.is_empty() {
            return Err(LogProbError::Empty);
        }
        let mut sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if v.is_nan() || v == f64::INFINITY {
                return Err(LogProbError::InvalidLogit(i));
            }
            if v > 1e-12 {
                return Err(LogProbError::PositiveEntry(i, v));
            }
            sum += v.exp();
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(LogProbError::NotNormalized(sum));
        }
        Ok(Self { values })
    }

    /// Takes per-token probabilities, clamps each at [`PROB_FLOOR`], and
    /// logs them. The input row must sum to 1; the floor only lifts zeros.
    pub fn from_probs(probs: &[f64]) -> Result<Self, LogProbError> {
        if probs.is_empty() {
            return Err(LogProbError::Empty);
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(LogProbError::NegativeEntry(i, p));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(LogProbError::NotNormalized(sum));
        }
        let values = probs.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect();
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the maximum entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Exponentiates into a probability vector.
    pub fn to_distribution(&self) -> Distribution {
        Distribution {
            values: self.values.iter().map(|&v| v.exp()).collect(),
        }
    }
}

/// Probabilities over the vocabulary: non-negative, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    values: Vec<f64>,
}

impl Distribution {
    pub fn new(values: Vec<f64>) -> Result<Self, LogProbError> {
        if values.is_empty() {
            return Err(LogProbError::Empty);
        }
        let mut sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(LogProbError::NegativeEntry(i, v));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(LogProbError::NotNormalized(sum));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Numerically stable log-softmax: subtracts the max, then removes the
/// log-sum-exp. Rejects non-finite logits.
pub fn log_softmax(logits: &[f64]) -> Result<LogProbVector, LogProbError> {
    if logits.is_empty() {
        return Err(LogProbError::Empty);
    }
    for (i, &z) in logits.iter().enumerate() {
        if !z.is_finite() {
            return Err(LogProbError::InvalidLogit(i));
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let values = logits.iter().map(|&z| z - max - log_sum).collect();
    Ok(LogProbVector { values })
}
