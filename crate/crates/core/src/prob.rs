//! Probability vectors and the information measures used by the adaptation
//! objectives: entropy, KL divergence, harmonized mixtures, the weighted
//! Jensen-Shannon divergence and the two sample filters.

// negated comparisons below also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are floored at this value before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Tolerance on the unit-sum invariant.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// A point on the probability simplex with at least two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidProb(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidProb(format!("entry {bad} outside [0, 1]")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidProb(format!("entries sum to {sum}")));
        }
        Ok(Self(values))
    }

    /// Builds a vector from a softmax row without re-checking it.
    ///
    /// Callers must guarantee the simplex invariant; debug builds assert it.
    pub(crate) fn from_softmax(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2);
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        Self(values)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidProb(format!("need at least 2 classes, got {k}")));
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::InvalidProb(format!("class {class} out of range for K={k}")));
        }
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Self::new(v)
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

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_same_len(p: &ProbVector, q: &ProbVector) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("fusion weight {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    let h: f64 = p
        .as_slice()
        .iter()
        .map(|&v| -v * v.max(LOG_FLOOR).ln())
        .sum();
    h.max(0.0)
}

/// `KL(p || q)`. Returns `+inf` when `q` has zero mass where `p` does not.
pub fn kl(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_same_len(p, q)?;
    let mut acc = 0.0;
    for (&pk, &qk) in p.as_slice().iter().zip(q.as_slice()) {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += pk * (pk.max(LOG_FLOOR).ln() - qk.max(LOG_FLOOR).ln());
    }
    Ok(acc.max(0.0))
}

/// Convex mixture `alpha * p_s + (1 - alpha) * p_b`.
pub fn harmonize(p_s: &ProbVector, p_b: &ProbVector, alpha: f64) -> Result<ProbVector> {
    check_same_len(p_s, p_b)?;
    check_alpha(alpha)?;
    let mixed = p_s
        .as_slice()
        .iter()
        .zip(p_b.as_slice())
        .map(|(&s, &b)| (alpha * s + (1.0 - alpha) * b).clamp(0.0, 1.0))
        .collect();
    Ok(ProbVector(mixed))
}

/// Alpha-weighted Jensen-Shannon divergence
/// `alpha KL(p_s || p_h) + (1 - alpha) KL(p_b || p_h)` with `p_h` the mixture.
pub fn js_alpha(p_s: &ProbVector, p_b: &ProbVector, alpha: f64) -> Result<f64> {
    let p_h = harmonize(p_s, p_b, alpha)?;
    // A zero-weighted component contributes nothing even where p_h vanishes.
    let term = |w: f64, p: &ProbVector| -> Result<f64> {
        if w == 0.0 {
            Ok(0.0)
        } else {
            Ok(w * kl(p, &p_h)?)
        }
    };
    Ok(term(alpha, p_s)? + term(1.0 - alpha, p_b)?)
}

/// Reliability weight `exp(epsilon - h)` for `h < epsilon`, zero otherwise.
pub fn reliability_weight(h: f64, epsilon: f64) -> Result<f64> {
    if !(h >= 0.0) {
        return Err(Error::Config(format!("entropy {h} must be non-negative")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("entropy margin {epsilon} must be positive")));
    }
    Ok(if h < epsilon { (epsilon - h).exp() } else { 0.0 })
}

/// Cosine similarity of two raw vectors; zero when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let c = (dot / (na * nb)).clamp(-1.0, 1.0);
    // parallel vectors come out a few ulps short of 1
    if 1.0 - c.abs() < 1e-12 {
        c.signum()
    } else {
        c
    }
}

/// Non-redundancy gate: true iff `|cos(p, ema)| < d`.
///
/// `ema` is `None` before the running average has seen any sample; every
/// prediction passes in that state.
pub fn diversity_gate(p: &ProbVector, ema: Option<&ProbVector>, d: f64) -> Result<bool> {
    let Some(ema) = ema else {
        return Ok(true);
    };
    check_same_len(p, ema)?;
    Ok(cosine(p.as_slice(), ema.as_slice()).abs() < d)
}

/// Entropy margin, diversity margin, fusion weight and consistency weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub epsilon: f64,
    pub d: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self::for_classes(10)
    }
}

impl FilterParams {
    /// Defaults scaled to a `k`-class problem: `epsilon = 0.9 ln k`.
    pub fn for_classes(k: usize) -> Self {
        Self {
            epsilon: 0.9 * (k as f64).ln(),
            d: 0.05,
            alpha: 0.4,
            lambda: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        if !(self.d > 0.0 && self.d <= 1.0) {
            return Err(Error::Config(format!("diversity margin {} outside (0, 1]", self.d)));
        }
        check_alpha(self.alpha)?;
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        Ok(())
    }
}
