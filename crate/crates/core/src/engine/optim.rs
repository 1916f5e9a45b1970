use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::ProbVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamWState {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grad.len()
                },
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite prompt gradient".into()));
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.steps += 1;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * params[i]);
        }
        Ok(())
    }
}

/// Running average of confident, non-redundant steering predictions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    mean: Option<ProbVector>,
}

impl EmaState {
    pub fn get(&self) -> Option<&ProbVector> {
        self.mean.as_ref()
    }

    pub fn is_initialized(&self) -> bool {
        self.mean.is_some()
    }

    /// Folds in the mean of `batch`; the first non-empty update sets it
    /// directly.
    pub fn update(&mut self, batch: &[&ProbVector], beta: f64) -> Result<()> {
        let Some(first) = batch.first() else {
            return Ok(());
        };
        let k = first.len();
        let mut avg = vec![0.0; k];
        for p in batch {
            if p.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: p.len(),
                });
            }
            for (a, v) in avg.iter_mut().zip(p.as_slice()) {
                *a += v / batch.len() as f64;
            }
        }
        let next = match &self.mean {
            None => avg,
            Some(prev) => {
                if prev.len() != k {
                    return Err(Error::DimensionMismatch {
                        expected: prev.len(),
                        got: k,
                    });
                }
                prev.as_slice()
                    .iter()
                    .zip(&avg)
                    .map(|(p, a)| beta * p + (1.0 - beta) * a)
                    .collect()
            }
        };
        // renormalize away rounding drift
        let s: f64 = next.iter().sum();
        self.mean = Some(ProbVector::new(next.into_iter().map(|v| v / s).collect())?);
        Ok(())
    }
}
