use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Fixtures, PromptSpec};
use crate::data::CorruptionSpec;
use crate::engine::{grad_similarity_analysis, GradSimilarity};
use crate::error::{Error, Result};
use crate::net::{BlackBoxNet, SteeringNet};
use crate::service::WhiteBoxHandle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientAnalysisConfig {
    /// `kind:severity:seed`; empty for clean images.
    pub corruption: String,
    pub alphas: Vec<f64>,
    /// Random batches drawn from the target set.
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub prompt: PromptSpec,
}

impl Default for GradientAnalysisConfig {
    fn default() -> Self {
        Self {
            corruption: "contrast:5:3".into(),
            alphas: (1..=9).map(|i| i as f64 / 10.0).collect(),
            batches: 8,
            batch_size: 64,
            seed: 7,
            prompt: PromptSpec::default(),
        }
    }
}

/// Batch means at one fusion weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub relevance: f64,
    pub effectiveness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientAnalysis {
    pub per_alpha: Vec<AlphaSummary>,
    /// `cos(g_local, g_black)` per batch.
    pub local_vs_black: Vec<f64>,
    pub per_batch: Vec<Vec<GradSimilarity>>,
}

impl GradientAnalysis {
    pub fn local_vs_black_mean(&self) -> f64 {
        self.local_vs_black.iter().sum::<f64>() / self.local_vs_black.len().max(1) as f64
    }

    /// Places where the mean effectiveness drops as alpha grows.
    pub fn effectiveness_inversions(&self) -> usize {
        self.per_alpha
            .windows(2)
            .filter(|w| w[1].effectiveness < w[0].effectiveness)
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,relevance,effectiveness,local_vs_black\n");
        let lvb = self.local_vs_black_mean();
        for a in &self.per_alpha {
            s.push_str(&format!("{},{},{},{}\n", a.alpha, a.relevance, a.effectiveness, lvb));
        }
        s
    }
}

/// Gradient cosines on random batches of the (corrupted) target set, using
/// white-box access to the target model.
pub fn analyze_gradients(fixtures: &Fixtures, cfg: &GradientAnalysisConfig) -> Result<GradientAnalysis> {
    if cfg.batches == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("need at least one nonempty batch".into()));
    }
    let set = if cfg.corruption.is_empty() {
        fixtures.target.clone()
    } else {
        fixtures.target.corrupted(&cfg.corruption.parse::<CorruptionSpec>()?)?
    };
    if cfg.batch_size > set.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} target samples",
            cfg.batch_size,
            set.len()
        )));
    }
    let prompt = cfg.prompt.build(fixtures.dims())?;
    let steering = SteeringNet(fixtures.steering.clone());
    let target = WhiteBoxHandle::new(BlackBoxNet(fixtures.blackbox.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows: Vec<usize> = (0..set.len()).collect();
    let mut per_batch = Vec::with_capacity(cfg.batches);
    for _ in 0..cfg.batches {
        rows.shuffle(&mut rng);
        let batch = set.select(&rows[..cfg.batch_size]);
        per_batch.push(grad_similarity_analysis(&batch.images, &prompt, &steering, &target, &cfg.alphas)?);
    }
    let n = per_batch.len() as f64;
    let per_alpha = cfg
        .alphas
        .iter()
        .enumerate()
        .map(|(i, &alpha)| AlphaSummary {
            alpha,
            relevance: per_batch.iter().map(|b| b[i].relevance).sum::<f64>() / n,
            effectiveness: per_batch.iter().map(|b| b[i].effectiveness).sum::<f64>() / n,
        })
        .collect();
    Ok(GradientAnalysis {
        per_alpha,
        local_vs_black: per_batch.iter().map(|b| b[0].local_vs_black).collect(),
        per_batch,
    })
}
