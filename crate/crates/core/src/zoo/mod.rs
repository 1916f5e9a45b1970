//! Gradient-free prompt baselines and query-hungry inference baselines that
//! reach the target only through [`BlackBoxApi`].

mod baselines;
mod estimate;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::data::{ImageBatch, ImageDims, LabelBook, OnlineStream};
use crate::engine::{BatchRecord, RunOptions, RunReport};
use crate::error::{Error, Result};
use crate::prob::{entropy, ProbVector};
use crate::prompt::FramePrompt;
use crate::service::{query_all, BlackBoxApi, PRICE_PER_REQUEST};

pub use baselines::{
    augment_view, distill_stream, mean_views, source_stream, tt_aug_predict, tt_aug_stream, DistillConfig,
};
pub use estimate::{
    rademacher, rgf_grad, rgf_grad_with, spsa_gc_step, spsa_grad_with, IsoEs, SpsaGcState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZooMethod {
    Rgf,
    SpsaGc,
    /// Isotropic evolution strategy standing in for CMA-ES.
    IsoEs,
}

impl ZooMethod {
    pub fn tag(self) -> &'static str {
        match self {
            ZooMethod::Rgf => "zoo_rgf",
            ZooMethod::SpsaGc => "zoo_spsa_gc",
            ZooMethod::IsoEs => "zoo_iso_es",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZooConfig {
    pub method: ZooMethod,
    /// Directions per RGF estimate.
    pub q: usize,
    /// Perturbation size (RGF, SPSA) or search radius (ES).
    pub mu: f64,
    pub lr: f64,
    /// Nesterov momentum of SPSA-GC.
    pub momentum: f64,
    /// Times each test image is sent to the service.
    pub queries_per_sample: usize,
    pub seed: u64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            method: ZooMethod::SpsaGc,
            q: 15,
            mu: 0.01,
            lr: 0.01,
            momentum: 0.9,
            queries_per_sample: 16,
            seed: 0,
        }
    }
}

impl ZooConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 {
            return Err(Error::Config("q must be at least 1".into()));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu {} must be positive", self.mu)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        let b = self.queries_per_sample;
        if b == 0 {
            return Err(Error::Config("queries_per_sample must be at least 1".into()));
        }
        match self.method {
            ZooMethod::Rgf if !b.is_multiple_of(self.q + 1) => Err(Error::Config(format!(
                "RGF spends q + 1 = {} queries per estimate; {b} is not a multiple",
                self.q + 1
            ))),
            ZooMethod::IsoEs if b == 2 => Err(Error::Config(
                "ES needs one center query plus a population of at least 2".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Mean black-box entropy of a batch under candidate prompt parameters.
/// Every evaluation is one request per image; answers are kept so the
/// caller can predict from them.
struct BatchObjective<'a> {
    client: &'a dyn BlackBoxApi,
    images: &'a DenseArray,
    dims: ImageDims,
    prompt: FramePrompt,
    answers: Vec<Vec<ProbVector>>,
}

impl BatchObjective<'_> {
    fn eval(&mut self, params: &[f64]) -> Result<f64> {
        self.prompt.set_params(params)?;
        let x = self.prompt.apply(self.images)?;
        let p = query_all(self.client, &x, self.dims)?;
        let h = p.iter().map(entropy).sum::<f64>() / p.len() as f64;
        self.answers.push(p);
        Ok(h)
    }
}

fn argmaxes(p: &[ProbVector]) -> Vec<usize> {
    p.iter().map(ProbVector::argmax).collect()
}

fn mean_pair(a: &[ProbVector], b: &[ProbVector]) -> Result<Vec<ProbVector>> {
    a.iter().zip(b).map(|(x, y)| crate::prob::harmonize(x, y, 0.5)).collect()
}

/// What one batch of a baseline produced.
pub(crate) struct Outcome {
    pub predictions: Vec<usize>,
    pub predictions_blackbox: Vec<usize>,
    pub loss: f64,
    pub entropy_blackbox: f64,
}

/// Adapts `prompt` with one gradient-free update round per batch and
/// predicts from the answers at the pre-update prompt.
pub struct ZooAdapter {
    pub prompt: FramePrompt,
    pub config: ZooConfig,
    spsa: SpsaGcState,
    es: Option<IsoEs>,
    rng: ChaCha8Rng,
}

impl ZooAdapter {
    pub fn new(prompt: FramePrompt, config: ZooConfig) -> Result<Self> {
        config.validate()?;
        let es = match config.method {
            ZooMethod::IsoEs => Some(IsoEs::new(config.mu)?),
            _ => None,
        };
        Ok(Self {
            spsa: SpsaGcState::new(prompt.len()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            prompt,
            config,
            es,
        })
    }

    /// One batch: exactly `queries_per_sample` requests per image.
    pub fn step(&mut self, batch: &ImageBatch, client: &dyn BlackBoxApi) -> Result<(Vec<usize>, f64, f64)> {
        let o = self.step_outcome(batch, client)?;
        Ok((o.predictions, o.loss, o.entropy_blackbox))
    }

    fn step_outcome(&mut self, batch: &ImageBatch, client: &dyn BlackBoxApi) -> Result<Outcome> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let cfg = self.config.clone();
        let b = cfg.queries_per_sample;
        let mut params = self.prompt.params().to_vec();
        let mut obj = BatchObjective {
            client,
            images: &batch.images,
            dims: batch.dims,
            prompt: self.prompt.clone(),
            answers: Vec::with_capacity(b),
        };
        let rng = &mut self.rng;
        let first_loss;
        let predict_from: Vec<ProbVector>;
        match cfg.method {
            ZooMethod::Rgf => {
                let mut loss = None;
                for _ in 0..b / (cfg.q + 1) {
                    let g = rgf_grad(|p| obj.eval(p), &params, cfg.mu, cfg.q, rng)?;
                    loss.get_or_insert_with(|| mean_entropy(&obj.answers[0]));
                    step_params(&mut params, &g, cfg.lr)?;
                }
                first_loss = loss.expect("at least one estimate");
                predict_from = obj.answers[0].clone();
            }
            ZooMethod::SpsaGc => {
                // odd budgets spend the spare query on the current prompt
                first_loss = if b % 2 == 1 { obj.eval(&params)? } else { f64::NAN };
                for _ in 0..b / 2 {
                    let d = rademacher(params.len(), rng);
                    spsa_gc_step(|p| obj.eval(p), &mut params, &mut self.spsa, cfg.mu, cfg.lr, cfg.momentum, &d)?;
                    check_finite(&params)?;
                }
                predict_from = if b % 2 == 1 {
                    obj.answers[0].clone()
                } else {
                    mean_pair(&obj.answers[0], &obj.answers[1])?
                };
            }
            ZooMethod::IsoEs => {
                first_loss = obj.eval(&params)?;
                if b > 1 {
                    let es = self.es.as_mut().expect("ES state");
                    es.generation(|p| obj.eval(p), &mut params, b - 1, rng)?;
                    check_finite(&params)?;
                }
                predict_from = obj.answers[0].clone();
            }
        }
        debug_assert_eq!(obj.answers.len(), b);
        let loss = if first_loss.is_nan() {
            mean_entropy(&predict_from)
        } else {
            first_loss
        };
        self.prompt.set_params(&params)?;
        let predictions = argmaxes(&predict_from);
        Ok(Outcome {
            predictions_blackbox: predictions.clone(),
            predictions,
            loss,
            entropy_blackbox: mean_entropy(&predict_from),
        })
    }
}

fn mean_entropy(p: &[ProbVector]) -> f64 {
    p.iter().map(entropy).sum::<f64>() / p.len() as f64
}

fn step_params(params: &mut [f64], g: &[f64], lr: f64) -> Result<()> {
    for (p, gi) in params.iter_mut().zip(g) {
        *p -= lr * gi;
    }
    check_finite(params)
}

fn check_finite(params: &[f64]) -> Result<()> {
    if params.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("prompt became non-finite".into()))
    }
}

/// Online pass with a gradient-free adapter.
pub fn zoo_adapt_stream(
    stream: &mut OnlineStream,
    adapter: &mut ZooAdapter,
    client: &dyn BlackBoxApi,
    labels: &LabelBook,
    opts: &RunOptions,
) -> Result<RunReport> {
    let tag = adapter.config.method.tag();
    let per = adapter.config.queries_per_sample;
    run_batches(stream, client, labels, opts, tag, per, |batch| adapter.step_outcome(batch, client))
}

/// Shared online loop for the baselines: truncates the last batch to the
/// query cap and records skipped batches.
pub(crate) fn run_batches<F>(
    stream: &mut OnlineStream,
    client: &dyn BlackBoxApi,
    labels: &LabelBook,
    opts: &RunOptions,
    method: &str,
    per_sample: usize,
    mut per_batch: F,
) -> Result<RunReport>
where
    F: FnMut(&ImageBatch) -> Result<Outcome>,
{
    let segments = stream.segments().to_vec();
    let mut seg_of = Vec::new();
    for s in &segments {
        seg_of.extend(std::iter::repeat_n(s.name.clone(), s.batches));
    }
    let mut report = RunReport::new(method, per_sample as u64, PRICE_PER_REQUEST);
    let start = client.answered();
    for (index, batch) in stream.take()?.enumerate() {
        let used = client.answered() - start;
        let batch = match opts.max_queries {
            Some(cap) => {
                let fit = ((cap.saturating_sub(used)) / per_sample as u64) as usize;
                if fit == 0 {
                    break;
                }
                if fit < batch.len() {
                    crate::engine::truncate(&batch, fit)?
                } else {
                    batch
                }
            }
            None => batch,
        };
        let t0 = Instant::now();
        let mut rec = BatchRecord {
            index,
            segment: seg_of.get(index).cloned().unwrap_or_default(),
            size: batch.len(),
            ..BatchRecord::default()
        };
        match per_batch(&batch) {
            Ok(out) => {
                rec.answered = batch.len();
                rec.correct = labels.hits(&batch.ids, &out.predictions);
                rec.correct_blackbox = labels.hits(&batch.ids, &out.predictions_blackbox);
                rec.correct_harmonized = rec.correct;
                rec.loss = out.loss;
                rec.entropy_blackbox = out.entropy_blackbox;
            }
            Err(e @ Error::BudgetExhausted(_)) => {
                log::info!("stopping at batch {index}: {e}");
                break;
            }
            Err(e) => {
                log::warn!("batch {index} skipped: {e}");
                rec.error = Some(e.to_string());
            }
        }
        rec.queries = client.answered() - start;
        report.batches.push(rec);
        report.wall.push(t0.elapsed());
    }
    Ok(report)
}
