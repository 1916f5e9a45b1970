//! Online prompt adaptation steered by a local white-box model.
//!
//! Each step sends the prompted batch to the service once, fuses the answer
//! with the steering model's prediction, and takes one gradient step on the
//! prompt (through the steering model only) and one on the steering model's
//! normalization parameters.

mod analysis;
mod optim;
mod report;

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::data::{ImageBatch, LabelBook, OnlineStream};
use crate::error::{Error, Result};
use crate::net::{ParamMode, SteeringNet, Theta, Wrt};
use crate::prob::{argmax, diversity_gate, reliability_weight, FilterParams, ProbVector};
use crate::prompt::FramePrompt;
use crate::service::{query_all, BlackBoxApi};

pub use analysis::{grad_similarity_analysis, GradSimilarity};
pub use optim::{AdamWConfig, AdamWState, EmaState};
pub use report::{BatchRecord, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    BlackBox,
    Harmonized,
}

/// Which input the reliability weights are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInput {
    Prompted,
    Clean,
}

/// Entropy target of the prompt loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `H(alpha p_S + (1 - alpha) p_B)`.
    Harmonized,
    /// `H(p_S)` alone; the service answer is not used for the update.
    SteeringOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub filter: FilterParams,
    pub lr_delta: f64,
    pub lr_theta: f64,
    pub ema_beta: f64,
    pub prediction_source: PredictionSource,
    pub weight_detach: bool,
    pub weight_input: WeightInput,
    /// When false every weight is 1 and every gate is open.
    pub use_filter: bool,
    pub objective: Objective,
    pub update_prompt: bool,
    pub update_theta: bool,
    pub adamw: AdamWConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::for_classes(10)
    }
}

impl EngineConfig {
    pub fn for_classes(k: usize) -> Self {
        Self {
            filter: FilterParams::for_classes(k),
            lr_delta: 0.01,
            lr_theta: 2e-5,
            ema_beta: 0.9,
            prediction_source: PredictionSource::BlackBox,
            weight_detach: true,
            weight_input: WeightInput::Prompted,
            use_filter: true,
            objective: Objective::Harmonized,
            update_prompt: true,
            update_theta: true,
            adamw: AdamWConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if !(self.lr_delta >= 0.0 && self.lr_delta.is_finite()) {
            return Err(Error::Config(format!("lr_delta {} must be >= 0", self.lr_delta)));
        }
        if !(self.lr_theta >= 0.0 && self.lr_theta.is_finite()) {
            return Err(Error::Config(format!("lr_theta {} must be >= 0", self.lr_theta)));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config(format!("ema_beta {} outside [0, 1)", self.ema_beta)));
        }
        let a = self.adamw;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("invalid AdamW constants".into()));
        }
        Ok(())
    }
}

/// Everything the adaptation loop mutates.
#[derive(Debug, Clone)]
pub struct BetaState {
    pub prompt: FramePrompt,
    pub steering: SteeringNet,
    pub adamw: AdamWState,
    pub ema: EmaState,
}

impl BetaState {
    pub fn new(prompt: FramePrompt, steering: SteeringNet, cfg: &EngineConfig) -> Self {
        Self {
            adamw: AdamWState::new(prompt.len(), cfg.adamw),
            prompt,
            steering,
            ema: EmaState::default(),
        }
    }
}

/// Result of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Headline predictions per the configured source.
    pub predictions: Vec<usize>,
    pub predictions_blackbox: Vec<usize>,
    pub predictions_harmonized: Vec<usize>,
    pub metrics: StepMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub loss_harmon: f64,
    pub loss_steer: f64,
    pub loss_consist: f64,
    pub entropy_steer: f64,
    pub entropy_blackbox: f64,
    pub entropy_harmonized: f64,
    pub reliable_rate: f64,
    pub diverse_rate: f64,
    pub queries: u64,
}

/// Losses and gradients of one batch, without touching any state.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub metrics: StepMetrics,
    /// Gradient of the full loss with respect to the prompt parameters.
    pub grad_delta: Vec<f64>,
    /// Gradient of the steering term with respect to theta; `None` when no
    /// sample passed both gates.
    pub grad_theta: Option<Theta>,
    pub w_harmon: Vec<f64>,
    pub w_steer: Vec<f64>,
    /// Steering predictions on the prompted batch.
    pub p_steer: Vec<ProbVector>,
    /// Samples passing both the reliability and the diversity gate.
    pub gated: Vec<bool>,
    pub harmonized: Vec<ProbVector>,
}

fn to_matrix(rows: &[ProbVector]) -> DenseArray {
    let k = rows.first().map_or(0, ProbVector::len);
    Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i].as_slice()[j])
}

fn column(values: &[f64]) -> DenseArray {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}

/// Builds the loss for `images` given the service answers `p_b` on the
/// prompted batch and returns values and gradients.
pub fn compute_loss(
    images: &DenseArray,
    p_b: &[ProbVector],
    state: &BetaState,
    cfg: &EngineConfig,
) -> Result<LossBreakdown> {
    let n = images.nrows();
    let k = state.steering.classes();
    if p_b.len() != n {
        return Err(Error::Shape(format!("{} service answers for {n} images", p_b.len())));
    }
    if let Some(p) = p_b.iter().find(|p| p.len() != k) {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: p.len(),
        });
    }
    let FilterParams {
        epsilon,
        d,
        alpha,
        lambda,
    } = cfg.filter;
    let prompted = state.prompt.apply(images)?;
    let clean_probs = state.steering.predict(images)?;

    let mut pass = state.steering.forward(&prompted, ParamMode::Theta)?;
    let p_s_val = pass.tape.value(pass.probs)?.clone();
    let p_steer = crate::net::rows_to_probs(&p_s_val);

    // entropies that drive the filter weights
    let weight_probs: Vec<ProbVector> = match cfg.weight_input {
        WeightInput::Prompted => p_steer.clone(),
        WeightInput::Clean => crate::net::rows_to_probs(&clean_probs),
    };
    let h_weight: Vec<f64> = weight_probs.iter().map(crate::prob::entropy).collect();
    let mut reliable = vec![true; n];
    let mut diverse = vec![true; n];
    let mut w_h = vec![1.0; n];
    if cfg.use_filter {
        for i in 0..n {
            w_h[i] = reliability_weight(h_weight[i], epsilon)?;
            reliable[i] = h_weight[i] < epsilon;
            diverse[i] = diversity_gate(&p_steer[i], state.ema.get(), d)?;
        }
    }
    let gated: Vec<bool> = (0..n).map(|i| reliable[i] && diverse[i]).collect();
    let w_s: Vec<f64> = (0..n).map(|i| if gated[i] { w_h[i] } else { 0.0 }).collect();

    let tape = &mut pass.tape;
    let p_s = pass.probs;
    // weights: constants, or functions of the prompted steering entropy
    let (wh_var, ws_var) = if cfg.weight_detach || !cfg.use_filter || cfg.weight_input == WeightInput::Clean {
        (tape.constant(column(&w_h)), tape.constant(column(&w_s)))
    } else {
        let h = tape.entropy_rows(p_s)?;
        let neg = tape.scale(h, -1.0)?;
        let shifted = tape.add_scalar(neg, epsilon)?;
        let e = tape.exp(shifted)?;
        let ind_h: Vec<f64> = reliable.iter().map(|&r| f64::from(u8::from(r))).collect();
        let ind_s: Vec<f64> = gated.iter().map(|&r| f64::from(u8::from(r))).collect();
        let ih = tape.constant(column(&ind_h));
        let is = tape.constant(column(&ind_s));
        (tape.mul(e, ih)?, tape.mul(e, is)?)
    };

    let p_b_mat = to_matrix(p_b);
    let h_s = tape.entropy_rows(p_s)?;
    let harmon_target = match cfg.objective {
        Objective::Harmonized => {
            let a = tape.scale(p_s, alpha)?;
            let b = tape.constant(p_b_mat.mapv(|v| (1.0 - alpha) * v));
            tape.add(a, b)?
        }
        Objective::SteeringOnly => p_s,
    };
    let h_h = tape.entropy_rows(harmon_target)?;
    let clean = tape.constant(clean_probs);
    let kl = tape.kl_rows(clean, p_s)?;

    let inv_n = 1.0 / n as f64;
    let weighted_h = tape.mul(h_h, wh_var)?;
    let sum_h = tape.sum(weighted_h)?;
    let l_harm = tape.scale(sum_h, inv_n)?;
    let weighted_s = tape.mul(h_s, ws_var)?;
    let sum_s = tape.sum(weighted_s)?;
    let l_steer = tape.scale(sum_s, inv_n)?;
    let sum_kl = tape.sum(kl)?;
    let l_cons = tape.scale(sum_kl, lambda * inv_n)?;
    let l_partial = tape.add(l_harm, l_steer)?;
    let l_full = tape.add(l_partial, l_cons)?;

    let val = |v| -> Result<f64> { Ok(pass.tape.value(v)?[[0, 0]]) };
    let mut metrics = StepMetrics {
        loss: val(l_full)?,
        loss_harmon: val(l_harm)?,
        loss_steer: val(l_steer)?,
        loss_consist: val(l_cons)?,
        ..StepMetrics::default()
    };
    if !metrics.loss.is_finite() {
        return Err(Error::Numerical(format!("loss is {}", metrics.loss)));
    }
    let harmonized: Vec<ProbVector> = p_steer
        .iter()
        .zip(p_b)
        .map(|(s, b)| crate::prob::harmonize(s, b, alpha))
        .collect::<Result<_>>()?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() * inv_n;
    metrics.entropy_steer = mean(p_steer.iter().map(crate::prob::entropy).collect());
    metrics.entropy_blackbox = mean(p_b.iter().map(crate::prob::entropy).collect());
    metrics.entropy_harmonized = mean(harmonized.iter().map(crate::prob::entropy).collect());
    metrics.reliable_rate = reliable.iter().filter(|&&r| r).count() as f64 * inv_n;
    metrics.diverse_rate = diverse.iter().filter(|&&r| r).count() as f64 * inv_n;

    let full = pass.grad(l_full, Wrt::Input)?;
    let grad_delta = state
        .prompt
        .scatter_grad(&full.input.expect("input gradient requested"))?;
    let any_steer = w_s.iter().any(|&w| w != 0.0);
    let grad_theta = if any_steer {
        pass.grad(l_steer, Wrt::Theta)?.theta
    } else {
        None
    };
    Ok(LossBreakdown {
        metrics,
        grad_delta,
        grad_theta,
        w_harmon: w_h,
        w_steer: w_s,
        p_steer,
        gated,
        harmonized,
    })
}

/// One online step on `batch`: a single service request for the prompted
/// images, then one update of the prompt and of theta.
pub fn step(
    batch: &ImageBatch,
    state: &mut BetaState,
    client: &dyn BlackBoxApi,
    cfg: &EngineConfig,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if batch.dims != state.prompt.dims() {
        return Err(Error::Shape("batch and prompt image dims differ".into()));
    }
    let before = client.answered();
    let prompted = state.prompt.apply(&batch.images)?;
    let p_b = query_all(client, &prompted, batch.dims)?;
    let loss = compute_loss(&batch.images, &p_b, state, cfg)?;
    let predictions_blackbox: Vec<usize> = p_b.iter().map(ProbVector::argmax).collect();
    let predictions_harmonized: Vec<usize> = loss.harmonized.iter().map(|p| argmax(p.as_slice())).collect();

    if cfg.update_prompt && cfg.lr_delta > 0.0 {
        let mut params = state.prompt.params().to_vec();
        state.adamw.step(&mut params, &loss.grad_delta, cfg.lr_delta)?;
        state.prompt.set_params(&params)?;
    }
    if cfg.update_theta && cfg.lr_theta > 0.0 {
        if let Some(g) = &loss.grad_theta {
            state.steering.step_theta(g, cfg.lr_theta)?;
        }
    }
    let passing: Vec<&ProbVector> = loss
        .p_steer
        .iter()
        .zip(&loss.gated)
        .filter_map(|(p, &g)| g.then_some(p))
        .collect();
    state.ema.update(&passing, cfg.ema_beta)?;

    let mut metrics = loss.metrics;
    metrics.queries = client.answered() - before;
    let predictions = match cfg.prediction_source {
        PredictionSource::BlackBox => predictions_blackbox.clone(),
        PredictionSource::Harmonized => predictions_harmonized.clone(),
    };
    Ok(StepOutput {
        predictions,
        predictions_blackbox,
        predictions_harmonized,
        metrics,
    })
}

/// Options for [`run_stream`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Stop once this many requests have been billed; the last batch is
    /// truncated to fit.
    pub max_queries: Option<u64>,
}

/// Strictly sequential one-pass run. Labels are used for scoring only.
pub fn run_stream(
    stream: &mut OnlineStream,
    state: &mut BetaState,
    client: &dyn BlackBoxApi,
    cfg: &EngineConfig,
    labels: &LabelBook,
    opts: &RunOptions,
) -> Result<RunReport> {
    cfg.validate()?;
    let segments = stream.segments().to_vec();
    let mut seg_of = Vec::new();
    for s in &segments {
        seg_of.extend(std::iter::repeat_n(s.name.clone(), s.batches));
    }
    let mut report = RunReport::new("beta", 1, crate::service::PRICE_PER_REQUEST);
    let start = client.answered();
    for (index, batch) in stream.take()?.enumerate() {
        let used = client.answered() - start;
        let batch = match opts.max_queries {
            Some(cap) if used >= cap => break,
            Some(cap) if used + batch.len() as u64 > cap => truncate(&batch, (cap - used) as usize)?,
            _ => batch,
        };
        let t0 = Instant::now();
        let mut rec = BatchRecord {
            index,
            segment: seg_of.get(index).cloned().unwrap_or_default(),
            size: batch.len(),
            ..BatchRecord::default()
        };
        match step(&batch, state, client, cfg) {
            Ok(out) => {
                rec.answered = batch.len();
                rec.correct = labels.hits(&batch.ids, &out.predictions);
                rec.correct_blackbox = labels.hits(&batch.ids, &out.predictions_blackbox);
                rec.correct_harmonized = labels.hits(&batch.ids, &out.predictions_harmonized);
                let m = out.metrics;
                rec.loss = m.loss;
                rec.loss_harmon = m.loss_harmon;
                rec.loss_steer = m.loss_steer;
                rec.loss_consist = m.loss_consist;
                rec.entropy_steer = m.entropy_steer;
                rec.entropy_blackbox = m.entropy_blackbox;
                rec.entropy_harmonized = m.entropy_harmonized;
                rec.reliable_rate = m.reliable_rate;
                rec.diverse_rate = m.diverse_rate;
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

pub(crate) fn truncate(batch: &ImageBatch, n: usize) -> Result<ImageBatch> {
    ImageBatch::new(
        batch.ids[..n].to_vec(),
        batch.images.slice(ndarray::s![..n, ..]).to_owned(),
        batch.dims,
    )
}
