use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{argmaxes, mean_entropy, run_batches, Outcome};
use crate::autodiff::DenseArray;
use crate::data::{ImageDims, LabelBook, OnlineStream};
use crate::engine::{RunOptions, RunReport};
use crate::error::{Error, Result};
use crate::net::SteeringNet;
use crate::prob::ProbVector;
use crate::service::{query_all, BlackBoxApi};

const VIEW_NOISE: f64 = 0.02;
const MAX_CROP: usize = 3;

/// View `view` of every image in the batch. View 0 is the identity; the
/// others combine a random horizontal flip, a small crop resized back to
/// full size and light pixel noise, drawn from `(seed, view)`.
pub fn augment_view(images: &DenseArray, dims: ImageDims, view: usize, seed: u64) -> DenseArray {
    if view == 0 {
        return images.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (view as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let flip = rng.random::<bool>();
    let crop = rng.random_range(0..=MAX_CROP.min(dims.height - 1).min(dims.width - 1));
    let top = rng.random_range(0..=crop);
    let left = rng.random_range(0..=crop);
    let (ch, cw) = (dims.height - crop, dims.width - crop);
    let noise = Normal::new(0.0, VIEW_NOISE).expect("valid sigma");
    let mut out = images.clone();
    for (src, mut dst) in images.rows().into_iter().zip(out.rows_mut()) {
        for r in 0..dims.height {
            let sr = top + r * ch / dims.height;
            for c in 0..dims.width {
                let col = if flip { dims.width - 1 - c } else { c };
                let sc = left + col * cw / dims.width;
                for k in 0..dims.channels {
                    let v = src[dims.index(sr, sc, k)] + noise.sample(&mut rng);
                    dst[dims.index(r, c, k)] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Per-sample average over views.
pub fn mean_views(views: &[Vec<ProbVector>]) -> Result<Vec<ProbVector>> {
    let Some(first) = views.first() else {
        return Err(Error::Config("no views to average".into()));
    };
    if views.len() == 1 {
        return Ok(first.clone());
    }
    let mut out = Vec::with_capacity(first.len());
    for (i, head) in first.iter().enumerate() {
        let k = head.len();
        let mut acc = vec![0.0; k];
        for v in views {
            let p = v.get(i).ok_or_else(|| Error::Shape("views differ in length".into()))?;
            if p.len() != k {
                return Err(Error::DimensionMismatch { expected: k, got: p.len() });
            }
            for (a, x) in acc.iter_mut().zip(p.as_slice()) {
                *a += x;
            }
        }
        let s: f64 = acc.iter().sum();
        out.push(ProbVector::new(acc.into_iter().map(|a| a / s).collect())?);
    }
    Ok(out)
}

/// Averages the service answers over `n_views` augmented copies; one
/// request per view per image.
pub fn tt_aug_predict(
    images: &DenseArray,
    dims: ImageDims,
    client: &dyn BlackBoxApi,
    n_views: usize,
    seed: u64,
) -> Result<Vec<ProbVector>> {
    if n_views == 0 {
        return Err(Error::Config("n_views must be at least 1".into()));
    }
    let views = (0..n_views)
        .map(|v| query_all(client, &augment_view(images, dims, v, seed), dims))
        .collect::<Result<Vec<_>>>()?;
    mean_views(&views)
}

pub fn tt_aug_stream(
    stream: &mut OnlineStream,
    client: &dyn BlackBoxApi,
    n_views: usize,
    seed: u64,
    labels: &LabelBook,
    opts: &RunOptions,
) -> Result<RunReport> {
    if n_views == 0 {
        return Err(Error::Config("n_views must be at least 1".into()));
    }
    run_batches(stream, client, labels, opts, "tt_aug", n_views, |batch| {
        let p = tt_aug_predict(&batch.images, batch.dims, client, n_views, seed)?;
        let pred = argmaxes(&p);
        let h = mean_entropy(&p);
        Ok(Outcome {
            predictions_blackbox: pred.clone(),
            predictions: pred,
            loss: h,
            entropy_blackbox: h,
        })
    })
}

/// Plain inference: one request per image, no adaptation.
pub fn source_stream(
    stream: &mut OnlineStream,
    client: &dyn BlackBoxApi,
    labels: &LabelBook,
    opts: &RunOptions,
) -> Result<RunReport> {
    run_batches(stream, client, labels, opts, "source", 1, |batch| {
        let p = query_all(client, &batch.images, batch.dims)?;
        let pred = argmaxes(&p);
        let h = mean_entropy(&p);
        Ok(Outcome {
            predictions_blackbox: pred.clone(),
            predictions: pred,
            loss: h,
            entropy_blackbox: h,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { lr: 0.05 }
    }
}

/// Online distillation of the local model towards the service answers on
/// clean inputs. Scores the student (predicting before each update); the
/// teacher's own predictions are kept in the black-box column.
pub fn distill_stream(
    stream: &mut OnlineStream,
    student: &mut SteeringNet,
    client: &dyn BlackBoxApi,
    cfg: &DistillConfig,
    labels: &LabelBook,
    opts: &RunOptions,
) -> Result<RunReport> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("distillation lr {} must be >= 0", cfg.lr)));
    }
    run_batches(stream, client, labels, opts, "distill", 1, |batch| {
        let teacher = query_all(client, &batch.images, batch.dims)?;
        let student_probs = student.predict_probs(&batch.images)?;
        let t = DenseArray::from_shape_fn((teacher.len(), teacher[0].len()), |(i, j)| teacher[i].as_slice()[j]);
        let loss = student.distill_step(&batch.images, &t, cfg.lr)?;
        Ok(Outcome {
            predictions: argmaxes(&student_probs),
            predictions_blackbox: argmaxes(&teacher),
            loss,
            entropy_blackbox: mean_entropy(&teacher),
        })
    })
}
