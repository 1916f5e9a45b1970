//! Multilayer perceptrons with layer normalization, built on the tape.
//!
//! Each hidden block computes `tanh(LN(x W + b) * gamma + beta)`; the head is
//! a dense layer followed by a softmax. The normalization gains and shifts
//! (`gamma`, `beta`) are the parameters adapted at test time.

use std::sync::Arc;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, DenseArray, Gradients, Tape, Var};
use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};
use crate::prob::{argmax, ProbVector};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        if input_dim == 0 || classes < 2 || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "invalid architecture: input {input_dim}, hidden {hidden:?}, classes {classes}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden,
            classes,
        })
    }

    /// Default steering width: two hidden blocks of 128.
    pub fn steering(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![128, 128],
            classes,
        }
    }

    /// Default target width: three hidden blocks of 512.
    pub fn black_box(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![512, 512, 512],
            classes,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    weight: Arc<DenseArray>,
    bias: Arc<DenseArray>,
    gamma: Arc<DenseArray>,
    beta: Arc<DenseArray>,
}

/// Which parameters a forward pass records as differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// Everything is a constant.
    Frozen,
    /// Only the normalization affine parameters.
    Theta,
    /// Every parameter (source training).
    All,
}

/// What a caller wants gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Input,
    Theta,
    Both,
}

#[derive(Debug, Clone)]
struct BlockVars {
    weight: Var,
    bias: Var,
    gamma: Var,
    beta: Var,
}

/// Gains and shifts of every normalization layer, in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub gamma: Vec<DenseArray>,
    pub beta: Vec<DenseArray>,
}

impl Theta {
    pub fn len(&self) -> usize {
        self.gamma.iter().chain(&self.beta).map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.beta)
            .flat_map(|(g, b)| g.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradients of a scalar produced by [`ForwardPass::grad`].
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub input: Option<DenseArray>,
    pub theta: Option<Theta>,
}

/// A recorded forward pass: the tape, its input and its softmax output.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub input: Var,
    pub probs: Var,
    blocks: Vec<BlockVars>,
    head: (Var, Var),
    mode: ParamMode,
}

impl ForwardPass {
    pub fn probabilities(&self) -> Result<Vec<ProbVector>> {
        Ok(rows_to_probs(self.tape.value(self.probs)?))
    }

    /// Gradients of `loss` (a scalar on this tape).
    pub fn grad(&self, loss: Var, wrt: Wrt) -> Result<NetGradients> {
        let want_theta = matches!(wrt, Wrt::Theta | Wrt::Both);
        if want_theta && self.mode == ParamMode::Frozen {
            return Err(Error::ForeignVariable);
        }
        let grads = self.tape.backward(loss)?;
        self.collect(&grads, wrt)
    }

    pub fn collect(&self, grads: &Gradients, wrt: Wrt) -> Result<NetGradients> {
        let input = match wrt {
            Wrt::Input | Wrt::Both => Some(grads.wrt(self.input)?),
            Wrt::Theta => None,
        };
        let theta = match wrt {
            Wrt::Theta | Wrt::Both => {
                if self.mode == ParamMode::Frozen {
                    return Err(Error::ForeignVariable);
                }
                let mut gamma = Vec::new();
                let mut beta = Vec::new();
                for b in &self.blocks {
                    gamma.push(grads.wrt(b.gamma)?);
                    beta.push(grads.wrt(b.beta)?);
                }
                Some(Theta { gamma, beta })
            }
            Wrt::Input => None,
        };
        Ok(NetGradients { input, theta })
    }

    /// Gradients of every parameter in [`Mlp::params_mut`] order.
    fn all_param_grads(&self, grads: &Gradients) -> Result<Vec<DenseArray>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for v in [b.weight, b.bias, b.gamma, b.beta] {
                out.push(grads.wrt(v)?);
            }
        }
        out.push(grads.wrt(self.head.0)?);
        out.push(grads.wrt(self.head.1)?);
        Ok(out)
    }
}

pub(crate) fn rows_to_probs(p: &DenseArray) -> Vec<ProbVector> {
    p.rows()
        .into_iter()
        .map(|r| ProbVector::from_softmax(r.to_vec()))
        .collect()
}

/// Dense + layer-norm + tanh blocks followed by a softmax head.
#[derive(Debug, Clone)]
pub struct Mlp {
    arch: Architecture,
    blocks: Vec<Block>,
    head_weight: Arc<DenseArray>,
    head_bias: Arc<DenseArray>,
}

impl Mlp {
    /// Gaussian `N(0, 1/fan_in)` weights, zero biases, unit gains.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |fan_in: usize, fan_out: usize| {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(&mut rng))
        };
        let mut blocks = Vec::new();
        let mut width = arch.input_dim;
        for &h in &arch.hidden {
            blocks.push(Block {
                weight: Arc::new(dense(width, h)),
                bias: Arc::new(Array2::zeros((1, h))),
                gamma: Arc::new(Array2::ones((1, h))),
                beta: Arc::new(Array2::zeros((1, h))),
            });
            width = h;
        }
        let head_weight = Arc::new(dense(width, arch.classes));
        let head_bias = Arc::new(Array2::zeros((1, arch.classes)));
        Self {
            arch,
            blocks,
            head_weight,
            head_bias,
        }
    }

    /// All weights and biases zero, gains one, shifts zero.
    pub fn zeros(arch: Architecture) -> Self {
        let mut net = Self::init(arch, 0);
        for b in &mut net.blocks {
            Arc::make_mut(&mut b.weight).fill(0.0);
        }
        Arc::make_mut(&mut net.head_weight).fill(0.0);
        net
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn params(&self) -> Vec<&Arc<DenseArray>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.weight, &b.bias, &b.gamma, &b.beta]);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Arc<DenseArray>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.weight, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    fn check_input(&self, images: &DenseArray) -> Result<()> {
        if images.ncols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "net expects {} inputs per sample, batch has {}",
                self.arch.input_dim,
                images.ncols()
            )));
        }
        if images.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Records a forward pass with `images` as the differentiable input.
    pub fn forward(&self, images: &DenseArray, mode: ParamMode) -> Result<ForwardPass> {
        self.check_input(images)?;
        let mut tape = Tape::new();
        let input = tape.variable(images.clone());
        self.forward_on(tape, input, mode)
    }

    /// Records a forward pass on an existing tape starting from `input`.
    pub fn forward_on(&self, mut tape: Tape, input: Var, mode: ParamMode) -> Result<ForwardPass> {
        let param = |tape: &mut Tape, a: &Arc<DenseArray>, differentiable: bool| {
            if differentiable {
                tape.variable(Arc::clone(a))
            } else {
                tape.constant(Arc::clone(a))
            }
        };
        let all = mode == ParamMode::All;
        let theta = mode != ParamMode::Frozen;
        let mut x = input;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let vars = BlockVars {
                weight: param(&mut tape, &b.weight, all),
                bias: param(&mut tape, &b.bias, all),
                gamma: param(&mut tape, &b.gamma, theta),
                beta: param(&mut tape, &b.beta, theta),
            };
            let z = tape.matmul(x, vars.weight)?;
            let z = tape.add_row(z, vars.bias)?;
            let z = tape.layer_norm(z, LN_EPS)?;
            let z = tape.mul_row(z, vars.gamma)?;
            let z = tape.add_row(z, vars.beta)?;
            x = tape.tanh(z)?;
            blocks.push(vars);
        }
        let hw = param(&mut tape, &self.head_weight, all);
        let hb = param(&mut tape, &self.head_bias, all);
        let logits = tape.matmul(x, hw)?;
        let logits = tape.add_row(logits, hb)?;
        let probs = tape.softmax(logits)?;
        Ok(ForwardPass {
            tape,
            input,
            probs,
            blocks,
            head: (hw, hb),
            mode,
        })
    }

    /// Softmax probabilities, one row per sample, without recording gradients.
    pub fn predict(&self, images: &DenseArray) -> Result<DenseArray> {
        self.check_input(images)?;
        let mut x = images.clone();
        for b in &self.blocks {
            let mut z = x.dot(&*b.weight) + &*b.bias;
            for mut row in z.rows_mut() {
                let m = row.len() as f64;
                let mean = row.sum() / m;
                row -= mean;
                let var = row.iter().map(|v| v * v).sum::<f64>() / m;
                row *= 1.0 / (var + LN_EPS).sqrt();
            }
            z = z * &*b.gamma + &*b.beta;
            z.mapv_inplace(f64::tanh);
            x = z;
        }
        let logits = x.dot(&*self.head_weight) + &*self.head_bias;
        Ok(softmax_rows(&logits))
    }

    pub fn predict_probs(&self, images: &DenseArray) -> Result<Vec<ProbVector>> {
        Ok(rows_to_probs(&self.predict(images)?))
    }

    pub fn theta(&self) -> Theta {
        Theta {
            gamma: self.blocks.iter().map(|b| (*b.gamma).clone()).collect(),
            beta: self.blocks.iter().map(|b| (*b.beta).clone()).collect(),
        }
    }

    /// `theta <- theta - lr * grad`.
    pub fn step_theta(&mut self, grad: &Theta, lr: f64) -> Result<()> {
        if grad.gamma.len() != self.blocks.len() || grad.beta.len() != self.blocks.len() {
            return Err(Error::Shape("theta gradient has the wrong block count".into()));
        }
        for (b, (gg, gb)) in self.blocks.iter_mut().zip(grad.gamma.iter().zip(&grad.beta)) {
            if gg.dim() != b.gamma.dim() || gb.dim() != b.beta.dim() {
                return Err(Error::Shape("theta gradient has the wrong width".into()));
            }
            Arc::make_mut(&mut b.gamma).scaled_add(-lr, gg);
            Arc::make_mut(&mut b.beta).scaled_add(-lr, gb);
        }
        Ok(())
    }

    pub fn set_theta(&mut self, theta: &Theta) -> Result<()> {
        for (b, (g, s)) in self.blocks.iter_mut().zip(theta.gamma.iter().zip(&theta.beta)) {
            if g.dim() != b.gamma.dim() || s.dim() != b.beta.dim() {
                return Err(Error::Shape("theta has the wrong width".into()));
            }
            b.gamma = Arc::new(g.clone());
            b.beta = Arc::new(s.clone());
        }
        Ok(())
    }

    /// One plain gradient step on every parameter towards `teacher`, using
    /// the mean `KL(teacher || self)`. Returns the loss before the step.
    pub fn distill_step(&mut self, images: &DenseArray, teacher: &DenseArray, lr: f64) -> Result<f64> {
        self.check_input(images)?;
        if teacher.dim() != (images.nrows(), self.classes()) {
            return Err(Error::Shape(format!(
                "teacher is {:?}, expected ({}, {})",
                teacher.dim(),
                images.nrows(),
                self.classes()
            )));
        }
        let mut tape = Tape::new();
        let input = tape.constant(images.clone());
        let pass = self.forward_on(tape, input, ParamMode::All)?;
        let mut tape = pass.tape;
        let t = tape.constant(teacher.clone());
        let kl = tape.kl_rows(t, pass.probs)?;
        let loss = tape.mean(kl)?;
        let value = tape.value(loss)?[[0, 0]];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("distillation loss is {value}")));
        }
        if lr == 0.0 {
            return Ok(value);
        }
        let grads = tape.backward(loss)?;
        let pass = ForwardPass { tape, ..pass };
        let g = pass.all_param_grads(&grads)?;
        for (p, g) in self.params_mut().into_iter().zip(g) {
            Arc::make_mut(p).scaled_add(-lr, &g);
        }
        Ok(value)
    }

    /// SGD with momentum on every parameter given gradients from a pass
    /// recorded with [`ParamMode::All`].
    fn sgd_step(
        &mut self,
        pass: &ForwardPass,
        grads: &Gradients,
        velocity: &mut [DenseArray],
        cfg: &TrainConfig,
    ) -> Result<()> {
        let g = pass.all_param_grads(grads)?;
        for ((p, v), g) in self.params_mut().into_iter().zip(velocity.iter_mut()).zip(g) {
            let p = Arc::make_mut(p);
            // decoupled from the momentum buffer: v = m v + g + wd p
            v.mapv_inplace(|x| x * cfg.momentum);
            *v += &g;
            v.scaled_add(cfg.weight_decay, p);
            p.scaled_add(-cfg.lr, v);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, kind: &str, seed: Option<u64>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(kind, seed).with_meta("architecture", &self.arch)?;
        for (i, b) in self.blocks.iter().enumerate() {
            ck.push(Tensor::from_array(format!("blocks.{i}.weight"), &b.weight));
            ck.push(Tensor::from_array(format!("blocks.{i}.bias"), &b.bias));
            ck.push(Tensor::from_array(format!("blocks.{i}.gamma"), &b.gamma));
            ck.push(Tensor::from_array(format!("blocks.{i}.beta"), &b.beta));
        }
        ck.push(Tensor::from_array("head.weight", &self.head_weight));
        ck.push(Tensor::from_array("head.bias", &self.head_bias));
        Ok(ck.seal())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: Architecture = ck.meta_value("architecture")?;
        let mut net = Self::init(arch.clone(), 0);
        let load = |name: String, like: &DenseArray| -> Result<Arc<DenseArray>> {
            let a = ck.tensor(&name)?.to_array()?;
            if a.dim() != like.dim() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}", a.dim())));
            }
            Ok(Arc::new(a))
        };
        for (i, b) in net.blocks.iter_mut().enumerate() {
            b.weight = load(format!("blocks.{i}.weight"), &b.weight)?;
            b.bias = load(format!("blocks.{i}.bias"), &b.bias)?;
            b.gamma = load(format!("blocks.{i}.gamma"), &b.gamma)?;
            b.beta = load(format!("blocks.{i}.beta"), &b.beta)?;
        }
        net.head_weight = load("head.weight".into(), &net.head_weight)?;
        net.head_bias = load("head.bias".into(), &net.head_bias)?;
        Ok(net)
    }

    /// SHA-256 over every parameter bit pattern.
    pub fn digest(&self) -> String {
        self.to_checkpoint("digest", None)
            .map(|c| c.digest)
            .unwrap_or_default()
    }
}

/// The small local model whose gradients steer the prompt.
#[derive(Debug, Clone)]
pub struct SteeringNet(pub Mlp);

/// The large model that only the simulated service may evaluate.
#[derive(Debug, Clone)]
pub struct BlackBoxNet(pub Mlp);

impl std::ops::Deref for SteeringNet {
    type Target = Mlp;
    fn deref(&self) -> &Mlp {
        &self.0
    }
}

impl std::ops::DerefMut for SteeringNet {
    fn deref_mut(&mut self) -> &mut Mlp {
        &mut self.0
    }
}

impl std::ops::Deref for BlackBoxNet {
    type Target = Mlp;
    fn deref(&self) -> &Mlp {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

/// Fraction of rows whose argmax matches `labels`.
pub fn accuracy(probs: &DenseArray, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(r, &y)| argmax(r.as_slice().expect("contiguous row")) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Cross-entropy training with minibatch SGD and momentum.
pub fn train_source(
    net: &mut Mlp,
    images: &DenseArray,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if images.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            images.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= net.classes()) {
        return Err(Error::Config(format!("label {bad} out of range")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if images.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("training images contain non-finite values".into()));
    }
    let n = images.nrows();
    let k = net.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity: Vec<DenseArray> = net.params().iter().map(|p| Array2::zeros(p.dim())).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = images.select(ndarray::Axis(0), chunk);
            let mut onehot = Array2::zeros((chunk.len(), k));
            for (r, &i) in chunk.iter().enumerate() {
                onehot[[r, labels[i]]] = 1.0;
            }
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let pass = net.forward_on(tape, input, ParamMode::All)?;
            let mut tape = pass.tape;
            let logp = tape.log_floor(pass.probs, crate::prob::LOG_FLOOR)?;
            let y = tape.constant(onehot);
            let picked = tape.mul(logp, y)?;
            let s = tape.sum(picked)?;
            let loss = tape.scale(s, -1.0 / chunk.len() as f64)?;
            let value = tape.value(loss)?[[0, 0]];
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged in epoch {epoch} (loss {value})"
                )));
            }
            total += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let pass = ForwardPass { tape, ..pass };
            net.sgd_step(&pass, &grads, &mut velocity, cfg)?;
        }
        if net.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("parameters became non-finite in epoch {epoch}")));
        }
        epoch_loss.push(total / n as f64);
    }
    let train_accuracy = evaluate(net, images, labels)?;
    Ok(TrainReport {
        epoch_loss,
        train_accuracy,
    })
}

/// Accuracy of `net` on a labeled set, evaluated in chunks.
pub fn evaluate(net: &Mlp, images: &DenseArray, labels: &[usize]) -> Result<f64> {
    if images.nrows() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let n = images.nrows();
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let p = net.predict(&images.slice(s![start..end, ..]).to_owned())?;
        hits += (accuracy(&p, &labels[start..end]) * (end - start) as f64).round() as usize;
        start = end;
    }
    Ok(hits as f64 / n as f64)
}
