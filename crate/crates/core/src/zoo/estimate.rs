use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Random gradient-free estimate along the given directions:
/// `(1/q) sum_i [f(x + mu u_i) - f(x)] / mu * u_i`. Evaluates `f` once at
/// `x` and once per direction.
pub fn rgf_grad_with<F>(mut f: F, x: &[f64], mu: f64, directions: &[Vec<f64>]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if directions.is_empty() {
        return Err(Error::Config("RGF needs at least one direction".into()));
    }
    check_mu(mu)?;
    let f0 = f(x)?;
    let mut g = vec![0.0; x.len()];
    let mut probe = vec![0.0; x.len()];
    for u in directions {
        if u.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: u.len(),
            });
        }
        for ((p, xi), ui) in probe.iter_mut().zip(x).zip(u) {
            *p = xi + mu * ui;
        }
        let scale = (f(&probe)? - f0) / mu / directions.len() as f64;
        for (gi, ui) in g.iter_mut().zip(u) {
            *gi += scale * ui;
        }
    }
    Ok(g)
}

/// [`rgf_grad_with`] over `q` standard normal directions.
pub fn rgf_grad<F, R>(f: F, x: &[f64], mu: f64, q: usize, rng: &mut R) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    let dirs: Vec<Vec<f64>> = (0..q)
        .map(|_| (0..x.len()).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect();
    rgf_grad_with(f, x, mu, &dirs)
}

/// Two-sided simultaneous perturbation estimate along `delta`:
/// `[f(x + mu d) - f(x - mu d)] / (2 mu) * d`.
pub fn spsa_grad_with<F>(mut f: F, x: &[f64], mu: f64, delta: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_mu(mu)?;
    if delta.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: delta.len(),
        });
    }
    let plus: Vec<f64> = x.iter().zip(delta).map(|(a, d)| a + mu * d).collect();
    let minus: Vec<f64> = x.iter().zip(delta).map(|(a, d)| a - mu * d).collect();
    let diff = (f(&plus)? - f(&minus)?) / (2.0 * mu);
    Ok(delta.iter().map(|d| diff * d).collect())
}

/// Rademacher perturbation.
pub fn rademacher<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Momentum buffer of the corrected SPSA update.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsaGcState {
    pub velocity: Vec<f64>,
    pub steps: u64,
}

impl SpsaGcState {
    pub fn new(len: usize) -> Self {
        Self {
            velocity: vec![0.0; len],
            steps: 0,
        }
    }
}

/// One Nesterov-corrected SPSA step: the estimate is taken at the look-ahead
/// point `x + m v`, then `v <- m v - lr g` and `x <- x + v`. Two evaluations.
pub fn spsa_gc_step<F>(
    f: F,
    x: &mut [f64],
    state: &mut SpsaGcState,
    mu: f64,
    lr: f64,
    momentum: f64,
    delta: &[f64],
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if state.velocity.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: state.velocity.len(),
        });
    }
    let look: Vec<f64> = x.iter().zip(&state.velocity).map(|(a, v)| a + momentum * v).collect();
    let g = spsa_grad_with(f, &look, mu, delta)?;
    for ((xi, vi), gi) in x.iter_mut().zip(state.velocity.iter_mut()).zip(&g) {
        *vi = momentum * *vi - lr * gi;
        *xi += *vi;
    }
    state.steps += 1;
    Ok(g)
}

/// Isotropic (mu/lambda) evolution strategy with log-rank weights.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoEs {
    pub sigma: f64,
    pub generations: u64,
}

impl IsoEs {
    pub fn new(sigma: f64) -> Result<Self> {
        check_mu(sigma)?;
        Ok(Self { sigma, generations: 0 })
    }

    /// Samples `population` candidates around `mean`, evaluates each once and
    /// moves the mean to the weighted average of the better half. Returns the
    /// fitness of every candidate in sampling order.
    pub fn generation<F, R>(&mut self, mut f: F, mean: &mut [f64], population: usize, rng: &mut R) -> Result<Vec<f64>>
    where
        F: FnMut(&[f64]) -> Result<f64>,
        R: Rng + ?Sized,
    {
        if population < 2 {
            return Err(Error::Config(format!("population {population} must be at least 2")));
        }
        let mut cands = Vec::with_capacity(population);
        let mut fit = Vec::with_capacity(population);
        for _ in 0..population {
            let c: Vec<f64> = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    m + self.sigma * z
                })
                .collect();
            fit.push(f(&c)?);
            cands.push(c);
        }
        let mut order: Vec<usize> = (0..population).collect();
        order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
        let parents = population / 2;
        let raw: Vec<f64> = (0..parents)
            .map(|i| ((parents as f64 + 0.5).ln() - ((i + 1) as f64).ln()).max(0.0))
            .collect();
        let total: f64 = raw.iter().sum();
        mean.iter_mut().for_each(|m| *m = 0.0);
        for (w, &idx) in raw.iter().zip(&order) {
            for (m, c) in mean.iter_mut().zip(&cands[idx]) {
                *m += w / total * c;
            }
        }
        self.generations += 1;
        Ok(fit)
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("smoothing {mu} must be positive")))
    }
}
