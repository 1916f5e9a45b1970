use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseArray, Tape, Var};
use crate::error::{Error, Result};
use crate::net::{ParamMode, SteeringNet};
use crate::prob::cosine;
use crate::prompt::FramePrompt;
use crate::service::WhiteBoxHandle;

/// Cosines between prompt gradients at one fusion weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradSimilarity {
    pub alpha: f64,
    /// `cos(g_ideal, g_black)`.
    pub relevance: f64,
    /// `cos(g_beta, g_ideal)`.
    pub effectiveness: f64,
    /// `cos(g_local, g_black)`; independent of alpha.
    pub local_vs_black: f64,
}

fn mean_entropy(tape: &mut Tape, p: Var) -> Result<Var> {
    let h = tape.entropy_rows(p)?;
    tape.mean(h)
}

/// Compares the prompt gradient the engine can compute (through the steering
/// model only) with the ones that need white-box access to the target.
///
/// `g_black = d H(p_B)`, `g_local = d H(p_S)`, `g_ideal = d H(p_H)` through
/// both models and `g_beta = d H(p_H)` with `p_B` held constant. A zero
/// gradient has cosine 0 with everything.
pub fn grad_similarity_analysis(
    images: &DenseArray,
    prompt: &FramePrompt,
    steering: &SteeringNet,
    target: &WhiteBoxHandle,
    alphas: &[f64],
) -> Result<Vec<GradSimilarity>> {
    if alphas.is_empty() {
        return Err(Error::Config("no fusion weights to analyze".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("fusion weight {a} outside [0, 1]")));
    }
    if steering.classes() != target.classes() {
        return Err(Error::DimensionMismatch {
            expected: steering.classes(),
            got: target.classes(),
        });
    }
    let prompted = prompt.apply(images)?;
    let mut tape = Tape::new();
    let input = tape.variable(prompted);
    let s = steering.forward_on(tape, input, ParamMode::Frozen)?;
    let p_s = s.probs;
    let b = target.forward_on(s.tape, input)?;
    let p_b = b.probs;
    let mut tape = b.tape;
    let p_b_const = tape.constant(tape.value(p_b)?.clone());

    let mut roots = Vec::new();
    roots.push(mean_entropy(&mut tape, p_b)?);
    roots.push(mean_entropy(&mut tape, p_s)?);
    for &alpha in alphas {
        let a = tape.scale(p_s, alpha)?;
        let bi = tape.scale(p_b, 1.0 - alpha)?;
        let ideal = tape.add(a, bi)?;
        roots.push(mean_entropy(&mut tape, ideal)?);
        let bc = tape.scale(p_b_const, 1.0 - alpha)?;
        let proxy = tape.add(a, bc)?;
        roots.push(mean_entropy(&mut tape, proxy)?);
    }
    let grad = |root: Var| -> Result<Vec<f64>> {
        let g = tape.backward(root)?;
        prompt.scatter_grad(&g.wrt(input)?)
    };
    let g_black = grad(roots[0])?;
    let g_local = grad(roots[1])?;
    let local_vs_black = cosine(&g_local, &g_black);
    let mut out = Vec::with_capacity(alphas.len());
    for (i, &alpha) in alphas.iter().enumerate() {
        let g_ideal = grad(roots[2 + 2 * i])?;
        let g_beta = grad(roots[3 + 2 * i])?;
        out.push(GradSimilarity {
            alpha,
            relevance: cosine(&g_ideal, &g_black),
            effectiveness: cosine(&g_beta, &g_ideal),
            local_vs_black,
        });
    }
    Ok(out)
}
