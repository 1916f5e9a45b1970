use std::sync::Arc;

use crate::autodiff::{DenseArray, Tape, Var};
use crate::error::Result;
use crate::net::{BlackBoxNet, ForwardPass, ParamMode, Wrt};
use crate::prob::ProbVector;

use super::handler::ServiceCore;

/// Direct access to the simulated target model, for gradient analysis only.
///
/// It bypasses the ledger and deliberately does not implement
/// [`BlackBoxApi`](super::BlackBoxApi), so adaptation code cannot take it:
///
/// ```compile_fail
/// use beta_core::service::{BlackBoxApi, WhiteBoxHandle};
/// fn needs_api(_: &dyn BlackBoxApi) {}
/// fn try_it(h: &WhiteBoxHandle) {
///     needs_api(h);
/// }
/// ```
#[derive(Debug, Clone)]
pub struct WhiteBoxHandle {
    net: Arc<BlackBoxNet>,
}

impl WhiteBoxHandle {
    pub fn new(net: BlackBoxNet) -> Self {
        Self { net: Arc::new(net) }
    }

    /// Shares the model behind a simulated service.
    pub fn from_service(core: &ServiceCore) -> Self {
        Self {
            net: Arc::clone(core.net()),
        }
    }

    pub fn classes(&self) -> usize {
        self.net.classes()
    }

    pub fn predict_probs(&self, images: &DenseArray) -> Result<Vec<ProbVector>> {
        self.net.predict_probs(images)
    }

    /// Records the target model on an existing tape.
    pub fn forward_on(&self, tape: Tape, input: Var) -> Result<ForwardPass> {
        self.net.forward_on(tape, input, ParamMode::Frozen)
    }

    /// Gradient of the batch-mean entropy of the target's predictions with
    /// respect to the input pixels.
    pub fn entropy_input_grad(&self, images: &DenseArray) -> Result<DenseArray> {
        let mut pass = self.net.forward(images, ParamMode::Frozen)?;
        let h = pass.tape.entropy_rows(pass.probs)?;
        let loss = pass.tape.mean(h)?;
        let g = pass.grad(loss, Wrt::Input)?;
        Ok(g.input.expect("input gradient requested"))
    }
}
