//! Shared setup for the benchmarks: desk-scale models with random weights
//! and a batch of synthetic images.

use std::sync::Arc;

use beta_core::data::{gen_source, ImageBatch, ImageDims, LabeledSet};
use beta_core::net::{Architecture, BlackBoxNet, Mlp, SteeringNet};
use beta_core::service::{ServiceConfig, ServiceCore};

pub const CLASSES: usize = 10;

pub fn dims() -> ImageDims {
    ImageDims::default()
}

pub fn steering() -> SteeringNet {
    SteeringNet(Mlp::init(Architecture::steering(dims().len(), CLASSES), 12))
}

pub fn target() -> Mlp {
    Mlp::init(Architecture::black_box(dims().len(), CLASSES), 11)
}

pub fn service() -> Arc<ServiceCore> {
    ServiceCore::new(BlackBoxNet(target()), ServiceConfig::instant())
}

/// Exactly `n` images; the generator itself keeps classes balanced.
pub fn images(n: usize) -> LabeledSet {
    let all = gen_source(CLASSES, n.div_ceil(CLASSES) * CLASSES, dims(), 2).expect("valid source parameters");
    all.select(&(0..n).collect::<Vec<_>>())
}

pub fn batch(n: usize) -> ImageBatch {
    let set = images(n);
    ImageBatch::new((0..n as u64).collect(), set.images, set.dims).expect("consistent batch")
}
