//! Seeded inputs for the kernel benchmarks in `benches/`.

use leafcam_core::model::build_model;
use leafcam_core::{AttentionKind, Backbone, ModelParams, ModelSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[-1, 1]` tensor.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// A 32x32, 7-class model with fresh parameters and a batch of `n` images.
pub fn model_case(backbone: Backbone, attention: AttentionKind, n: usize) -> (ModelSpec, ModelParams, Tensor, Vec<usize>) {
    let spec = ModelSpec::new(backbone, attention, 7);
    let params = build_model(&spec, 1).expect("valid spec");
    let [c, h, w] = spec.input;
    let x = Tensor::uniform(vec![n, c, h, w], 0.0, 1.0, &mut rng(2));
    let labels = (0..n).map(|i| i % 7).collect();
    (spec, params, x, labels)
}
