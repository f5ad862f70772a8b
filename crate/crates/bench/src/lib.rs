//! Fixtures shared by the benchmarks.

use cldl_core::models::InputShape;
use cldl_core::seed::rng_for;
use cldl_core::{Architecture, Array, Batch, Ensemble, LabelConfusionModel};
use rand::Rng;

pub fn random_array(shape: &[usize], seed: u64) -> Array {
    let mut rng = rng_for(seed, "bench-array");
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

/// A batch of MNIST-shaped inputs in `[0, 1]` with random labels.
pub fn mnist_batch(batch: usize, seed: u64) -> Batch {
    let mut rng = rng_for(seed, "bench-batch");
    let images = Array::new(
        vec![batch, 1, 28, 28],
        (0..batch * 784)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .expect("shape matches data");
    let labels = (0..batch).map(|_| rng.random_range(0..10)).collect();
    Batch { images, labels }
}

/// A freshly initialized ensemble and label confusion model at the desk-scale sizes.
pub fn desk_models(
    arch: Architecture,
    members: usize,
    seed: u64,
) -> (Ensemble, LabelConfusionModel) {
    let mut rng = rng_for(seed, "bench-models");
    let ens =
        Ensemble::init(members, arch, InputShape::MNIST, 64, 10, &mut rng).expect("valid sizes");
    let lcm = LabelConfusionModel::new(10, 64, 3.0, &mut rng).expect("valid sizes");
    (ens, lcm)
}
