//! Shared fixtures for the criterion benches.

use posenorm_core::gan::{PairData, TrainingPair};
use posenorm_core::pose::LimbSchema;
use posenorm_core::synth::{generate_dataset, SynthConfig};
use posenorm_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("length matches")
}

/// Training pairs from a small synthetic domain at 64x32.
pub fn pair_data() -> (PairData, Vec<TrainingPair>) {
    let ds = generate_dataset(&SynthConfig {
        n_identities: 4,
        n_train_identities: 4,
        images_per_identity: 4,
        ..SynthConfig::default()
    })
    .expect("default synth config is valid");
    let train = ds.train().expect("split ids resolve");
    let data = PairData::from_samples(&train, &LimbSchema::default()).expect("poses rasterize");
    let pairs = (0..8)
        .map(|i| TrainingPair {
            source: i,
            target: (i + 1) % 4 + 4 * (i / 4),
            label: data.labels[i],
        })
        .collect();
    (data, pairs)
}

/// Distance matrix with integer ties, as produced by quantized features.
pub fn distances(nq: usize, ng: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..nq)
        .map(|_| (0..ng).map(|_| rng.random_range(0..50) as f64).collect())
        .collect()
}
