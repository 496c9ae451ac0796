//! Fixtures shared by the benchmarks.

use hsta::data::{generate_dataset, GenSpec};
use hsta::model::{HstaConfig, HstaModel, Sample};
use hsta::train::clip_sample;
use hsta::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// A default-sized model and one clip from a default-sized dataset.
pub fn model_and_sample(config: HstaConfig) -> (HstaModel, Sample) {
    let spec = GenSpec {
        num_subjects: 1,
        clips_per_subject: 1,
        ..GenSpec::default()
    };
    let clip = &generate_dataset(&spec).expect("valid spec").clips[0];
    let sample = clip_sample(clip, &config.geometry).expect("geometry matches");
    let model = HstaModel::new(config, 0).expect("valid config");
    (model, sample)
}
