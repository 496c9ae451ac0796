use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hsta::model::HstaConfig;
use hsta::usta::{usta_layer_forward, Modality, TokenState, UstaLayerParams};
use hsta::{tensor, ParamStore};
use hsta_bench::{model_and_sample, random_matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| tensor::matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn usta_layer(c: &mut Criterion) {
    let mut group = c.benchmark_group("usta_layer_forward");
    for (tokens, d) in [(16, 64), (48, 64)] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = UstaLayerParams::init(&mut store, "l0", d, &mut rng).unwrap();
        let state = TokenState::new(random_matrix(tokens, d, 3), random_matrix(1, d, 4), Modality::Video).unwrap();
        group.bench_function(format!("{tokens}x{d}"), |bench| {
            bench.iter(|| usta_layer_forward(&store, black_box(&state), &params).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let (mut model, sample) = model_and_sample(HstaConfig::default());
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("forward", |bench| {
        bench.iter(|| model.logits(black_box(&sample)).unwrap())
    });
    group.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let loss = model.accumulate_gradients(black_box(&sample), 1.0).unwrap();
            model.store.zero_grads();
            loss
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, usta_layer, model);
criterion_main!(benches);
