use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmcd::corpus::{LabeledPair, ToyCorpus, ToySpec};
use cmcd::dsp::{log_mel, Waveform};
use cmcd::losses::{DetectionPhase, LossWeights};
use cmcd::model::{forward, ModelConfig, ModelParams};
use cmcd::train::pair_gradients;
use cmcd::Tensor;

fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let a = random_tensor(n, n, 1);
        let b = random_tensor(n, n, 2);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| a.matmul(&b).unwrap());
        });
    }
    group.finish();
}

fn bench_log_mel(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = (0..16_000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let w = Waveform::new(samples, 16_000).unwrap();
    c.bench_function("log_mel_1s", |b| b.iter(|| log_mel(&w).unwrap()));
}

fn toy_pair() -> LabeledPair {
    let corpus = ToyCorpus::build(ToySpec::new(4, 1, 7)).unwrap();
    corpus.train_pairs().unwrap().swap_remove(0)
}

fn bench_model(c: &mut Criterion) {
    let pair = toy_pair();
    let weights = LossWeights::default();
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for dim in [32, 128] {
        let params = ModelParams::init(ModelConfig::with_dim(dim), 5);
        group.bench_with_input(BenchmarkId::new("forward", dim), &dim, |b, _| {
            b.iter(|| forward(&pair.features, &pair.phonemes, &params).unwrap());
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", dim), &dim, |b, _| {
            b.iter(|| {
                pair_gradients(&params, &pair, &pair.features.frames, DetectionPhase::Bce, &weights, 11).unwrap()
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_log_mel, bench_model);
criterion_main!(benches);
