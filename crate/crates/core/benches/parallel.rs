use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfmoe::epcost::{evaluate_grid, random_grid};
use rfmoe::evalstats::threshold_sweep;
use rfmoe::exec::{self, Execution};
use rfmoe::numerics::{evaluate, Tensor};
use rfmoe::training::{synth_corpus, Batch, Model, ModelConfig, TrainConfig, Trainer};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn cost_grid(c: &mut Criterion) {
    let grid = random_grid(0, 10_000);
    let mut group = c.benchmark_group("epcost_grid_10k");
    for (name, mode) in MODES {
        group.bench_function(name, |b| b.iter(|| evaluate_grid(mode, &grid)));
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let config = ModelConfig::reference();
    let model = Model::build(&config).unwrap();
    let corpus = synth_corpus(config.seed, config.vocab, 40_000);
    let batches = Batch::sequential(&corpus.val, 8, config.seq_len, 2);
    let thetas: Vec<f64> = (0..8).map(|i| 0.25 * i as f64).collect();
    let mut group = c.benchmark_group("threshold_sweep_8");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(name, |b| b.iter(|| threshold_sweep(mode, &model, &batches, &thetas).unwrap()));
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for rows in [256, 2048] {
        let a = Tensor::randn(&[rows, 64], 1.0, &mut rng);
        let w = Tensor::randn(&[64, 64], 1.0, &mut rng);
        for (name, mode) in MODES {
            exec::set_parallel_kernels(mode == Execution::Parallel);
            group.bench_with_input(BenchmarkId::new(name, rows), &rows, |b, _| {
                b.iter(|| {
                    evaluate(|t| {
                        let (a, w) = (t.constant(a.clone()), t.constant(w.clone()));
                        t.matmul(a, w)
                    })
                    .unwrap()
                })
            });
        }
    }
    exec::set_parallel_kernels(true);
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let config = TrainConfig {
        batch_size: 8,
        corpus_tokens: 20_000,
        ..TrainConfig::reference()
    };
    let mut group = c.benchmark_group("train_step_reference_b8");
    group.sample_size(10);
    for (name, mode) in MODES {
        exec::set_parallel_kernels(mode == Execution::Parallel);
        let mut trainer = Trainer::new(&ModelConfig::reference(), &config).unwrap();
        let batch = trainer.next_batch();
        group.bench_function(name, |b| b.iter(|| trainer.train_step(&batch).unwrap()));
    }
    exec::set_parallel_kernels(true);
    group.finish();
}

criterion_group!(benches, cost_grid, sweep, matmul, train_step);
criterion_main!(benches);
