//! Sequential vs data-parallel execution of the hot loops.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use setcomp_core::exec::Exec;
use setcomp_core::metrics::evaluate;
use setcomp_core::model::{init_params, Dims, NormMode};
use setcomp_core::othello::{generate_games, CorpusSpec};
use setcomp_core::rng::stream;
use setcomp_core::search::{run_ensemble_members, Budget, SamplerConfig, SearchConfig};
use setcomp_core::task::{make_training_batch, make_validation_batch, Vocabulary};
use setcomp_core::theory::{build_hardcoded, check_precision_constant, ConstantAttention, PrecisionOptions};
use setcomp_core::training::{batch_loss_and_grad, MaskSource};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn enumeration(c: &mut Criterion) {
    let model = ConstantAttention::from_params(&build_hardcoded(8, 10.0, NormMode::Identity).unwrap()).unwrap();
    let lengths: Vec<usize> = (1..8).collect();
    let mut g = c.benchmark_group("precision enumeration v=8");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = PrecisionOptions { exec, ..Default::default() };
        g.bench_function(name, |b| b.iter(|| check_precision_constant(black_box(&model), &lengths, &opts).unwrap()));
    }
    g.finish();
}

fn batch_eval(c: &mut Criterion) {
    let v = 16;
    let params = init_params(Dims::new(v, 24, 8, 20).unwrap(), NormMode::RmsNorm, 1e-6, &mut stream(0, "init", &[])).unwrap();
    let vocab = Vocabulary::new(v).unwrap();
    let val = make_validation_batch(vocab, 1024, &mut stream(0, "validation", &[])).unwrap();
    let train = make_training_batch(vocab, 8, 512, &mut stream(0, "train", &[0])).unwrap();
    let mut g = c.benchmark_group("batch evaluation v=16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("validation metrics", name), &exec, |b, &exec| {
            b.iter(|| evaluate(&params, black_box(&val), exec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("loss and gradient", name), &exec, |b, &exec| {
            b.iter(|| batch_loss_and_grad(&params, black_box(&train), &MaskSource::OFF, exec).unwrap())
        });
    }
    g.finish();
}

fn game_generation(c: &mut Criterion) {
    let spec = CorpusSpec { count: 5_000, seed: 1, min_len: 15, max_len: 59, no_pass_games: false };
    let mut g = c.benchmark_group("othello corpus 5000 games");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| generate_games(black_box(&spec), exec).unwrap()));
    }
    g.finish();
}

fn ensemble_sweep(c: &mut Criterion) {
    let config = SearchConfig {
        global_seed: 2,
        arch_count: 1,
        members_per_arch: 8,
        budget: Budget { max_steps: 200, val_interval: 100, batch_size: 32, val_size: 128, ..Default::default() },
        sampler: SamplerConfig { s_log2: [1.0, 2.0], v_gap_log2: [1.0, 2.0], ..Default::default() },
    };
    let members: Vec<usize> = (0..8).collect();
    let mut g = c.benchmark_group("ensemble of 8 members");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| run_ensemble_members(black_box(&config), 0, &members, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, enumeration, batch_eval, game_generation, ensemble_sweep);
criterion_main!(benches);
