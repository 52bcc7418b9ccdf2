//! Criterion comparison of the rayon data-parallel path against the
//! sequential fallback on the batch-shaped workloads: featurization,
//! evaluation, and batched one-shot decoding.
//!
//! Run with `cargo bench -p pifold`. Building with
//! `--no-default-features` removes rayon; the "parallel" series then
//! measures the sequential fallback, which is the point of the comparison.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pifold::data::synth_dataset;
use pifold::decode::one_shot_decode;
use pifold::featurize::{featurize, FeatureConfig, ProteinGraph};
use pifold::metrics::{evaluate, EvalOptions};
use pifold::model::{init_params, ModelConfig, ModelParams};
use pifold::parallel;
use pifold::protein::Protein;

fn setup() -> (Vec<Protein>, ModelParams<f32>, ModelConfig) {
    let cfg = ModelConfig {
        dim: 32,
        n_layers: 3,
        heads: 4,
        dropout: 0.0,
        features: FeatureConfig { k: 12, ..FeatureConfig::default() },
    };
    let params = init_params::<f32>(&cfg, 11).expect("init");
    let proteins = synth_dataset(400, 60, 24);
    (proteins, params, cfg)
}

fn bench_featurize(c: &mut Criterion) {
    let (proteins, _, cfg) = setup();
    let mut group = c.benchmark_group("featurize_batch");
    group.sample_size(10);
    for &par in &[false, true] {
        group.bench_with_input(
            BenchmarkId::new(if par { "parallel" } else { "sequential" }, proteins.len()),
            &par,
            |b, &par| {
                b.iter(|| {
                    let graphs =
                        parallel::map(par, &proteins, |p| featurize::<f32>(p, &cfg.features));
                    assert!(graphs.iter().all(Result::is_ok));
                });
            },
        );
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let (proteins, params, cfg) = setup();
    let mut group = c.benchmark_group("evaluate_dataset");
    group.sample_size(10);
    for &par in &[false, true] {
        group.bench_with_input(
            BenchmarkId::new(if par { "parallel" } else { "sequential" }, proteins.len()),
            &par,
            |b, &par| {
                b.iter(|| {
                    let opts = EvalOptions { parallel: par, ..Default::default() };
                    evaluate(&proteins, &params, &cfg.features, &opts).expect("evaluate");
                });
            },
        );
    }
    group.finish();
}

fn bench_decode_batch(c: &mut Criterion) {
    let (proteins, params, cfg) = setup();
    let graphs: Vec<ProteinGraph<f32>> = proteins
        .iter()
        .map(|p| featurize(p, &cfg.features).expect("featurize"))
        .collect();
    let mut group = c.benchmark_group("one_shot_decode_batch");
    group.sample_size(10);
    for &par in &[false, true] {
        group.bench_with_input(
            BenchmarkId::new(if par { "parallel" } else { "sequential" }, graphs.len()),
            &par,
            |b, &par| {
                b.iter(|| {
                    let outs = parallel::map(par, &graphs, |g| one_shot_decode(g, &params));
                    assert!(outs.iter().all(Result::is_ok));
                });
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_featurize, bench_evaluate, bench_decode_batch);
criterion_main!(benches);
