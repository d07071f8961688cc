use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rekv_core::config::{RetrievalMode, RunConfig};
use rekv_core::harness::{self, Sweep, SyntheticTraceSpec};
use rekv_core::par;
use rekv_core::retrieval::{self, FrameVector, QuestionVector};

const PATHS: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn retrieval_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 64;
    let vectors: Vec<FrameVector> = (0..20_000)
        .map(|i| FrameVector {
            frame_index: i,
            layer: None,
            vector: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let q = QuestionVector {
        layer: None,
        vector: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let mut group = c.benchmark_group("retrieve_20k_frames");
    for (name, on) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_enabled(on);
            bench.iter(|| retrieval::retrieve(black_box(&vectors), &q, 64, 4, 1.0).unwrap());
        });
    }
    group.finish();
    par::set_enabled(true);
}

fn encoding(c: &mut Criterion) {
    let config = RunConfig::default();
    let trace = harness::gen_trace(&SyntheticTraceSpec::single_needle(&config.model, 2, 200, config.fps)).unwrap();
    let mut group = c.benchmark_group("encode_200_frames");
    group.sample_size(10);
    for (name, on) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_enabled(on);
            bench.iter(|| harness::encode_trace(black_box(&trace), &config, None).unwrap());
        });
    }
    group.finish();
    par::set_enabled(true);
}

fn bench_sweep(c: &mut Criterion) {
    let config = RunConfig::default();
    let trace = harness::gen_trace(&SyntheticTraceSpec::single_needle(&config.model, 3, 200, config.fps)).unwrap();
    let encoded = harness::encode_trace(&trace, &config, None).unwrap();
    let sweep = Sweep {
        r: vec![8, 16, 32, 64],
        b: vec![1, 4],
        modes: vec![RetrievalMode::Internal, RetrievalMode::External, RetrievalMode::Uniform],
    };
    let mut group = c.benchmark_group("sweep_24_points");
    group.sample_size(10);
    for (name, on) in PATHS {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_enabled(on);
            bench.iter(|| harness::bench_encoded(&encoded, black_box(&trace), &config, &sweep).unwrap());
        });
    }
    group.finish();
    par::set_enabled(true);
}

criterion_group!(benches, retrieval_scoring, encoding, bench_sweep);
criterion_main!(benches);
