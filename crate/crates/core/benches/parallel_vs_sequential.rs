//! Rayon fan-out against the in-order fallback on the two hot loops: one
//! stage-one gradient batch and one stage-two training epoch. Both modes
//! produce identical bits, so only time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dvt_core::field_models::FieldModels;
use dvt_core::par::ExecMode;
use dvt_core::stage1::{artifact_taps, batch_gradients, Phase, PixelBatch, Stage1Config};
use dvt_core::stage2::{train_denoiser, Stage2Config};
use dvt_core::synthetic::{identity_pair, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, ExecMode); 2] = [("parallel", ExecMode::Parallel), ("sequential", ExecMode::Sequential)];

fn stage1_batch(c: &mut Criterion) {
    let cfg = Stage1Config::desk();
    let (ch, k) = (32, 16);
    let models = FieldModels::init(ch, k, cfg.hash, 0).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut batch = PixelBatch::new(ch);
    for _ in 0..cfg.pixels_per_iter {
        let y: Vec<f32> = (0..ch).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let (i, j) = (r.random_range(0..k), r.random_range(0..k));
        batch.push(&y, (r.random(), r.random()), artifact_taps((k, k), k, i, j));
    }
    let mut group = c.benchmark_group("stage1_batch_gradients");
    group.sample_size(10);
    for (name, mode) in MODES {
        let cfg = Stage1Config { mode, ..cfg.clone() };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&models, &batch, Phase::Two, &cfg).unwrap())
        });
    }
    group.finish();
}

fn stage2_epoch(c: &mut Criterion) {
    let pairs: Vec<_> = (0..8)
        .map(|seed| identity_pair(&SyntheticSpec { seed, ..Default::default() }).unwrap())
        .collect();
    let mut group = c.benchmark_group("stage2_epoch");
    group.sample_size(10);
    for (name, mode) in MODES {
        let cfg = Stage2Config {
            epochs: 1,
            batch: 8,
            mode,
            ..Stage2Config::desk()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_denoiser(&pairs, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, stage1_batch, stage2_epoch);
criterion_main!(benches);
