use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pidp_core::simulator::{
    poisson_minibatch, synth_dataset, train_run, ModelKind, SynthSpec, TrainerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn minibatch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("poisson_minibatch_60000_q0.002", |b| {
        b.iter(|| poisson_minibatch(black_box(60_000), 128.0 / 60_000.0, &mut rng))
    });
}

fn training(c: &mut Criterion) {
    let spec = SynthSpec {
        points_per_cluster: 500,
        ..SynthSpec::default()
    };
    let data = synth_dataset(&spec, 1).unwrap();
    let tracked = vec![data.points[0].clone()];
    for (name, model) in [
        ("logistic", ModelKind::Logistic),
        ("mlp16", ModelKind::Mlp { hidden: 16 }),
    ] {
        let cfg = TrainerConfig {
            expected_batch: 64,
            steps: 50,
            model,
            ..TrainerConfig::default()
        };
        c.bench_function(&format!("train_run_50_steps_{name}"), |b| {
            b.iter(|| train_run(&data, &cfg, &tracked, "b", black_box(7)).unwrap())
        });
    }
}

criterion_group!(benches, minibatch, training);
criterion_main!(benches);
