use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tds_bench::{first_batch, world};
use tds_core::model::TwinTower;
use tds_core::trainer::{train_step, Method, TrainConfig};

fn steps(c: &mut Criterion) {
    let (schema, spans) = world();
    let batch = first_batch(&schema, &spans[0], 128);
    let mut group = c.benchmark_group("train_step");
    for method in Method::ALL {
        let cfg = TrainConfig {
            method,
            ..TrainConfig::default()
        };
        let model = TwinTower::new(&schema, &cfg.tower, cfg.adam(), 0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(method), &method, |b, _| {
            let mut m = model.clone();
            let mut step = 0;
            b.iter(|| {
                train_step(&mut m, &batch, &cfg, step, step).unwrap();
                step += 1;
            });
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let (schema, spans) = world();
    let batch = first_batch(&schema, &spans[1], 1024);
    let cfg = TrainConfig::default();
    let model = TwinTower::new(&schema, &cfg.tower, cfg.adam(), 0).unwrap();
    c.bench_function("infer_1024", |b| b.iter(|| model.infer(&batch).unwrap()));
}

criterion_group!(benches, steps, inference);
criterion_main!(benches);
