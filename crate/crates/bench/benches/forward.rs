use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gtrans_core::data::{synthesize, Preset, SynthOptions};
use gtrans_core::graph::GraphOperator;
use gtrans_core::training::{batch_tensors, make_windows, train};
use gtrans_core::{Forecaster, ModelConfig, ModelKind};

fn forward(c: &mut Criterion) {
    let series = synthesize(&SynthOptions::new(Preset::Grid16, 200, 1)).unwrap();
    let graph = GraphOperator::<f32>::new(series.graph());
    let pairs = make_windows(&series, 10).unwrap();
    let (x, _) = batch_tensors::<f32>(&series, &pairs[..32], 10).unwrap();

    let mut group = c.benchmark_group("forward_batch32");
    for kind in ModelKind::ALL {
        let model = Forecaster::<f32>::new(ModelConfig {
            kind,
            ..ModelConfig::default()
        })
        .unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(kind), &model, |b, m| {
            b.iter(|| m.predict(&x, &graph).unwrap())
        });
    }
    group.finish();
}

fn epoch(c: &mut Criterion) {
    let series = synthesize(&SynthOptions::new(Preset::Grid16, 138, 1)).unwrap();
    let normalized = series.normalized(&series.fit_normalization(series.len())).unwrap().0;
    let config = ModelConfig {
        epochs: 1,
        ..ModelConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("gtrans_epoch_128_windows", |b| {
        b.iter(|| {
            let mut model = Forecaster::<f32>::new(config.clone()).unwrap();
            train(&mut model, &normalized).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, forward, epoch);
criterion_main!(benches);
