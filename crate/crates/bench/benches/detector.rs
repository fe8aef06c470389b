use criterion::{criterion_group, criterion_main, Criterion};
use gtrans_core::data::{split, synthesize, Preset, SynthOptions};
use gtrans_core::detector::{fit_statistics, mahalanobis, reconstruction_errors};
use gtrans_core::{Forecaster, ModelConfig};

fn scoring(c: &mut Criterion) {
    let series = synthesize(&SynthOptions::new(Preset::Grid16, 600, 2)).unwrap();
    let parts = split(&series, 5.0 / 6.0).unwrap();
    let mut model = Forecaster::<f32>::new(ModelConfig::default()).unwrap();
    model.mark_trained();
    let errors = reconstruction_errors(&model, &parts.train).unwrap();

    c.bench_function("reconstruction_errors_500", |b| {
        b.iter(|| reconstruction_errors(&model, &parts.train).unwrap())
    });
    c.bench_function("fit_statistics_48d", |b| b.iter(|| fit_statistics(&errors).unwrap()));
    let stats = fit_statistics(&errors).unwrap();
    c.bench_function("mahalanobis_all_rows", |b| {
        b.iter(|| {
            errors
                .rows()
                .map(|e| mahalanobis(e, &stats.mean, &stats.inverse).unwrap())
                .sum::<f64>()
        })
    });
}

criterion_group!(benches, scoring);
criterion_main!(benches);
