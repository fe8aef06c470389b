use gtrans_core::data::{split, synthesize, Preset, SynthOptions};
use gtrans_core::detector::reconstruction_errors;
use gtrans_core::graph::GraphOperator;
use gtrans_core::metrics::export_latent;
use gtrans_core::models::{read_checkpoint, write_checkpoint};
use gtrans_core::training::{batch_tensors, make_windows, train};
use gtrans_core::{DetectionArtifacts, Forecaster, ModelConfig, ModelKind, ThresholdMethod};

fn small(kind: ModelKind, nodes: usize, features: usize) -> ModelConfig {
    ModelConfig {
        kind,
        window: 6,
        nodes,
        features,
        embed_dim: 2,
        heads: 2,
        encoder_blocks: 1,
        decoder_blocks: 1,
        epochs: 2,
        batch_size: 16,
        seed: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn every_kind_maps_windows_to_windows() {
    let series = synthesize(&SynthOptions::new(Preset::Area45, 40, 1)).unwrap();
    let graph = GraphOperator::<f32>::new(series.graph());
    let pairs = make_windows(&series, 6).unwrap();
    let (x, _) = batch_tensors::<f32>(&series, &pairs[..3], 6).unwrap();
    for kind in ModelKind::ALL {
        let model = Forecaster::<f32>::new(small(kind, 45, 6)).unwrap();
        let y = model.predict(&x, &graph).unwrap();
        assert_eq!(y.shape(), x.shape(), "{kind}");
        assert!(y.is_finite());
        let z = model.latent(&x, &graph).unwrap();
        assert_eq!(z.shape()[0], 3);
    }
}

#[test]
fn untrained_models_cannot_score() {
    let series = synthesize(&SynthOptions::new(Preset::Grid16, 60, 2)).unwrap();
    let parts = split(&series, 0.5).unwrap();
    let model = Forecaster::<f32>::new(small(ModelKind::Gtrans, 16, 3)).unwrap();
    assert!(reconstruction_errors(&model, &parts.train).is_err());
    assert!(export_latent(&model, &parts.train, Vec::new()).is_err());
}

#[test]
fn train_fit_detect_small() {
    let series = synthesize(&SynthOptions {
        rate: Some(0.1),
        ..SynthOptions::new(Preset::Grid16, 200, 3)
    })
    .unwrap();
    let parts = split(&series, 5.0 / 6.0).unwrap();
    let mut model = Forecaster::<f32>::new(small(ModelKind::GcnLstm, 16, 3)).unwrap();
    let report = train(&mut model, &parts.train).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert!(model.is_trained());

    let artifacts = DetectionArtifacts::fit(&model, &parts.train, ThresholdMethod::Quantile, 0.1, 1.0).unwrap();
    let det = artifacts.detect(&model, &parts.test).unwrap();
    assert_eq!(det.frames.len(), parts.test.len() - 6);
    assert_eq!(det.predicted.len(), det.actual.len());

    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    let back = read_checkpoint(bytes.as_slice()).unwrap();
    let again = artifacts.detect(&back, &parts.test).unwrap();
    assert_eq!(again, det);
}

#[test]
fn seeds_change_initialisation() {
    let a = Forecaster::<f32>::new(small(ModelKind::Gtrans, 16, 3)).unwrap();
    let b = Forecaster::<f32>::new(ModelConfig {
        seed: 6,
        ..small(ModelKind::Gtrans, 16, 3)
    })
    .unwrap();
    assert_ne!(a.params().checksum(), b.params().checksum());
    let c = Forecaster::<f32>::new(small(ModelKind::Gtrans, 16, 3)).unwrap();
    assert_eq!(a.params().checksum(), c.params().checksum());
}
