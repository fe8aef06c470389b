//! Sliding windows, the reconstruction loss and the training loop with
//! plateau learning-rate decay.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::FrameSeries;
use crate::error::{Error, Result};
use crate::graph::GraphOperator;
use crate::models::Forecaster;
use crate::tensor::{AdamConfig, AdamState, Ctx, Scalar, Tape, Tensor, Var};

/// Source frames `start..start + T`; target frames `start + 1..start + T + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowPair {
    pub start: usize,
}

impl WindowPair {
    pub fn source<'a>(&self, series: &'a FrameSeries, window: usize) -> &'a [f32] {
        series.frame_range(self.start, window)
    }

    pub fn target<'a>(&self, series: &'a FrameSeries, window: usize) -> &'a [f32] {
        series.frame_range(self.start + 1, window)
    }

    /// Index of the frame nowcast by this pair.
    pub fn nowcast_frame(&self, window: usize) -> usize {
        self.start + window
    }
}

/// Every stride-1 window; `len − T` pairs.
pub fn make_windows(series: &FrameSeries, window: usize) -> Result<Vec<WindowPair>> {
    if window == 0 || series.len() < window + 1 {
        return Err(Error::Data(format!(
            "series of {} frames is too short for window {window}",
            series.len()
        )));
    }
    Ok((0..series.len() - window).map(|start| WindowPair { start }).collect())
}

/// Stacks source and target windows into `[B, T, N, C]` tensors.
pub fn batch_tensors<F: Scalar>(
    series: &FrameSeries,
    pairs: &[WindowPair],
    window: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let shape = [pairs.len(), window, series.nodes(), series.features()];
    let gather = |shift: usize| {
        pairs
            .iter()
            .flat_map(|p| {
                series
                    .frame_range(p.start + shift, window)
                    .iter()
                    .map(|&v| F::of(v as f64))
            })
            .collect::<Vec<_>>()
    };
    Ok((Tensor::new(&shape, gather(0))?, Tensor::new(&shape, gather(1))?))
}

/// `λ · ½ · mean((pred − target)²) + (1 − λ) · mean(pred²)`.
pub fn loss<'t, F: Scalar>(pred: Var<'t, F>, target: Var<'t, F>, lambda: f64) -> Result<Var<'t, F>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("loss", &pred.shape(), &target.shape()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let reconstruction = pred.sub(target)?.square()?.mean()?.scale(F::of(0.5 * lambda))?;
    if lambda == 1.0 {
        return Ok(reconstruction);
    }
    let penalty = pred.square()?.mean()?.scale(F::of(1.0 - lambda))?;
    reconstruction.add(penalty)
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// strict improvement larger than `min_delta`.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    learning_rate: f64,
    best: f64,
    stale: usize,
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
    pub min_delta: f64,
}

impl PlateauSchedule {
    pub fn new(learning_rate: f64) -> Self {
        PlateauSchedule {
            learning_rate,
            best: f64::INFINITY,
            stale: 0,
            patience: 5,
            factor: 0.5,
            floor: 1e-6,
            min_delta: 1e-8,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Records an epoch loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.learning_rate = (self.learning_rate * self.factor).max(self.floor);
                self.stale = 0;
            }
        }
        self.learning_rate
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: Duration,
    /// SHA-256 of the final parameters.
    pub checksum: String,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.learning_rate).collect()
    }

    /// Comma-separated `epoch,loss,learning_rate` lines under a header.
    /// Wall-clock time is left out so reruns produce identical files.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,loss,learning_rate")?;
        for e in &self.epochs {
            writeln!(w, "{},{:e},{:e}", e.epoch, e.loss, e.learning_rate)?;
        }
        writeln!(w, "# checksum {}", self.checksum)?;
        Ok(())
    }
}

/// Trains `model` on every window of `series` for `config.epochs` epochs.
pub fn train(model: &mut Forecaster<f32>, series: &FrameSeries) -> Result<TrainReport> {
    train_with_progress(model, series, |_| {})
}

pub fn train_with_progress(
    model: &mut Forecaster<f32>,
    series: &FrameSeries,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let started = Instant::now();
    let cfg = model.config().clone();
    cfg.validate()?;
    if series.nodes() != cfg.nodes || series.features() != cfg.features {
        return Err(Error::Config(format!(
            "model expects {}x{} frames, data has {}x{}",
            cfg.nodes,
            cfg.features,
            series.nodes(),
            series.features()
        )));
    }
    let mut pairs = make_windows(series, cfg.window)?;
    let graph = GraphOperator::<f32>::new(series.graph());
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut schedule = PlateauSchedule::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a11);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = schedule.learning_rate();
        adam.set_learning_rate(lr);
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in pairs.chunks(cfg.batch_size) {
            let dropout_seed = rng.gen();
            let (x, y) = batch_tensors::<f32>(series, chunk, cfg.window)?;
            let value = step(model, &mut adam, &graph, &x, &y, dropout_seed).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { epoch, loss: f64::NAN },
                e => e,
            })?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            total += value * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            loss: total / pairs.len() as f64,
            learning_rate: lr,
        };
        schedule.observe(record.loss);
        progress(&record);
        epochs.push(record);
    }
    if cfg.epochs > 0 {
        model.mark_trained();
    }
    Ok(TrainReport {
        epochs,
        wall_clock: started.elapsed(),
        checksum: model.params().checksum(),
    })
}

fn step(
    model: &mut Forecaster<f32>,
    adam: &mut AdamState<f32>,
    graph: &GraphOperator<f32>,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    dropout_seed: u64,
) -> Result<f64> {
    let lambda = model.config().lambda;
    let (grads, value) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, model.params(), true, dropout_seed);
        let pred = model.forward(&ctx, ctx.constant(x), graph)?;
        let l = loss(pred, ctx.constant(y), lambda)?;
        (tape.backward(l)?, l.item().as_f64())
    };
    let params = model.params_mut();
    params.zero_grad();
    grads.accumulate_into(params);
    adam.step(params)?;
    Ok(value)
}

/// Mean squared error of eval-mode predictions over every window.
pub fn evaluate_mse(model: &Forecaster<f32>, series: &FrameSeries, batch: usize) -> Result<f64> {
    let window = model.config().window;
    let pairs = make_windows(series, window)?;
    let graph = GraphOperator::<f32>::new(series.graph());
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in pairs.chunks(batch.max(1)) {
        let (x, y) = batch_tensors::<f32>(series, chunk, window)?;
        let p = model.predict(&x, &graph)?;
        for (a, b) in p.data().iter().zip(y.data()) {
            sum += ((a - b) as f64).powi(2);
        }
        count += y.numel();
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphSpec;
    use crate::models::{ModelConfig, ModelKind};

    fn series(len: usize, value: impl Fn(usize) -> f32) -> FrameSeries {
        let g = GraphSpec::from_edges(2, &[(0, 1)]).unwrap();
        FrameSeries::new(
            g,
            vec!["a".into()],
            (0..len * 2).map(|k| value(k / 2)).collect(),
            (0..len as i64).collect(),
            vec![false; len],
            None,
        )
        .unwrap()
    }

    #[test]
    fn window_enumeration() {
        let s = series(10, |t| t as f32);
        let w = make_windows(&s, 4).unwrap();
        assert_eq!(w.len(), 6);
        for (k, p) in w.iter().enumerate() {
            assert_eq!(p.source(&s, 4), s.frame_range(k, 4));
            assert_eq!(p.target(&s, 4), s.frame_range(k + 1, 4));
        }
        assert_eq!(make_windows(&series(5, |_| 0.0), 4).unwrap().len(), 1);
        assert!(matches!(make_windows(&series(4, |_| 0.0), 4), Err(Error::Data(_))));
    }

    #[test]
    fn loss_hand_cases() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(&Tensor::from_f64(&[1, 1, 1], &[3.0]).unwrap());
        let t = tape.constant(&Tensor::from_f64(&[1, 1, 1], &[1.0]).unwrap());
        assert_eq!(loss(p, t, 0.5).unwrap().item(), 5.5);
        assert_eq!(loss(p, p, 1.0).unwrap().item(), 0.0);
        assert_eq!(loss(p, t, 1.0).unwrap().item(), 2.0);
        let q = tape.constant(&Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        assert!(matches!(loss(p, q, 1.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn plateau_halves_after_five_stale_epochs() {
        let mut s = PlateauSchedule::new(1e-3);
        assert_eq!(s.observe(1.0), 1e-3);
        for _ in 0..4 {
            assert_eq!(s.observe(1.0), 1e-3);
        }
        assert_eq!(s.observe(1.0 - 1e-9), 5e-4);
        assert_eq!(s.observe(0.5), 5e-4);
        let mut tiny = PlateauSchedule::new(1.5e-6);
        for _ in 0..6 {
            tiny.observe(1.0);
        }
        assert_eq!(tiny.learning_rate(), 1e-6);
    }

    fn config(kind: ModelKind, epochs: usize) -> ModelConfig {
        ModelConfig {
            kind,
            window: 3,
            nodes: 2,
            features: 1,
            embed_dim: 2,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            dropout: 0.0,
            lambda: 1.0,
            learning_rate: 1e-2,
            epochs,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_alone() {
        let mut m = Forecaster::<f32>::new(config(ModelKind::Gtrans, 0)).unwrap();
        let before = m.params().checksum();
        let r = train(&mut m, &series(8, |_| 0.5)).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(r.checksum, before);
        assert!(!m.is_trained());
    }

    #[test]
    fn constant_series_is_learned() {
        for kind in ModelKind::ALL {
            let mut m = Forecaster::<f32>::new(config(kind, 50)).unwrap();
            let s = series(20, |_| 0.5);
            let r = train(&mut m, &s).unwrap();
            assert!(r.losses().iter().all(|l| l.is_finite()));
            assert!(*r.losses().last().unwrap() <= 1e-3, "{kind}: {:?}", r.losses().last());
            assert!(r.learning_rates().windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let s = series(12, |t| (t % 3) as f32 / 3.0);
        let run = || {
            let mut m = Forecaster::<f32>::new(ModelConfig {
                dropout: 0.1,
                ..config(ModelKind::Gtrans, 3)
            })
            .unwrap();
            train(&mut m, &s).unwrap().checksum
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut m = Forecaster::<f32>::new(ModelConfig {
            nodes: 3,
            ..config(ModelKind::MlpAe, 1)
        })
        .unwrap();
        assert!(matches!(train(&mut m, &series(8, |_| 0.0)), Err(Error::Config(_))));
    }

    #[test]
    fn report_format() {
        let r = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 0,
                loss: 0.25,
                learning_rate: 1e-3,
            }],
            wall_clock: Duration::ZERO,
            checksum: "ab".into(),
        };
        let mut out = Vec::new();
        r.write_to(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,loss,learning_rate\n0,2.5e-1,1e-3\n# checksum ab\n"
        );
    }
}
