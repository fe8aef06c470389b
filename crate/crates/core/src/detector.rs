//! Reconstruction-error statistics, Mahalanobis scoring and thresholding.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::FrameSeries;
use crate::error::{Error, Result};
use crate::graph::GraphOperator;
use crate::io::{read_f64, read_u32, read_u8};
use crate::models::Forecaster;
use crate::training::{batch_tensors, make_windows};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMethod {
    /// Empirical `1 − rate` quantile of training distances.
    #[default]
    Quantile,
    /// `scale · mean(distances)`.
    ScaledMean,
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMethod::Quantile => "quantile",
            ThresholdMethod::ScaledMean => "scaled-mean",
        })
    }
}

impl FromStr for ThresholdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(ThresholdMethod::Quantile),
            "scaled-mean" => Ok(ThresholdMethod::ScaledMean),
            other => Err(Error::Config(format!(
                "unknown threshold method {other:?} (expected quantile or scaled-mean)"
            ))),
        }
    }
}

/// Error vectors of the nowcast frame of every window, with the frame index
/// each one belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSet {
    pub dim: usize,
    pub values: Vec<f64>,
    pub frames: Vec<usize>,
}

impl ErrorSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }
}

/// `|target − prediction|` on the last frame of each window, flattened to `N·C`.
pub fn reconstruction_errors(model: &Forecaster<f32>, series: &FrameSeries) -> Result<ErrorSet> {
    if !model.is_trained() {
        return Err(Error::Contract("model is untrained".into()));
    }
    let window = model.config().window;
    let pairs = make_windows(series, window)?;
    let graph = GraphOperator::<f32>::new(series.graph());
    let dim = series.frame_size();
    let mut values = Vec::with_capacity(pairs.len() * dim);
    for chunk in pairs.chunks(64) {
        let (x, y) = batch_tensors::<f32>(series, chunk, window)?;
        let p = model.predict(&x, &graph)?;
        let per_window = window * dim;
        for b in 0..chunk.len() {
            let last = b * per_window + (window - 1) * dim;
            let range = last..last + dim;
            values.extend(
                p.data()[range.clone()]
                    .iter()
                    .zip(&y.data()[range])
                    .map(|(&a, &t)| (t as f64 - a as f64).abs()),
            );
        }
    }
    Ok(ErrorSet {
        dim,
        values,
        frames: pairs.iter().map(|p| p.nowcast_frame(window)).collect(),
    })
}

/// Mean, ridge-regularized covariance and its inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorStatistics {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub ridge: f64,
}

/// Smallest ridge used when the covariance trace is zero.
pub const RIDGE_FLOOR: f64 = 1e-12;

/// Sample mean, sample covariance (divisor `n − 1`) plus
/// `1e-6 · trace / dim` on the diagonal.
pub fn fit_statistics(errors: &ErrorSet) -> Result<ErrorStatistics> {
    let (n, d) = (errors.len(), errors.dim);
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 error vectors, got {n}")));
    }
    if errors.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("error vectors"));
    }
    let mut mean = DVector::zeros(d);
    for row in errors.rows() {
        mean += DVector::from_column_slice(row);
    }
    mean /= n as f64;
    let mut centred = DMatrix::zeros(n, d);
    for (i, row) in errors.rows().enumerate() {
        for j in 0..d {
            centred[(i, j)] = row[j] - mean[j];
        }
    }
    let mut covariance = centred.tr_mul(&centred) / (n as f64 - 1.0);
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let mut ridge = (1e-6 * covariance.trace() / d as f64).max(RIDGE_FLOOR);
    loop {
        let regularized = &covariance + DMatrix::identity(d, d) * ridge;
        if let Some(chol) = regularized.clone().cholesky() {
            return Ok(ErrorStatistics {
                mean,
                inverse: chol.inverse(),
                covariance: regularized,
                ridge,
            });
        }
        if ridge > 1e6 {
            return Err(Error::Data("covariance could not be regularized".into()));
        }
        ridge *= 10.0;
    }
}

/// `√((e − μ)ᵀ Σ⁻¹ (e − μ))`.
pub fn mahalanobis(e: &[f64], mean: &DVector<f64>, inverse: &DMatrix<f64>) -> Result<f64> {
    if e.len() != mean.len() || inverse.nrows() != mean.len() || inverse.ncols() != mean.len() {
        return Err(Error::shape("mahalanobis", &[e.len()], &[mean.len()]));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mahalanobis input"));
    }
    let diff = DVector::from_column_slice(e) - mean;
    let q = (inverse * &diff).dot(&diff);
    Ok(q.max(0.0).sqrt())
}

/// Threshold from training distances. Quantile uses lower interpolation:
/// the sorted value at index `⌊(1 − rate)(n − 1)⌋`.
pub fn select_threshold(distances: &[f64], rate: f64, method: ThresholdMethod, scale: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::Data("no distances to threshold".into()));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("distances"));
    }
    match method {
        ThresholdMethod::Quantile => {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::Config(format!("extreme rate {rate} outside (0, 1)")));
            }
            let mut sorted = distances.to_vec();
            sorted.sort_by(f64::total_cmp);
            let idx = ((1.0 - rate) * (sorted.len() - 1) as f64 + 1e-9).floor() as usize;
            Ok(sorted[idx.min(sorted.len() - 1)])
        }
        ThresholdMethod::ScaledMean => {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::Config(format!("threshold scale {scale} must be non-negative")));
            }
            Ok(scale * distances.iter().sum::<f64>() / distances.len() as f64)
        }
    }
}

/// Label 1 iff the distance strictly exceeds `threshold`.
pub fn label(distances: &[f64], threshold: f64) -> Vec<bool> {
    distances.iter().map(|&d| d > threshold).collect()
}

/// Fitted detector state, stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionArtifacts {
    pub statistics: ErrorStatistics,
    pub threshold: f64,
    pub method: ThresholdMethod,
    pub extreme_rate: f64,
    pub scale: f64,
}

/// Scores for one series.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub frames: Vec<usize>,
    pub distances: Vec<f64>,
    pub predicted: Vec<bool>,
    pub actual: Vec<bool>,
}

impl DetectionArtifacts {
    /// Fits statistics and the threshold on `train`.
    pub fn fit(
        model: &Forecaster<f32>,
        train: &FrameSeries,
        method: ThresholdMethod,
        extreme_rate: f64,
        scale: f64,
    ) -> Result<Self> {
        let errors = reconstruction_errors(model, train)?;
        let statistics = fit_statistics(&errors)?;
        let distances = errors
            .rows()
            .map(|e| mahalanobis(e, &statistics.mean, &statistics.inverse))
            .collect::<Result<Vec<_>>>()?;
        let threshold = select_threshold(&distances, extreme_rate, method, scale)?;
        Ok(DetectionArtifacts {
            statistics,
            threshold,
            method,
            extreme_rate,
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.statistics.mean.len()
    }

    pub fn detect(&self, model: &Forecaster<f32>, series: &FrameSeries) -> Result<Detection> {
        if series.frame_size() != self.dim() {
            return Err(Error::shape("detector", &[series.frame_size()], &[self.dim()]));
        }
        let errors = reconstruction_errors(model, series)?;
        let distances = errors
            .rows()
            .map(|e| mahalanobis(e, &self.statistics.mean, &self.statistics.inverse))
            .collect::<Result<Vec<_>>>()?;
        Ok(Detection {
            predicted: label(&distances, self.threshold),
            actual: errors.frames.iter().map(|&f| series.labels()[f]).collect(),
            frames: errors.frames,
            distances,
        })
    }

    /// Little-endian container: magic `GTDA`, u32 version, u8 method,
    /// u32 dim, f64 rate, scale, threshold, ridge, then mean, covariance
    /// and inverse as row-major f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        w.write_all(b"GTDA")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[match self.method {
            ThresholdMethod::Quantile => 0,
            ThresholdMethod::ScaledMean => 1,
        }])?;
        w.write_all(&(d as u32).to_le_bytes())?;
        for v in [self.extreme_rate, self.scale, self.threshold, self.statistics.ridge] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.statistics.mean.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for m in [&self.statistics.covariance, &self.statistics.inverse] {
            for i in 0..d {
                for j in 0..d {
                    w.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated detector header".into()))?;
        if &magic != b"GTDA" {
            return Err(Error::Format("not a detector artifact file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported detector version {version}")));
        }
        let method = match read_u8(&mut r)? {
            0 => ThresholdMethod::Quantile,
            1 => ThresholdMethod::ScaledMean,
            m => return Err(Error::Format(format!("unknown threshold method tag {m}"))),
        };
        let d = read_u32(&mut r)? as usize;
        let mut scalars = [0.0; 4];
        for s in &mut scalars {
            *s = read_f64(&mut r)?;
        }
        let mean = (0..d).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut matrix = || -> Result<DMatrix<f64>> {
            let v = (0..d * d).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_row_slice(d, d, &v))
        };
        let covariance = matrix()?;
        let inverse = matrix()?;
        let [extreme_rate, scale, threshold, ridge] = scalars;
        Ok(DetectionArtifacts {
            statistics: ErrorStatistics {
                mean: DVector::from_vec(mean),
                covariance,
                inverse,
                ridge,
            },
            threshold,
            method,
            extreme_rate,
            scale,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
