//! Graph-embedding transformer autoencoder for spatiotemporal nowcasting and
//! extreme-event detection, with the engine, baselines and tooling it needs.

pub mod data;
pub mod detector;
pub mod error;
pub mod graph;
pub(crate) mod io;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use data::FrameSeries;
pub use detector::{DetectionArtifacts, ThresholdMethod};
pub use error::{Error, Result};
pub use graph::GraphSpec;
pub use metrics::{ConfusionCounts, ReportRow, Scores};
pub use models::{Forecaster, ModelConfig, ModelKind};
pub use training::TrainReport;
