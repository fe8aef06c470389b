//! Flat run configuration: defaults, then a TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use gtrans_core::{Error, ModelConfig, ModelKind, Result, ThresholdMethod};
use serde::{Deserialize, Serialize};

/// Every key a config file may set. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub window: usize,
    /// Taken from the data when unset; must match it when set.
    pub nodes: Option<usize>,
    pub features: Option<usize>,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Dataset container.
    pub data: Option<PathBuf>,
    /// Edge list for area graphs (ingest only).
    pub graph: Option<PathBuf>,
    /// Leading fraction of frames used for training and detector fitting.
    pub split: f64,
    pub threshold_method: ThresholdMethod,
    /// Quantile rate; the training split's labelled rate when unset.
    pub extreme_rate: Option<f64>,
    /// Multiplier for the scaled-mean threshold.
    pub threshold_scale: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            kind: m.kind,
            window: m.window,
            nodes: None,
            features: None,
            embed_dim: m.embed_dim,
            heads: m.heads,
            encoder_blocks: m.encoder_blocks,
            decoder_blocks: m.decoder_blocks,
            gamma: m.gamma,
            lambda: m.lambda,
            dropout: m.dropout,
            learning_rate: m.learning_rate,
            epochs: m.epochs,
            batch_size: m.batch_size,
            seed: m.seed,
            data: None,
            graph: None,
            split: 5.0 / 6.0,
            threshold_method: ThresholdMethod::Quantile,
            extreme_rate: None,
            threshold_scale: 2.0,
            out_dir: None,
        }
    }
}

/// Config file plus per-key overrides shared by train, detect and
/// export-latent.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML file with run keys; flags win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<ModelKind>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub encoder_blocks: Option<usize>,
    #[arg(long)]
    pub decoder_blocks: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub extreme_rate: Option<f64>,
    #[arg(long)]
    pub threshold_scale: Option<f64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        apply!(
            kind,
            window,
            embed_dim,
            heads,
            encoder_blocks,
            decoder_blocks,
            gamma,
            lambda,
            dropout,
            learning_rate,
            epochs,
            batch_size,
            seed,
            split,
            threshold_scale
        );
        if self.extreme_rate.is_some() {
            cfg.extreme_rate = self.extreme_rate;
        }
        Ok(cfg)
    }
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    /// Model hyperparameters for data with `nodes × features` frames.
    pub fn model_config(&self, nodes: usize, features: usize) -> Result<ModelConfig> {
        for (key, set, actual) in [("nodes", self.nodes, nodes), ("features", self.features, features)] {
            if let Some(v) = set {
                if v != actual {
                    return Err(Error::Config(format!("{key} = {v} but the data has {actual}")));
                }
            }
        }
        let m = ModelConfig {
            kind: self.kind,
            window: self.window,
            nodes,
            features,
            embed_dim: self.embed_dim,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            gamma: self.gamma,
            lambda: self.lambda,
            dropout: self.dropout,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        };
        m.validate()?;
        Ok(m)
    }

    /// Copies a checkpoint's hyperparameters so the recorded config
    /// describes the model actually used.
    pub fn adopt(&mut self, m: &ModelConfig) {
        self.kind = m.kind;
        self.window = m.window;
        self.nodes = Some(m.nodes);
        self.features = Some(m.features);
        self.embed_dim = m.embed_dim;
        self.heads = m.heads;
        self.encoder_blocks = m.encoder_blocks;
        self.decoder_blocks = m.decoder_blocks;
        self.gamma = m.gamma;
        self.lambda = m.lambda;
        self.dropout = m.dropout;
        self.learning_rate = m.learning_rate;
        self.epochs = m.epochs;
        self.batch_size = m.batch_size;
        self.seed = m.seed;
    }

    pub fn validate_detection(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Config(format!("split {} outside (0, 1)", self.split)));
        }
        if let Some(r) = self.extreme_rate {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("extreme rate {r} outside (0, 1)")));
            }
        }
        if !(self.threshold_scale >= 0.0 && self.threshold_scale.is_finite()) {
            return Err(Error::Config(format!(
                "threshold scale {} must be non-negative",
                self.threshold_scale
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
