use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::TransformerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Gtrans,
    MlpAe,
    LstmAe,
    GcnLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::MlpAe,
        ModelKind::LstmAe,
        ModelKind::GcnLstm,
        ModelKind::Gtrans,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gtrans => "gtrans",
            ModelKind::MlpAe => "mlp-ae",
            ModelKind::LstmAe => "lstm-ae",
            ModelKind::GcnLstm => "gcn-lstm",
        }
    }

    /// Name used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Gtrans => "GTrans",
            ModelKind::MlpAe => "MLP-AE",
            ModelKind::LstmAe => "LSTM-AE",
            ModelKind::GcnLstm => "GCN-LSTM",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gtrans" => Ok(ModelKind::Gtrans),
            "mlp-ae" => Ok(ModelKind::MlpAe),
            "lstm-ae" => Ok(ModelKind::LstmAe),
            "gcn-lstm" => Ok(ModelKind::GcnLstm),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Every hyperparameter of a forecaster and its training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Look-back window `T`.
    pub window: usize,
    pub nodes: usize,
    pub features: usize,
    /// Per-node embedding width `D`.
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Smoothing/sharpening mix.
    pub gamma: f64,
    /// Reconstruction weight of the loss; `1 − lambda` weights the output penalty.
    pub lambda: f64,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Gtrans,
            window: 10,
            nodes: 16,
            features: 3,
            embed_dim: 4,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            gamma: 0.5,
            lambda: 0.9,
            dropout: 0.1,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.nodes * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.window < 2 {
            return fail(format!("window must be >= 2, got {}", self.window));
        }
        if self.nodes == 0 || self.features == 0 || self.embed_dim == 0 {
            return fail("nodes, features and embed_dim must be >= 1".into());
        }
        if self.kind == ModelKind::Gtrans && (self.heads == 0 || !self.model_dim().is_multiple_of(self.heads)) {
            return fail(format!(
                "nodes*embed_dim = {} must be divisible by heads = {}",
                self.model_dim(),
                self.heads
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        Ok(())
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            nodes: self.nodes,
            embed_dim: self.embed_dim,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            decoder_blocks: self.decoder_blocks,
            max_window: self.window,
            dropout: self.dropout,
        }
    }
}
