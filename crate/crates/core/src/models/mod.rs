//! GTrans and its three baselines behind one forecaster interface.
//!
//! Every model maps a source window `[B, T, N, C]` to a prediction of the
//! one-step-shifted window with the same shape.

mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{ModelConfig, ModelKind};

use crate::error::{Error, Result};
use crate::graph::{check_permutation, GraphOperator, GraphStack};
use crate::tensor::nn::{Linear, Lstm};
use crate::tensor::{Ctx, ParamStore, Scalar, Tape, Tensor, Var};
use crate::transformer::Transformer;

/// Parameter-name prefixes of the graph encoder and decoder.
pub const GRAPH_PREFIXES: [&str; 2] = ["graph_encoder.", "graph_decoder."];

#[derive(Clone, Debug)]
enum Architecture {
    Gtrans {
        encoder: GraphStack,
        transformer: Transformer,
        decoder: GraphStack,
    },
    MlpAe {
        encoder: Linear,
        projection: Linear,
        decoder: Linear,
    },
    LstmAe {
        encoder: [Lstm; 2],
        decoder: [Lstm; 2],
        output: Linear,
    },
    GcnLstm {
        encoder: GraphStack,
        lstm: Lstm,
        projection: Linear,
        decoder: GraphStack,
    },
}

/// A model kind with its parameters.
#[derive(Clone, Debug)]
pub struct Forecaster<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    arch: Architecture,
    trained: bool,
}

impl<F: Scalar> Forecaster<F> {
    /// Builds the model and initializes weights from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let flat_in = c.nodes * c.features;
        let flat_embed = c.nodes * c.embed_dim;
        let arch = match c.kind {
            ModelKind::Gtrans => Architecture::Gtrans {
                encoder: GraphStack::encoder(&mut store, "graph_encoder", c.features, c.embed_dim, c.gamma, &mut rng)?,
                transformer: Transformer::new(&mut store, "transformer", c.transformer(), &mut rng)?,
                decoder: GraphStack::decoder(&mut store, "graph_decoder", c.embed_dim, c.features, c.gamma, &mut rng)?,
            },
            ModelKind::MlpAe => Architecture::MlpAe {
                encoder: Linear::new(&mut store, "encoder", flat_in, flat_embed, true, &mut rng)?,
                projection: Linear::new(
                    &mut store,
                    "projection",
                    c.window * flat_embed,
                    c.window * flat_embed,
                    true,
                    &mut rng,
                )?,
                decoder: Linear::new(&mut store, "decoder", flat_embed, flat_in, true, &mut rng)?,
            },
            ModelKind::LstmAe => Architecture::LstmAe {
                encoder: [
                    Lstm::new(&mut store, "encoder0", flat_in, flat_embed, &mut rng)?,
                    Lstm::new(&mut store, "encoder1", flat_embed, flat_embed, &mut rng)?,
                ],
                decoder: [
                    Lstm::new(&mut store, "decoder0", flat_embed, flat_embed, &mut rng)?,
                    Lstm::new(&mut store, "decoder1", flat_embed, flat_embed, &mut rng)?,
                ],
                output: Linear::new(&mut store, "output", flat_embed, flat_in, true, &mut rng)?,
            },
            ModelKind::GcnLstm => Architecture::GcnLstm {
                encoder: GraphStack::encoder(&mut store, "graph_encoder", c.features, c.embed_dim, c.gamma, &mut rng)?,
                lstm: Lstm::new(&mut store, "lstm", flat_embed, flat_embed, &mut rng)?,
                projection: Linear::new(&mut store, "projection", flat_embed, flat_embed, true, &mut rng)?,
                decoder: GraphStack::decoder(&mut store, "graph_decoder", c.embed_dim, c.features, c.gamma, &mut rng)?,
            },
        };
        Ok(Forecaster {
            config,
            params: store,
            arch,
            trained: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Scalar parameter count of the graph encoder plus decoder.
    pub fn graph_parameter_count(&self) -> usize {
        GRAPH_PREFIXES
            .iter()
            .map(|p| self.params.num_scalars_with_prefix(p))
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> Forecaster<G> {
        Forecaster {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
            trained: self.trained,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            &[_, t, n, f] if t == c.window && n == c.nodes && f == c.features => Ok(()),
            _ => Err(Error::shape(
                "forecaster input",
                shape,
                &[0, c.window, c.nodes, c.features],
            )),
        }
    }

    /// Prediction `[B, T, N, C]` for a source batch `[B, T, N, C]`.
    ///
    /// `ctx` must have been created over [`Forecaster::params`].
    pub fn forward<'t>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, graph: &GraphOperator<F>) -> Result<Var<'t, F>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        if graph.nodes() != self.config.nodes {
            return Err(Error::shape("graph", &[graph.nodes()], &[self.config.nodes]));
        }
        match &self.arch {
            Architecture::Gtrans { .. } => self.gtrans_forward(ctx, x, graph),
            Architecture::MlpAe { .. } => self.mlp_ae_forward(ctx, x),
            Architecture::LstmAe { .. } => self.lstm_ae_forward(ctx, x),
            Architecture::GcnLstm { .. } => self.gcn_lstm_forward(ctx, x, graph),
        }
    }

    fn gtrans_forward<'t>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, graph: &GraphOperator<F>) -> Result<Var<'t, F>> {
        let Architecture::Gtrans {
            encoder,
            transformer,
            decoder,
        } = &self.arch
        else {
            unreachable!()
        };
        let embeddings = encoder.forward(ctx, x, graph)?;
        let memory = transformer.encode(ctx, embeddings)?;
        let predicted = transformer.decode(ctx, embeddings, memory)?;
        decoder.forward(ctx, predicted, graph)
    }

    fn mlp_ae_forward<'t>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let Architecture::MlpAe {
            encoder,
            projection,
            decoder,
        } = &self.arch
        else {
            unreachable!()
        };
        let s = x.shape();
        let (b, t) = (s[0], s[1]);
        let h = encoder.forward(ctx, x.reshape(&[b, t, s[2] * s[3]])?)?.relu()?;
        let width = h.shape()[2];
        let z = projection.forward(ctx, h.reshape(&[b, t * width])?)?;
        decoder.forward(ctx, z.reshape(&[b, t, width])?)?.reshape(&s)
    }

    fn lstm_ae_encode<'t>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let Architecture::LstmAe { encoder, .. } = &self.arch else {
            unreachable!()
        };
        let s = x.shape();
        let (h, _) = encoder[0].forward(ctx, x.reshape(&[s[0], s[1], s[2] * s[3]])?)?;
        let (_, last) = encoder[1].forward(ctx, h)?;
        Ok(last)
    }

    fn lstm_ae_forward<'t>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let Architecture::LstmAe { decoder, output, .. } = &self.arch else {
            unreachable!()
        };
        let s = x.shape();
        let (b, t) = (s[0], s[1]);
        let state = self.lstm_ae_encode(ctx, x)?;
        let width = state.shape()[1];
        let step = state.reshape(&[b, 1, width])?;
        let repeated = ctx.tape.concat(&vec![step; t], 1)?;
        let (h, _) = decoder[0].forward(ctx, repeated)?;
        let (h, _) = decoder[1].forward(ctx, h)?;
        output.forward(ctx, h)?.reshape(&s)
    }

    fn gcn_lstm_hidden<'t>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, graph: &GraphOperator<F>) -> Result<Var<'t, F>> {
        let Architecture::GcnLstm { encoder, lstm, .. } = &self.arch else {
            unreachable!()
        };
        let e = encoder.forward(ctx, x, graph)?;
        let s = e.shape();
        let (h, _) = lstm.forward(ctx, e.reshape(&[s[0], s[1], s[2] * s[3]])?)?;
        Ok(h)
    }

    fn gcn_lstm_forward<'t>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, graph: &GraphOperator<F>) -> Result<Var<'t, F>> {
        let Architecture::GcnLstm {
            projection, decoder, ..
        } = &self.arch
        else {
            unreachable!()
        };
        let s = x.shape();
        let h = self.gcn_lstm_hidden(ctx, x, graph)?;
        let e = projection
            .forward(ctx, h)?
            .reshape(&[s[0], s[1], self.config.nodes, self.config.embed_dim])?;
        decoder.forward(ctx, e, graph)
    }

    /// Eval-mode prediction outside any training loop.
    pub fn predict(&self, x: &Tensor<F>, graph: &GraphOperator<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        Ok(self.forward(&ctx, ctx.constant(x), graph)?.value())
    }

    /// Latent vector per batch item, `[B, L]`: the encoder state averaged over
    /// time (LSTM-AE uses its final encoder state).
    pub fn latent(&self, x: &Tensor<F>, graph: &GraphOperator<F>) -> Result<Tensor<F>> {
        self.check_input(x.shape())?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let xv = ctx.constant(x);
        let seq = match &self.arch {
            Architecture::Gtrans {
                encoder, transformer, ..
            } => {
                let memory = transformer.encode(&ctx, encoder.forward(&ctx, xv, graph)?)?;
                let s = memory.shape();
                memory.reshape(&[s[0], s[1], s[2] * s[3]])?
            }
            Architecture::MlpAe { encoder, .. } => {
                let s = x.shape();
                encoder.forward(&ctx, xv.reshape(&[s[0], s[1], s[2] * s[3]])?)?.relu()?
            }
            Architecture::LstmAe { .. } => return Ok(self.lstm_ae_encode(&ctx, xv)?.value()),
            Architecture::GcnLstm { .. } => self.gcn_lstm_hidden(&ctx, xv, graph)?,
        };
        let v = seq.value();
        let (b, t, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = vec![F::zero(); b * w];
        let scale = F::one() / F::of(t as f64);
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..w {
                    out[bi * w + j] += v.data()[(bi * t + ti) * w + j] * scale;
                }
            }
        }
        Tensor::new(&[b, w], out)
    }

    /// Same model with nodes relabelled so new node `i` is old node `perm[i]`.
    ///
    /// Graph layers share weights across nodes and need no change; only
    /// weights touching the node-major flattened width are permuted.
    pub fn permuted_nodes(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.config.nodes)?;
        let d = self.config.embed_dim;
        let flat: Vec<usize> = perm.iter().flat_map(|&p| (0..d).map(move |k| p * d + k)).collect();
        let mut out = self.clone();
        let (rows_of, cols_of): (Vec<String>, Vec<String>) = match &self.arch {
            Architecture::Gtrans { .. } => (
                vec!["transformer.embedding.projection.weight".into()],
                vec![
                    "transformer.temporal_projection.weight".into(),
                    "transformer.temporal_projection.bias".into(),
                ],
            ),
            Architecture::GcnLstm { .. } => (
                vec!["lstm.w_input".into()],
                vec!["projection.weight".into(), "projection.bias".into()],
            ),
            _ => {
                return Err(Error::Contract(format!(
                    "{} has no node-equivariant structure",
                    self.config.kind
                )))
            }
        };
        for name in rows_of {
            let t = self.params.by_name(&name).expect("known parameter");
            let cols = t.shape()[1];
            let data = flat
                .iter()
                .flat_map(|&src| t.data()[src * cols..(src + 1) * cols].iter().copied())
                .collect();
            out.params.set(&name, data)?;
        }
        for name in cols_of {
            let t = self.params.by_name(&name).expect("known parameter");
            let cols = *t.shape().last().expect("rank >= 1");
            let rows = t.numel() / cols;
            let data = (0..rows)
                .flat_map(|r| flat.iter().map(move |&src| t.data()[r * cols + src]))
                .collect();
            out.params.set(&name, data)?;
        }
        Ok(out)
    }
}

/// Re-orders the node axis of a `[.., N, C]` tensor so new node `i` is old `perm[i]`.
pub fn permute_node_axis<F: Scalar>(x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let s = x.shape();
    let r = s.len();
    if r < 2 {
        return Err(Error::Contract("node axis needs rank >= 2".into()));
    }
    let (n, c) = (s[r - 2], s[r - 1]);
    check_permutation(perm, n)?;
    let outer = x.numel() / (n * c);
    let mut data = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for &p in perm {
            let at = (o * n + p) * c;
            data.extend_from_slice(&x.data()[at..at + c]);
        }
    }
    Tensor::new(s, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphSpec;

    fn small(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            window: 3,
            nodes: 3,
            features: 2,
            embed_dim: 2,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            dropout: 0.0,
            seed: 5,
            ..Default::default()
        }
    }

    fn input() -> Tensor<f64> {
        let data: Vec<f64> = (0..2 * 3 * 3 * 2).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        Tensor::from_f64(&[2, 3, 3, 2], &data).unwrap()
    }

    fn path() -> GraphOperator<f64> {
        GraphOperator::new(&GraphSpec::from_edges(3, &[(0, 1), (1, 2)]).unwrap())
    }

    #[test]
    fn every_kind_preserves_shape_and_is_deterministic() {
        for kind in ModelKind::ALL {
            let a = Forecaster::<f64>::new(small(kind)).unwrap();
            let b = Forecaster::<f64>::new(small(kind)).unwrap();
            let ya = a.predict(&input(), &path()).unwrap();
            let yb = b.predict(&input(), &path()).unwrap();
            assert_eq!(ya.shape(), &[2, 3, 3, 2], "{kind}");
            assert_eq!(ya, yb, "{kind}");
            let lat = a.latent(&input(), &path()).unwrap();
            assert_eq!(lat.shape(), &[2, 6], "{kind}");
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = Forecaster::<f64>::new(small(ModelKind::Gtrans)).unwrap();
        let x = Tensor::zeros(&[1, 4, 3, 2]);
        assert!(matches!(m.predict(&x, &path()), Err(Error::Shape { .. })));
    }

    #[test]
    fn graph_components_have_equal_sizes() {
        let g = Forecaster::<f32>::new(small(ModelKind::Gtrans)).unwrap();
        let l = Forecaster::<f32>::new(small(ModelKind::GcnLstm)).unwrap();
        assert_eq!(g.graph_parameter_count(), l.graph_parameter_count());
        // C→2D→D and D→2D→C with C = 2, D = 2
        assert_eq!(g.graph_parameter_count(), 2 * (2 * 4 + 4 * 2));
        assert_eq!(
            Forecaster::<f32>::new(small(ModelKind::MlpAe))
                .unwrap()
                .graph_parameter_count(),
            0
        );
    }

    #[test]
    fn node_permutation_helper() {
        let x = Tensor::<f64>::from_f64(&[1, 3, 1], &[10.0, 20.0, 30.0]).unwrap();
        let p = permute_node_axis(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.data(), &[30.0, 10.0, 20.0]);
        assert!(permute_node_axis(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn baselines_refuse_node_permutation() {
        let m = Forecaster::<f64>::new(small(ModelKind::MlpAe)).unwrap();
        assert!(m.permuted_nodes(&[0, 1, 2]).is_err());
    }
}
