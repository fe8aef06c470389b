//! Transformer encoder/decoder over flattened graph embeddings.
//!
//! A window of graph embeddings `[B, T, N, D]` is flattened to
//! `[B, T, N·D]`, so the model width equals `N·D` and node `i` occupies
//! columns `i·D .. (i+1)·D` of every token.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::{LayerNorm, Linear};
use crate::tensor::{Ctx, ParamId, ParamStore, Scalar, Tensor, Var};

/// Large negative logit used for masked positions; `exp` of it underflows to 0.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    pub nodes: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub max_window: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn model_dim(&self) -> usize {
        self.nodes * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dm = self.model_dim();
        if dm == 0 || self.heads == 0 || !dm.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {dm} must be a positive multiple of heads {}",
                self.heads
            )));
        }
        if self.max_window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// `z_t = x_t·E + e_pos[t]` with a trainable position table.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    pub projection: Linear,
    pub positions: ParamId,
    pub max_window: usize,
}

impl PositionalEmbedding {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        input_dim: usize,
        model_dim: usize,
        max_window: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let projection = Linear::new(store, &format!("{name}.projection"), input_dim, model_dim, false, rng)?;
        let positions = store.add(format!("{name}.positions"), Tensor::zeros(&[max_window, model_dim]))?;
        Ok(PositionalEmbedding {
            projection,
            positions,
            max_window,
        })
    }

    /// `x: [B, T, input]` → `[B, T, model]`.
    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = x.shape();
        let steps = shape[shape.len() - 2];
        if steps > self.max_window {
            return Err(Error::Config(format!(
                "window {steps} exceeds positional table of {}",
                self.max_window
            )));
        }
        let pos = ctx.param(self.positions).narrow(0, 0, steps)?;
        self.projection.forward(ctx, x)?.add(pos)
    }
}

/// Lower-triangular visibility: entry `(i, j)` is masked when `j > i`.
pub fn causal_mask(steps: usize) -> Rc<[bool]> {
    (0..steps * steps).map(|k| k % steps > k / steps).collect()
}

/// Per-head attention `softmax(q·kᵀ/√d_h + mask)·v` on `[B·H, T, d_h]` inputs.
/// Returns the output and the attention weights `[B·H, Tq, Tk]`.
pub fn scaled_dot_product<'t, F: Scalar>(
    ctx: &Ctx<'t, F>,
    q: Var<'t, F>,
    k: Var<'t, F>,
    v: Var<'t, F>,
    mask: Option<&Rc<[bool]>>,
    dropout: f64,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let qs = q.shape();
    let ks = k.shape();
    let head_dim = *qs.last().expect("rank 3");
    let mut scores = q.matmul(k.transpose()?)?.scale(F::of(1.0 / (head_dim as f64).sqrt()))?;
    if let Some(mask) = mask {
        let mshape = [qs[1], ks[1]];
        if mask.len() != mshape[0] * mshape[1] {
            return Err(Error::shape("attention mask", &mshape, &[mask.len()]));
        }
        scores = scores.masked_fill(Rc::clone(mask), &mshape, F::of(MASKED_LOGIT))?;
    }
    let weights = scores.softmax(2)?;
    let out = ctx.dropout(weights, dropout)?.matmul(v)?;
    Ok((out, weights))
}

/// Output of [`MultiHeadAttention::forward`].
pub struct Attended<'t, F> {
    pub output: Var<'t, F>,
    /// `[B, heads, Tq, Tk]`
    pub weights: Var<'t, F>,
}

/// Joint `H_qkv` projection split evenly across heads, then `H_msa`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub output: Linear,
    pub heads: usize,
    pub model_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {model_dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), model_dim, 3 * model_dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), model_dim, model_dim, true, rng)?,
            heads,
            model_dim,
        })
    }

    fn project<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, part: usize) -> Result<Var<'t, F>> {
        let dm = self.model_dim;
        let shape = x.shape();
        let rows = shape[0] * shape[1];
        let w = ctx.param(self.qkv.weight).narrow(1, part * dm, dm)?;
        let mut y = x.reshape(&[rows, dm])?.matmul(w)?;
        if let Some(b) = self.qkv.bias {
            y = y.add(ctx.param(b).narrow(0, part * dm, dm)?)?;
        }
        // [B, T, H, dh] → [B, H, T, dh] → [B·H, T, dh]
        let dh = dm / self.heads;
        y.reshape(&[shape[0], shape[1], self.heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[shape[0] * self.heads, shape[1], dh])
    }

    /// Queries from `query: [B, Tq, dm]`, keys/values from `source: [B, Tk, dm]`.
    pub fn forward<'t, F: Scalar>(
        &self,
        ctx: &Ctx<'t, F>,
        query: Var<'t, F>,
        source: Var<'t, F>,
        mask: Option<&Rc<[bool]>>,
        dropout: f64,
    ) -> Result<Attended<'t, F>> {
        let qs = query.shape();
        let ss = source.shape();
        if qs.len() != 3 || ss.len() != 3 || qs[2] != self.model_dim || ss[2] != self.model_dim || qs[0] != ss[0] {
            return Err(Error::shape("multi-head attention", &qs, &ss));
        }
        let (b, tq, tk) = (qs[0], qs[1], ss[1]);
        let dh = self.model_dim / self.heads;
        let q = self.project(ctx, query, 0)?;
        let k = self.project(ctx, source, 1)?;
        let v = self.project(ctx, source, 2)?;
        let (heads_out, weights) = scaled_dot_product(ctx, q, k, v, mask, dropout)?;
        let merged = heads_out
            .reshape(&[b, self.heads, tq, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, tq, self.model_dim])?;
        Ok(Attended {
            output: self.output.forward(ctx, merged)?,
            weights: weights.reshape(&[b, self.heads, tq, tk])?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        model_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            expand: Linear::new(store, &format!("{name}.expand"), model_dim, 4 * model_dim, true, rng)?,
            contract: Linear::new(store, &format!("{name}.contract"), 4 * model_dim, model_dim, true, rng)?,
        })
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, dropout: f64) -> Result<Var<'t, F>> {
        let h = ctx.dropout(self.expand.forward(ctx, x)?.relu()?, dropout)?;
        self.contract.forward(ctx, h)
    }
}

/// Pre-norm block: `x + MSA(LN(x))`, then `x + FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub feed_forward: FeedForward,
}

impl EncoderBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), model_dim)?,
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), model_dim, heads, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), model_dim)?,
            feed_forward: FeedForward::new(store, &format!("{name}.feed_forward"), model_dim, rng)?,
        })
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, dropout: f64) -> Result<Var<'t, F>> {
        let h = self.attn_norm.forward(ctx, x)?;
        let a = self.attention.forward(ctx, h, h, None, dropout)?.output;
        let x = x.add(ctx.dropout(a, dropout)?)?;
        let h = self.ff_norm.forward(ctx, x)?;
        let f = self.feed_forward.forward(ctx, h, dropout)?;
        x.add(ctx.dropout(f, dropout)?)
    }
}

/// Pre-norm block: causal self-attention, cross-attention over memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attention: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub feed_forward: FeedForward,
}

impl DecoderBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), model_dim)?,
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self_attention"), model_dim, heads, rng)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), model_dim)?,
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross_attention"), model_dim, heads, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), model_dim)?,
            feed_forward: FeedForward::new(store, &format!("{name}.feed_forward"), model_dim, rng)?,
        })
    }

    pub fn forward<'t, F: Scalar>(
        &self,
        ctx: &Ctx<'t, F>,
        x: Var<'t, F>,
        memory: Var<'t, F>,
        mask: &Rc<[bool]>,
        dropout: f64,
    ) -> Result<Var<'t, F>> {
        let h = self.self_norm.forward(ctx, x)?;
        let a = self.self_attention.forward(ctx, h, h, Some(mask), dropout)?.output;
        let x = x.add(ctx.dropout(a, dropout)?)?;
        let h = self.cross_norm.forward(ctx, x)?;
        let c = self.cross_attention.forward(ctx, h, memory, None, dropout)?.output;
        let x = x.add(ctx.dropout(c, dropout)?)?;
        let h = self.ff_norm.forward(ctx, x)?;
        let f = self.feed_forward.forward(ctx, h, dropout)?;
        x.add(ctx.dropout(f, dropout)?)
    }
}

/// Encoder/decoder stack with shared positional embedding and the temporal
/// projection back to the graph decoder's width.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub embedding: PositionalEmbedding,
    pub encoder: Vec<EncoderBlock>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub decoder_norm: LayerNorm,
    pub temporal_projection: Linear,
}

impl Transformer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        config: TransformerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let dm = config.model_dim();
        let embedding = PositionalEmbedding::new(store, &format!("{name}.embedding"), dm, dm, config.max_window, rng)?;
        let encoder = (0..config.encoder_blocks)
            .map(|i| EncoderBlock::new(store, &format!("{name}.encoder{i}"), dm, config.heads, rng))
            .collect::<Result<_>>()?;
        let encoder_norm = LayerNorm::new(store, &format!("{name}.encoder_norm"), dm)?;
        let decoder = (0..config.decoder_blocks)
            .map(|i| DecoderBlock::new(store, &format!("{name}.decoder{i}"), dm, config.heads, rng))
            .collect::<Result<_>>()?;
        let decoder_norm = LayerNorm::new(store, &format!("{name}.decoder_norm"), dm)?;
        let temporal_projection = Linear::new(store, &format!("{name}.temporal_projection"), dm, dm, true, rng)?;
        Ok(Transformer {
            config,
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            temporal_projection,
        })
    }

    fn flatten<'t, F: Scalar>(&self, x: Var<'t, F>) -> Result<(Var<'t, F>, [usize; 2])> {
        let shape = x.shape();
        let c = &self.config;
        match shape.as_slice() {
            &[b, t, n, d] if n == c.nodes && d == c.embed_dim => Ok((x.reshape(&[b, t, n * d])?, [b, t])),
            _ => Err(Error::shape("transformer input", &shape, &[0, 0, c.nodes, c.embed_dim])),
        }
    }

    fn unflatten<'t, F: Scalar>(&self, x: Var<'t, F>, [b, t]: [usize; 2]) -> Result<Var<'t, F>> {
        x.reshape(&[b, t, self.config.nodes, self.config.embed_dim])
    }

    /// Memory context for `[B, T, N, D]` embeddings, same shape.
    pub fn encode<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, embeddings: Var<'t, F>) -> Result<Var<'t, F>> {
        let (x, bt) = self.flatten(embeddings)?;
        let mut h = self.embedding.forward(ctx, x)?;
        for block in &self.encoder {
            h = block.forward(ctx, h, self.config.dropout)?;
        }
        let h = self.encoder_norm.forward(ctx, h)?;
        self.unflatten(h, bt)
    }

    /// Decoder hidden states `[B, T, dm]` before the temporal projection.
    pub fn decode_hidden<'t, F: Scalar>(
        &self,
        ctx: &Ctx<'t, F>,
        target: Var<'t, F>,
        memory: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let (tgt, bt) = self.flatten(target)?;
        let (mem, mbt) = self.flatten(memory)?;
        if bt[0] != mbt[0] {
            return Err(Error::shape("decoder memory", &target.shape(), &memory.shape()));
        }
        let mask = causal_mask(bt[1]);
        let mut h = self.embedding.forward(ctx, tgt)?;
        for block in &self.decoder {
            h = block.forward(ctx, h, mem, &mask, self.config.dropout)?;
        }
        self.decoder_norm.forward(ctx, h)
    }

    /// Per-time-step linear map from model width back to `N·D`, reshaped to `[B, T, N, D]`.
    pub fn project<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, hidden: Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = hidden.shape();
        let y = self.temporal_projection.forward(ctx, hidden)?;
        self.unflatten(y, [shape[0], shape[1]])
    }

    /// Predicted embeddings `[B, T, N, D]` for `target` given `memory`.
    pub fn decode<'t, F: Scalar>(
        &self,
        ctx: &Ctx<'t, F>,
        target: Var<'t, F>,
        memory: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let h = self.decode_hidden(ctx, target, memory)?;
        self.project(ctx, h)
    }
}
