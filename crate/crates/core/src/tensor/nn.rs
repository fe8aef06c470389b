//! Reusable trainable layers built on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{numel, Ctx, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Xavier/Glorot uniform matrix of shape `[fan_in, fan_out]`.
pub fn xavier_uniform<F: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| F::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape matches")
}

/// Dense map over the last axis: `y = x·W (+ b)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let rows = numel(&shape) / self.in_dim;
        let mut y = x.reshape(&[rows, self.in_dim])?.matmul(ctx.param(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add(ctx.param(b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_dim;
        y.reshape(&out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], F::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), self.eps)
    }
}

/// Single LSTM layer with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Lstm {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h = hidden_dim;
        let w_input = store.add(format!("{name}.w_input"), xavier_uniform(rng, input_dim, 4 * h))?;
        let w_hidden = store.add(format!("{name}.w_hidden"), xavier_uniform(rng, h, 4 * h))?;
        let mut b = vec![F::zero(); 4 * h];
        b[h..2 * h].iter_mut().for_each(|v| *v = F::one());
        let bias = store.add(format!("{name}.bias"), Tensor::new(&[4 * h], b)?)?;
        Ok(Lstm {
            w_input,
            w_hidden,
            bias,
            input_dim,
            hidden_dim,
        })
    }

    /// Runs over `x: [B, T, input]` from zero state; returns every hidden
    /// state `[B, T, H]` and the final one `[B, H]`.
    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let shape = x.shape();
        let &[batch, steps, input] = shape.as_slice() else {
            return Err(Error::shape("lstm", &shape, &[0, 0, self.input_dim]));
        };
        if input != self.input_dim {
            return Err(Error::shape("lstm", &shape, &[batch, steps, self.input_dim]));
        }
        let h_dim = self.hidden_dim;
        let projected = x
            .reshape(&[batch * steps, input])?
            .matmul(ctx.param(self.w_input))?
            .add(ctx.param(self.bias))?
            .reshape(&[batch, steps, 4 * h_dim])?;
        let w_hidden = ctx.param(self.w_hidden);
        let mut h = ctx.constant(&Tensor::zeros(&[batch, h_dim]));
        let mut c = h;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gates = projected
                .narrow(1, t, 1)?
                .reshape(&[batch, 4 * h_dim])?
                .add(h.matmul(w_hidden)?)?;
            let i = gates.narrow(1, 0, h_dim)?.sigmoid()?;
            let f = gates.narrow(1, h_dim, h_dim)?.sigmoid()?;
            let g = gates.narrow(1, 2 * h_dim, h_dim)?.tanh()?;
            let o = gates.narrow(1, 3 * h_dim, h_dim)?.sigmoid()?;
            c = f.mul(c)?.add(i.mul(g)?)?;
            h = o.mul(c.tanh()?)?;
            outputs.push(h.reshape(&[batch, 1, h_dim])?);
        }
        let all = ctx.tape.concat(&outputs, 1)?;
        Ok((all, h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    #[test]
    fn xavier_bounds_and_determinism() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a: Tensor<f64> = xavier_uniform(&mut r1, 4, 2);
        let b: Tensor<f64> = xavier_uniform(&mut r2, 4, 2);
        assert_eq!(a, b);
        let bound = (6.0f64 / 6.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn linear_maps_last_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng).unwrap();
        store.set("l.weight", vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        store.set("l.bias", vec![0.5, -0.5]).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let x = ctx.constant(&Tensor::from_f64(&[2, 1, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 1.0]).unwrap());
        let y = lin.forward(&ctx, x).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 2]);
        assert_eq!(y.value().data(), &[4.5, 4.5, 1.5, 0.5]);
        assert!(lin.forward(&ctx, ctx.constant(&Tensor::zeros(&[2, 2]))).is_err());
    }

    #[test]
    fn lstm_forget_bias_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let lstm = Lstm::new(&mut store, "rnn", 3, 4, &mut rng).unwrap();
        let b = store.by_name("rnn.bias").unwrap().data().to_vec();
        assert_eq!(&b[4..8], &[1.0; 4]);
        assert!(b[..4].iter().chain(&b[8..]).all(|&v| v == 0.0));
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let x = ctx.constant(&Tensor::full(&[2, 5, 3], 0.1));
        let (all, last) = lstm.forward(&ctx, x).unwrap();
        assert_eq!(all.shape(), vec![2, 5, 4]);
        assert_eq!(last.shape(), vec![2, 4]);
        let a = all.value();
        assert_eq!(&a.data()[16..20], last.value().data().get(0..4).unwrap());
    }
}
