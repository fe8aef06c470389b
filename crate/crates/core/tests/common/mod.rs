#![allow(dead_code)]

use gtrans_core::graph::GraphSpec;
use gtrans_core::tensor::{Ctx, ParamStore, Tape, Tensor, Var};
use gtrans_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Overwrites every parameter with N(0, 0.5²) draws so zero-initialised
/// biases and tables take part in the check.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let n = store.get(id).numel();
        let data = (0..n)
            .map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        store.set(&name, data).unwrap();
    }
}

/// Random undirected graph on `n` nodes, connected via a random spanning
/// tree plus extra edges with probability `p`.
pub fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> GraphSpec {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.gen_range(0..i), i));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    GraphSpec::from_edges(n, &edges).unwrap()
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Largest relative error between analytic and central-difference
/// gradients of `sum(f(inputs) ⊙ R)` over every input and parameter
/// scalar. Relative error is `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn gradient_error<F>(store: &mut ParamStore<f64>, inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    const H: f64 = 1e-5;
    let loss = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t)).collect();
        let out = f(&ctx, &vars).unwrap();
        let r = normal(&mut rng(seed), &out.shape());
        out.mul(ctx.constant(&r)).unwrap().sum().unwrap().item()
    };

    let (input_grads, param_grads) = {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, store);
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
        let out = f(&ctx, &vars).unwrap();
        let r = normal(&mut rng(seed), &out.shape());
        let l = out.mul(ctx.constant(&r)).unwrap().sum().unwrap();
        let grads = tape.backward(l).unwrap();
        let zeros = |n: usize| vec![0.0; n];
        let input_grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| zeros(t.numel())))
            .collect();
        let param_grads: Vec<Vec<f64>> = store
            .ids()
            .map(|id| {
                let v = ctx.param(id);
                grads
                    .wrt(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| zeros(store.get(id).numel()))
            })
            .collect();
        (input_grads, param_grads)
    };

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
    let mut worst = 0.0f64;
    let mut inputs = inputs.to_vec();
    for (i, g) in input_grads.iter().enumerate() {
        for k in 0..g.len() {
            let orig = inputs[i].data()[k];
            inputs[i].data_mut()[k] = orig + H;
            let up = loss(store, &inputs);
            inputs[i].data_mut()[k] = orig - H;
            let down = loss(store, &inputs);
            inputs[i].data_mut()[k] = orig;
            worst = worst.max(rel(g[k], (up - down) / (2.0 * H)));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for (p, id) in ids.into_iter().enumerate() {
        for k in 0..param_grads[p].len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + H;
            let up = loss(store, &inputs);
            store.get_mut(id).data_mut()[k] = orig - H;
            let down = loss(store, &inputs);
            store.get_mut(id).data_mut()[k] = orig;
            worst = worst.max(rel(param_grads[p][k], (up - down) / (2.0 * H)));
        }
    }
    worst
}
