//! Spatial graphs, normalized propagation operators, Laplacian smoothing and
//! sharpening, and the symmetric graph-convolutional encoder/decoder.
//!
//! Two normalizations live here on purpose:
//!
//! * [`smooth`] / [`sharpen`] mix each node with the row-normalized
//!   neighbourhood average `Ã_ij / D̃_ii`.
//! * The learned [`GraphEncoder`] / [`GraphDecoder`] layers mix with the
//!   symmetric operator `D̃^{-1/2} Ã D̃^{-1/2}` returned by
//!   [`propagation_matrix`], whose spectrum stays in `(-1, 1]`.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::Linear;
use crate::tensor::{Ctx, ParamStore, Scalar, Tensor, Var};

/// Node count, symmetric adjacency (zero diagonal) and external node ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    n: usize,
    adjacency: Vec<f64>,
    node_ids: Vec<String>,
}

impl GraphSpec {
    pub fn new(adjacency: Vec<f64>, node_ids: Vec<String>) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::DegenerateGraph("graph has no nodes".into()));
        }
        if adjacency.len() != n * n {
            return Err(Error::DegenerateGraph(format!(
                "{} node ids but adjacency has {} entries",
                n,
                adjacency.len()
            )));
        }
        for i in 0..n {
            if adjacency[i * n + i] != 0.0 {
                return Err(Error::DegenerateGraph(format!("self-loop stored on node {i}")));
            }
            for j in 0..n {
                let a = adjacency[i * n + j];
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::DegenerateGraph(format!(
                        "adjacency[{i}][{j}] = {a} is not a finite non-negative weight"
                    )));
                }
                if a != adjacency[j * n + i] {
                    return Err(Error::DegenerateGraph(format!("adjacency not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(GraphSpec { n, adjacency, node_ids })
    }

    /// Unweighted graph over `n` nodes named `0..n` from undirected edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![0.0; n * n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::DegenerateGraph(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::DegenerateGraph(format!("self-edge on node {a}")));
            }
            adj[a * n + b] = 1.0;
            adj[b * n + a] = 1.0;
        }
        Self::new(adj, (0..n).map(|i| i.to_string()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.n + j]
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.adjacency[i * self.n..(i + 1) * self.n].iter().sum()
    }

    /// Number of undirected edges with nonzero weight.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a != 0.0).count() / 2
    }

    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.adjacency)
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n)?;
        let n = self.n;
        let mut adj = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                adj[i * n + j] = self.adjacency[perm[i] * n + perm[j]];
            }
        }
        let ids = perm.iter().map(|&p| self.node_ids[p].clone()).collect();
        Self::new(adj, ids)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Contract(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    Ok(())
}

/// Symmetric normalized Laplacian `I − D^{-1/2} A D^{-1/2}`.
pub fn laplacian(g: &GraphSpec) -> Result<DMatrix<f64>> {
    let n = g.n();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d = g.degree(i);
            if d > 0.0 {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::DegenerateGraph(format!(
                    "node {} ({}) has zero degree",
                    i,
                    g.node_ids()[i]
                )))
            }
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * g.weight(i, j) * inv_sqrt[j]
    }))
}

fn self_loop_degrees(g: &GraphSpec) -> Vec<f64> {
    (0..g.n()).map(|i| g.degree(i) + 1.0).collect()
}

/// `D̃^{-1/2} Ã D̃^{-1/2}` with `Ã = A + I`.
pub fn propagation_matrix(g: &GraphSpec) -> DMatrix<f64> {
    let d = self_loop_degrees(g);
    DMatrix::from_fn(g.n(), g.n(), |i, j| {
        let a = g.weight(i, j) + if i == j { 1.0 } else { 0.0 };
        a / (d[i] * d[j]).sqrt()
    })
}

/// Row-stochastic `D̃^{-1} Ã`.
pub fn mean_aggregation_matrix(g: &GraphSpec) -> DMatrix<f64> {
    let d = self_loop_degrees(g);
    DMatrix::from_fn(g.n(), g.n(), |i, j| {
        (g.weight(i, j) + if i == j { 1.0 } else { 0.0 }) / d[i]
    })
}

fn check_mixing(x: &DMatrix<f64>, g: &GraphSpec, gamma: f64) -> Result<()> {
    if x.nrows() != g.n() {
        return Err(Error::shape("graph mixing", &[x.nrows(), x.ncols()], &[g.n(), g.n()]));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("graph mixing input"));
    }
    Ok(())
}

/// Laplacian smoothing: `x'_i = (1−γ)x_i + γ Σ_j (Ã_ij / D̃_ii) x_j`.
pub fn smooth(x: &DMatrix<f64>, g: &GraphSpec, gamma: f64) -> Result<DMatrix<f64>> {
    check_mixing(x, g, gamma)?;
    let avg = mean_aggregation_matrix(g) * x;
    Ok(x * (1.0 - gamma) + avg * gamma)
}

/// Laplacian sharpening: `x'_i = (1+γ)x_i − γ Σ_j (Ã_ij / D̃_ii) x_j`.
pub fn sharpen(x: &DMatrix<f64>, g: &GraphSpec, gamma: f64) -> Result<DMatrix<f64>> {
    check_mixing(x, g, gamma)?;
    let avg = mean_aggregation_matrix(g) * x;
    Ok(x * (1.0 + gamma) - avg * gamma)
}

/// Graph operator prepared for the tape in the engine's precision.
#[derive(Clone, Debug)]
pub struct GraphOperator<F> {
    propagation: Tensor<F>,
    n: usize,
}

impl<F: Scalar> GraphOperator<F> {
    pub fn new(g: &GraphSpec) -> Self {
        let p = propagation_matrix(g);
        let n = g.n();
        // nalgebra is column-major; the tape wants row-major.
        let data = (0..n * n).map(|k| F::of(p[(k / n, k % n)])).collect();
        GraphOperator {
            propagation: Tensor::new(&[n, n], data).expect("square"),
            n,
        }
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &Tensor<F> {
        &self.propagation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mixing {
    Smooth,
    Sharpen,
}

/// One graph convolution: mix over neighbours, then project with θ.
#[derive(Clone, Debug)]
pub struct GraphLayer {
    pub theta: Linear,
    pub mixing: Mixing,
    pub gamma: f64,
    pub relu: bool,
}

impl GraphLayer {
    /// `x: [M, N, in]` → `[M, N, out]`.
    pub fn forward<'t, F: Scalar>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, prop: Var<'t, F>) -> Result<Var<'t, F>> {
        let neighbours = prop.matmul(x)?;
        let g = self.gamma;
        let mixed = match self.mixing {
            Mixing::Smooth => x.scale(F::of(1.0 - g))?.add(neighbours.scale(F::of(g))?)?,
            Mixing::Sharpen => x.scale(F::of(1.0 + g))?.sub(neighbours.scale(F::of(g))?)?,
        };
        let y = self.theta.forward(ctx, mixed)?;
        if self.relu {
            y.relu()
        } else {
            Ok(y)
        }
    }
}

/// Two stacked graph layers applied independently to every time step.
#[derive(Clone, Debug)]
pub struct GraphStack {
    pub layers: Vec<GraphLayer>,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub type GraphEncoder = GraphStack;
pub type GraphDecoder = GraphStack;

impl GraphStack {
    fn build<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        widths: [usize; 3],
        mixing: Mixing,
        gamma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
        }
        let mut layers = Vec::with_capacity(2);
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(GraphLayer {
                theta: Linear::new(store, &format!("{name}.layer{i}"), w[0], w[1], false, rng)?,
                mixing,
                gamma,
                relu: i == 0,
            });
        }
        Ok(GraphStack {
            layers,
            in_dim: widths[0],
            out_dim: widths[2],
        })
    }

    /// Smoothing encoder `C → 2D → D`.
    pub fn encoder<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        features: usize,
        embed: usize,
        gamma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build(store, name, [features, 2 * embed, embed], Mixing::Smooth, gamma, rng)
    }

    /// Sharpening decoder `D → 2D → C`, mirrored from the encoder.
    pub fn decoder<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        embed: usize,
        features: usize,
        gamma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build(store, name, [embed, 2 * embed, features], Mixing::Sharpen, gamma, rng)
    }

    /// `x: [B, T, N, in]` → `[B, T, N, out]`, time-distributed.
    pub fn forward<'t, F: Scalar>(
        &self,
        ctx: &Ctx<'t, F>,
        x: Var<'t, F>,
        graph: &GraphOperator<F>,
    ) -> Result<Var<'t, F>> {
        let shape = x.shape();
        let &[b, t, n, c] = shape.as_slice() else {
            return Err(Error::shape("graph stack", &shape, &[0, 0, graph.nodes(), self.in_dim]));
        };
        if n != graph.nodes() || c != self.in_dim {
            return Err(Error::shape("graph stack", &shape, &[b, t, graph.nodes(), self.in_dim]));
        }
        let prop = ctx.constant(graph.matrix());
        let mut h = x.reshape(&[b * t, n, c])?;
        for layer in &self.layers {
            h = layer.forward(ctx, h, prop)?;
        }
        h.reshape(&[b, t, n, self.out_dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn edge() -> GraphSpec {
        GraphSpec::from_edges(2, &[(0, 1)]).unwrap()
    }

    #[test]
    fn laplacian_two_nodes() {
        let l = laplacian(&edge()).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn laplacian_rejects_isolated_nodes() {
        let g = GraphSpec::from_edges(3, &[]).unwrap();
        assert!(matches!(laplacian(&g), Err(Error::DegenerateGraph(_))));
    }

    #[test]
    fn propagation_cases() {
        let p = propagation_matrix(&edge());
        assert_eq!(p, DMatrix::from_element(2, 2, 0.5));
        let single = GraphSpec::from_edges(1, &[]).unwrap();
        assert_eq!(propagation_matrix(&single), DMatrix::from_element(1, 1, 1.0));
        let path = GraphSpec::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let p = propagation_matrix(&path);
        assert_eq!(p, p.transpose());
        let rows = mean_aggregation_matrix(&path);
        for r in 0..3 {
            assert_abs_diff_eq!(rows.row(r).sum(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn smooth_and_sharpen_hand_cases() {
        let g = edge();
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        assert_eq!(smooth(&x, &g, 0.0).unwrap(), x);
        assert_eq!(sharpen(&x, &g, 0.0).unwrap(), x);
        assert_eq!(smooth(&x, &g, 1.0).unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(sharpen(&x, &g, 1.0).unwrap().as_slice(), &[-1.0, 3.0]);
        let c = DMatrix::from_element(2, 3, 0.7);
        assert_abs_diff_eq!(smooth(&c, &g, 0.4).unwrap(), c, epsilon = 1e-15);
    }

    #[test]
    fn mixing_validates_inputs() {
        let g = edge();
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(smooth(&x, &g, 0.5).is_err());
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(sharpen(&x, &g, 1.5).is_err());
    }

    #[test]
    fn graph_spec_validation() {
        assert!(GraphSpec::new(vec![0.0, 1.0, 0.0, 0.0], vec!["a".into(), "b".into()]).is_err());
        assert!(GraphSpec::new(vec![1.0], vec!["a".into()]).is_err());
        assert!(GraphSpec::new(vec![0.0, -1.0, -1.0, 0.0], vec!["a".into(), "b".into()]).is_err());
        assert!(GraphSpec::from_edges(2, &[(1, 1)]).is_err());
        let g = GraphSpec::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.node_ids(), &["2", "0", "1"]);
        assert_eq!(p.weight(0, 2), 1.0); // old (2, 1)
        assert_eq!(p.weight(0, 1), 0.0); // old (2, 0)
        assert!(g.permuted(&[0, 0, 1]).is_err());
    }

    #[test]
    fn single_layer_hand_case() {
        // one smoothing layer, 2-node edge graph, γ = 0.5, θ = [[1, 2]]
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let theta = Linear::new(&mut store, "g", 1, 2, false, &mut rng).unwrap();
        store.set("g.weight", vec![1.0, 2.0]).unwrap();
        let layer = GraphLayer {
            theta,
            mixing: Mixing::Smooth,
            gamma: 0.5,
            relu: false,
        };
        let op = GraphOperator::<f64>::new(&edge());
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let x = ctx.constant(&Tensor::from_f64(&[1, 2, 1], &[0.0, 2.0]).unwrap());
        let y = layer.forward(&ctx, x, ctx.constant(op.matrix())).unwrap();
        // P·x = [1, 1]; mixed = 0.5·[0,2] + 0.5·[1,1] = [0.5, 1.5]
        assert_eq!(y.value().data(), &[0.5, 1.0, 1.5, 3.0]);
    }

    #[test]
    fn encoder_with_zero_gamma_is_a_plain_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let enc = GraphStack::encoder(&mut store, "enc", 2, 1, 0.0, &mut rng).unwrap();
        // C=2 → 2 → 1 with identity first layer, column-sum second layer
        store.set("enc.layer0.weight", vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.set("enc.layer1.weight", vec![1.0, 1.0]).unwrap();
        let op = GraphOperator::<f64>::new(&edge());
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &store);
        let x = ctx.constant(&Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = enc.forward(&ctx, x, &op).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 1]);
        assert_eq!(y.value().data(), &[3.0, 7.0]);
    }
}
