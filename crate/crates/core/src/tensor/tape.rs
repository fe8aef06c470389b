//! Wengert-list autodiff.
//!
//! Every operation on a [`Var`] appends a node holding its value and the
//! information needed to push gradients back to its inputs. Parameters are
//! copied onto the tape on first use, so a [`ParamStore`] stays borrowable
//! while the forward pass runs.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{numel, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Offset(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Dropout {
        x: usize,
        mask: Vec<F>,
    },
    MaskedFill {
        x: usize,
        mask: Rc<[bool]>,
    },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Strips leading unit axes so `[1, t, t]` broadcasts like `[t, t]`.
fn trim_leading_ones(shape: &[usize]) -> &[usize] {
    let skip = shape.iter().take_while(|&&d| d == 1).count();
    &shape[skip.min(shape.len().saturating_sub(1))..]
}

fn broadcasts_as_suffix(a: &[usize], b: &[usize]) -> bool {
    let b = trim_leading_ones(b);
    b.len() <= a.len() && &a[a.len() - b.len()..] == b
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<F>,
        op: Op<F>,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<Var<'_, F>> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Records an untracked constant.
    pub fn constant(&self, t: &Tensor<F>) -> Var<'_, F> {
        self.leaf(t, false)
    }

    /// Records a leaf; `requires_grad` makes its gradient available in [`Gradients`].
    pub fn leaf(&self, t: &Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records parameter `id` once per tape and returns its node.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.leaf(store.get(id), true);
        self.nodes.borrow_mut()[v.id].param = Some(id);
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    pub fn concat<'t>(&'t self, inputs: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let nodes = self.nodes.borrow();
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero inputs".into()))?;
        let base = &nodes[first.id].shape;
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = &nodes[v.id].shape;
            let compatible =
                s.len() == base.len() && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_at_axis(&shape, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let n = &nodes[v.id];
                let chunk = n.shape[axis] * inner;
                value.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = inputs.iter().any(|v| nodes[v.id].needs_grad);
        let ids = inputs.iter().map(|v| v.id).collect();
        drop(nodes);
        self.push(shape, value, Op::Concat { inputs: ids, axis }, needs, "concat")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![F::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn slot<'g, F: Scalar>(nodes: &[Node<F>], grads: &'g mut [Option<Vec<F>>], id: usize) -> Option<&'g mut Vec<F>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![F::zero(); len]))
}

fn propagate<F: Scalar>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -F::one()
            } else {
                F::one()
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let nb = gb.len();
                for (i, &y) in g.iter().enumerate() {
                    gb[i % nb] += sign * y;
                }
            }
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let nb = bv.len();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &y) in g.iter().enumerate() {
                    ga[i] += y * bv[i % nb];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, &y) in g.iter().enumerate() {
                    gb[i % nb] += y * av[i];
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &y)| *v += y * *s);
            }
        }
        Op::Offset(x) | Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(v, &y)| *v += y);
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let a_off = |bi: usize| if *a_batched { bi * m * k } else { 0 };
            let b_off = |bi: usize| if *b_batched { bi * k * n } else { 0 };
            if let Some(ga) = slot(nodes, grads, *a) {
                for bi in 0..*batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let o = a_off(bi);
                    gemm_nt(gs, &bv[b_off(bi)..b_off(bi) + k * n], &mut ga[o..o + m * k], m, n, k);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for bi in 0..*batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let o = b_off(bi);
                    gemm_tn(&av[a_off(bi)..a_off(bi) + m * k], gs, &mut gb[o..o + k * n], k, m, n);
                }
            }
        }
        Op::Permute { x, axes } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let (_, back) =
                    kernels::permute(g, &node.shape, &kernels::inverse_axes(axes)).expect("validated in forward");
                gx.iter_mut().zip(back).for_each(|(v, y)| *v += y);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = kernels::split_at_axis(&node.shape, *axis);
            let mut offset = 0;
            for o in 0..outer {
                for &inp in inputs {
                    let chunk = nodes[inp].shape[*axis] * inner;
                    if let Some(gi) = slot(nodes, grads, inp) {
                        gi[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(&g[offset..offset + chunk])
                            .for_each(|(v, &y)| *v += y);
                    }
                    offset += chunk;
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = &nodes[*x].shape;
            let (outer, in_len, inner) = kernels::split_at_axis(in_shape, *axis);
            let len = node.shape[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst_at = o * in_len * inner + start * inner;
                    gx[dst_at..dst_at + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(v, &y)| *v += y);
                }
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            let scale = if matches!(node.op, Op::Mean(_)) {
                F::one() / F::of(nodes[*x].value.len() as f64)
            } else {
                F::one()
            };
            if let Some(gx) = slot(nodes, grads, *x) {
                let y = g[0] * scale;
                gx.iter_mut().for_each(|v| *v += y);
            }
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    if xv[i] > F::zero() {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (F::one() - y[i]);
                }
            }
        }
        Op::Tanh(x) => {
            let y = &node.value;
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * (F::one() - y[i] * y[i]);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, len, inner) = kernels::split_at_axis(&node.shape, *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *node.shape.last().expect("rank >= 1");
            let rows = g.len() / d;
            let gv = &nodes[*gamma].value;
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv_d = F::one() / F::of(d as f64);
                for r in 0..rows {
                    let row = r * d..(r + 1) * d;
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    for j in row.clone() {
                        let dxh = g[j] * gv[j - r * d];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for j in row {
                        let dxh = g[j] * gv[j - r * d];
                        gx[j] += rstd[r] * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            let nm = mask.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    if !mask[i % nm] {
                        gx[i] += g[i];
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, usize)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if `v` was tracked and reached.
    pub fn wrt(&self, v: Var<'_, F>) -> Option<&[F]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for &(pid, node) in &self.params {
            let Some(g) = self.grads[node].as_ref() else {
                continue;
            };
            if let Some(buf) = store.get_mut(pid).grad_mut() {
                buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v);
            }
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    fn nodes(&self) -> Ref<'t, Vec<Node<F>>> {
        self.tape.nodes.borrow()
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.nodes()[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor<F> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are well-formed")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> F {
        self.nodes()[self.id].value[0]
    }

    fn elementwise(
        self,
        rhs: Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: fn(usize, usize) -> Op<F>,
    ) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        if !broadcasts_as_suffix(&a.shape, &b.shape) {
            return Err(Error::shape(name, &a.shape, &b.shape));
        }
        let nb = b.value.len();
        let value = a
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.value[i % nb]))
            .collect();
        let shape = a.shape.clone();
        let needs = a.needs_grad || b.needs_grad;
        drop(nodes);
        self.tape.push(shape, value, op(self.id, rhs.id), needs, name)
    }

    /// Elementwise sum; `rhs` may broadcast over leading axes.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.elementwise(rhs, "add", |a, b| a + b, Op::Add)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.elementwise(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        self.elementwise(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn square(self) -> Result<Var<'t, F>> {
        self.mul(self)
    }

    fn unary(self, name: &'static str, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(nodes);
        self.tape.push(shape, value, op, needs, name)
    }

    pub fn scale(self, s: F) -> Result<Var<'t, F>> {
        self.unary("scale", |x| x * s, Op::Scale(self.id, s))
    }

    pub fn offset(self, c: F) -> Result<Var<'t, F>> {
        self.unary("offset", |x| x + c, Op::Offset(self.id))
    }

    pub fn relu(self) -> Result<Var<'t, F>> {
        self.unary("relu", |x| x.max(F::zero()), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t, F>> {
        self.unary("sigmoid", |x| F::one() / (F::one() + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Result<Var<'t, F>> {
        self.unary("tanh", |x| x.tanh(), Op::Tanh(self.id))
    }

    /// Matrix product: `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]`, `[b,m,k]·[k,n]` or `[m,k]·[b,k,n]`.
    pub fn matmul(self, rhs: Var<'t, F>) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        let err = || Error::shape("matmul", &a.shape, &b.shape);
        let (batch, m, k, n, a_batched, b_batched, out_shape) = match (a.shape.as_slice(), b.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n, false, false, vec![m, n]),
            (&[bs, m, k], &[k2, n]) if k == k2 => (1, bs * m, k, n, false, false, vec![bs, m, n]),
            (&[bs, m, k], &[bs2, k2, n]) if k == k2 && bs == bs2 => (bs, m, k, n, true, true, vec![bs, m, n]),
            (&[m, k], &[bs, k2, n]) if k == k2 => (bs, m, k, n, false, true, vec![bs, m, n]),
            _ => return Err(err()),
        };
        let mut value = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm_nn(
                &a.value[ao..ao + m * k],
                &b.value[bo..bo + k * n],
                &mut value[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let needs = a.needs_grad || b.needs_grad;
        drop(nodes);
        self.tape.push(
            out_shape,
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            needs,
            "matmul",
        )
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        let (shape, value) = kernels::permute(&n.value, &n.shape, axes)?;
        let needs = n.needs_grad;
        drop(nodes);
        self.tape.push(
            shape,
            value,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            needs,
            "permute",
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, F>> {
        let rank = self.nodes()[self.id].shape.len();
        if rank < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        if numel(shape) != n.value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &n.shape, shape));
        }
        let (value, needs) = (n.value.clone(), n.needs_grad);
        drop(nodes);
        self.tape
            .push(shape.to_vec(), value, Op::Reshape(self.id), needs, "reshape")
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        if axis >= n.shape.len() || len == 0 || start + len > n.shape[axis] {
            return Err(Error::Contract(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {:?}",
                n.shape
            )));
        }
        let (outer, in_len, inner) = kernels::split_at_axis(&n.shape, axis);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = o * in_len * inner + start * inner;
            value.extend_from_slice(&n.value[at..at + len * inner]);
        }
        let mut shape = n.shape.clone();
        shape[axis] = len;
        let needs = n.needs_grad;
        drop(nodes);
        self.tape.push(
            shape,
            value,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            needs,
            "narrow",
        )
    }

    pub fn sum(self) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        let s: F = n.value.iter().copied().sum();
        let needs = n.needs_grad;
        drop(nodes);
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), needs, "sum")
    }

    pub fn mean(self) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        let s: F = n.value.iter().copied().sum::<F>() / F::of(n.value.len() as f64);
        let needs = n.needs_grad;
        drop(nodes);
        self.tape.push(vec![1], vec![s], Op::Mean(self.id), needs, "mean")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        if axis >= n.shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {:?}",
                n.shape
            )));
        }
        let value = kernels::softmax(&n.value, &n.shape, axis);
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(nodes);
        self.tape
            .push(shape, value, Op::Softmax { x: self.id, axis }, needs, "softmax")
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` of that width.
    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: f64) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let (x, gn, bn) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
        let d = *x.shape.last().expect("rank >= 1");
        if gn.shape != [d] || bn.shape != [d] {
            return Err(Error::shape("layer_norm", &x.shape, &gn.shape));
        }
        let rows = x.value.len() / d;
        let mut xhat = vec![F::zero(); x.value.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut value = vec![F::zero(); x.value.len()];
        let inv_d = F::one() / F::of(d as f64);
        for r in 0..rows {
            let row = &x.value[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + F::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                value[r * d + j] = h * gn.value[j] + bn.value[j];
            }
        }
        let shape = x.shape.clone();
        let needs = x.needs_grad || gn.needs_grad || bn.needs_grad;
        drop(nodes);
        self.tape.push(
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            needs,
            "layer_norm",
        )
    }

    /// Multiplies by a precomputed mask (already scaled by `1/(1-p)`).
    pub fn dropout_with_mask(self, mask: Vec<F>) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        if mask.len() != n.value.len() {
            return Err(Error::shape("dropout", &n.shape, &[mask.len()]));
        }
        let value = n.value.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(nodes);
        self.tape
            .push(shape, value, Op::Dropout { x: self.id, mask }, needs, "dropout")
    }

    /// Replaces entries where `mask` is true with `fill`; `mask_shape` broadcasts
    /// over leading axes.
    pub fn masked_fill(self, mask: Rc<[bool]>, mask_shape: &[usize], fill: F) -> Result<Var<'t, F>> {
        let nodes = self.nodes();
        let n = &nodes[self.id];
        if numel(mask_shape) != mask.len() || !broadcasts_as_suffix(&n.shape, mask_shape) {
            return Err(Error::shape("masked_fill", &n.shape, mask_shape));
        }
        let nm = mask.len();
        let value = n
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % nm] { fill } else { x })
            .collect();
        let (shape, needs) = (n.shape.clone(), n.needs_grad);
        drop(nodes);
        self.tape
            .push(shape, value, Op::MaskedFill { x: self.id, mask }, needs, "masked_fill")
    }

    /// Backpropagates this scalar and accumulates parameter gradients into `store`.
    pub fn backward(self, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.tape.backward(self)?;
        grads.accumulate_into(store);
        Ok(())
    }
}

/// Forward-pass context: a tape, the parameters it reads, and the train-mode
/// switch with its seeded dropout stream.
pub struct Ctx<'t, F> {
    pub tape: &'t Tape<F>,
    pub params: &'t ParamStore<F>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'t, F: Scalar> Ctx<'t, F> {
    pub fn new(tape: &'t Tape<F>, params: &'t ParamStore<F>, train: bool, seed: u64) -> Self {
        Ctx {
            tape,
            params,
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Evaluation-mode context (dropout disabled).
    pub fn eval(tape: &'t Tape<F>, params: &'t ParamStore<F>) -> Self {
        Self::new(tape, params, false, 0)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&self, id: ParamId) -> Var<'t, F> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, t: &Tensor<F>) -> Var<'t, F> {
        self.tape.constant(t)
    }

    /// Inverted dropout in train mode; identity otherwise.
    pub fn dropout(&self, x: Var<'t, F>, p: f64) -> Result<Var<'t, F>> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        let len = numel(&x.shape());
        let keep = F::of(1.0 / (1.0 - p));
        let mut rng = self.rng.borrow_mut();
        let mask = (0..len)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        x.dropout_with_mask(mask)
    }
}
