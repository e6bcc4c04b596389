use std::cell::RefCell;
use std::collections::HashMap;
use std::ops;

use crate::kernels::{self, Conv2dGeom};
use crate::params::{ParamId, ParamStore};
use crate::{Element, Tensor};

#[derive(Clone, Debug)]
enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, E),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    LeakyRelu(usize, E),
    Abs(usize),
    Square(usize),
    Clamp(usize, E, E),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    SumAxis(usize, usize),
    SoftmaxLast(usize),
    LogSumExpLast(usize),
    NormalizeLast(usize, Vec<E>),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    IndexSelect(usize, Vec<usize>),
    SegmentMean(usize, Vec<usize>),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: Conv2dGeom },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Tape of a single forward pass. Build one per step, call
/// [`Graph::backward`] on a scalar, then drop it.
pub struct Graph<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, E: Element> {
    graph: &'g Graph<E>,
    id: usize,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that collects a gradient (used for input-gradient checks).
    pub fn input(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter; repeated loads within one graph share the node.
    pub fn param(&self, store: &ParamStore<E>, id: ParamId) -> Var<'_, E> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let entry = store.entry(id);
        let v = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn unary(&self, x: usize, f: impl FnOnce(&Tensor<E>) -> Tensor<E>, op: Op<E>) -> Var<'_, E> {
        let value = f(&self.nodes.borrow()[x].value);
        self.push(value, op, self.rg(x))
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        f: impl FnOnce(&Tensor<E>, &Tensor<E>) -> Tensor<E>,
        op: Op<E>,
    ) -> Var<'_, E> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn concat<'g>(&'g self, xs: &[Var<'g, E>], axis: usize) -> Var<'g, E> {
        assert!(!xs.is_empty(), "concat of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs[0].id].value.shape().to_vec();
            let (outer, _, inner) = kernels::split_axis(&first, axis);
            let mut total = 0;
            for x in xs {
                let s = nodes[x.id].value.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (d, (&p, &q)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || p == q, "concat shape mismatch {s:?} vs {first:?}");
                }
                total += s[axis];
            }
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for x in xs {
                    let t = &nodes[x.id].value;
                    let n = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::new(&shape, out)
        };
        let rg = xs.iter().any(|x| self.rg(x.id));
        self.push(
            value,
            Op::Concat {
                xs: xs.iter().map(|x| x.id).collect(),
                axis,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, E>) -> Gradients<E> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.numel(),
            1,
            "backward needs a scalar, got {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), E::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut params: Vec<(ParamId, usize)> =
            self.params.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        params.sort_unstable();
        Gradients { grads, params }
    }
}

fn accumulate<E: Element>(
    nodes: &[Node<E>],
    grads: &mut [Option<Tensor<E>>],
    id: usize,
    g: Tensor<E>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape());
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop_node<E: Element>(nodes: &[Node<E>], id: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, kernels::reduce_to(g, val(a).shape()));
            accumulate(nodes, grads, b, kernels::reduce_to(g, val(b).shape()));
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, kernels::reduce_to(g, val(a).shape()));
            let gb = kernels::reduce_to(g, val(b).shape()).map(|v| -v);
            accumulate(nodes, grads, b, gb);
        }
        &Op::Mul(a, b) => {
            let (ga, gb) = kernels::binary_grads(val(a), val(b), g, |_, y, g| g * y, |x, _, g| g * x);
            accumulate(nodes, grads, a, ga);
            accumulate(nodes, grads, b, gb);
        }
        &Op::Div(a, b) => {
            let (ga, gb) = kernels::binary_grads(
                val(a),
                val(b),
                g,
                |_, y, g| g / y,
                |x, y, g| -g * x / (y * y),
            );
            accumulate(nodes, grads, a, ga);
            accumulate(nodes, grads, b, gb);
        }
        &Op::Neg(x) => accumulate(nodes, grads, x, g.map(|v| -v)),
        &Op::Scale(x, c) => accumulate(nodes, grads, x, g.map(|v| v * c)),
        &Op::AddScalar(x) | &Op::Reshape(x) => {
            accumulate(nodes, grads, x, g.clone().reshape(val(x).shape()))
        }
        &Op::Exp(x) => accumulate(nodes, grads, x, g.zip_map(out, |g, y| g * y)),
        &Op::Log(x) => accumulate(nodes, grads, x, g.zip_map(val(x), |g, x| g / x)),
        &Op::Sqrt(x) => accumulate(nodes, grads, x, g.zip_map(out, |g, y| g / (y + y))),
        &Op::Tanh(x) => accumulate(nodes, grads, x, g.zip_map(out, |g, y| g * (E::one() - y * y))),
        &Op::Sigmoid(x) => {
            accumulate(nodes, grads, x, g.zip_map(out, |g, y| g * y * (E::one() - y)))
        }
        &Op::Relu(x) => accumulate(
            nodes,
            grads,
            x,
            g.zip_map(val(x), |g, x| if x > E::zero() { g } else { E::zero() }),
        ),
        &Op::LeakyRelu(x, s) => accumulate(
            nodes,
            grads,
            x,
            g.zip_map(val(x), |g, x| if x > E::zero() { g } else { g * s }),
        ),
        &Op::Abs(x) => accumulate(
            nodes,
            grads,
            x,
            g.zip_map(val(x), |g, x| {
                if x > E::zero() {
                    g
                } else if x < E::zero() {
                    -g
                } else {
                    E::zero()
                }
            }),
        ),
        &Op::Square(x) => accumulate(nodes, grads, x, g.zip_map(val(x), |g, x| g * (x + x))),
        &Op::Clamp(x, lo, hi) => accumulate(
            nodes,
            grads,
            x,
            g.zip_map(val(x), |g, x| if x >= lo && x <= hi { g } else { E::zero() }),
        ),
        &Op::MatMul(a, b) => {
            if nodes[a].requires_grad {
                accumulate(nodes, grads, a, g.matmul(&val(b).transpose2()));
            }
            if nodes[b].requires_grad {
                accumulate(nodes, grads, b, val(a).transpose2().matmul(g));
            }
        }
        &Op::Transpose(x) => accumulate(nodes, grads, x, g.transpose2()),
        &Op::Sum(x) => accumulate(nodes, grads, x, Tensor::full(val(x).shape(), g.item())),
        &Op::SumAxis(x, axis) => {
            accumulate(nodes, grads, x, kernels::expand_axis(g, val(x).shape(), axis))
        }
        &Op::SoftmaxLast(x) => accumulate(nodes, grads, x, kernels::softmax_last_grad(out, g)),
        &Op::LogSumExpLast(x) => {
            // d lse / dx = softmax(x)
            let sm = kernels::softmax_last(val(x));
            let n = *val(x).shape().last().unwrap();
            let mut gx = sm.into_data();
            for (row, &gr) in gx.chunks_mut(n).zip(g.data()) {
                for v in row {
                    *v *= gr;
                }
            }
            accumulate(nodes, grads, x, Tensor::new(val(x).shape(), gx));
        }
        Op::NormalizeLast(x, inv_std) => {
            accumulate(nodes, grads, *x, kernels::normalize_last_grad(out, inv_std, g))
        }
        &Op::Narrow { x, axis, start } => {
            let shape = val(x).shape();
            let (outer, n, inner) = kernels::split_axis(shape, axis);
            let len = out.shape()[axis];
            let mut gx = vec![E::zero(); val(x).numel()];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * n + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(src);
            }
            accumulate(nodes, grads, x, Tensor::new(shape, gx));
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &x in xs {
                let shape = val(x).shape();
                let n = shape[*axis];
                if nodes[x].requires_grad {
                    let mut gx = Vec::with_capacity(val(x).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    accumulate(nodes, grads, x, Tensor::new(shape, gx));
                }
                offset += n;
            }
        }
        &Op::IndexSelect(x, ref idx) => {
            let shape = val(x).shape();
            let row = shape[1..].iter().product::<usize>();
            let mut gx = vec![E::zero(); val(x).numel()];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..row {
                    gx[i * row + j] += g.data()[k * row + j];
                }
            }
            accumulate(nodes, grads, x, Tensor::new(shape, gx));
        }
        &Op::SegmentMean(x, ref durs) => {
            let shape = val(x).shape();
            let row = shape[1..].iter().product::<usize>();
            let mut gx = Vec::with_capacity(val(x).numel());
            for (seg, &d) in durs.iter().enumerate() {
                let inv = E::c(1.0 / d as f64);
                let src = &g.data()[seg * row..(seg + 1) * row];
                for _ in 0..d {
                    gx.extend(src.iter().map(|&v| v * inv));
                }
            }
            accumulate(nodes, grads, x, Tensor::new(shape, gx));
        }
        &Op::Conv2d { x, w, b, geom } => {
            let (dx, dw, db) = kernels::conv2d_backward(val(x), val(w), g, &geom);
            accumulate(nodes, grads, x, dx);
            accumulate(nodes, grads, w, dw);
            if let Some(b) = b {
                accumulate(nodes, grads, b, db);
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
    params: Vec<(ParamId, usize)>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss w.r.t. `v`; `None` when no path reaches `v`.
    pub fn wrt(&self, v: Var<'_, E>) -> Option<&Tensor<E>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.grads[n].as_ref())
    }

    /// Parameters touched by the graph, with their gradients when reached.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<E>>)> + '_ {
        self.params.iter().map(|&(p, n)| (p, self.grads[n].as_ref()))
    }
}

impl<'g, E: Element> Var<'g, E> {
    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn value(&self) -> Tensor<E> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.dims2()
    }

    pub fn item(&self) -> E {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn same(&self, other: Var<'g, E>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    pub fn add(self, o: Var<'g, E>) -> Var<'g, E> {
        self.same(o);
        self.graph
            .binary(self.id, o.id, |a, b| kernels::binary(a, b, |x, y| x + y), Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'g, E>) -> Var<'g, E> {
        self.same(o);
        self.graph
            .binary(self.id, o.id, |a, b| kernels::binary(a, b, |x, y| x - y), Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'g, E>) -> Var<'g, E> {
        self.same(o);
        self.graph
            .binary(self.id, o.id, |a, b| kernels::binary(a, b, |x, y| x * y), Op::Mul(self.id, o.id))
    }

    pub fn div(self, o: Var<'g, E>) -> Var<'g, E> {
        self.same(o);
        self.graph
            .binary(self.id, o.id, |a, b| kernels::binary(a, b, |x, y| x / y), Op::Div(self.id, o.id))
    }

    pub fn neg(self) -> Self {
        self.graph.unary(self.id, |t| t.map(|v| -v), Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Self {
        let c = E::c(c);
        self.graph.unary(self.id, |t| t.map(|v| v * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = E::c(c);
        self.graph.unary(self.id, |t| t.map(|v| v + c), Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Self {
        self.graph.unary(self.id, |t| t.map(E::exp), Op::Exp(self.id))
    }

    pub fn ln(self) -> Self {
        self.graph.unary(self.id, |t| t.map(E::ln), Op::Log(self.id))
    }

    pub fn sqrt(self) -> Self {
        self.graph.unary(self.id, |t| t.map(E::sqrt), Op::Sqrt(self.id))
    }

    pub fn tanh(self) -> Self {
        self.graph.unary(self.id, |t| t.map(E::tanh), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Self {
        self.graph.unary(
            self.id,
            |t| t.map(|v| (E::one() + (-v).exp()).recip()),
            Op::Sigmoid(self.id),
        )
    }

    pub fn relu(self) -> Self {
        self.graph
            .unary(self.id, |t| t.map(|v| v.max(E::zero())), Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let s = E::c(slope);
        self.graph.unary(
            self.id,
            |t| t.map(|v| if v > E::zero() { v } else { v * s }),
            Op::LeakyRelu(self.id, s),
        )
    }

    pub fn abs(self) -> Self {
        self.graph.unary(self.id, |t| t.map(E::abs), Op::Abs(self.id))
    }

    pub fn square(self) -> Self {
        self.graph.unary(self.id, |t| t.map(|v| v * v), Op::Square(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Self {
        let (lo, hi) = (E::c(lo), E::c(hi));
        self.graph
            .unary(self.id, |t| t.map(|v| v.max(lo).min(hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn matmul(self, o: Var<'g, E>) -> Self {
        self.same(o);
        self.graph
            .binary(self.id, o.id, |a, b| a.matmul(b), Op::MatMul(self.id, o.id))
    }

    /// Transpose of a matrix.
    pub fn t(self) -> Self {
        self.graph.unary(self.id, |t| t.transpose2(), Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        self.graph
            .unary(self.id, |t| t.clone().reshape(shape), Op::Reshape(self.id))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(self) -> Self {
        self.graph
            .unary(self.id, |t| Tensor::scalar(t.sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let n = self.value_numel();
        self.sum().scale(1.0 / n as f64)
    }

    fn value_numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(self, axis: usize) -> Self {
        self.graph
            .unary(self.id, |t| kernels::sum_axis(t, axis), Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(self, axis: usize) -> Self {
        let n = self.shape()[axis];
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    pub fn softmax_last(self) -> Self {
        self.graph
            .unary(self.id, kernels::softmax_last, Op::SoftmaxLast(self.id))
    }

    /// Log-sum-exp over the last axis, dropping it.
    pub fn logsumexp_last(self) -> Self {
        self.graph
            .unary(self.id, kernels::logsumexp_last, Op::LogSumExpLast(self.id))
    }

    /// Zero-mean, unit-variance along the last axis (biased variance).
    pub fn normalize_last(self, eps: f64) -> Self {
        let (value, inv_std) = kernels::normalize_last(&self.value(), E::c(eps));
        let rg = self.requires_grad();
        self.graph
            .push(value, Op::NormalizeLast(self.id, inv_std), rg)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let f = |t: &Tensor<E>| {
            let (outer, n, inner) = kernels::split_axis(t.shape(), axis);
            assert!(start + len <= n, "narrow {start}+{len} beyond {n}");
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, out)
        };
        self.graph.unary(
            self.id,
            f,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        )
    }

    /// Gathers slices along axis 0.
    pub fn index_select(self, indices: &[usize]) -> Self {
        let f = |t: &Tensor<E>| {
            let n = t.shape()[0];
            let row = t.shape()[1..].iter().product::<usize>();
            let mut out = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                assert!(i < n, "index {i} out of range {n}");
                out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(&shape, out)
        };
        self.graph
            .unary(self.id, f, Op::IndexSelect(self.id, indices.to_vec()))
    }

    /// Averages consecutive runs of `durations[i]` slices along axis 0.
    pub fn segment_mean(self, durations: &[usize]) -> Self {
        let f = |t: &Tensor<E>| {
            let total: usize = durations.iter().sum();
            assert_eq!(total, t.shape()[0], "segment lengths do not cover axis 0");
            let row = t.shape()[1..].iter().product::<usize>();
            let mut out = Vec::with_capacity(durations.len() * row);
            let mut start = 0;
            for &d in durations {
                assert!(d > 0, "empty segment");
                let inv = E::c(1.0 / d as f64);
                let mut acc = vec![E::zero(); row];
                for r in start..start + d {
                    for (a, &v) in acc.iter_mut().zip(&t.data()[r * row..(r + 1) * row]) {
                        *a += v;
                    }
                }
                out.extend(acc.into_iter().map(|v| v * inv));
                start += d;
            }
            let mut shape = t.shape().to_vec();
            shape[0] = durations.len();
            Tensor::new(&shape, out)
        };
        self.graph
            .unary(self.id, f, Op::SegmentMean(self.id, durations.to_vec()))
    }

    /// 2-D convolution of a `[C, H, W]` input with `[O, C, KH, KW]` weights.
    pub fn conv2d(
        self,
        w: Var<'g, E>,
        b: Option<Var<'g, E>>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        self.same(w);
        let (value, geom) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let wt = &nodes[w.id].value;
            assert_eq!(x.rank(), 3, "conv2d input must be [C, H, W], got {:?}", x.shape());
            assert_eq!(wt.rank(), 4, "conv2d weight must be [O, C, KH, KW]");
            assert_eq!(x.shape()[0], wt.shape()[1], "conv2d channel mismatch");
            let geom = Conv2dGeom {
                c_in: x.shape()[0],
                h: x.shape()[1],
                w: x.shape()[2],
                kh: wt.shape()[2],
                kw: wt.shape()[3],
                stride,
                pad,
            };
            assert!(geom.out_hw().is_some(), "conv2d input {:?} smaller than kernel", x.shape());
            let bias = b.map(|b| &nodes[b.id].value);
            (kernels::conv2d_forward(x, wt, bias, &geom), geom)
        };
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.graph.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
            },
            rg,
        )
    }

    /// 1-D convolution over time of a `[C, T]` input with `[O, C, K]` weights.
    pub fn conv1d(self, w: Var<'g, E>, b: Option<Var<'g, E>>, stride: usize, pad: usize) -> Self {
        let (c, t) = self.dims2();
        let ws = w.shape();
        let w4 = w.reshape(&[ws[0], ws[1], ws[2], 1]);
        let y = self
            .reshape(&[c, t, 1])
            .conv2d(w4, b, (stride, 1), (pad, 0));
        let ys = y.shape();
        y.reshape(&[ys[0], ys[1]])
    }

    /// Cuts the tape: same value, no gradient flows back through it.
    pub fn detach(self) -> Self {
        self.graph.constant(self.value())
    }
}

macro_rules! impl_bin {
    ($tr:ident, $m:ident) => {
        impl<'g, E: Element> ops::$tr for Var<'g, E> {
            type Output = Var<'g, E>;
            fn $m(self, o: Self) -> Self::Output {
                Var::$m(self, o)
            }
        }
    };
}
impl_bin!(Add, add);
impl_bin!(Sub, sub);
impl_bin!(Mul, mul);
impl_bin!(Div, div);

impl<'g, E: Element> ops::Neg for Var<'g, E> {
    type Output = Var<'g, E>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}
