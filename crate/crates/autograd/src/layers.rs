//! Parameterised building blocks. Each layer only holds [`ParamId`]s; the
//! tensors live in the [`ParamStore`] passed to `forward`.

use rand::Rng;

use crate::{Element, Graph, ParamId, ParamStore, Tensor, Var};

/// Graph plus the parameter snapshot it reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'g, E: Element> {
    pub graph: &'g Graph<E>,
    pub store: &'g ParamStore<E>,
    /// Parameters enter the graph as constants and receive no gradient.
    pub frozen: bool,
}

impl<'g, E: Element> Ctx<'g, E> {
    pub fn new(graph: &'g Graph<E>, store: &'g ParamStore<E>) -> Self {
        Self {
            graph,
            store,
            frozen: false,
        }
    }

    pub fn frozen(graph: &'g Graph<E>, store: &'g ParamStore<E>) -> Self {
        Self {
            graph,
            store,
            frozen: true,
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, E> {
        if self.frozen {
            self.graph.constant(self.store.get(id).clone())
        } else {
            self.graph.param(self.store, id)
        }
    }

    pub fn constant(&self, t: Tensor<E>) -> Var<'g, E> {
        self.graph.constant(t)
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in.max(1) as f64).sqrt()
}

/// `y = x W + b` on row-major `[N, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(d_in);
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[d_in, d_out], bound, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::uniform(&[d_out], bound, rng), true));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Weights and bias start at zero, so the layer outputs zeros.
    pub fn zeros<E: Element>(store: &mut ParamStore<E>, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]), true);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        let y = x.matmul(cx.p(self.weight));
        match self.bias {
            Some(b) => y + cx.p(b),
            None => y,
        }
    }
}

/// 1-D convolution over `[C, T]` inputs.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = Self::new_no_bias(store, name, c_in, c_out, kernel, stride, pad, rng);
        let bound = fan_in_bound(c_in * kernel);
        c.bias = Some(store.add(format!("{name}.bias"), Tensor::uniform(&[c_out], bound, rng), true));
        c
    }

    /// For convolutions followed by a per-channel normalisation, which would
    /// cancel a bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new_no_bias<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(c_in * kernel);
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(&[c_out, c_in, kernel], bound, rng), true),
            bias: None,
            stride,
            pad,
        }
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        x.conv1d(cx.p(self.weight), self.bias.map(|b| cx.p(b)), self.stride, self.pad)
    }
}

/// 2-D convolution over `[C, H, W]` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let bound = fan_in_bound(c_in * kernel.0 * kernel.1);
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::uniform(&[c_out, c_in, kernel.0, kernel.1], bound, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::uniform(&[c_out], bound, rng), true),
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        x.conv2d(cx.p(self.weight), Some(cx.p(self.bias)), self.stride, self.pad)
    }

    /// Output `(H, W)` for an input of `(h, w)`, or `None` if it is too small.
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        crate::Conv2dGeom {
            c_in: 1,
            h,
            w,
            kh: self.kernel.0,
            kw: self.kernel.1,
            stride: self.stride,
            pad: self.pad,
        }
        .out_hw()
    }
}

/// Layer normalisation over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            eps: 1e-5,
        }
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        x.normalize_last(self.eps) * cx.p(self.gamma) + cx.p(self.beta)
    }
}

/// Lookup table `[vocab, dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.add(format!("{name}.table"), Tensor::randn(&[vocab, dim], 1.0 / (dim as f64).sqrt(), rng), true),
            vocab,
            dim,
        }
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, ids: &[usize]) -> Var<'g, E> {
        cx.p(self.table).index_select(ids)
    }
}
