//! Forward/backward kernels shared by the graph ops.

use crate::{Element, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position with the matching flat offsets into `a` and `b`.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    loop {
        let mut ia: usize = 0;
        let mut ib: usize = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o, ia + j * ia_step, ib + j * ib_step);
            o += 1;
        }
        if rank == 1 {
            return;
        }
        let mut d = rank - 2;
        loop {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
            if d == 0 {
                return;
            }
            d -= 1;
        }
    }
}

pub(crate) fn binary<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = bcast_strides(a.shape(), &out_shape);
    let sb = bcast_strides(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![E::zero(); out_shape.iter().product()];
    for_each_bcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out_shape, out)
}

/// Sums a gradient of the broadcast output shape back down to `target`.
pub(crate) fn reduce_to<E: Element>(grad: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    if grad.shape() == target {
        return grad.clone();
    }
    let out_shape = grad.shape().to_vec();
    let st = bcast_strides(target, &out_shape);
    let mut acc = vec![E::zero(); target.iter().product()];
    let gd = grad.data();
    for_each_bcast(&out_shape, &st, &st, |o, it, _| acc[it] += gd[o]);
    Tensor::new(target, acc)
}

/// Like [`binary`] but accumulates per-operand gradient contributions.
pub(crate) fn binary_grads<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    g: &Tensor<E>,
    da: impl Fn(E, E, E) -> E,
    db: impl Fn(E, E, E) -> E,
) -> (Tensor<E>, Tensor<E>) {
    let out_shape = g.shape().to_vec();
    let sa = bcast_strides(a.shape(), &out_shape);
    let sb = bcast_strides(b.shape(), &out_shape);
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = vec![E::zero(); a.numel()];
    let mut gb = vec![E::zero(); b.numel()];
    for_each_bcast(&out_shape, &sa, &sb, |o, ia, ib| {
        ga[ia] += da(ad[ia], bd[ib], gd[o]);
        gb[ib] += db(ad[ia], bd[ib], gd[o]);
    });
    (Tensor::new(a.shape(), ga), Tensor::new(b.shape(), gb))
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sum_axis<E: Element>(x: &Tensor<E>, axis: usize) -> Tensor<E> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![E::zero(); outer * inner];
    let d = x.data();
    for o in 0..outer {
        for k in 0..n {
            let base = (o * n + k) * inner;
            for i in 0..inner {
                out[o * inner + i] += d[base + i];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out)
}

pub(crate) fn expand_axis<E: Element>(g: &Tensor<E>, shape: &[usize], axis: usize) -> Tensor<E> {
    let (outer, n, inner) = split_axis(shape, axis);
    let gd = g.data();
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            out.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn softmax_last<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let n = *x.shape().last().expect("softmax of a scalar");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut s = E::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_last_grad<E: Element>(y: &Tensor<E>, g: &Tensor<E>) -> Tensor<E> {
    let n = *y.shape().last().unwrap();
    let mut out = vec![E::zero(); y.numel()];
    for ((yr, gr), or) in y.data().chunks(n).zip(g.data().chunks(n)).zip(out.chunks_mut(n)) {
        let dot: E = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..n {
            or[j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(y.shape(), out)
}

pub(crate) fn logsumexp_last<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let n = *x.shape().last().expect("logsumexp of a scalar");
    let out: Vec<E> = x
        .data()
        .chunks(n)
        .map(|row| {
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let s: E = row.iter().map(|&v| (v - m).exp()).sum();
            m + s.ln()
        })
        .collect();
    let shape = &x.shape()[..x.rank() - 1];
    Tensor::new(shape, out)
}

/// Zero-mean unit-variance normalisation along the last axis. Returns the
/// normalised output and the per-row inverse standard deviation.
pub(crate) fn normalize_last<E: Element>(x: &Tensor<E>, eps: E) -> (Tensor<E>, Vec<E>) {
    let n = *x.shape().last().expect("normalize of a scalar");
    let nn = E::c(n as f64);
    let mut out = x.data().to_vec();
    let mut inv_std = Vec::with_capacity(x.numel() / n.max(1));
    for row in out.chunks_mut(n) {
        let mean = row.iter().copied().sum::<E>() / nn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nn;
        let is = (var + eps).sqrt().recip();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    (Tensor::new(x.shape(), out), inv_std)
}

pub(crate) fn normalize_last_grad<E: Element>(y: &Tensor<E>, inv_std: &[E], g: &Tensor<E>) -> Tensor<E> {
    let n = *y.shape().last().unwrap();
    let nn = E::c(n as f64);
    let mut out = vec![E::zero(); y.numel()];
    for (r, ((yr, gr), or)) in y
        .data()
        .chunks(n)
        .zip(g.data().chunks(n))
        .zip(out.chunks_mut(n))
        .enumerate()
    {
        let gm = gr.iter().copied().sum::<E>() / nn;
        let gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<E>() / nn;
        for j in 0..n {
            or[j] = inv_std[r] * (gr[j] - gm - yr[j] * gy);
        }
    }
    Tensor::new(y.shape(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let hp = self.h + 2 * self.pad.0;
        let wp = self.w + 2 * self.pad.1;
        if hp < self.kh || wp < self.kw {
            return None;
        }
        Some(((hp - self.kh) / self.stride.0 + 1, (wp - self.kw) / self.stride.1 + 1))
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Source offset into the `[C, H, W]` input for column entry
    /// `(c, ky, kx)` at output position `(oy, ox)`, if not in the padding.
    #[inline]
    fn src(&self, c: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride.0 + ky).checked_sub(self.pad.0)?;
        let x = (ox * self.stride.1 + kx).checked_sub(self.pad.1)?;
        (y < self.h && x < self.w).then(|| (c * self.h + y) * self.w + x)
    }
}

pub(crate) fn im2col<E: Element>(x: &[E], geom: &Conv2dGeom) -> Vec<E> {
    let (ho, wo) = geom.out_hw().expect("input smaller than kernel");
    let cols = ho * wo;
    let mut out = vec![E::zero(); geom.patch() * cols];
    for c in 0..geom.c_in {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let r = (c * geom.kh + ky) * geom.kw + kx;
                let row = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..ho {
                    for ox in 0..wo {
                        if let Some(s) = geom.src(c, ky, kx, oy, ox) {
                            row[oy * wo + ox] = x[s];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn col2im<E: Element>(col: &[E], geom: &Conv2dGeom) -> Vec<E> {
    let (ho, wo) = geom.out_hw().expect("input smaller than kernel");
    let cols = ho * wo;
    let mut out = vec![E::zero(); geom.c_in * geom.h * geom.w];
    for c in 0..geom.c_in {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let r = (c * geom.kh + ky) * geom.kw + kx;
                let row = &col[r * cols..(r + 1) * cols];
                for oy in 0..ho {
                    for ox in 0..wo {
                        if let Some(s) = geom.src(c, ky, kx, oy, ox) {
                            out[s] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    geom: &Conv2dGeom,
) -> Tensor<E> {
    let c_out = w.shape()[0];
    let (ho, wo) = geom.out_hw().expect("input smaller than kernel");
    let col = im2col(x.data(), geom);
    let cols = ho * wo;
    let k = geom.patch();
    let mut out = vec![E::zero(); c_out * cols];
    if let Some(b) = b {
        for (o, row) in out.chunks_mut(cols).enumerate() {
            row.fill(b.data()[o]);
        }
    }
    E::gemm(
        c_out,
        k,
        cols,
        w.data(),
        (k as isize, 1),
        &col,
        (cols as isize, 1),
        if b.is_some() { E::one() } else { E::zero() },
        &mut out,
    );
    Tensor::new(&[c_out, ho, wo], out)
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &Tensor<E>,
    geom: &Conv2dGeom,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let c_out = w.shape()[0];
    let (ho, wo) = geom.out_hw().unwrap();
    let cols = ho * wo;
    let k = geom.patch();
    let col = im2col(x.data(), geom);
    // dW = G · colᵀ
    let mut dw = vec![E::zero(); c_out * k];
    E::gemm(
        c_out,
        cols,
        k,
        g.data(),
        (cols as isize, 1),
        &col,
        (1, cols as isize),
        E::zero(),
        &mut dw,
    );
    // dcol = Wᵀ · G
    let mut dcol = vec![E::zero(); k * cols];
    E::gemm(
        k,
        c_out,
        cols,
        w.data(),
        (1, k as isize),
        g.data(),
        (cols as isize, 1),
        E::zero(),
        &mut dcol,
    );
    let dx = col2im(&dcol, geom);
    let db: Vec<E> = g.data().chunks(cols).map(|r| r.iter().copied().sum()).collect();
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(w.shape(), dw),
        Tensor::new(&[c_out], db),
    )
}
