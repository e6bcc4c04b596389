//! Central finite differences against the analytic backward pass, op by op.

use autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Checks d f / d inputs with central differences (step 1e-6) in f64.
fn check<F>(inputs: &[Tensor<f64>], f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss);
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let eval = |delta: f64| {
                let mut p = inputs.to_vec();
                p[k].data_mut()[i] += delta;
                let g = Graph::new();
                let vars: Vec<_> = p.into_iter().map(|t| g.constant(t)).collect();
                f(&g, &vars).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(err < 1e-5, "input {k} elem {i}: analytic {an} vs fd {fd}");
        }
    }
}

/// Weighted sum readout so every output element matters.
fn readout<'g>(g: &'g Graph<f64>, y: Var<'g, f64>) -> Var<'g, f64> {
    let w = rand_t(&y.shape(), 999);
    (y * g.constant(w)).sum()
}

#[test]
fn elementwise_ops() {
    let x = rand_t(&[3, 4], 1);
    let pos = x.map(|v| v.abs() + 0.5);
    check(&[x.clone()], |g, v| readout(g, v[0].exp()));
    check(&[pos.clone()], |g, v| readout(g, v[0].ln()));
    check(&[pos.clone()], |g, v| readout(g, v[0].sqrt()));
    check(&[x.clone()], |g, v| readout(g, v[0].tanh()));
    check(&[x.clone()], |g, v| readout(g, v[0].sigmoid()));
    check(&[x.clone()], |g, v| readout(g, v[0].relu()));
    check(&[x.clone()], |g, v| readout(g, v[0].leaky_relu(0.2)));
    check(&[x.clone()], |g, v| readout(g, v[0].abs()));
    check(&[x.clone()], |g, v| readout(g, v[0].square()));
    check(&[x.clone()], |g, v| readout(g, v[0].clamp(-0.5, 0.7)));
    check(&[x.clone()], |g, v| readout(g, v[0].scale(-1.7).add_scalar(0.3).neg()));
}

#[test]
fn broadcasting_binary_ops() {
    let a = rand_t(&[3, 4], 2);
    let row = rand_t(&[4], 3);
    let col = rand_t(&[3, 1], 4);
    let pos = rand_t(&[3, 4], 5).map(|v| v.abs() + 0.5);
    check(&[a.clone(), row.clone()], |g, v| readout(g, v[0] + v[1]));
    check(&[a.clone(), col.clone()], |g, v| readout(g, v[0] - v[1]));
    check(&[a.clone(), row.clone()], |g, v| readout(g, v[0] * v[1]));
    check(&[col.clone(), a.clone()], |g, v| readout(g, v[0] * v[1]));
    check(&[a.clone(), pos.clone()], |g, v| readout(g, v[0] / v[1]));
    let s = rand_t(&[], 6).map(|v| v.abs() + 1.0);
    check(&[a.clone(), s], |g, v| readout(g, v[0] / v[1]));
}

#[test]
fn matmul_transpose_reshape() {
    check(&[rand_t(&[3, 5], 7), rand_t(&[5, 2], 8)], |g, v| readout(g, v[0].matmul(v[1])));
    check(&[rand_t(&[3, 5], 9)], |g, v| readout(g, v[0].t().reshape(&[15])));
}

#[test]
fn reductions() {
    let x = rand_t(&[2, 3, 4], 10);
    check(&[x.clone()], |_, v| v[0].sum());
    check(&[x.clone()], |_, v| v[0].mean());
    for axis in 0..3 {
        check(&[x.clone()], |g, v| readout(g, v[0].sum_axis(axis)));
    }
    check(&[x.clone()], |g, v| readout(g, v[0].mean_axis(1)));
}

#[test]
fn softmax_logsumexp_normalize() {
    let x = rand_t(&[3, 5], 11);
    check(&[x.clone()], |g, v| readout(g, v[0].softmax_last()));
    check(&[x.clone()], |g, v| readout(g, v[0].logsumexp_last()));
    check(&[x.clone()], |g, v| readout(g, v[0].normalize_last(1e-5)));
}

#[test]
fn slicing_and_gathering() {
    let x = rand_t(&[4, 6], 12);
    check(&[x.clone()], |g, v| readout(g, v[0].narrow(1, 2, 3)));
    check(&[x.clone()], |g, v| readout(g, v[0].narrow(0, 1, 2)));
    check(&[x.clone(), rand_t(&[4, 2], 13)], |g, v| readout(g, g.concat(&[v[0], v[1]], 1)));
    check(&[x.clone(), rand_t(&[1, 6], 14)], |g, v| readout(g, g.concat(&[v[1], v[0]], 0)));
    check(&[x.clone()], |g, v| readout(g, v[0].index_select(&[3, 0, 0, 2, 3])));
    check(&[x.clone()], |g, v| readout(g, v[0].segment_mean(&[1, 2, 1])));
}

#[test]
fn convolutions() {
    let x = rand_t(&[2, 7, 5], 15);
    let w = rand_t(&[3, 2, 3, 2], 16);
    let b = rand_t(&[3], 17);
    check(&[x.clone(), w.clone(), b.clone()], |g, v| {
        readout(g, v[0].conv2d(v[1], Some(v[2]), (2, 1), (1, 1)))
    });
    check(&[x.clone(), w.clone()], |g, v| readout(g, v[0].conv2d(v[1], None, (1, 2), (0, 1))));
    let x1 = rand_t(&[3, 9], 18);
    let w1 = rand_t(&[4, 3, 3], 19);
    let b1 = rand_t(&[4], 20);
    check(&[x1, w1, b1], |g, v| readout(g, v[0].conv1d(v[1], Some(v[2]), 2, 1)));
}

#[test]
fn detach_blocks_gradient() {
    let g = Graph::<f64>::new();
    let x = g.input(rand_t(&[3], 21));
    let y = (x.detach() * x).sum();
    let grads = g.backward(y);
    // d/dx (c * x) with c = x held fixed is c, not 2x.
    let gx = grads.wrt(x).unwrap();
    assert_eq!(gx, &x.value());
}
