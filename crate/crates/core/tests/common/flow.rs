use autograd::layers::Ctx;
use autograd::{Graph, ParamStore, Tensor};

use tinyclone::config::ModelConfig;
use tinyclone::model::VpFlow;

use super::{randn, rng};

/// A flow whose zero-initialised output layers have been randomised, so it
/// is far from the identity.
pub fn random_flow(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, VpFlow) {
    let mut store = ParamStore::new();
    let flow = VpFlow::new(&mut store, cfg, &mut rng(seed));
    for (k, id) in flow.output_layers().into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = randn(&shape, seed * 100 + k as u64);
    }
    (store, flow)
}

/// log |det J| by LU decomposition with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / p;
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    acc
}

/// Jacobian of one latent row through the flow by central differences.
pub fn flow_jacobian(store: &ParamStore<f64>, flow: &VpFlow, z: &[f64], cond: &Tensor<f64>) -> Vec<Vec<f64>> {
    let dz = z.len();
    let eval = |v: &[f64]| {
        let g = Graph::new();
        let cx = Ctx::new(&g, store);
        let y = flow
            .forward(&cx, g.constant(Tensor::from_f64(&[1, dz], v)), g.constant(cond.clone()))
            .unwrap();
        y.value().to_f64_vec()
    };
    let h = 1e-5;
    let mut jac = vec![vec![0.0; dz]; dz];
    for j in 0..dz {
        let mut up = z.to_vec();
        let mut down = z.to_vec();
        up[j] += h;
        down[j] -= h;
        let (fu, fd) = (eval(&up), eval(&down));
        for i in 0..dz {
            jac[i][j] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    jac
}
