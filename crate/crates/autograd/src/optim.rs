use crate::{Element, Gradients, ParamStore, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<E> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global norm is at most this.
    pub max_grad_norm: Option<f64>,
    moments: Vec<Option<(Tensor<E>, Tensor<E>)>>,
    steps: Vec<u64>,
}

impl<E: Element> AdamW<E> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            max_grad_norm: None,
            moments: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &Gradients<E>, lr: f64) {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
            self.steps.resize(store.len(), 0);
        }
        let (b1, b2) = (E::c(self.beta1), E::c(self.beta2));
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = grad_norm(grads);
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let clip = E::c(clip);
        for (id, g) in grads.params() {
            let Some(g) = g else { continue };
            if !store.entry(id).trainable {
                continue;
            }
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            self.steps[id.0] += 1;
            let t = self.steps[id.0] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let step = E::c(lr / bc1);
            let bc2_sqrt = E::c(bc2.sqrt());
            let eps = E::c(self.eps);
            let decay = E::c(1.0 - lr * self.weight_decay);
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let g = g * clip;
                *m = b1 * *m + (E::one() - b1) * g;
                *v = b2 * *v + (E::one() - b2) * g * g;
                *p = *p * decay - step * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm<E: Element>(grads: &Gradients<E>) -> f64 {
    grads
        .params()
        .filter_map(|(_, g)| g)
        .map(|g| g.sq_norm().f64())
        .sum::<f64>()
        .sqrt()
}
