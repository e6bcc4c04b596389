#![allow(dead_code)]

use autograd::layers::Ctx;
use autograd::{Element, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tinyclone::config::{ModelConfig, RunConfig};
use tinyclone::data::{make_synthetic_corpus_with, Dataset, SyntheticSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal tensor whose values are exactly representable in f32.
pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    f32_exact(&Tensor::randn(shape, 1.0, &mut rng(seed)))
}

pub fn f32_exact(t: &Tensor<f64>) -> Tensor<f64> {
    t.cast::<f32>().cast::<f64>()
}

pub fn cast_store<E: Element>(store: &ParamStore<f64>) -> ParamStore<E> {
    let mut out = ParamStore::new();
    for (_, e) in store.iter() {
        out.add(e.name.clone(), e.value.cast::<E>(), e.trainable);
    }
    out
}

/// Rounds every parameter to f32 so both precisions see the same point.
pub fn round_store(store: &mut ParamStore<f64>) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let v = f32_exact(store.get(id));
        *store.get_mut(id) = v;
    }
}

/// Synthetic corpus matching the toy model dimensions.
pub fn toy_corpus(n_speakers: usize, utts: usize, seed: u64) -> Dataset {
    let cfg = ModelConfig::toy();
    let spec = SyntheticSpec {
        n_mels: cfg.n_mels,
        vocab_size: cfg.vocab_size,
        ..SyntheticSpec::default()
    };
    make_synthetic_corpus_with(&spec, n_speakers, utts, seed).unwrap()
}

pub fn toy_run(steps: u64) -> RunConfig {
    let mut c = RunConfig::toy();
    c.optim.steps = steps;
    c
}

/// A differentiable scalar function of some input tensors and the
/// parameters of a store, evaluable in either precision.
pub trait GradCase {
    fn inputs(&self) -> Vec<Tensor<f64>>;

    fn store(&self) -> ParamStore<f64> {
        ParamStore::new()
    }

    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, xs: &[Var<'g, E>]) -> Var<'g, E>;
}

fn eval_f64<C: GradCase>(case: &C, inputs: &[Tensor<f64>], store: &ParamStore<f64>) -> f64 {
    let g = Graph::new();
    let cx = Ctx::new(&g, store);
    let xs: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    case.loss(&cx, &xs).item()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Worst norm-relative error, over every input and parameter tensor,
/// between analytic gradients in precision `E` and central differences of
/// the f64 function (step `1e-6`).
pub fn grad_error<E: Element, C: GradCase>(case: &C) -> f64 {
    let inputs: Vec<_> = case.inputs().iter().map(f32_exact).collect();
    let mut store64 = case.store();
    round_store(&mut store64);
    let store: ParamStore<E> = cast_store(&store64);

    let g = Graph::new();
    let cx = Ctx::new(&g, &store);
    let xs: Vec<_> = inputs.iter().map(|t| g.input(t.cast::<E>())).collect();
    let loss = case.loss(&cx, &xs);
    let grads = g.backward(loss);

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .wrt(xs[k])
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let fd: Vec<f64> = (0..t.numel())
            .map(|i| {
                let mut p = inputs.clone();
                p[k].data_mut()[i] += h;
                let up = eval_f64(case, &p, &store64);
                p[k].data_mut()[i] -= 2.0 * h;
                let down = eval_f64(case, &p, &store64);
                (up - down) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &fd));
    }
    let ids: Vec<ParamId> = store64.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store64.get(id).numel();
        let analytic: Vec<f64> = grads
            .param(id)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut s = store64.clone();
        let fd: Vec<f64> = (0..n)
            .map(|i| {
                let orig = s.get(id).data()[i];
                s.get_mut(id).data_mut()[i] = orig + h;
                let up = eval_f64(case, &inputs, &s);
                s.get_mut(id).data_mut()[i] = orig - h;
                let down = eval_f64(case, &inputs, &s);
                s.get_mut(id).data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        if std::env::var_os("GRAD_DEBUG").is_some() {
            let na = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
            eprintln!("  {} |a| {na:.3e} err {:.3e}", store64.entry(id).name, rel_err(&analytic, &fd));
        }
        worst = worst.max(rel_err(&analytic, &fd));
    }
    worst
}

/// Weighted sum of every element, with fixed weights, so the whole output
/// is exercised.
pub fn readout<'g, E: Element>(cx: &Ctx<'g, E>, y: Var<'g, E>, seed: u64) -> Var<'g, E> {
    let w = randn(&y.shape(), seed).cast::<E>();
    (y * cx.constant(w)).sum()
}
pub mod cases;
pub mod edit;
pub mod flow;
