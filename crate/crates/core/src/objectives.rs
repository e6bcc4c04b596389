//! Training objectives and the patch discriminator.

use autograd::layers::{Conv2d, Ctx};
use autograd::{Element, ParamStore, Tensor, Var};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Mean absolute error between generated and target mels.
pub fn loss_rec<'g, E: Element>(mel_hat: Var<'g, E>, mel: Var<'g, E>) -> Result<Var<'g, E>> {
    same_shape(mel_hat, mel, "reconstruction")?;
    Ok((mel_hat - mel).abs().mean())
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))`, averaged over elements.
pub fn loss_kl<'g, E: Element>(mu: Var<'g, E>, logvar: Var<'g, E>) -> Result<Var<'g, E>> {
    same_shape(mu, logvar, "KL")?;
    Ok((mu.square() + logvar.exp() - logvar).add_scalar(-1.0).mean().scale(0.5))
}

/// Mean squared error.
pub fn loss_pred<'g, E: Element>(pred: Var<'g, E>, target: Var<'g, E>) -> Result<Var<'g, E>> {
    same_shape(pred, target, "prediction")?;
    Ok((pred - target).square().mean())
}

/// Duration targets in log-frames, the domain the predictor outputs.
pub fn log_durations<E: Element>(durations: &[u32]) -> Tensor<E> {
    Tensor::new(&[durations.len()], durations.iter().map(|&d| E::c((d as f64).ln())).collect())
}

/// Least-squares discriminator loss over patch scores.
pub fn loss_adv_d<'g, E: Element>(real: Var<'g, E>, fake: Var<'g, E>) -> Var<'g, E> {
    real.add_scalar(-1.0).square().mean() + fake.square().mean()
}

/// Least-squares generator loss.
pub fn loss_adv_g<'g, E: Element>(fake: Var<'g, E>) -> Var<'g, E> {
    fake.add_scalar(-1.0).square().mean()
}

/// Speaker-cycle contrastive loss over a batch of `B >= 2` items.
///
/// `c_ij` is the cosine similarity between the embedding of generated item
/// `i` and reference item `j`. Item `i` contributes
/// `-(c_ii - logsumexp_{j != i} c_ij)`; with `include_positive` the
/// denominator also covers `j = i`.
pub fn loss_cyc<'g, E: Element>(
    generated: &[Var<'g, E>],
    reference: &[Var<'g, E>],
    include_positive: bool,
) -> Result<Var<'g, E>> {
    let b = generated.len();
    if b < 2 {
        return Err(Error::Precondition(format!("contrastive loss needs at least 2 items, got {b}")));
    }
    if reference.len() != b {
        return Err(Error::Shape(format!("{b} generated vs {} reference embeddings", reference.len())));
    }
    let d = generated[0].shape().iter().product::<usize>();
    for (i, v) in generated.iter().chain(reference).enumerate() {
        let t = v.value();
        if t.numel() != d {
            return Err(Error::Shape(format!("embedding {i} has {} values, expected {d}", t.numel())));
        }
        if !(t.sq_norm().f64() > 0.0) {
            return Err(Error::Precondition(format!("embedding {i} has zero norm")));
        }
    }
    let g = generated[0].graph();
    let stack = |xs: &[Var<'g, E>]| {
        let rows: Vec<_> = xs.iter().map(|x| x.reshape(&[1, d])).collect();
        let m = g.concat(&rows, 0);
        m / m.square().sum_axis(1).sqrt().reshape(&[b, 1])
    };
    let gen = stack(generated);
    let refs = stack(reference);
    let sim = gen.matmul(refs.t());
    let positive = (gen * refs).sum_axis(1);
    let logits = if include_positive {
        sim
    } else {
        let mut mask = Tensor::zeros(&[b, b]);
        for i in 0..b {
            mask.data_mut()[i * b + i] = E::c(-1e30);
        }
        sim + g.constant(mask)
    };
    Ok((logits.logsumexp_last() - positive).mean())
}

fn same_shape<E: Element>(a: Var<'_, E>, b: Var<'_, E>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Fully convolutional patch discriminator over `T × F` mels.
#[derive(Clone, Debug)]
pub struct Discriminator<E: Element> {
    pub store: ParamStore<E>,
    layers: Vec<Conv2d>,
}

impl<E: Element> Discriminator<E> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init, 1);
        let mut store = ParamStore::new();
        let c = channels;
        let widths = [(1, c), (c, 2 * c), (2 * c, 4 * c)];
        let mut layers: Vec<Conv2d> = widths
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| Conv2d::new(&mut store, &format!("disc.conv{i}"), ci, co, (4, 4), (2, 2), (1, 1), &mut rng))
            .collect();
        layers.push(Conv2d::new(&mut store, "disc.out", 4 * c, 1, (4, 3), (2, 1), (1, 1), &mut rng));
        Self { store, layers }
    }

    /// Smallest `(T, F)` the layer stack accepts.
    pub fn check_input(&self, t: usize, f: usize) -> Result<()> {
        let (mut h, mut w) = (t, f);
        for layer in &self.layers {
            match layer.out_hw(h, w) {
                Some(hw) => (h, w) = hw,
                None => {
                    return Err(Error::Precondition(format!(
                        "mel of {t} x {f} is too small for the discriminator"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Patch scores for a `T × F` mel. `cx` must read from `self.store`.
    pub fn forward<'g>(&self, cx: &Ctx<'g, E>, mel: Var<'g, E>) -> Result<Var<'g, E>> {
        let (t, f) = mel.dims2();
        self.check_input(t, f)?;
        let mut x = mel.reshape(&[1, t, f]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(cx, x);
            if i < last {
                x = x.leaky_relu(0.2);
            }
        }
        Ok(x)
    }
}

/// Scalar values of every loss term for one step.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub kl: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub pred_duration: f64,
    pub pred_pitch: f64,
    pub pred_energy: f64,
    pub cyc: f64,
    /// Weighted generator objective. `adv_d` is optimised separately and is
    /// not part of it.
    pub total: f64,
}

/// Unweighted generator-side terms of one step.
pub struct GeneratorTerms<'g, E: Element> {
    pub rec: Var<'g, E>,
    pub kl: Var<'g, E>,
    pub adv_g: Var<'g, E>,
    pub pred_duration: Var<'g, E>,
    pub pred_pitch: Var<'g, E>,
    pub pred_energy: Var<'g, E>,
    pub cyc: Option<Var<'g, E>>,
}

/// Weighted sum of the generator terms, and the report. Fails if any term
/// is not finite.
pub fn total_loss<'g, E: Element>(
    terms: &GeneratorTerms<'g, E>,
    w: &LossWeights,
    step: u64,
) -> Result<(Var<'g, E>, LossReport)> {
    let mut parts = vec![
        ("rec", terms.rec, w.rec),
        ("kl", terms.kl, w.kl),
        ("adv_g", terms.adv_g, w.adv_g),
        ("pred_duration", terms.pred_duration, w.pred_duration),
        ("pred_pitch", terms.pred_pitch, w.pred_pitch),
        ("pred_energy", terms.pred_energy, w.pred_energy),
    ];
    if let Some(c) = terms.cyc {
        parts.push(("cyc", c, w.cyc));
    }
    for (name, v, _) in &parts {
        if !v.item().f64().is_finite() {
            return Err(Error::Divergence {
                step,
                component: format!("loss {name}"),
            });
        }
    }
    let total = parts
        .iter()
        .map(|(_, v, wt)| v.scale(*wt))
        .reduce(|a, b| a + b)
        .expect("at least one term");
    let report = LossReport {
        rec: terms.rec.item().f64(),
        kl: terms.kl.item().f64(),
        adv_g: terms.adv_g.item().f64(),
        adv_d: 0.0,
        pred_duration: terms.pred_duration.item().f64(),
        pred_pitch: terms.pred_pitch.item().f64(),
        pred_energy: terms.pred_energy.item().f64(),
        cyc: terms.cyc.map(|c| c.item().f64()).unwrap_or(0.0),
        total: total.item().f64(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::Graph;

    #[test]
    fn kl_is_zero_at_the_prior() {
        let g = Graph::<f64>::new();
        let mu = g.constant(Tensor::zeros(&[3, 4]));
        let lv = g.constant(Tensor::zeros(&[3, 4]));
        assert_eq!(loss_kl(mu, lv).unwrap().item(), 0.0);
    }

    #[test]
    fn adversarial_losses_at_their_optima() {
        let g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(&[2, 3]));
        let zeros = g.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(loss_adv_d(ones, zeros).item(), 0.0);
        assert_eq!(loss_adv_g(ones).item(), 0.0);
        assert_eq!(loss_adv_d(zeros, ones).item(), 2.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(loss_rec(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn cyc_rejects_small_batches_and_zero_vectors() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2], &[1.0, 0.0]));
        let z = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(loss_cyc(&[a], &[a], false), Err(Error::Precondition(_))));
        assert!(matches!(loss_cyc(&[a, z], &[a, a], false), Err(Error::Precondition(_))));
    }

    #[test]
    fn cyc_matches_hand_computation() {
        let g = Graph::<f64>::new();
        let e = |v: &[f64]| g.constant(Tensor::from_f64(&[2], v));
        let gen = [e(&[1.0, 0.0]), e(&[0.0, 2.0]), e(&[1.0, 1.0])];
        let refs = [e(&[3.0, 0.0]), e(&[1.0, 1.0]), e(&[0.0, -1.0])];
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let c = [[1.0, s, 0.0], [0.0, s, -1.0], [s, 1.0, -s]];
        let lse = |xs: &[f64]| xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        let expect_excl = (0..3)
            .map(|i| {
                let others: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| c[i][j]).collect();
                lse(&others) - c[i][i]
            })
            .sum::<f64>()
            / 3.0;
        let expect_incl = (0..3).map(|i| lse(&c[i]) - c[i][i]).sum::<f64>() / 3.0;
        let got_excl = loss_cyc(&gen, &refs, false).unwrap().item();
        let got_incl = loss_cyc(&gen, &refs, true).unwrap().item();
        assert!((got_excl - expect_excl).abs() < 1e-12, "{got_excl} vs {expect_excl}");
        assert!((got_incl - expect_incl).abs() < 1e-12, "{got_incl} vs {expect_incl}");
    }

    #[test]
    fn discriminator_needs_sixteen_frames() {
        let d = Discriminator::<f32>::new(4, 0);
        assert!(d.check_input(16, 16).is_ok());
        assert!(matches!(d.check_input(7, 16), Err(Error::Precondition(_))));
        let g = Graph::new();
        let cx = Ctx::new(&g, &d.store);
        let out = d.forward(&cx, g.constant(Tensor::zeros(&[16, 16]))).unwrap();
        assert_eq!(out.shape(), vec![1, 1, 2]);
    }
}
