use autograd::layers::Ctx;
use autograd::{Element, ParamStore, Tensor, Var};

use tinyclone::config::ModelConfig;
use tinyclone::model::{ContentFusion, MelDecoder};
use tinyclone::objectives::{loss_adv_d, loss_adv_g, loss_cyc, loss_kl, loss_pred, loss_rec, Discriminator};

use super::{randn, readout, rng, GradCase};

pub struct Rec;

impl GradCase for Rec {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[6, 4], 1), randn(&[6, 4], 2)]
    }

    fn loss<'g, E: Element>(&self, _: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        loss_rec(x[0], x[1]).unwrap()
    }
}

pub struct Kl;

impl GradCase for Kl {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[5, 3], 3), randn(&[5, 3], 4)]
    }

    fn loss<'g, E: Element>(&self, _: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        loss_kl(x[0], x[1]).unwrap()
    }
}

pub struct Pred;

impl GradCase for Pred {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[7], 5), randn(&[7], 6)]
    }

    fn loss<'g, E: Element>(&self, _: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        loss_pred(x[0], x[1]).unwrap()
    }
}

const DISC_CHANNELS: usize = 2;
const DISC_SEED: u64 = 11;

/// Discriminator objective through the discriminator, on real and fake mels.
pub struct AdvD;

impl GradCase for AdvD {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[16, 16], 7), randn(&[16, 16], 8)]
    }

    fn store(&self) -> ParamStore<f64> {
        Discriminator::<f64>::new(DISC_CHANNELS, DISC_SEED).store
    }

    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        let d = Discriminator::<E>::new(DISC_CHANNELS, DISC_SEED);
        loss_adv_d(d.forward(cx, x[0]).unwrap(), d.forward(cx, x[1]).unwrap())
    }
}

/// Generator objective through the discriminator, down to the fake mel.
pub struct AdvG;

impl GradCase for AdvG {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[16, 16], 9)]
    }

    fn store(&self) -> ParamStore<f64> {
        Discriminator::<f64>::new(DISC_CHANNELS, DISC_SEED).store
    }

    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        let d = Discriminator::<E>::new(DISC_CHANNELS, DISC_SEED);
        loss_adv_g(d.forward(cx, x[0]).unwrap())
    }
}

pub struct Cyc {
    pub b: usize,
    pub d: usize,
    pub include_positive: bool,
}

impl GradCase for Cyc {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        (0..2 * self.b).map(|i| randn(&[self.d], 100 + i as u64)).collect()
    }

    fn loss<'g, E: Element>(&self, _: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        loss_cyc(&x[..self.b], &x[self.b..], self.include_positive).unwrap()
    }
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        n_mels: 4,
        d_model: 6,
        d_latent: 4,
        d_spk: 3,
        decoder_channels: 5,
        decoder_blocks: 1,
        ..ModelConfig::toy()
    }
}

/// Frame-level content through pitch/energy embedding, AdaIN residual
/// blocks and the output projection.
pub struct Decoder {
    store: ParamStore<f64>,
    dec: MelDecoder,
    durations: Vec<usize>,
}

impl Decoder {
    pub fn new() -> Self {
        let mut store = ParamStore::new();
        let dec = MelDecoder::new(&mut store, &tiny_cfg(), &mut rng(21));
        Self {
            store,
            dec,
            durations: vec![2, 1, 3],
        }
    }
}

impl GradCase for Decoder {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let cfg = tiny_cfg();
        let t = self.durations.iter().sum();
        vec![
            randn(&[t, cfg.d_model], 22),
            randn(&[cfg.d_spk], 23),
            randn(&[3], 24),
            randn(&[3], 25),
        ]
    }

    fn store(&self) -> ParamStore<f64> {
        self.store.clone()
    }

    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        let mel = self.dec.forward(cx, x[0], x[1], x[2], x[3], &self.durations).unwrap();
        readout(cx, mel, 26)
    }
}

pub struct Fuse {
    store: ParamStore<f64>,
    fuse: ContentFusion,
}

impl Fuse {
    pub fn new() -> Self {
        let mut store = ParamStore::new();
        let fuse = ContentFusion::new(&mut store, &tiny_cfg(), &mut rng(31));
        Self { store, fuse }
    }
}

impl GradCase for Fuse {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        let cfg = tiny_cfg();
        vec![randn(&[3, cfg.d_model], 32), randn(&[3, cfg.d_latent], 33)]
    }

    fn store(&self) -> ParamStore<f64> {
        self.store.clone()
    }

    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        let y = self.fuse.forward(cx, x[0], x[1]).unwrap();
        readout(cx, y, 34)
    }
}

/// Runs every case in both precisions; returns `(name, f32 error, f64 error)`.
pub fn suite() -> Vec<(&'static str, f64, f64)> {
    use super::grad_error;
    fn both<C: GradCase>(name: &'static str, c: &C) -> (&'static str, f64, f64) {
        (name, grad_error::<f32, C>(c), grad_error::<f64, C>(c))
    }
    vec![
        both("rec", &Rec),
        both("kl", &Kl),
        both("adv_d", &AdvD),
        both("adv_g", &AdvG),
        both("pred", &Pred),
        both("cyc", &Cyc { b: 4, d: 5, include_positive: false }),
        both("cyc_with_positive", &Cyc { b: 3, d: 4, include_positive: true }),
        both("adain_decoder", &Decoder::new()),
        both("fuse", &Fuse::new()),
    ]
}
