mod common;

use autograd::layers::Ctx;
use autograd::{Element, ParamStore, Tensor, Var};
use common::cases::suite;
use common::{grad_error, randn, readout, rng, GradCase};
use tinyclone::config::ModelConfig;
use tinyclone::model::{LinguisticEncoder, MelEncoder, StubEmbedder, StyleEncoder, TimbreEmbedder, VarianceAdapter, VpFlow};

#[test]
fn analytic_gradients_match_finite_differences() {
    for (name, e32, e64) in suite() {
        println!("{name:<20} f32 {e32:.2e}  f64 {e64:.2e}");
        assert!(e32 < 1e-3, "{name}: f32 relative error {e32}");
        assert!(e64 < 1e-5, "{name}: f64 relative error {e64}");
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        n_mels: 8,
        vocab_size: 5,
        d_model: 4,
        d_latent: 4,
        d_style: 4,
        d_raw: 4,
        d_spk: 3,
        text_heads: 2,
        ffn_dim: 6,
        rel_window: 2,
        mel_enc_channels: 2,
        flow_steps: 2,
        flow_hidden: 5,
        cross_heads: 2,
        predictor_hidden: 3,
        ..ModelConfig::toy()
    }
}

fn assert_case<C: GradCase>(name: &str, c: &C) {
    let (e32, e64) = (grad_error::<f32, C>(c), grad_error::<f64, C>(c));
    println!("{name:<20} f32 {e32:.2e}  f64 {e64:.2e}");
    assert!(e32 < 1e-3 && e64 < 1e-5, "{name}: {e32} / {e64}");
}

struct Flow {
    store: ParamStore<f64>,
    flow: VpFlow,
    inverse: bool,
}

impl Flow {
    fn new(inverse: bool) -> Self {
        let mut store = ParamStore::new();
        let flow = VpFlow::new(&mut store, &tiny(), &mut rng(1));
        for (k, id) in flow.output_layers().into_iter().enumerate() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = randn(&shape, 50 + k as u64);
        }
        Self { store, flow, inverse }
    }
}

impl GradCase for Flow {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[3, 4], 2), randn(&[3, 4], 3)]
    }
    fn store(&self) -> ParamStore<f64> {
        self.store.clone()
    }
    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        let y = if self.inverse {
            self.flow.inverse(cx, x[0], x[1])
        } else {
            self.flow.forward(cx, x[0], x[1])
        };
        readout(cx, y.unwrap(), 4)
    }
}

struct MelEnc {
    store: ParamStore<f64>,
    enc: MelEncoder,
}

impl GradCase for MelEnc {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[5, 8], 5)]
    }
    fn store(&self) -> ParamStore<f64> {
        self.store.clone()
    }
    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        readout(cx, self.enc.forward(cx, x[0], &[2, 1, 2]).unwrap(), 6)
    }
}

struct Style {
    store: ParamStore<f64>,
    enc: StyleEncoder,
}

impl GradCase for Style {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[9, 8], 7)]
    }
    fn store(&self) -> ParamStore<f64> {
        self.store.clone()
    }
    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        readout(cx, self.enc.forward(cx, x[0]), 8)
    }
}

/// Predictor heads with the style sequence as input; the content input is a
/// fixed constant because the adapter detaches it.
struct Adapter {
    store: ParamStore<f64>,
    va: VarianceAdapter,
}

impl GradCase for Adapter {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[3, 4], 9)]
    }
    fn store(&self) -> ParamStore<f64> {
        self.store.clone()
    }
    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        let e_con = cx.constant(randn(&[4, 4], 10).cast::<E>());
        let p = self.va.forward(cx, e_con, x[0]).unwrap();
        readout(cx, p.duration, 11) + readout(cx, p.pitch, 12) + readout(cx, p.energy, 13)
    }
}

struct Ling {
    store: ParamStore<f64>,
    enc: LinguisticEncoder,
}

impl GradCase for Ling {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        Vec::new()
    }
    fn store(&self) -> ParamStore<f64> {
        // The relative bias starts at zero; move it off the origin.
        let mut s = self.store.clone();
        let id = s.id("ling.block0.attn.rel_bias").unwrap();
        let shape = s.get(id).shape().to_vec();
        *s.get_mut(id) = randn(&shape, 14).map(|v| 0.5 * v);
        s
    }
    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, _: &[Var<'g, E>]) -> Var<'g, E> {
        readout(cx, self.enc.forward(cx, &[1, 4, 0, 4, 2, 3]).unwrap(), 15)
    }
}

struct Stub(StubEmbedder);

impl GradCase for Stub {
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![randn(&[6, 8], 16)]
    }
    fn loss<'g, E: Element>(&self, cx: &Ctx<'g, E>, x: &[Var<'g, E>]) -> Var<'g, E> {
        readout(cx, TimbreEmbedder::<E>::embed_var(&self.0, x[0]).unwrap(), 17)
    }
}

#[test]
fn model_components_match_finite_differences() {
    let cfg = tiny();
    assert_case("flow_forward", &Flow::new(false));
    assert_case("flow_inverse", &Flow::new(true));

    let mut store = ParamStore::new();
    let enc = MelEncoder::new(&mut store, &cfg, &mut rng(20));
    assert_case("mel_encoder", &MelEnc { store, enc });

    let mut store = ParamStore::new();
    let enc = StyleEncoder::new(&mut store, &cfg, &mut rng(21));
    assert_case("style_encoder", &Style { store, enc });

    let mut store = ParamStore::new();
    let va = VarianceAdapter::new(&mut store, &cfg, &mut rng(22));
    assert_case("variance_adapter", &Adapter { store, va });

    let mut store = ParamStore::new();
    let enc = LinguisticEncoder::new(&mut store, &cfg, &mut rng(23));
    assert_case("linguistic_encoder", &Ling { store, enc });

    assert_case("stub_embedder", &Stub(StubEmbedder::new(3, 8, 4)));
}
