//! Speaker adaptation: style and timbre extraction from prompt speech, the
//! cross-attention variance adapter, length regulation, and the AdaIN mel
//! decoder.

use std::sync::Arc;

use autograd::layers::{Conv1d, Ctx, LayerNorm, Linear};
use autograd::{Element, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::MelSpectrogram;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

fn sinusoidal<E: Element>(t: usize, d: usize) -> Tensor<E> {
    let mut out = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            out.push(E::c(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[t, d], out)
}

/// Prompt mel → temporal style sequence `e_sty` (`ceil(T / r) × D_s`).
/// Positional encoding is added before the strided convolutions and there is
/// no pooling over time.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    proj_in: Linear,
    convs: Vec<Conv1d>,
    proj_out: Linear,
    d_style: usize,
}

impl StyleEncoder {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let ds = cfg.d_style;
        Self {
            proj_in: Linear::new(store, "style.proj_in", cfg.n_mels, ds, true, rng),
            convs: (0..cfg.style_layers)
                .map(|i| Conv1d::new(store, &format!("style.conv{i}"), ds, ds, 3, 2, 1, rng))
                .collect(),
            proj_out: Linear::new(store, "style.proj_out", ds, ds, true, rng),
            d_style: ds,
        }
    }

    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, mel: Var<'g, E>) -> Var<'g, E> {
        let (t, _) = mel.dims2();
        let x = self.proj_in.forward(cx, mel) + cx.constant(sinusoidal(t, self.d_style));
        let mut x = x.t();
        for c in &self.convs {
            x = c.forward(cx, x).leaky_relu(0.2);
        }
        self.proj_out.forward(cx, x.t())
    }
}

/// A frozen speaker-embedding model. Implementations register by name in
/// [`build_embedder`].
pub trait TimbreEmbedder<E: Element>: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Embedding of a `T × F` mel as a graph node, when the embedder can be
    /// differentiated through. Embedder internals never receive gradients.
    fn embed_var<'g>(&self, mel: Var<'g, E>) -> Option<Var<'g, E>>;

    /// Embedding of a `T × F` mel.
    fn embed_tensor(&self, mel: &Tensor<E>) -> Tensor<E>;

    /// Digest of the embedder's internal state.
    fn checksum(&self) -> String;

    fn embed_mel(&self, mel: &MelSpectrogram) -> Vec<f64> {
        self.embed_tensor(&mel.to_tensor::<E>()).to_f64_vec()
    }
}

/// Desk-scale stand-in for a pre-trained speaker model: a fixed, seeded
/// random projection of the per-bin mean and standard deviation of the mel
/// over time.
#[derive(Clone, Debug)]
pub struct StubEmbedder {
    seed: u64,
    n_mels: usize,
    dim: usize,
    projection: Vec<f64>,
}

impl StubEmbedder {
    pub fn new(seed: u64, n_mels: usize, dim: usize) -> Self {
        let mut rng = stream(seed, Stream::Embedder, 0);
        let scale = 1.0 / ((2 * n_mels) as f64).sqrt();
        let projection = (0..2 * n_mels * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            seed,
            n_mels,
            dim,
            projection,
        }
    }

    fn projection_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::from_f64(&[2 * self.n_mels, self.dim], &self.projection)
    }
}

const STUB_STD_EPS: f64 = 1e-6;

impl<E: Element> TimbreEmbedder<E> for StubEmbedder {
    fn name(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_var<'g>(&self, mel: Var<'g, E>) -> Option<Var<'g, E>> {
        let g = mel.graph();
        let (_, f) = mel.dims2();
        assert_eq!(f, self.n_mels, "stub embedder built for {} bins", self.n_mels);
        let mean = mel.mean_axis(0);
        let std = (mel - mean).square().mean_axis(0).add_scalar(STUB_STD_EPS).sqrt();
        let stats = g.concat(&[mean, std], 0).reshape(&[1, 2 * f]);
        let out = stats.matmul(g.constant(self.projection_tensor()));
        Some(out.reshape(&[self.dim]))
    }

    fn embed_tensor(&self, mel: &Tensor<E>) -> Tensor<E> {
        let (t, f) = mel.dims2();
        assert_eq!(f, self.n_mels, "stub embedder built for {} bins", self.n_mels);
        let mut stats = vec![0.0; 2 * f];
        for j in 0..f {
            let mean = (0..t).map(|i| mel.at2(i, j).f64()).sum::<f64>() / t as f64;
            let var = (0..t).map(|i| (mel.at2(i, j).f64() - mean).powi(2)).sum::<f64>() / t as f64;
            stats[j] = mean;
            stats[f + j] = (var + STUB_STD_EPS).sqrt();
        }
        let out = (0..self.dim)
            .map(|k| {
                E::c((0..2 * f)
                    .map(|i| stats[i] * self.projection[i * self.dim + k])
                    .sum::<f64>())
            })
            .collect();
        Tensor::new(&[self.dim], out)
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.n_mels as u64).to_le_bytes());
        for v in &self.projection {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Looks up a registered embedder.
pub fn build_embedder<E: Element>(
    name: &str,
    seed: u64,
    n_mels: usize,
    dim: usize,
) -> Result<Arc<dyn TimbreEmbedder<E>>> {
    match name {
        "stub" => Ok(Arc::new(StubEmbedder::new(seed, n_mels, dim))),
        other => Err(Error::Config(format!(
            "unknown timbre embedder {other:?} (registered: stub)"
        ))),
    }
}

/// Trainable affine map from the embedder space to `e_spk`.
#[derive(Clone, Debug)]
pub struct TimbreProjection {
    pub linear: Linear,
}

impl TimbreProjection {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, "timbre.proj", cfg.d_raw, cfg.d_spk, true, rng),
        }
    }

    /// `raw` (`[D_raw]`) → `e_spk` (`[D_spk]`).
    pub fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, raw: Var<'g, E>) -> Result<Var<'g, E>> {
        let shape = raw.shape();
        if shape != [self.linear.d_in] {
            return Err(Error::Shape(format!(
                "timbre embedding has shape {shape:?}, projection expects [{}]",
                self.linear.d_in
            )));
        }
        let y = self.linear.forward(cx, raw.reshape(&[1, self.linear.d_in]));
        Ok(y.reshape(&[self.linear.d_out]))
    }
}

#[derive(Clone, Debug)]
struct Predictor {
    conv1: Conv1d,
    conv2: Conv1d,
    out: Linear,
}

impl Predictor {
    fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), d, hidden, 3, 1, 1, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), hidden, hidden, 3, 1, 1, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, 1, true, rng),
        }
    }

    fn forward<'g, E: Element>(&self, cx: &Ctx<'g, E>, h_t: Var<'g, E>) -> Var<'g, E> {
        let x = self.conv1.forward(cx, h_t).relu();
        let x = self.conv2.forward(cx, x).relu();
        let y = self.out.forward(cx, x.t());
        let (l, _) = y.dims2();
        y.reshape(&[l])
    }
}

pub struct AttributePrediction<'g, E: Element> {
    /// Log-frames.
    pub duration: Var<'g, E>,
    pub pitch: Var<'g, E>,
    pub energy: Var<'g, E>,
}

/// Duration, pitch and energy predictors conditioned on `e_sty` through a
/// multi-head cross-attention layer. Their content input is detached, so
/// predictor losses never reach the content or linguistic encoders.
#[derive(Clone, Debug)]
pub struct VarianceAdapter {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm: LayerNorm,
    heads: usize,
    duration: Predictor,
    pitch: Predictor,
    energy: Predictor,
}

impl VarianceAdapter {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, ds, p) = (cfg.d_model, cfg.d_style, cfg.predictor_hidden);
        Self {
            q: Linear::new(store, "va.q", d, d, true, rng),
            k: Linear::new(store, "va.k", ds, d, false, rng),
            v: Linear::new(store, "va.v", ds, d, true, rng),
            out: Linear::new(store, "va.out", d, d, true, rng),
            norm: LayerNorm::new(store, "va.norm", d),
            heads: cfg.cross_heads,
            duration: Predictor::new(store, "va.duration", d, p, rng),
            pitch: Predictor::new(store, "va.pitch", d, p, rng),
            energy: Predictor::new(store, "va.energy", d, p, rng),
        }
    }

    /// Style-conditioned hidden sequence fed to the three predictors.
    pub fn condition<'g, E: Element>(&self, cx: &Ctx<'g, E>, content: Var<'g, E>, e_sty: Var<'g, E>) -> Var<'g, E> {
        let (_, d) = content.dims2();
        let dh = d / self.heads;
        let q = self.q.forward(cx, content);
        let k = self.k.forward(cx, e_sty);
        let v = self.v.forward(cx, e_sty);
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<_> = (0..self.heads)
            .map(|h| {
                let qh = q.narrow(1, h * dh, dh);
                let kh = k.narrow(1, h * dh, dh);
                let vh = v.narrow(1, h * dh, dh);
                qh.matmul(kh.t()).scale(scale).softmax_last().matmul(vh)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { cx.graph.concat(&heads, 1) };
        self.norm.forward(cx, content + self.out.forward(cx, cat))
    }

    pub fn forward<'g, E: Element>(
        &self,
        cx: &Ctx<'g, E>,
        e_con: Var<'g, E>,
        e_sty: Var<'g, E>,
    ) -> Result<AttributePrediction<'g, E>> {
        let (_, d) = e_con.dims2();
        let (_, ds) = e_sty.dims2();
        if d != self.q.d_in || ds != self.k.d_in {
            return Err(Error::Shape(format!(
                "variance adapter expects e_con width {} and e_sty width {}, got {d} and {ds}",
                self.q.d_in, self.k.d_in
            )));
        }
        let h = self.condition(cx, e_con.detach(), e_sty).t();
        Ok(AttributePrediction {
            duration: self.duration.forward(cx, h),
            pitch: self.pitch.forward(cx, h),
            energy: self.energy.forward(cx, h),
        })
    }
}

/// Row indices that repeat row `i` `durations[i]` times.
pub fn expansion_indices(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect()
}

/// Expands phoneme-level rows to frame level by block repetition.
pub fn length_regulate<'g, E: Element>(e_con: Var<'g, E>, durations: &[usize]) -> Result<Var<'g, E>> {
    let l = e_con.shape()[0];
    if durations.len() != l {
        return Err(Error::Shape(format!("{} durations for {l} phonemes", durations.len())));
    }
    if let Some(i) = durations.iter().position(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("duration of phoneme {i} must be >= 1")));
    }
    Ok(e_con.index_select(&expansion_indices(durations)))
}

/// Upper bound on a predicted duration, so an untrained predictor cannot
/// request an unbounded mel.
pub const MAX_PREDICTED_FRAMES: usize = 1000;

/// Rounds predicted log-durations to frame counts: `exp`, half-up, `>= 1`.
pub fn durations_from_log<E: Element>(log_durations: &Tensor<E>) -> Vec<usize> {
    log_durations
        .data()
        .iter()
        .map(|v| {
            let frames = (v.f64().exp() + 0.5).floor();
            if frames.is_nan() {
                1
            } else {
                frames.clamp(1.0, MAX_PREDICTED_FRAMES as f64) as usize
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
struct AdaIn {
    gamma: Linear,
    beta: Linear,
}

impl AdaIn {
    fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, name: &str, d_spk: usize, c: usize, rng: &mut R) -> Self {
        let gamma = Linear::new(store, &format!("{name}.gamma"), d_spk, c, true, rng);
        *store.get_mut(gamma.bias.unwrap()) = Tensor::ones(&[c]);
        Self {
            gamma,
            beta: Linear::new(store, &format!("{name}.beta"), d_spk, c, true, rng),
        }
    }

    /// Returns the output and the `(γ, β)` it applied.
    fn forward<'g, E: Element>(
        &self,
        cx: &Ctx<'g, E>,
        x: Var<'g, E>,
        e_spk: Var<'g, E>,
    ) -> (Var<'g, E>, Var<'g, E>, Var<'g, E>) {
        let c = x.shape()[0];
        let gamma = self.gamma.forward(cx, e_spk).reshape(&[c, 1]);
        let beta = self.beta.forward(cx, e_spk).reshape(&[c, 1]);
        (x.normalize_last(ADAIN_EPS) * gamma + beta, gamma, beta)
    }
}

const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct DecoderBlock {
    conv1: Conv1d,
    ada1: AdaIn,
    conv2: Conv1d,
    ada2: AdaIn,
}

/// Output of one AdaIN layer, kept for inspection.
pub struct AdaInTrace<'g, E: Element> {
    pub output: Var<'g, E>,
    pub gamma: Var<'g, E>,
    pub beta: Var<'g, E>,
}

/// Residual 1-D decoder whose every normalisation is AdaIN driven by `e_spk`.
#[derive(Clone, Debug)]
pub struct MelDecoder {
    pitch_embed: Linear,
    energy_embed: Linear,
    proj_in: Linear,
    blocks: Vec<DecoderBlock>,
    proj_out: Linear,
    d_spk: usize,
}

impl MelDecoder {
    pub fn new<E: Element, R: Rng>(store: &mut ParamStore<E>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, c) = (cfg.d_model, cfg.decoder_channels);
        Self {
            pitch_embed: Linear::new(store, "dec.pitch_embed", 1, d, true, rng),
            energy_embed: Linear::new(store, "dec.energy_embed", 1, d, true, rng),
            proj_in: Linear::new(store, "dec.proj_in", d, c, true, rng),
            blocks: (0..cfg.decoder_blocks)
                .map(|i| {
                    let n = format!("dec.block{i}");
                    DecoderBlock {
                        conv1: Conv1d::new_no_bias(store, &format!("{n}.conv1"), c, c, 3, 1, 1, rng),
                        ada1: AdaIn::new(store, &format!("{n}.ada1"), cfg.d_spk, c, rng),
                        conv2: Conv1d::new_no_bias(store, &format!("{n}.conv2"), c, c, 3, 1, 1, rng),
                        ada2: AdaIn::new(store, &format!("{n}.ada2"), cfg.d_spk, c, rng),
                    }
                })
                .collect(),
            proj_out: Linear::new(store, "dec.proj_out", c, cfg.n_mels, true, rng),
            d_spk: cfg.d_spk,
        }
    }

    /// Decodes frame-level content `h` (`T × D`) to a `T × F` mel.
    /// `pitch`/`energy` are phoneme-level (`[L]`) and are expanded by
    /// `durations`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g, E: Element>(
        &self,
        cx: &Ctx<'g, E>,
        h: Var<'g, E>,
        e_spk: Var<'g, E>,
        pitch: Var<'g, E>,
        energy: Var<'g, E>,
        durations: &[usize],
    ) -> Result<Var<'g, E>> {
        self.forward_traced(cx, h, e_spk, pitch, energy, durations).map(|(m, _)| m)
    }

    pub fn forward_traced<'g, E: Element>(
        &self,
        cx: &Ctx<'g, E>,
        h: Var<'g, E>,
        e_spk: Var<'g, E>,
        pitch: Var<'g, E>,
        energy: Var<'g, E>,
        durations: &[usize],
    ) -> Result<(Var<'g, E>, Vec<AdaInTrace<'g, E>>)> {
        let (t, _) = h.dims2();
        let l = durations.len();
        if durations.iter().sum::<usize>() != t {
            return Err(Error::Shape(format!("durations sum to {} but H has {t} frames", durations.iter().sum::<usize>())));
        }
        if pitch.shape() != [l] || energy.shape() != [l] {
            return Err(Error::Shape(format!(
                "pitch {:?} / energy {:?} must be [{l}]",
                pitch.shape(),
                energy.shape()
            )));
        }
        if e_spk.shape() != [self.d_spk] {
            return Err(Error::Shape(format!("e_spk {:?} must be [{}]", e_spk.shape(), self.d_spk)));
        }
        let idx = expansion_indices(durations);
        let p = pitch.reshape(&[l, 1]).index_select(&idx);
        let en = energy.reshape(&[l, 1]).index_select(&idx);
        let x = h + self.pitch_embed.forward(cx, p) + self.energy_embed.forward(cx, en);
        let mut x = self.proj_in.forward(cx, x).t();
        let spk = e_spk.reshape(&[1, self.d_spk]);
        let mut trace = Vec::with_capacity(2 * self.blocks.len());
        for b in &self.blocks {
            let (y, gamma, beta) = b.ada1.forward(cx, b.conv1.forward(cx, x), spk);
            trace.push(AdaInTrace { output: y, gamma, beta });
            let (y2, gamma, beta) = b.ada2.forward(cx, b.conv2.forward(cx, y.leaky_relu(0.2)), spk);
            trace.push(AdaInTrace { output: y2, gamma, beta });
            x = (x + y2).leaky_relu(0.2);
        }
        Ok((self.proj_out.forward(cx, x.t()), trace))
    }
}
