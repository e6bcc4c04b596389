//! The acoustic model: content encoding, speaker adaptation and decoding,
//! wired together for training and inference.

mod content;
mod speaker;

use std::sync::Arc;

use autograd::layers::Ctx;
use autograd::{Element, ParamStore, Tensor, Var};
use rand::Rng;

use crate::config::{FuseSource, ModelConfig};
use crate::data::{MelSpectrogram, Utterance};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub use content::{
    sample_latent, standard_normal, ContentFusion, LinguisticEncoder, MelEncoder, Posterior, PosteriorEncoder, VpFlow,
};
pub use speaker::{
    build_embedder, durations_from_log, expansion_indices, MAX_PREDICTED_FRAMES, length_regulate, AdaInTrace, AttributePrediction,
    MelDecoder, StubEmbedder, StyleEncoder, TimbreEmbedder, TimbreProjection, VarianceAdapter,
};

/// Teacher-forced forward pass over one utterance.
pub struct TrainOutputs<'g, E: Element> {
    pub mel_hat: Var<'g, E>,
    /// Posterior mean mapped through the flow, and the posterior log-variance.
    pub mu_flow: Var<'g, E>,
    pub logvar: Var<'g, E>,
    pub prediction: AttributePrediction<'g, E>,
    /// Timbre embedding the decoder was conditioned on.
    pub e_spk: Var<'g, E>,
    /// Timbre embedding re-extracted from the generated mel; `None` when the
    /// embedder is not differentiable.
    pub e_spk_hat: Option<Var<'g, E>>,
}

/// How inference obtains phoneme durations.
#[derive(Clone, Debug, PartialEq)]
pub enum DurationSource {
    /// Frame counts given directly.
    Forced(Vec<usize>),
    /// Rounded from the duration predictor.
    Predicted,
    /// Stand-in for the predictor output, in log-frames.
    LogOverride(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct Synthesis<E: Element> {
    pub mel: Tensor<E>,
    pub durations: Vec<usize>,
    /// Phoneme-level predictions the decoder was driven with.
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Speaker conditioning derived from a prompt.
pub struct SpeakerCondition<'g, E: Element> {
    pub e_sty: Var<'g, E>,
    pub e_spk: Var<'g, E>,
}

#[derive(Clone)]
pub struct AcousticModel<E: Element> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    pub linguistic: LinguisticEncoder,
    pub mel_encoder: MelEncoder,
    pub posterior: PosteriorEncoder,
    pub flow: VpFlow,
    pub fusion: ContentFusion,
    pub style: StyleEncoder,
    pub timbre: TimbreProjection,
    pub adapter: VarianceAdapter,
    pub decoder: MelDecoder,
    pub embedder: Arc<dyn TimbreEmbedder<E>>,
}

impl<E: Element> std::fmt::Debug for AcousticModel<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AcousticModel")
            .field("params", &self.store.num_trainable())
            .field("embedder", &self.embedder.name())
            .finish()
    }
}

impl<E: Element> AcousticModel<E> {
    /// Freshly initialised model. Parameters depend only on `cfg` and `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let embedder = build_embedder(&cfg.timbre_embedder, cfg.embedder_seed, cfg.n_mels, cfg.d_raw)?;
        let mut rng = stream(seed, Stream::Init, 0);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        Ok(Self {
            linguistic: LinguisticEncoder::new(&mut store, cfg, rng),
            mel_encoder: MelEncoder::new(&mut store, cfg, rng),
            posterior: PosteriorEncoder::new(&mut store, cfg, rng),
            flow: VpFlow::new(&mut store, cfg, rng),
            fusion: ContentFusion::new(&mut store, cfg, rng),
            style: StyleEncoder::new(&mut store, cfg, rng),
            timbre: TimbreProjection::new(&mut store, cfg, rng),
            adapter: VarianceAdapter::new(&mut store, cfg, rng),
            decoder: MelDecoder::new(&mut store, cfg, rng),
            cfg: cfg.clone(),
            store,
            embedder,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    fn check_mel(&self, mel: &MelSpectrogram, what: &str) -> Result<()> {
        if mel.n_mels() != self.cfg.n_mels {
            return Err(Error::Shape(format!(
                "{what} has {} mel bins, model expects {}",
                mel.n_mels(),
                self.cfg.n_mels
            )));
        }
        Ok(())
    }

    /// Raw embedder output for `mel`, differentiable when the embedder allows.
    pub fn embed<'g>(&self, cx: &Ctx<'g, E>, mel: Var<'g, E>) -> Var<'g, E> {
        self.embedder
            .embed_var(mel)
            .unwrap_or_else(|| cx.constant(self.embedder.embed_tensor(&mel.value())))
    }

    /// `e_sty` and `e_spk` for a prompt mel.
    pub fn speaker_condition<'g>(&self, cx: &Ctx<'g, E>, prompt: &MelSpectrogram) -> Result<SpeakerCondition<'g, E>> {
        self.check_mel(prompt, "prompt")?;
        let mel = cx.constant(prompt.to_tensor());
        let raw = cx.constant(self.embedder.embed_tensor(&mel.value()));
        Ok(SpeakerCondition {
            e_sty: self.style.forward(cx, mel),
            e_spk: self.timbre.forward(cx, raw)?,
        })
    }

    /// Teacher-forced pass: ground-truth durations, pitch and energy drive
    /// length regulation and decoding. `content` is the mel fed to the mel
    /// encoder; it is the target's own mel unless a time-aligned substitute
    /// is given.
    pub fn forward_train<'g, R: Rng>(
        &self,
        cx: &Ctx<'g, E>,
        utt: &Utterance,
        content: Option<&MelSpectrogram>,
        prompt: &MelSpectrogram,
        rng: &mut R,
    ) -> Result<TrainOutputs<'g, E>> {
        utt.validate(Some(self.cfg.vocab_size))?;
        self.check_mel(&utt.mel, &utt.id)?;
        let content = content.unwrap_or(&utt.mel);
        self.check_mel(content, "content mel")?;
        let ids = utt.phonemes.as_usize();
        let durations = utt.annotations.durations_usize();
        let l = ids.len();

        let e_ling = self.linguistic.forward(cx, &ids)?;
        let e_mel = self.mel_encoder.forward(cx, cx.constant(content.to_tensor()), &durations)?;
        let post = self.posterior.forward(cx, e_mel);
        let z = sample_latent(&post, 1.0, rng);
        let mu_flow = self.flow.forward(cx, post.mu, e_ling)?;
        let src = match self.fusion.source {
            FuseSource::Latent => z,
            FuseSource::MelFeatures => e_mel,
        };
        let e_con = self.fusion.forward(cx, e_ling, src)?;

        let spk = self.speaker_condition(cx, prompt)?;
        let prediction = self.adapter.forward(cx, e_con, spk.e_sty)?;
        let h = length_regulate(e_con, &durations)?;
        let pitch = cx.constant(Tensor::new(&[l], utt.annotations.pitch.iter().map(|&v| E::c(v as f64)).collect()));
        let energy = cx.constant(Tensor::new(&[l], utt.annotations.energy.iter().map(|&v| E::c(v as f64)).collect()));
        let mel_hat = self.decoder.forward(cx, h, spk.e_spk, pitch, energy, &durations)?;

        let e_spk_hat = match self.embedder.embed_var(mel_hat) {
            Some(raw) => Some(self.timbre.forward(cx, raw)?),
            None => None,
        };
        Ok(TrainOutputs {
            e_spk: spk.e_spk,
            e_spk_hat,
            mel_hat,
            mu_flow,
            logvar: post.logvar,
            prediction,
        })
    }

    /// Text-only content: the latent is drawn from the prior and mapped
    /// back through the inverse flow.
    pub fn content_from_text<'g, R: Rng>(
        &self,
        cx: &Ctx<'g, E>,
        ids: &[usize],
        noise_scale: f64,
        rng: &mut R,
    ) -> Result<Var<'g, E>> {
        if self.fusion.source != FuseSource::Latent {
            return Err(Error::Precondition(
                "text-only synthesis needs fuse_source = latent".into(),
            ));
        }
        let e_ling = self.linguistic.forward(cx, ids)?;
        let eps: Tensor<E> = standard_normal(&[ids.len(), self.cfg.d_latent], rng);
        let z = self.flow.inverse(cx, cx.constant(eps.map(|v| v * E::c(noise_scale))), e_ling)?;
        self.fusion.forward(cx, e_ling, z)
    }

    /// Synthesises a mel for `ids` in the voice of `prompt`.
    pub fn synthesize<R: Rng>(
        &self,
        ids: &[usize],
        prompt: &MelSpectrogram,
        durations: &DurationSource,
        noise_scale: f64,
        rng: &mut R,
    ) -> Result<Synthesis<E>> {
        let g = autograd::Graph::new();
        let cx = Ctx::frozen(&g, &self.store);
        let e_con = self.content_from_text(&cx, ids, noise_scale, rng)?;
        let spk = self.speaker_condition(&cx, prompt)?;
        let pred = self.adapter.forward(&cx, e_con, spk.e_sty)?;
        let l = ids.len();
        let durs = match durations {
            DurationSource::Forced(d) => d.clone(),
            DurationSource::Predicted => durations_from_log(&pred.duration.value()),
            DurationSource::LogOverride(v) => {
                if v.len() != l {
                    return Err(Error::Shape(format!("{} log-durations for {l} phonemes", v.len())));
                }
                durations_from_log(&Tensor::<E>::from_f64(&[l], v))
            }
        };
        if durs.len() != l {
            return Err(Error::Shape(format!("{} durations for {l} phonemes", durs.len())));
        }
        let h = length_regulate(e_con, &durs)?;
        let mel = self.decoder.forward(&cx, h, spk.e_spk, pred.pitch, pred.energy, &durs)?;
        let out = mel.value();
        if !out.is_finite() {
            return Err(Error::Divergence {
                step: 0,
                component: "synthesised mel".into(),
            });
        }
        Ok(Synthesis {
            mel: out,
            durations: durs,
            pitch: pred.pitch.value().to_f64_vec(),
            energy: pred.energy.value().to_f64_vec(),
        })
    }
}
