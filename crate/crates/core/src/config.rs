//! Run configuration. Files are TOML with one table per section; every leaf
//! key is unique across sections so a command-line `--set key=value`
//! addresses exactly one entry.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

/// Where the fused content representation takes its speech branch from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FuseSource {
    /// The sampled posterior latent (default).
    Latent,
    /// The phoneme-level mel features directly. Not exercised by the tests.
    MelFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_latent: usize,
    pub d_style: usize,
    pub d_raw: usize,
    pub d_spk: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub ffn_dim: usize,
    pub rel_window: usize,
    pub mel_enc_channels: usize,
    pub mel_enc_blocks: usize,
    /// Time extent of every mel-encoder kernel; 1 makes it frame-local.
    pub mel_enc_time_kernel: usize,
    pub posterior_blocks: usize,
    pub logvar_min: f64,
    pub logvar_max: f64,
    pub flow_steps: usize,
    pub flow_hidden: usize,
    /// Number of stride-2 layers in the style encoder.
    pub style_layers: usize,
    pub cross_heads: usize,
    pub predictor_hidden: usize,
    pub decoder_channels: usize,
    pub decoder_blocks: usize,
    pub disc_channels: usize,
    pub fuse_source: FuseSource,
    pub timbre_embedder: String,
    pub embedder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            vocab_size: 64,
            d_model: 192,
            d_latent: 16,
            d_style: 128,
            d_raw: 64,
            d_spk: 64,
            text_layers: 4,
            text_heads: 2,
            ffn_dim: 768,
            rel_window: 16,
            mel_enc_channels: 16,
            mel_enc_blocks: 2,
            mel_enc_time_kernel: 3,
            posterior_blocks: 2,
            logvar_min: -9.0,
            logvar_max: 2.0,
            flow_steps: 4,
            flow_hidden: 64,
            style_layers: 2,
            cross_heads: 2,
            predictor_hidden: 128,
            decoder_channels: 192,
            decoder_blocks: 3,
            disc_channels: 16,
            fuse_source: FuseSource::Latent,
            timbre_embedder: "stub".into(),
            embedder_seed: 1234,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for CPU tests.
    pub fn toy() -> Self {
        Self {
            n_mels: 16,
            vocab_size: 40,
            d_model: 32,
            d_latent: 8,
            d_style: 16,
            d_raw: 16,
            d_spk: 16,
            text_layers: 1,
            text_heads: 2,
            ffn_dim: 64,
            rel_window: 16,
            mel_enc_channels: 4,
            mel_enc_blocks: 1,
            mel_enc_time_kernel: 3,
            posterior_blocks: 1,
            flow_steps: 2,
            flow_hidden: 32,
            style_layers: 2,
            cross_heads: 2,
            predictor_hidden: 32,
            decoder_channels: 32,
            decoder_blocks: 2,
            disc_channels: 4,
            ..Self::default()
        }
    }

    /// Style encoder time downsampling factor.
    pub fn style_stride(&self) -> usize {
        1 << self.style_layers
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_mels", self.n_mels),
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_style", self.d_style),
            ("d_raw", self.d_raw),
            ("d_spk", self.d_spk),
            ("text_heads", self.text_heads),
            ("ffn_dim", self.ffn_dim),
            ("mel_enc_channels", self.mel_enc_channels),
            ("mel_enc_time_kernel", self.mel_enc_time_kernel),
            ("flow_hidden", self.flow_hidden),
            ("cross_heads", self.cross_heads),
            ("predictor_hidden", self.predictor_hidden),
            ("decoder_channels", self.decoder_channels),
            ("disc_channels", self.disc_channels),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_latent < 2 {
            return Err(Error::Config("d_latent must be >= 2 for coupling layers".into()));
        }
        if self.d_model % self.text_heads != 0 || self.d_model % self.cross_heads != 0 {
            return Err(Error::Config("d_model must divide evenly into attention heads".into()));
        }
        if self.mel_enc_time_kernel % 2 == 0 {
            return Err(Error::Config("mel_enc_time_kernel must be odd".into()));
        }
        if !(self.logvar_min < self.logvar_max) {
            return Err(Error::Config("logvar_min must be below logvar_max".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub warmup_steps: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            disc_learning_rate: 2e-4,
            warmup_steps: 1000,
            steps: 2000,
            batch_size: 64,
            weight_decay: 0.01,
            max_grad_norm: 5.0,
        }
    }
}

impl OptimConfig {
    /// Linear warmup to the base rate, then constant.
    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            base
        } else {
            base * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub kl: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub pred_duration: f64,
    pub pred_pitch: f64,
    pub pred_energy: f64,
    pub cyc: f64,
    /// Put the positive pair into the contrastive denominator as well.
    pub cyc_include_positive: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            kl: 1.0,
            adv_g: 1.0,
            adv_d: 1.0,
            pred_duration: 1.0,
            pred_pitch: 1.0,
            pred_energy: 1.0,
            cyc: 1.0,
            cyc_include_positive: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptPolicy {
    UniformOtherSpeaker,
}

/// How training picks the prompt utterance fed to the speaker encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainPrompt {
    /// Another utterance of the same speaker, falling back to the source.
    SameSpeakerOther,
    /// The source utterance itself.
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub sigma: f64,
    pub pair_seed: u64,
    pub prompt_policy: PromptPolicy,
    /// Latent noise scale used by the teacher when synthesising pairs.
    pub pair_noise_scale: f64,
    pub train_prompt: TrainPrompt,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            pair_seed: 0,
            prompt_policy: PromptPolicy::UniformOtherSpeaker,
            pair_noise_scale: 0.0,
            train_prompt: TrainPrompt::SameSpeakerOther,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the evaluation embedder, distinct from the training one.
    pub eval_embedder_seed: u64,
    pub rtf_repeats: usize,
    pub rtf_warmup: usize,
    pub synth_seed: u64,
    /// Scale of the prior noise drawn at evaluation synthesis.
    pub synth_noise_scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_embedder_seed: 4321,
            rtf_repeats: 3,
            rtf_warmup: 1,
            synth_seed: 0,
            synth_noise_scale: 0.667,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub out_dir: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss_weights: LossWeights,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub seeds: SeedConfig,
    pub paths: PathConfig,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

/// Text of the shipped defaults file.
pub const DEFAULTS_TOML: &str = include_str!("../../../configs/defaults.toml");
/// Text of the shipped toy preset.
pub const TOY_TOML: &str = include_str!("../../../configs/toy.toml");

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            optim: OptimConfig {
                learning_rate: 2e-3,
                disc_learning_rate: 1e-3,
                warmup_steps: 50,
                steps: 2000,
                batch_size: 8,
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&io_util::read_string(path)?).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(0.0..=1.0).contains(&self.distill.sigma) {
            return Err(Error::Config(format!("sigma {} outside [0, 1]", self.distill.sigma)));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.distill.pair_noise_scale < 0.0 {
            return Err(Error::Config("pair_noise_scale must be >= 0".into()));
        }
        for (name, w) in [
            ("rec", self.loss_weights.rec),
            ("kl", self.loss_weights.kl),
            ("adv_g", self.loss_weights.adv_g),
            ("adv_d", self.loss_weights.adv_d),
            ("pred_duration", self.loss_weights.pred_duration),
            ("pred_pitch", self.loss_weights.pred_pitch),
            ("pred_energy", self.loss_weights.pred_energy),
            ("cyc", self.loss_weights.cyc),
        ] {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be non-negative")));
            }
        }
        if self.eval.rtf_repeats == 0 {
            return Err(Error::Config("rtf_repeats must be >= 1".into()));
        }
        Ok(())
    }

    /// Sets the unique leaf `key` to `value`, parsed according to the type
    /// of the value it replaces.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let table = doc.as_table_mut().expect("config is a table");
        let mut hit = None;
        for (section, entries) in table.iter_mut() {
            if let Some(slot) = entries.as_table_mut().and_then(|t| t.get_mut(key)) {
                hit = Some(section.clone());
                *slot = match slot {
                    toml::Value::Integer(_) => toml::Value::Integer(
                        value.parse().map_err(|_| Error::Config(format!("{key} expects an integer")))?,
                    ),
                    toml::Value::Float(_) => toml::Value::Float(
                        value.parse().map_err(|_| Error::Config(format!("{key} expects a number")))?,
                    ),
                    toml::Value::Boolean(_) => toml::Value::Boolean(
                        value.parse().map_err(|_| Error::Config(format!("{key} expects true/false")))?,
                    ),
                    _ => toml::Value::String(value.to_string()),
                };
                break;
            }
        }
        if hit.is_none() {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
        let updated: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}
