//! Two-stage self-distillation: train a teacher on ground-truth data, let it
//! voice every transcript with a different speaker's prompt, then train a
//! student on a mix of ground-truth and teacher-generated pairs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autograd::layers::Ctx;
use autograd::{AdamW, Element, Graph, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainPrompt};
use crate::data::{read_mel, write_mel, Dataset, MelSpectrogram, Utterance};
use crate::data::manifest::{header_line, split_header};
use crate::error::{Error, Result};
use crate::io_util;
use crate::model::{AcousticModel, DurationSource};
use crate::objectives::{
    log_durations, loss_adv_d, loss_adv_g, loss_cyc, loss_kl, loss_pred, loss_rec, total_loss, Discriminator,
    GeneratorTerms, LossReport,
};
use crate::rng::{stream, Stream};

/// One training example: the supervision target, the mel fed to the mel
/// encoder (the target's own when `None`), and the prompt whose speaker
/// conditions the generation.
#[derive(Clone, Copy)]
pub struct TrainItem<'a> {
    pub target: &'a Utterance,
    pub content: Option<&'a MelSpectrogram>,
    pub prompt: &'a MelSpectrogram,
}

/// Generator, discriminator and their optimiser states.
#[derive(Clone, Debug)]
pub struct Trainer<E: Element> {
    pub cfg: RunConfig,
    pub model: AcousticModel<E>,
    pub disc: Discriminator<E>,
    opt_g: AdamW<E>,
    opt_d: AdamW<E>,
    /// Steps completed so far.
    pub step: u64,
}

fn non_finite(step: u64, component: impl Into<String>) -> Error {
    Error::Divergence {
        step,
        component: component.into(),
    }
}

impl<E: Element> Trainer<E> {
    /// Fresh random initialisation from `cfg.seeds.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seeds.seed;
        let mut opt_g = AdamW::new(cfg.optim.weight_decay);
        opt_g.max_grad_norm = Some(cfg.optim.max_grad_norm);
        let mut opt_d = AdamW::new(cfg.optim.weight_decay);
        opt_d.max_grad_norm = Some(cfg.optim.max_grad_norm);
        Ok(Self {
            model: AcousticModel::new(&cfg.model, seed)?,
            disc: Discriminator::new(cfg.model.disc_channels, seed),
            cfg: cfg.clone(),
            opt_g,
            opt_d,
            step: 0,
        })
    }

    /// One optimisation step over `items`: a generator update on the whole
    /// batch, then a discriminator update against the generated mels.
    pub fn train_step(&mut self, items: &[TrainItem<'_>]) -> Result<LossReport> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.step;
        let w = &self.cfg.loss_weights;
        let b = items.len();
        let inv_b = 1.0 / b as f64;
        let mut rng = stream(self.cfg.seeds.seed, Stream::Latent, step);

        let g = Graph::new();
        let cx = Ctx::new(&g, &self.model.store);
        let dcx = Ctx::frozen(&g, &self.disc.store);
        let mut acc: Option<[autograd::Var<'_, E>; 6]> = None;
        let mut spk_hat = Vec::with_capacity(b);
        let mut spk = Vec::with_capacity(b);
        let mut fakes = Vec::with_capacity(b);
        for item in items {
            let out = self
                .model
                .forward_train(&cx, item.target, item.content, item.prompt, &mut rng)
                .map_err(|e| e.context(format!("item {}", item.target.id)))?;
            let mel = cx.constant(item.target.mel.to_tensor());
            let a = &item.target.annotations;
            let f32s = |v: &[f32]| Tensor::new(&[v.len()], v.iter().map(|&x| E::c(x as f64)).collect());
            let terms = [
                loss_rec(out.mel_hat, mel)?,
                loss_kl(out.mu_flow, out.logvar)?,
                loss_adv_g(self.disc.forward(&dcx, out.mel_hat)?),
                loss_pred(out.prediction.duration, cx.constant(log_durations(&a.durations)))?,
                loss_pred(out.prediction.pitch, cx.constant(f32s(&a.pitch)))?,
                loss_pred(out.prediction.energy, cx.constant(f32s(&a.energy)))?,
            ];
            acc = Some(match acc {
                None => terms,
                Some(prev) => std::array::from_fn(|i| prev[i] + terms[i]),
            });
            if let Some(e) = out.e_spk_hat {
                spk_hat.push(e);
                spk.push(out.e_spk);
            }
            fakes.push(out.mel_hat.value());
        }
        let acc = acc.expect("non-empty batch").map(|v| v.scale(inv_b));
        let cyc = if b >= 2 && spk_hat.len() == b && w.cyc > 0.0 {
            Some(loss_cyc(&spk_hat, &spk, w.cyc_include_positive)?)
        } else {
            None
        };
        let terms = GeneratorTerms {
            rec: acc[0],
            kl: acc[1],
            adv_g: acc[2],
            pred_duration: acc[3],
            pred_pitch: acc[4],
            pred_energy: acc[5],
            cyc,
        };
        let (total, mut report) = total_loss(&terms, w, step)?;
        let grads = g.backward(total);
        let lr = self.cfg.optim.lr_at(self.cfg.optim.learning_rate, step);
        self.opt_g.step(&mut self.model.store, &grads, lr);
        drop(grads);
        drop(g);
        if !self.model.store.all_finite() {
            return Err(non_finite(step, "generator parameters"));
        }

        let gd = Graph::new();
        let dcx = Ctx::new(&gd, &self.disc.store);
        let mut d_loss = None;
        for (item, fake) in items.iter().zip(fakes) {
            let real = self.disc.forward(&dcx, gd.constant(item.target.mel.to_tensor()))?;
            let fake = self.disc.forward(&dcx, gd.constant(fake))?;
            let l = loss_adv_d(real, fake);
            d_loss = Some(match d_loss {
                None => l,
                Some(p) => p + l,
            });
        }
        let d_loss = d_loss.expect("non-empty batch").scale(inv_b);
        report.adv_d = d_loss.item().f64();
        if !report.adv_d.is_finite() {
            return Err(non_finite(step, "loss adv_d"));
        }
        if w.adv_d > 0.0 {
            let grads = gd.backward(d_loss.scale(w.adv_d));
            let lr_d = self.cfg.optim.lr_at(self.cfg.optim.disc_learning_rate, step);
            self.opt_d.step(&mut self.disc.store, &grads, lr_d);
            if !self.disc.store.all_finite() {
                return Err(non_finite(step, "discriminator parameters"));
            }
        }
        self.step += 1;
        Ok(report)
    }
}

/// Indices of a training batch: a uniform draw without replacement, or with
/// replacement when the batch is larger than the pool.
pub fn sample_batch<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if batch <= n {
        sample(rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Prompt for `target` under `policy`.
pub fn pick_prompt<R: Rng>(data: &Dataset, target: usize, policy: TrainPrompt, rng: &mut R) -> usize {
    match policy {
        TrainPrompt::Source => target,
        TrainPrompt::SameSpeakerOther => {
            let spk = &data.get(target).speaker;
            let others: Vec<usize> = data
                .iter()
                .enumerate()
                .filter(|(i, u)| *i != target && &u.speaker == spk)
                .map(|(i, _)| i)
                .collect();
            if others.is_empty() {
                target
            } else {
                others[rng.random_range(0..others.len())]
            }
        }
    }
}

/// Number of items a mixing ratio replaces in a batch of `b`.
pub fn n_replaced(sigma: f64, b: usize) -> usize {
    // The epsilon keeps products such as 0.7 * 10 from rounding down.
    (sigma * b as f64 + 1e-9).floor() as usize
}

/// Chooses `floor(sigma · B)` batch positions uniformly without replacement
/// whose content input is to be replaced by the teacher's synthetic mel.
/// `has_pair[i]` says whether batch item `i` has one. Returns the mask.
pub fn mix_batch<R: Rng>(has_pair: &[bool], sigma: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} outside [0, 1]")));
    }
    let b = has_pair.len();
    let mut mask = vec![false; b];
    let k = n_replaced(sigma, b);
    if k == 0 {
        return Ok(mask);
    }
    for pos in sample(rng, b, k).into_iter() {
        if !has_pair[pos] {
            return Err(Error::Precondition(format!("batch item {pos} has no parallel pair")));
        }
        mask[pos] = true;
    }
    Ok(mask)
}

/// Where a training run reports.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// JSON Lines file receiving one record per step.
    pub path: Option<PathBuf>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    step: u64,
    lr: f64,
    wall_secs: f64,
    n_replaced: usize,
    #[serde(flatten)]
    losses: &'a LossReport,
}

struct StepWriter(Option<(PathBuf, BufWriter<File>)>);

impl StepWriter {
    fn open(log: &TrainLog) -> Result<Self> {
        match &log.path {
            None => Ok(Self(None)),
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = File::create(p).map_err(|e| Error::io(p, e))?;
                Ok(Self(Some((p.clone(), BufWriter::new(f)))))
            }
        }
    }

    fn write(&mut self, rec: &StepRecord<'_>) -> Result<()> {
        if let Some((p, w)) = &mut self.0 {
            let line = serde_json::to_string(rec).expect("record serialises");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<E: Element> {
    pub trainer: Trainer<E>,
    pub history: Vec<LossReport>,
    /// Replacement mask of every step (all false for a teacher).
    pub masks: Vec<Vec<bool>>,
}

fn run_training<E: Element>(
    cfg: &RunConfig,
    data: &Dataset,
    pairs: Option<&[Option<&MelSpectrogram>]>,
    log: &TrainLog,
) -> Result<TrainOutcome<E>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    data.validate(Some(cfg.model.vocab_size))?;
    let seed = cfg.seeds.seed;
    let mut trainer = Trainer::<E>::new(cfg)?;
    let mut writer = StepWriter::open(log)?;
    let started = std::time::Instant::now();
    let mut history = Vec::with_capacity(cfg.optim.steps as usize);
    let mut masks = Vec::with_capacity(cfg.optim.steps as usize);
    for step in 0..cfg.optim.steps {
        let batch = sample_batch(data.len(), cfg.optim.batch_size, &mut stream(seed, Stream::Batch, step));
        let mask = match pairs {
            Some(p) => {
                let has: Vec<bool> = batch.iter().map(|&i| p[i].is_some()).collect();
                mix_batch(&has, cfg.distill.sigma, &mut stream(seed, Stream::Mix, step))?
            }
            None => vec![false; batch.len()],
        };
        let mut prng = stream(seed, Stream::Prompt, step);
        let items: Vec<TrainItem<'_>> = batch
            .iter()
            .zip(&mask)
            .map(|(&i, &replaced)| TrainItem {
                target: data.get(i),
                content: if replaced { pairs.and_then(|p| p[i]) } else { None },
                prompt: &data.get(pick_prompt(data, i, cfg.distill.train_prompt, &mut prng)).mel,
            })
            .collect();
        let report = trainer.train_step(&items)?;
        writer.write(&StepRecord {
            step,
            lr: cfg.optim.lr_at(cfg.optim.learning_rate, step),
            wall_secs: started.elapsed().as_secs_f64(),
            n_replaced: mask.iter().filter(|&&m| m).count(),
            losses: &report,
        })?;
        history.push(report);
        masks.push(mask);
    }
    Ok(TrainOutcome {
        trainer,
        history,
        masks,
    })
}

/// Trains the teacher on ground truth for `cfg.optim.steps` steps. Aborts
/// with [`Error::Divergence`] on the first non-finite loss or parameter.
pub fn train_teacher<E: Element>(cfg: &RunConfig, data: &Dataset, log: &TrainLog) -> Result<TrainOutcome<E>> {
    run_training(cfg, data, None, log)
}

/// Trains a student from random initialisation. In every batch
/// `floor(sigma · B)` items have their mel-encoder input swapped for the
/// teacher's time-aligned synthetic mel; text, prompt and targets stay the
/// ground truth. With `sigma = 0` every step is identical to the teacher's.
pub fn train_student<E: Element>(
    cfg: &RunConfig,
    data: &Dataset,
    pairs: &[ParallelPair],
    log: &TrainLog,
) -> Result<TrainOutcome<E>> {
    let by_source = align_pairs(data, pairs)?;
    run_training(cfg, data, Some(&by_source), log)
}

/// Synthetic mel for each utterance of `data`, looked up by source id.
/// Fails if any utterance lacks a pair or a pair is misaligned.
pub fn align_pairs<'a>(data: &Dataset, pairs: &'a [ParallelPair]) -> Result<Vec<Option<&'a MelSpectrogram>>> {
    let index: std::collections::HashMap<&str, &ParallelPair> =
        pairs.iter().map(|p| (p.source_id.as_str(), p)).collect();
    data.iter()
        .map(|u| {
            let p = index
                .get(u.id.as_str())
                .ok_or_else(|| Error::Precondition(format!("no parallel pair for {}", u.id)))?;
            p.check_against(u)?;
            Ok(Some(&p.synthetic_mel))
        })
        .collect()
}

/// A source utterance and the teacher's rendering of its content in another
/// speaker's voice, with identical phoneme timing.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelPair {
    pub source_id: String,
    pub source_speaker: String,
    pub prompt_id: String,
    pub prompt_speaker: String,
    pub synthetic_mel: MelSpectrogram,
}

impl ParallelPair {
    /// Both pair invariants, checked against the source utterance.
    pub fn check_against(&self, source: &Utterance) -> Result<()> {
        if self.synthetic_mel.n_frames() != source.mel.n_frames() {
            return Err(Error::invariant(
                &self.source_id,
                format!(
                    "synthetic mel has {} frames, source has {}",
                    self.synthetic_mel.n_frames(),
                    source.mel.n_frames()
                ),
            ));
        }
        if self.prompt_speaker == source.speaker || self.prompt_speaker == self.source_speaker {
            return Err(Error::invariant(&self.source_id, "prompt speaker equals source speaker"));
        }
        Ok(())
    }
}

/// Synthesises one pair per utterance of `data`. Each prompt is drawn
/// uniformly from the utterances of other speakers; the source's annotated
/// durations are forced so the frames line up exactly.
pub fn generate_parallel_pairs<E: Element>(
    teacher: &AcousticModel<E>,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<Vec<ParallelPair>> {
    data.validate(Some(teacher.cfg.vocab_size))?;
    if data.speakers().len() < 2 {
        return Err(Error::Precondition(
            "pair generation needs at least two speakers (no prompt from a different speaker exists)".into(),
        ));
    }
    let seed = cfg.distill.pair_seed;
    let noise = cfg.distill.pair_noise_scale;
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let src = data.get(i);
            let mut rng = stream(seed, Stream::Pairs, i as u64);
            let others: Vec<usize> = (0..data.len()).filter(|&j| data.get(j).speaker != src.speaker).collect();
            let prompt = data.get(others[rng.random_range(0..others.len())]);
            let syn = teacher
                .synthesize(
                    &src.phonemes.as_usize(),
                    &prompt.mel,
                    &DurationSource::Forced(src.annotations.durations_usize()),
                    noise,
                    &mut stream(seed, Stream::Synthesis, i as u64),
                )
                .map_err(|e| e.context(format!("pair for {}", src.id)))?;
            let pair = ParallelPair {
                source_id: src.id.clone(),
                source_speaker: src.speaker.clone(),
                prompt_id: prompt.id.clone(),
                prompt_speaker: prompt.speaker.clone(),
                synthetic_mel: MelSpectrogram::from_tensor(&syn.mel, src.mel.hop_length, src.mel.sample_rate)?,
            };
            pair.check_against(src)?;
            Ok(pair)
        })
        .collect()
}

pub const PAIRS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PairRecord {
    source: String,
    synthetic_mel: String,
    prompt: String,
    source_speaker: String,
    prompt_speaker: String,
    frames: usize,
}

/// Writes `pairs.jsonl` and one mel sidecar per pair under `dir`. Returns
/// the manifest path.
pub fn write_pairs(pairs: &[ParallelPair], dir: &Path) -> Result<PathBuf> {
    let mut out = header_line("pairs", PAIRS_FORMAT_VERSION);
    out.push('\n');
    for p in pairs {
        let rel = format!("synth/{}.mel", p.source_id);
        write_mel(&dir.join(&rel), &p.synthetic_mel)?;
        let rec = PairRecord {
            source: p.source_id.clone(),
            synthetic_mel: rel,
            prompt: p.prompt_id.clone(),
            source_speaker: p.source_speaker.clone(),
            prompt_speaker: p.prompt_speaker.clone(),
            frames: p.synthetic_mel.n_frames(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        out.push('\n');
    }
    let path = dir.join("pairs.jsonl");
    io_util::write_atomic(&path, out.as_bytes())?;
    Ok(path)
}

pub fn load_pairs(path: &Path) -> Result<Vec<ParallelPair>> {
    let text = io_util::read_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (line, raw) in split_header(path, &text, "pairs", PAIRS_FORMAT_VERSION)? {
        let rec: PairRecord = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        let mel = read_mel(&base.join(&rec.synthetic_mel)).map_err(|e| e.context(format!("pair {}", rec.source)))?;
        if mel.n_frames() != rec.frames {
            return Err(Error::invariant(
                &rec.source,
                format!("sidecar has {} frames, manifest says {}", mel.n_frames(), rec.frames),
            ));
        }
        pairs.push(ParallelPair {
            source_id: rec.source,
            source_speaker: rec.source_speaker,
            prompt_id: rec.prompt,
            prompt_speaker: rec.prompt_speaker,
            synthetic_mel: mel,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mix_replaces_exactly_floor_sigma_b(b in 1usize..96, sigma in 0.0f64..=1.0, seed in any::<u64>()) {
            let mask = mix_batch(&vec![true; b], sigma, &mut stream(seed, Stream::Mix, 0)).unwrap();
            prop_assert_eq!(mask.len(), b);
            prop_assert_eq!(mask.iter().filter(|&&m| m).count(), (sigma * b as f64 + 1e-9).floor() as usize);
        }
    }

    #[test]
    fn mix_boundaries() {
        let mut rng = stream(0, Stream::Mix, 0);
        assert_eq!(mix_batch(&[true; 10], 0.0, &mut rng).unwrap(), vec![false; 10]);
        assert_eq!(mix_batch(&[true; 10], 1.0, &mut rng).unwrap(), vec![true; 10]);
        assert_eq!(n_replaced(0.7, 10), 7);
        assert_eq!(n_replaced(0.8, 64), 51);
        assert!(mix_batch(&[true; 10], 1.5, &mut rng).is_err());
        assert!(matches!(mix_batch(&[false; 10], 0.5, &mut rng), Err(Error::Precondition(_))));
        // A zero ratio never needs pairs.
        assert!(mix_batch(&[false; 10], 0.0, &mut rng).is_ok());
    }

    #[test]
    fn batches_without_replacement_when_possible() {
        let mut rng = stream(1, Stream::Batch, 0);
        let mut b = sample_batch(20, 8, &mut rng);
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 8);
        assert_eq!(sample_batch(3, 8, &mut rng).len(), 8);
    }
}
