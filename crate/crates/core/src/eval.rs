//! Objective metrics: speaker similarity, character error rate and
//! real-time factor, plus embedding export and the mixing-ratio sweep.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use autograd::Element;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{phoneme_symbol, Dataset, MelSpectrogram, Utterance};
use crate::distill::{train_student, ParallelPair, TrainLog};
use crate::error::{Error, Result};
use crate::io_util;
use crate::model::{AcousticModel, DurationSource, TimbreEmbedder};
use crate::rng::{stream, Stream};

/// `a · b / (‖a‖ ‖b‖)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over characters divided by the reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    if r.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

/// Text-plus-prompt to mel.
pub trait Synthesizer {
    fn synthesize(&self, phonemes: &[usize], prompt: &Utterance) -> Result<MelSpectrogram>;
}

/// Mel to symbol string.
pub trait Transcriber {
    fn transcribe(&self, mel: &MelSpectrogram) -> Result<String>;
}

/// Text-only inference with predicted durations and a fixed noise seed.
pub struct ModelSynthesizer<'a, E: Element> {
    pub model: &'a AcousticModel<E>,
    pub noise_scale: f64,
    pub seed: u64,
}

impl<E: Element> Synthesizer for ModelSynthesizer<'_, E> {
    fn synthesize(&self, phonemes: &[usize], prompt: &Utterance) -> Result<MelSpectrogram> {
        let syn = self.model.synthesize(
            phonemes,
            &prompt.mel,
            &DurationSource::Predicted,
            self.noise_scale,
            &mut stream(self.seed, Stream::Eval, 0),
        )?;
        MelSpectrogram::from_tensor(&syn.mel, prompt.mel.hop_length, prompt.mel.sample_rate)
    }
}

/// Phoneme recogniser for synthetic corpora. Each frame, with its
/// utterance's time-average removed (which cancels the speaker's spectral
/// envelope), is labelled with the phoneme template of highest cosine;
/// runs shorter than `min_run` frames are dropped and repeated labels
/// collapse.
#[derive(Clone, Debug)]
pub struct SyntheticTranscriber {
    templates: Vec<Option<Vec<f64>>>,
    pub min_run: usize,
}

fn centred_frames(mel: &MelSpectrogram) -> Vec<Vec<f64>> {
    let (t, f) = (mel.n_frames(), mel.n_mels());
    let mut mean = vec![0.0; f];
    for i in 0..t {
        for (m, &v) in mean.iter_mut().zip(mel.frame(i)) {
            *m += v as f64 / t as f64;
        }
    }
    (0..t)
        .map(|i| mel.frame(i).iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
        .collect()
}

impl SyntheticTranscriber {
    /// Fits one template per phoneme from annotated utterances.
    pub fn fit(data: &Dataset, vocab_size: usize) -> Result<Self> {
        let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; vocab_size];
        for u in data.iter() {
            let frames = centred_frames(&u.mel);
            let mut t = 0;
            for (&p, &d) in u.phonemes.ids.iter().zip(&u.annotations.durations) {
                let slot = sums
                    .get_mut(p as usize)
                    .ok_or_else(|| Error::invariant(&u.id, format!("phoneme {p} outside vocabulary")))?;
                let (acc, n) = slot.get_or_insert_with(|| (vec![0.0; u.mel.n_mels()], 0));
                for frame in &frames[t..t + d as usize] {
                    for (a, v) in acc.iter_mut().zip(frame) {
                        *a += v;
                    }
                    *n += 1;
                }
                t += d as usize;
            }
        }
        let templates = sums
            .into_iter()
            .map(|s| s.map(|(acc, n)| acc.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Ok(Self { templates, min_run: 2 })
    }

    fn classify(&self, frame: &[f64]) -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (p, tpl) in self.templates.iter().enumerate() {
            if let Some(tpl) = tpl {
                if let Ok(c) = cosine_sim(frame, tpl) {
                    if c > best.0 {
                        best = (c, p);
                    }
                }
            }
        }
        best.1
    }
}

impl Transcriber for SyntheticTranscriber {
    fn transcribe(&self, mel: &MelSpectrogram) -> Result<String> {
        let labels: Vec<usize> = centred_frames(mel).iter().map(|f| self.classify(f)).collect();
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for l in labels {
            match runs.last_mut() {
                Some((p, n)) if *p == l => *n += 1,
                _ => runs.push((l, 1)),
            }
        }
        let mut out = String::new();
        let mut last = None;
        for (p, n) in runs {
            if n >= self.min_run && last != Some(p) {
                out.push(phoneme_symbol(p as u32));
                last = Some(p);
            }
        }
        Ok(out)
    }
}

/// One evaluation case: synthesise `text`'s phonemes in `prompt`'s voice.
#[derive(Clone, Copy, Debug)]
pub struct EvalItem<'a> {
    pub prompt: &'a Utterance,
    pub text: &'a Utterance,
}

/// Pairs every utterance with the next utterance of the same speaker as
/// prompt (itself when the speaker has only one).
pub fn eval_items(data: &Dataset) -> Vec<EvalItem<'_>> {
    let mut items = Vec::new();
    for idx in data.by_speaker().values() {
        for (k, &i) in idx.iter().enumerate() {
            let p = idx[(k + 1) % idx.len()];
            items.push(EvalItem {
                prompt: data.get(p),
                text: data.get(i),
            });
        }
    }
    items
}

fn synth_item(synth: &dyn Synthesizer, item: &EvalItem<'_>) -> Result<MelSpectrogram> {
    synth
        .synthesize(&item.text.phonemes.as_usize(), item.prompt)
        .map_err(|e| e.context(format!("synthesising {} with prompt {}", item.text.id, item.prompt.id)))
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation items".into()));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean cosine similarity between embeddings of each synthesised mel and its
/// prompt.
pub fn eval_sim(synth: &dyn Synthesizer, items: &[EvalItem<'_>], embedder: &dyn TimbreEmbedder<f64>) -> Result<f64> {
    let sims = items
        .iter()
        .map(|it| {
            let mel = synth_item(synth, it)?;
            cosine_sim(&embedder.embed_mel(&mel), &embedder.embed_mel(&it.prompt.mel))
        })
        .collect::<Result<Vec<_>>>()?;
    mean(&sims)
}

/// Mean per-item CER of transcribed synthesis against the item's text.
pub fn eval_cer(synth: &dyn Synthesizer, items: &[EvalItem<'_>], transcriber: &dyn Transcriber) -> Result<f64> {
    let cers = items
        .iter()
        .map(|it| cer(&it.text.text, &transcriber.transcribe(&synth_item(synth, it)?)?))
        .collect::<Result<Vec<_>>>()?;
    mean(&cers)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    /// Median over the timed repeats.
    pub rtf: f64,
    /// RTF of every timed repeat, in order.
    pub runs: Vec<f64>,
    pub warmup_runs: usize,
    /// Synthesised audio per repeat, in seconds.
    pub audio_secs: f64,
}

/// Synthesis wall time over synthesised audio duration for the whole item
/// list, repeated `repeats` times after `warmup` untimed passes. Vocoding is
/// not part of the pipeline and so not timed.
pub fn measure_rtf(synth: &dyn Synthesizer, items: &[EvalItem<'_>], repeats: usize, warmup: usize) -> Result<RtfReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    for _ in 0..warmup {
        for it in items {
            synth_item(synth, it)?;
        }
    }
    let mut runs = Vec::with_capacity(repeats);
    let mut audio_secs = 0.0;
    for _ in 0..repeats {
        let mut elapsed = Duration::ZERO;
        let mut audio = 0.0;
        for it in items {
            let start = Instant::now();
            let mel = synth_item(synth, it)?;
            elapsed += start.elapsed();
            audio += mel.duration_secs();
        }
        if !(audio > 0.0) {
            return Err(Error::Precondition("synthesised audio has zero duration".into()));
        }
        audio_secs = audio;
        runs.push(elapsed.as_secs_f64() / audio);
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rtf = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(RtfReport {
        rtf,
        runs,
        warmup_runs: warmup,
        audio_secs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sim_mean: f64,
    pub cer: f64,
    pub rtf: f64,
    pub n_items: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFlag {
    Real,
    Synthetic,
}

impl EmbeddingFlag {
    fn as_str(self) -> &'static str {
        match self {
            EmbeddingFlag::Real => "real",
            EmbeddingFlag::Synthetic => "synthetic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub flag: EmbeddingFlag,
    pub speaker: String,
    pub vector: Vec<f32>,
}

/// Everything one evaluation pass produces.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rtf: RtfReport,
    /// A real and a synthetic row per item.
    pub embeddings: Vec<EmbeddingRow>,
}

/// SIM, CER, RTF and embedding rows over `items`, synthesising each item
/// once for the quality metrics.
pub fn evaluate(
    synth: &dyn Synthesizer,
    items: &[EvalItem<'_>],
    embedder: &dyn TimbreEmbedder<f64>,
    transcriber: &dyn Transcriber,
    rtf_repeats: usize,
    rtf_warmup: usize,
) -> Result<Evaluation> {
    let mut sims = Vec::with_capacity(items.len());
    let mut cers = Vec::with_capacity(items.len());
    let mut embeddings = Vec::with_capacity(2 * items.len());
    for it in items {
        let mel = synth_item(synth, it)?;
        let e_syn = embedder.embed_mel(&mel);
        let e_prompt = embedder.embed_mel(&it.prompt.mel);
        sims.push(cosine_sim(&e_syn, &e_prompt)?);
        cers.push(cer(&it.text.text, &transcriber.transcribe(&mel)?)?);
        let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
        embeddings.push(EmbeddingRow {
            flag: EmbeddingFlag::Real,
            speaker: it.text.speaker.clone(),
            vector: to32(embedder.embed_mel(&it.text.mel)),
        });
        embeddings.push(EmbeddingRow {
            flag: EmbeddingFlag::Synthetic,
            speaker: it.prompt.speaker.clone(),
            vector: to32(e_syn),
        });
    }
    let rtf = measure_rtf(synth, items, rtf_repeats, rtf_warmup)?;
    Ok(Evaluation {
        report: EvalReport {
            sim_mean: mean(&sims)?,
            cer: mean(&cers)?,
            rtf: rtf.rtf,
            n_items: items.len(),
        },
        rtf,
        embeddings,
    })
}

/// Space-separated table: a header, then `flag speaker v0 v1 ...` per row.
pub fn format_embeddings(rows: &[EmbeddingRow]) -> Result<String> {
    let dim = rows.first().map(|r| r.vector.len()).unwrap_or(0);
    let mut out = String::from("flag speaker");
    for k in 0..dim {
        out.push_str(&format!(" e{k}"));
    }
    out.push('\n');
    for r in rows {
        if r.vector.len() != dim {
            return Err(Error::Shape(format!("embedding rows of width {dim} and {}", r.vector.len())));
        }
        if r.speaker.is_empty() || r.speaker.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("speaker label {:?} cannot be exported", r.speaker)));
        }
        out.push_str(r.flag.as_str());
        out.push(' ');
        out.push_str(&r.speaker);
        for v in &r.vector {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(rows: &[EmbeddingRow], path: &Path) -> Result<()> {
    io_util::write_atomic(path, format_embeddings(rows)?.as_bytes())
}

pub fn parse_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = io_util::read_string(path)?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let dim = match lines.next() {
        Some((_, h)) if h.starts_with("flag speaker") => h.split(' ').count() - 2,
        _ => return Err(err(1, "missing header".into())),
    };
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut cols = l.split(' ');
            let flag = match cols.next() {
                Some("real") => EmbeddingFlag::Real,
                Some("synthetic") => EmbeddingFlag::Synthetic,
                other => return Err(err(i + 1, format!("bad flag {other:?}"))),
            };
            let speaker = cols.next().ok_or_else(|| err(i + 1, "missing speaker".into()))?.to_string();
            let vector = cols
                .map(|c| c.parse::<f32>().map_err(|e| err(i + 1, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if vector.len() != dim {
                return Err(err(i + 1, format!("{} values, header declares {dim}", vector.len())));
            }
            Ok(EmbeddingRow { flag, speaker, vector })
        })
        .collect()
}

/// Mean over speakers of the Euclidean distance between the centroids of
/// their real and synthetic unit-normalised embeddings. Speakers missing
/// from either side are skipped.
pub fn centroid_distance(rows: &[EmbeddingRow]) -> Result<f64> {
    let mut cents: BTreeMap<(&str, EmbeddingFlag), (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let norm = r.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument(format!("zero embedding for {}", r.speaker)));
        }
        let (acc, n) = cents
            .entry((r.speaker.as_str(), r.flag))
            .or_insert_with(|| (vec![0.0; r.vector.len()], 0));
        for (a, &v) in acc.iter_mut().zip(&r.vector) {
            *a += v as f64 / norm;
        }
        *n += 1;
    }
    let mut dists = Vec::new();
    for ((spk, flag), (real, nr)) in &cents {
        if *flag != EmbeddingFlag::Real {
            continue;
        }
        if let Some((syn, ns)) = cents.get(&(*spk, EmbeddingFlag::Synthetic)) {
            let d = real
                .iter()
                .zip(syn)
                .map(|(a, b)| (a / *nr as f64 - b / *ns as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            dists.push(d);
        }
    }
    if dists.is_empty() {
        return Err(Error::Precondition("no speaker has both real and synthetic rows".into()));
    }
    mean(&dists)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub sim_mean: f64,
    pub cer: f64,
    pub rtf: f64,
    pub n_items: usize,
    pub centroid_distance: f64,
    pub final_rec: f64,
}

/// Trains one student per mixing ratio and evaluates it on `test`. The
/// evaluation embedder is built from `cfg.eval.eval_embedder_seed`.
pub fn sigma_sweep(
    cfg: &RunConfig,
    train: &Dataset,
    pairs: &[ParallelPair],
    test: &Dataset,
    transcriber: &dyn Transcriber,
    sigmas: &[f64],
) -> Result<Vec<SweepRow>> {
    if let Some(s) = sigmas.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("sigma {s} outside [0, 1]")));
    }
    let embedder = crate::model::StubEmbedder::new(cfg.eval.eval_embedder_seed, cfg.model.n_mels, cfg.model.d_raw);
    let items = eval_items(test);
    sigmas
        .iter()
        .map(|&sigma| {
            let run = || -> Result<SweepRow> {
                let mut c = cfg.clone();
                c.distill.sigma = sigma;
                let out = train_student::<f32>(&c, train, pairs, &TrainLog::default())?;
                let synth = ModelSynthesizer {
                    model: &out.trainer.model,
                    noise_scale: cfg.eval.synth_noise_scale,
                    seed: cfg.eval.synth_seed,
                };
                let ev = evaluate(&synth, &items, &embedder, transcriber, cfg.eval.rtf_repeats, cfg.eval.rtf_warmup)?;
                Ok(SweepRow {
                    sigma,
                    sim_mean: ev.report.sim_mean,
                    cer: ev.report.cer,
                    rtf: ev.report.rtf,
                    n_items: ev.report.n_items,
                    centroid_distance: centroid_distance(&ev.embeddings)?,
                    final_rec: out.history.last().map(|r| r.rec).unwrap_or(f64::NAN),
                })
            };
            run().map_err(|e| e.context(format!("sigma {sigma}")))
        })
        .collect()
}

/// Tab-separated sweep table with a header row.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("sigma\tsim_mean\tcer\trtf\tn_items\tcentroid_distance\tfinal_rec\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}\t{:.6}\n",
            r.sigma, r.sim_mean, r.cer, r.rtf, r.n_items, r.centroid_distance, r.final_rec
        ));
    }
    out
}
