//! Corpus-facing types: mel-spectrograms, phoneme sequences, per-phoneme
//! attribute annotations, and the utterances that bundle them.

pub(crate) mod manifest;
mod mel_io;
mod synthetic;

use std::collections::BTreeMap;

use autograd::{Element, Tensor};

use crate::error::{Error, Result};

pub use manifest::{load_corpus, write_corpus, CORPUS_FORMAT_VERSION};
pub use mel_io::{decode_mel, encode_mel, read_mel, write_mel};
pub use synthetic::{make_synthetic_corpus, make_synthetic_corpus_with, phoneme_symbol, symbols_to_ids, SyntheticSpec, SyntheticWorld};

/// `T × F` log-amplitude filterbank energies, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    data: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
    pub hop_length: u32,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(data: Vec<f32>, n_frames: usize, n_mels: usize, hop_length: u32, sample_rate: u32) -> Result<Self> {
        let mel = Self {
            data,
            n_frames,
            n_mels,
            hop_length,
            sample_rate,
        };
        mel.check().map_err(|inv| Error::invariant("mel", inv))?;
        Ok(mel)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.n_frames == 0 {
            return Err("mel must have at least one frame".into());
        }
        if self.n_mels == 0 {
            return Err("mel must have at least one bin".into());
        }
        if self.data.len() != self.n_frames * self.n_mels {
            return Err(format!(
                "mel data has {} values, expected {} x {}",
                self.data.len(),
                self.n_frames,
                self.n_mels
            ));
        }
        if self.hop_length == 0 || self.sample_rate == 0 {
            return Err("hop_length and sample_rate must be positive".into());
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite mel value at frame {}", i / self.n_mels));
        }
        Ok(())
    }

    pub fn from_tensor<E: Element>(t: &Tensor<E>, hop_length: u32, sample_rate: u32) -> Result<Self> {
        let (n_frames, n_mels) = t.dims2();
        let data = t.data().iter().map(|v| v.f64() as f32).collect();
        Self::new(data, n_frames, n_mels, hop_length, sample_rate)
    }

    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::new(
            &[self.n_frames, self.n_mels],
            self.data.iter().map(|&v| E::c(v as f64)).collect(),
        )
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Audio duration the frames stand for, in seconds.
    pub fn duration_secs(&self) -> f64 {
        self.n_frames as f64 * self.hop_length as f64 / self.sample_rate as f64
    }
}

/// Opaque integer phoneme ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<u32>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> std::result::Result<(), String> {
        if self.ids.is_empty() {
            return Err("phoneme sequence is empty".into());
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(format!("phoneme id {id} outside vocabulary of {vocab_size}"));
        }
        Ok(())
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

/// Per-phoneme duration (frames), normalised log-F0 and energy.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeAnnotations {
    pub durations: Vec<u32>,
    pub pitch: Vec<f32>,
    pub energy: Vec<f32>,
}

impl AttributeAnnotations {
    pub fn total_frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }

    pub fn durations_usize(&self) -> Vec<usize> {
        self.durations.iter().map(|&d| d as usize).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// Unique locator within its corpus.
    pub id: String,
    pub speaker: String,
    pub mel: MelSpectrogram,
    pub phonemes: PhonemeSequence,
    pub annotations: AttributeAnnotations,
    pub text: String,
}

impl Utterance {
    /// Checks every utterance-level invariant, naming the first one broken.
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        self.check(vocab_size)
            .map_err(|inv| Error::invariant(&self.id, inv))
    }

    fn check(&self, vocab_size: Option<usize>) -> std::result::Result<(), String> {
        if self.speaker.is_empty() {
            return Err("speaker label is empty".into());
        }
        self.mel.check()?;
        if self.phonemes.is_empty() {
            return Err("phoneme sequence is empty".into());
        }
        if let Some(v) = vocab_size {
            self.phonemes.validate(v)?;
        }
        let l = self.phonemes.len();
        let a = &self.annotations;
        if a.durations.len() != l || a.pitch.len() != l || a.energy.len() != l {
            return Err(format!(
                "annotation lengths (durations {}, pitch {}, energy {}) must equal phoneme count {l}",
                a.durations.len(),
                a.pitch.len(),
                a.energy.len()
            ));
        }
        if let Some(i) = a.durations.iter().position(|&d| d == 0) {
            return Err(format!("duration of phoneme {i} is zero"));
        }
        if a.total_frames() != self.mel.n_frames() {
            return Err(format!(
                "sum(durations) = {} but mel has T = {} frames",
                a.total_frames(),
                self.mel.n_frames()
            ));
        }
        for (name, vals) in [("pitch", &a.pitch), ("energy", &a.energy)] {
            if let Some(i) = vals.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(format!("{name} of phoneme {i} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// An immutable, ordered collection of utterances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self { utterances }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Utterance> {
        self.utterances.iter()
    }

    pub fn get(&self, i: usize) -> &Utterance {
        &self.utterances[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.utterances.iter().position(|u| u.id == id)
    }

    /// Speaker label → utterance indices, speakers sorted by label.
    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, u) in self.utterances.iter().enumerate() {
            map.entry(u.speaker.as_str()).or_default().push(i);
        }
        map
    }

    pub fn speakers(&self) -> Vec<&str> {
        self.by_speaker().into_keys().collect()
    }

    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for u in &self.utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::invariant(&u.id, "duplicate utterance locator"));
            }
            u.validate(vocab_size)?;
        }
        Ok(())
    }

    /// Splits by speaker: the listed speakers go to the second dataset.
    pub fn split_speakers(&self, held_out: &[&str]) -> (Dataset, Dataset) {
        let (a, b): (Vec<_>, Vec<_>) = self
            .utterances
            .iter()
            .cloned()
            .partition(|u| !held_out.contains(&u.speaker.as_str()));
        (Dataset::new(a), Dataset::new(b))
    }
}
