//! Deterministic synthetic corpora.
//!
//! A synthetic speaker is a smooth spectral envelope (level plus two broad
//! bumps) together with a speaking rate, pitch level and loudness. A
//! phoneme is a fine-grained ±1 pattern across mel bins. Each frame of an
//! utterance is
//!
//! ```text
//! mel[t, f] = envelope_s[f] + energy_i · pattern_p[f] + pitch_i · pitch_bump[f] + noise
//! ```
//!
//! so speaker identity lives in the smooth part of the spectrum and content
//! in the fine structure. The split is what lets the synthetic transcriber
//! recover phonemes and lets a stub embedder tell speakers apart.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{AttributeAnnotations, Dataset, MelSpectrogram, PhonemeSequence, Utterance};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_mels: usize,
    pub vocab_size: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Utterances shorter than this are padded on their last phoneme.
    pub min_frames: usize,
    pub noise_std: f64,
    pub hop_length: u32,
    pub sample_rate: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_mels: 80,
            vocab_size: 40,
            min_phonemes: 6,
            max_phonemes: 12,
            min_frames: 16,
            noise_std: 0.05,
            hop_length: 256,
            sample_rate: 16000,
        }
    }
}

#[derive(Clone, Debug)]
struct SpeakerProfile {
    envelope: Vec<f64>,
    frames_per_phoneme: f64,
    pitch_level: f64,
    loudness: f64,
}

/// The fixed generative templates behind a synthetic corpus.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    seed: u64,
    patterns: Vec<Vec<f64>>,
    pitch_bump: Vec<f64>,
}

fn bump(n: usize, center: f64, width: f64) -> Vec<f64> {
    (0..n)
        .map(|f| {
            let x = (f as f64 - center) / width;
            (-0.5 * x * x).exp()
        })
        .collect()
}

const SYMBOLS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Single-character symbol for a phoneme id, used for CER strings.
pub fn phoneme_symbol(id: u32) -> char {
    SYMBOLS.get(id as usize).map(|&b| b as char).unwrap_or('?')
}

/// Inverse of [`phoneme_symbol`]; unknown characters are skipped.
pub fn symbols_to_ids(s: &str) -> Vec<u32> {
    s.bytes()
        .filter_map(|b| SYMBOLS.iter().position(|&c| c == b).map(|p| p as u32))
        .collect()
}

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec, seed: u64) -> Result<Self> {
        if spec.vocab_size < 2 || spec.vocab_size > SYMBOLS.len() {
            return Err(Error::InvalidArgument(format!(
                "synthetic vocabulary must be in 2..={}",
                SYMBOLS.len()
            )));
        }
        if spec.n_mels < 4 || spec.min_phonemes == 0 || spec.min_phonemes > spec.max_phonemes {
            return Err(Error::InvalidArgument("degenerate synthetic corpus settings".into()));
        }
        let mut rng = stream(seed, Stream::Corpus, u64::MAX);
        let patterns = (0..spec.vocab_size)
            .map(|_| {
                (0..spec.n_mels)
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.6..1.0))
                    .collect()
            })
            .collect();
        let f = spec.n_mels as f64;
        let pitch_bump = bump(spec.n_mels, 0.15 * f, 0.12 * f);
        Ok(Self {
            spec,
            seed,
            patterns,
            pitch_bump,
        })
    }

    /// Phoneme template across mel bins.
    pub fn pattern(&self, phoneme: u32) -> &[f64] {
        &self.patterns[phoneme as usize]
    }

    fn speaker(&self, index: usize) -> SpeakerProfile {
        let mut rng = stream(self.seed, Stream::Corpus, index as u64);
        let f = self.spec.n_mels as f64;
        let level = rng.random_range(-2.6..-1.4);
        let b1 = bump(self.spec.n_mels, rng.random_range(0.1..0.5) * f, 0.12 * f);
        let b2 = bump(self.spec.n_mels, rng.random_range(0.5..0.9) * f, 0.15 * f);
        let (a1, a2): (f64, f64) = (rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2));
        let envelope = (0..self.spec.n_mels)
            .map(|i| level + a1 * b1[i] + a2 * b2[i])
            .collect();
        SpeakerProfile {
            envelope,
            frames_per_phoneme: rng.random_range(3.0..6.0),
            pitch_level: rng.random_range(0.3..0.9),
            loudness: rng.random_range(0.7..1.2),
        }
    }

    fn utterance(&self, speaker: usize, index: usize) -> Utterance {
        let spec = &self.spec;
        let profile = self.speaker(speaker);
        let mut rng = stream(self.seed, Stream::Corpus, ((speaker as u64 + 1) << 24) | index as u64);
        let jitter = Normal::new(0.0, 0.08).unwrap();
        let noise = Normal::new(0.0, spec.noise_std).unwrap();

        let l = rng.random_range(spec.min_phonemes..=spec.max_phonemes);
        let mut ids: Vec<u32> = Vec::with_capacity(l);
        while ids.len() < l {
            let p = rng.random_range(0..spec.vocab_size as u32);
            if ids.last() != Some(&p) {
                ids.push(p);
            }
        }
        let mut durations: Vec<u32> = (0..l)
            .map(|_| (profile.frames_per_phoneme * rng.random_range(0.6..1.4)).round().max(2.0) as u32)
            .collect();
        let total: u32 = durations.iter().sum();
        if (total as usize) < spec.min_frames {
            *durations.last_mut().unwrap() += spec.min_frames as u32 - total;
        }
        let pitch: Vec<f32> = ids
            .iter()
            .map(|&p| {
                let contour = 0.1 * (p % 5) as f64 / 4.0;
                (profile.pitch_level + contour + jitter.sample(&mut rng)).max(0.0) as f32
            })
            .collect();
        let energy: Vec<f32> = (0..l)
            .map(|_| (profile.loudness * (1.0 + jitter.sample(&mut rng))).max(0.0) as f32)
            .collect();

        let n_frames: usize = durations.iter().map(|&d| d as usize).sum();
        let mut data = Vec::with_capacity(n_frames * spec.n_mels);
        for i in 0..l {
            let pat = &self.patterns[ids[i] as usize];
            for _ in 0..durations[i] {
                for f in 0..spec.n_mels {
                    let v = profile.envelope[f]
                        + energy[i] as f64 * pat[f]
                        + pitch[i] as f64 * self.pitch_bump[f]
                        + noise.sample(&mut rng);
                    data.push(v as f32);
                }
            }
        }
        let mel = MelSpectrogram::new(data, n_frames, spec.n_mels, spec.hop_length, spec.sample_rate)
            .expect("generator emits valid mels");
        Utterance {
            id: format!("spk{speaker:03}_utt{index:04}"),
            speaker: format!("spk{speaker:03}"),
            text: ids.iter().map(|&p| phoneme_symbol(p)).collect(),
            mel,
            phonemes: PhonemeSequence::new(ids),
            annotations: AttributeAnnotations {
                durations,
                pitch,
                energy,
            },
        }
    }

    pub fn corpus(&self, n_speakers: usize, utts_per_speaker: usize) -> Result<Dataset> {
        if n_speakers == 0 || utts_per_speaker == 0 {
            return Err(Error::InvalidArgument(
                "n_speakers and utts_per_speaker must be positive".into(),
            ));
        }
        let utterances = (0..n_speakers)
            .flat_map(|s| (0..utts_per_speaker).map(move |u| (s, u)))
            .map(|(s, u)| self.utterance(s, u))
            .collect();
        Ok(Dataset::new(utterances))
    }
}

/// `n_speakers × utts_per_speaker` utterances with [`SyntheticSpec::default`] settings.
pub fn make_synthetic_corpus(n_speakers: usize, utts_per_speaker: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_corpus_with(&SyntheticSpec::default(), n_speakers, utts_per_speaker, seed)
}

pub fn make_synthetic_corpus_with(
    spec: &SyntheticSpec,
    n_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
) -> Result<Dataset> {
    SyntheticWorld::new(spec.clone(), seed)?.corpus(n_speakers, utts_per_speaker)
}
