//! Corpus manifest: JSON Lines. The first line is a header object carrying
//! `format_version`; every following line is one utterance record whose
//! mel lives in a sidecar file referenced relative to the manifest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_mel, write_mel, AttributeAnnotations, Dataset, PhonemeSequence, Utterance};
use crate::error::{Error, Result};
use crate::io_util;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    speaker: String,
    text: String,
    mel: String,
    phonemes: Vec<u32>,
    durations: Vec<u32>,
    pitch: Vec<f32>,
    energy: Vec<f32>,
}

pub(crate) fn header_line(kind: &str, version: u32) -> String {
    serde_json::to_string(&Header {
        format_version: version,
        kind: kind.into(),
    })
    .expect("header serialises")
}

/// Parses and checks the header line, returning the remaining lines with
/// their 1-based line numbers.
pub(crate) fn split_header<'a>(
    path: &Path,
    text: &'a str,
    kind: &str,
    version: u32,
) -> Result<Vec<(usize, &'a str)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |line, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (n, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header line".into()))?;
    let header: Header =
        serde_json::from_str(first).map_err(|e| parse_err(n, format!("bad header: {e}")))?;
    if header.kind != kind {
        return Err(parse_err(n, format!("expected a {kind} manifest, found {}", header.kind)));
    }
    if header.format_version != version {
        return Err(parse_err(
            n,
            format!("unsupported format_version {} (expected {version})", header.format_version),
        ));
    }
    Ok(lines.collect())
}

fn mel_rel_path(id: &str) -> String {
    format!("mels/{id}.mel")
}

/// Writes `dataset` under `dir` as `manifest.jsonl` plus one sidecar per
/// utterance. Returns the manifest path.
pub fn write_corpus(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate(None)?;
    let mut out = header_line("corpus", CORPUS_FORMAT_VERSION);
    out.push('\n');
    for u in dataset.iter() {
        let rel = mel_rel_path(&u.id);
        write_mel(&dir.join(&rel), &u.mel)?;
        let rec = Record {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            text: u.text.clone(),
            mel: rel,
            phonemes: u.phonemes.ids.clone(),
            durations: u.annotations.durations.clone(),
            pitch: u.annotations.pitch.clone(),
            energy: u.annotations.energy.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        out.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    io_util::write_atomic(&path, out.as_bytes())?;
    Ok(path)
}

/// Loads and validates every entry, preserving manifest order.
pub fn load_corpus(manifest_path: &Path) -> Result<Dataset> {
    let text = io_util::read_string(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut utterances = Vec::new();
    for (line, raw) in split_header(manifest_path, &text, "corpus", CORPUS_FORMAT_VERSION)? {
        let rec: Record = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: manifest_path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::invariant(&rec.id, "duplicate utterance locator"));
        }
        let mel = read_mel(&base.join(&rec.mel)).map_err(|e| e.context(format!("entry {}", rec.id)))?;
        let utt = Utterance {
            id: rec.id,
            speaker: rec.speaker,
            mel,
            phonemes: PhonemeSequence::new(rec.phonemes),
            annotations: AttributeAnnotations {
                durations: rec.durations,
                pitch: rec.pitch,
                energy: rec.energy,
            },
            text: rec.text,
        };
        utt.validate(None)?;
        utterances.push(utt);
    }
    Ok(Dataset::new(utterances))
}
