//! Mel sidecar format: an 8-byte magic, then `T`, `F`, hop length and
//! sample rate as little-endian `u32`, then `T × F` little-endian `f32`
//! values in frame-major order.

use std::path::Path;

use super::MelSpectrogram;
use crate::error::{Error, Result};
use crate::io_util;

const MAGIC: &[u8; 8] = b"TCMEL\x00\x01\x00";
const HEADER_LEN: usize = 8 + 16;

pub fn encode_mel(mel: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + mel.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [mel.n_frames() as u32, mel.n_mels() as u32, mel.hop_length, mel.sample_rate] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in mel.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel(bytes: &[u8]) -> std::result::Result<MelSpectrogram, String> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err("not a mel sidecar file".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let (t, f, hop, sr) = (word(0) as usize, word(1) as usize, word(2), word(3));
    let body = &bytes[HEADER_LEN..];
    if body.len() != t * f * 4 {
        return Err(format!("mel body has {} bytes, header implies {}", body.len(), t * f * 4));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MelSpectrogram::new(data, t, f, hop, sr).map_err(|e| e.to_string())
}

pub fn write_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    io_util::write_atomic(path, &encode_mel(mel))
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = io_util::read(path)?;
    decode_mel(&bytes).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    })
}
