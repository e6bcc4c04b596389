//! Model checkpoints.
//!
//! Layout: the magic bytes, a little-endian u32 format version, a u32 header
//! length and a JSON header (config, step, seed, kind, tensor table), then
//! every tensor as little-endian f32 in header order, and finally the
//! SHA-256 of everything before it.

use std::path::Path;

use autograd::{Element, ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io_util;
use crate::model::AcousticModel;

const MAGIC: &[u8; 8] = b"TCCKPT\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub step: u64,
    pub seed: u64,
    pub model: ModelConfig,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    #[serde(flatten)]
    meta: M,
    tensors: Vec<TensorInfo>,
}

/// Serialises every entry of `store` with `meta` as the header payload.
pub fn encode_store<E: Element, M: Serialize>(store: &ParamStore<E>, meta: &M) -> Vec<u8> {
    let tensors: Vec<_> = store
        .iter()
        .map(|(_, e)| TensorInfo {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.trainable,
        })
        .collect();
    let header = serde_json::to_vec(&Header { meta, tensors }).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, e) in store.iter() {
        for v in e.value.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn encode_checkpoint<E: Element>(model: &AcousticModel<E>, meta: &CheckpointMeta) -> Vec<u8> {
    encode_store(&model.store, meta)
}

pub fn save_checkpoint<E: Element>(path: &Path, model: &AcousticModel<E>, meta: &CheckpointMeta) -> Result<()> {
    io_util::write_atomic(path, &encode_checkpoint(model, meta))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// A verified checkpoint whose tensors have not yet been bound to a model.
struct Parsed<'a, M> {
    header: Header<M>,
    data: &'a [u8],
}

fn parse<M: DeserializeOwned>(bytes: &[u8]) -> Result<Parsed<'_, M>> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(bad("checksum cannot be verified: file is truncated"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let hlen = u32_at(12) as usize;
    let hstart = 16;
    if body.len() < hstart + hlen {
        return Err(bad("header is truncated"));
    }
    let header: Header<M> =
        serde_json::from_slice(&body[hstart..hstart + hlen]).map_err(|e| bad(format!("bad header: {e}")))?;
    let data = &body[hstart + hlen..];
    let expected: usize = header.tensors.iter().map(|t| 4 * t.shape.iter().product::<usize>()).sum();
    if data.len() != expected {
        return Err(bad(format!("{} bytes of tensor data, header describes {expected}", data.len())));
    }
    Ok(Parsed { header, data })
}

fn bind<E: Element, M>(parsed: &Parsed<'_, M>, store: &mut ParamStore<E>) -> Result<()> {
    let tensors = &parsed.header.tensors;
    if tensors.len() != store.len() {
        return Err(bad(format!(
            "{} tensors stored, architecture has {}",
            tensors.len(),
            store.len()
        )));
    }
    let mut loaded = Vec::with_capacity(tensors.len());
    let mut off = 0;
    for info in tensors {
        let id = store
            .id(&info.name)
            .ok_or_else(|| bad(format!("unknown tensor {}", info.name)))?;
        let expected = store.get(id).shape().to_vec();
        if expected != info.shape {
            return Err(bad(format!(
                "tensor {} has shape {:?}, architecture expects {expected:?}",
                info.name, info.shape
            )));
        }
        let end = off + 4 * info.shape.iter().product::<usize>();
        let data = parsed.data[off..end]
            .chunks_exact(4)
            .map(|c| E::c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        loaded.push((id, Tensor::new(&info.shape, data)));
        off = end;
    }
    for (id, t) in loaded {
        *store.get_mut(id) = t;
    }
    Ok(())
}

/// Rebuilds a model from checkpoint bytes, verifying the checksum, the
/// format version and that every tensor matches the architecture.
pub fn decode_checkpoint<E: Element>(bytes: &[u8]) -> Result<(AcousticModel<E>, CheckpointMeta)> {
    let parsed = parse::<CheckpointMeta>(bytes)?;
    let mut model = AcousticModel::<E>::new(&parsed.header.meta.model, 0)?;
    bind(&parsed, &mut model.store)?;
    Ok((model, parsed.header.meta))
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<(AcousticModel<E>, CheckpointMeta)> {
    decode_checkpoint(&io_util::read(path)?).map_err(|e| e.context(path.display().to_string()))
}

/// Overwrites the parameters of an existing model. Fails, leaving `model`
/// untouched, unless the stored configuration and every tensor agree with it.
pub fn load_checkpoint_into<E: Element>(path: &Path, model: &mut AcousticModel<E>) -> Result<CheckpointMeta> {
    let mut run = || {
        let bytes = io_util::read(path)?;
        let parsed = parse::<CheckpointMeta>(&bytes)?;
        if parsed.header.meta.model != model.cfg {
            return Err(bad("stored model configuration differs from the target model"));
        }
        bind(&parsed, &mut model.store)?;
        Ok(parsed.header.meta)
    };
    run().map_err(|e| e.context(path.display().to_string()))
}

/// Number of trainable scalars stored in checkpoint bytes. The timbre
/// embedder is frozen and never stored, so it does not count.
pub fn count_params_bytes(bytes: &[u8]) -> Result<usize> {
    let parsed = parse::<serde_json::Value>(bytes)?;
    Ok(parsed
        .header
        .tensors
        .iter()
        .filter(|t| t.trainable)
        .map(|t| t.shape.iter().product::<usize>())
        .sum())
}

pub fn count_params(path: &Path) -> Result<usize> {
    count_params_bytes(&io_util::read(path)?).map_err(|e| e.context(path.display().to_string()))
}
