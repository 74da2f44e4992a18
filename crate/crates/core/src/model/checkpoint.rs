//! Single-file checkpoint container.
//!
//! ```text
//! magic "PRLBCKPT" | version u32 | header_len u64 | header (JSON) | payload | crc32 u32
//! ```
//!
//! All integers are little-endian. The header holds the spec, training
//! metadata and a tensor index of `(name, shape, offset, numel, trainable)`;
//! the payload is the raw little-endian tensor data in index order. The CRC
//! covers every byte before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, TransformerModel, TransformerSpec};
use crate::numeric::{DType, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PRLBCKPT";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub dataset_fingerprint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    numel: u64,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    spec: TransformerSpec,
    metadata: TrainingMetadata,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real = f32> {
    pub model: TransformerModel<T>,
    pub metadata: TrainingMetadata,
}

pub fn encode_checkpoint<T: Real>(model: &TransformerModel<T>, metadata: &TrainingMetadata) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_params() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            numel: t.numel() as u64,
            trainable: t.requires_grad(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        spec: model.spec().clone(),
        metadata: metadata.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(24 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
        return Err(Error::Checksum);
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(Error::Checksum);
    }
    if &body[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Checkpoint("header length out of range".into()))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header version disagrees with preamble".into()));
    }
    let payload = &body[header_end..];
    let width = header.dtype.size_bytes();

    let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for e in &header.tensors {
        let start = e.offset as usize;
        let end = start + e.numel as usize * width;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {} exceeds payload", e.name)));
        }
        let raw = &payload[start..end];
        let data: Vec<T> = match header.dtype {
            d if d == T::DTYPE => raw.chunks(width).map(T::read_le).collect(),
            DType::F32 => raw.chunks(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(e.shape.clone(), data)?.with_requires_grad(e.trainable);
        tensors.insert(e.name.clone(), t);
    }

    let spec = header.spec;
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let embedding = take("embed")?;
    let position = match spec.positional {
        crate::model::Positional::Learned => Some(take("pos")?),
        crate::model::Positional::Rope => None,
    };
    let mut layers = Vec::with_capacity(spec.layers);
    for i in 0..spec.layers {
        let mut f = |n: &str| take(&format!("layers.{i}.{n}"));
        layers.push(LayerWeights {
            attn_norm: f("attn_norm")?,
            wq: f("wq")?,
            wk: f("wk")?,
            wv: f("wv")?,
            wo: f("wo")?,
            ffn_norm: f("ffn_norm")?,
            w_gate: f("w_gate")?,
            w_up: f("w_up")?,
            w_down: f("w_down")?,
        });
    }
    let final_norm = take("final_norm")?;
    let lm_head = if spec.tie_embeddings { None } else { Some(take("lm_head")?) };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    let model = TransformerModel::from_parts(spec, embedding, position, layers, final_norm, lm_head)?;
    check_shapes(&model)?;
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

fn check_shapes<T: Real>(model: &TransformerModel<T>) -> Result<()> {
    let reference = TransformerModel::<T>::new(model.spec().clone(), 0)?;
    for ((name, a), (_, b)) in model.named_params().iter().zip(reference.named_params()) {
        if a.shape() != b.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, spec implies {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(model: &TransformerModel<T>, metadata: &TrainingMetadata, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(model, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
