//! Binary checkpoints: `SGTMCKPT`, a little-endian `u32` version and `u64`
//! header length, a JSON header, then every tensor as raw little-endian
//! floats in header order. See `docs/FORMATS.md`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Param, ParamSet};
use crate::partition::{ParamDesignation, PartitionSpec};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"SGTMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

/// Everything about a checkpoint except the tensor data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Present for runs trained with a parameter partition.
    #[serde(default)]
    pub partition: Option<PartitionSpec>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
    /// Seed of the run that produced it.
    pub seed: u64,
    /// True once the forget parameters have been zeroed.
    #[serde(default)]
    pub ablated: bool,
    /// The experiment configuration of the producing run, if any.
    #[serde(default)]
    pub experiment: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: CheckpointMeta,
    #[serde(default)]
    designation: Option<serde_json::Value>,
    dtype: String,
    tensors: Vec<TensorEntry>,
    /// Hex SHA-256 of the tensor payload.
    payload_sha256: String,
}

pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ParamSet<T>,
    pub designation: Option<ParamDesignation>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn width<T: Float>() -> usize {
    std::mem::size_of::<T>()
}

/// Writes a checkpoint through a temporary file so readers never see a
/// partial one.
pub fn save<T: Float>(path: &Path, meta: &CheckpointMeta, params: &ParamSet<T>) -> Result<()> {
    params.check_layout(&meta.model)?;
    let designation = match &meta.partition {
        Some(spec) => Some(crate::partition::build_designation(&meta.model, spec)?.to_json()),
        None => None,
    };
    let mut payload = Vec::with_capacity(params.n_elements() * width::<T>());
    for p in params.iter() {
        for &x in p.value.data() {
            match width::<T>() {
                4 => payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
                _ => payload.extend_from_slice(&x.as_f64().to_le_bytes()),
            }
        }
    }
    let header = Header {
        meta: meta.clone(),
        designation,
        dtype: T::NAME.to_string(),
        tensors: params.iter().map(|p| TensorEntry { path: p.path.clone(), shape: p.value.shape().to_vec() }).collect(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&payload)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint into precision `T`, converting if it was stored in
/// the other one.
pub fn load<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let bytes = fs::read(path)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[20 + hlen..];
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch".into()));
    }
    let w = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unknown dtype {other}"))),
    };
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * w {
        return Err(bad(format!("payload holds {} bytes, tensors need {}", payload.len(), expected * w)));
    }
    let mut offset = 0;
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let chunk = &payload[offset..offset + n * w];
        offset += n * w;
        let data: Vec<T> = match w {
            4 => chunk.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect(),
            _ => chunk.chunks_exact(8).map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes")))).collect(),
        };
        params.push(Param { path: t.path.clone(), value: Tensor::new(t.shape.clone(), data)? });
    }
    let params = ParamSet::from_params(params);
    params.check_layout(&header.meta.model).map_err(|e| bad(e.to_string()))?;
    let designation = match (&header.meta.partition, &header.designation) {
        (Some(spec), Some(stored)) => Some(ParamDesignation::from_json(&header.meta.model, spec, stored)?),
        (None, None) => None,
        _ => return Err(bad("partition spec and designation must be stored together".into())),
    };
    Ok(Checkpoint { meta: header.meta, params, designation })
}
