//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "COGO" (4 bytes)
//! u16 version
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims..., f32 LE data
//! UTF-8 metadata trailer (JSON) to end of file
//! ```
//!
//! Saving is bit-exact: identical weights and metadata produce identical
//! bytes, and a save/load/save cycle reproduces the file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CogoError, Result};
use crate::tensor::Tensor;
use crate::vit::{Model, ModelSpec};

const MAGIC: &[u8; 4] = b"COGO";
const VERSION: u16 = 1;

/// Training provenance stored in the metadata trailer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epochs: usize,
    pub final_accuracy: f32,
    #[serde(default)]
    pub optimizer: String,
    #[serde(default)]
    pub per_epoch_loss: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Checkpoint {
            weights: model.weights().clone(),
            meta,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_weights(self.meta.spec.clone(), self.weights)
    }

    /// Error (naming the first differing field) unless the stored spec
    /// matches `expected`.
    pub fn require_spec(&self, expected: &ModelSpec) -> Result<()> {
        let s = &self.meta.spec;
        let fields: [(&'static str, String, String); 7] = [
            ("variant", s.variant.to_string(), expected.variant.to_string()),
            ("image_size", s.image_size.to_string(), expected.image_size.to_string()),
            ("patch_size", s.patch_size.to_string(), expected.patch_size.to_string()),
            ("embed_dim", s.embed_dim.to_string(), expected.embed_dim.to_string()),
            ("heads", s.heads.to_string(), expected.heads.to_string()),
            ("depth", s.depth.to_string(), expected.depth.to_string()),
            ("num_classes", s.num_classes.to_string(), expected.num_classes.to_string()),
        ];
        for (field, file, want) in fields {
            if file != want {
                return Err(CogoError::SpecMismatch {
                    field,
                    file,
                    expected: want,
                });
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(ckpt.weights.len())
        .map_err(|_| CogoError::Checkpoint("too many tensors".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in &ckpt.weights {
        if !tensor.is_finite() {
            return Err(CogoError::NonFinite {
                context: format!("checkpoint tensor '{name}'"),
            });
        }
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| CogoError::Checkpoint(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let ndim = u8::try_from(tensor.shape().len())
            .map_err(|_| CogoError::Checkpoint(format!("tensor rank too high: {name}")))?;
        buf.push(ndim);
        for &dim in tensor.shape() {
            let d = u32::try_from(dim)
                .map_err(|_| CogoError::Checkpoint(format!("dimension too large: {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_string(&ckpt.meta)?;
    buf.extend_from_slice(meta.as_bytes());
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn read_exact(cur: &mut Cursor<&[u8]>, out: &mut [u8], what: &str) -> Result<()> {
    cur.read_exact(out)
        .map_err(|_| CogoError::Checkpoint(format!("truncated file while reading {what}")))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(&path)?;
    let mut cur = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    read_exact(&mut cur, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CogoError::Checkpoint(format!(
            "bad magic {magic:?}, not a checkpoint file"
        )));
    }
    let mut v2 = [0u8; 2];
    read_exact(&mut cur, &mut v2, "version")?;
    let version = u16::from_le_bytes(v2);
    if version != VERSION {
        return Err(CogoError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut c4 = [0u8; 4];
    read_exact(&mut cur, &mut c4, "tensor count")?;
    let count = u32::from_le_bytes(c4) as usize;
    let mut weights = BTreeMap::new();
    for _ in 0..count {
        let mut l2 = [0u8; 2];
        read_exact(&mut cur, &mut l2, "name length")?;
        let name_len = u16::from_le_bytes(l2) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut cur, &mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| CogoError::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut nd = [0u8; 1];
        read_exact(&mut cur, &mut nd, "rank")?;
        let mut shape = Vec::with_capacity(nd[0] as usize);
        for _ in 0..nd[0] {
            read_exact(&mut cur, &mut c4, "dimension")?;
            shape.push(u32::from_le_bytes(c4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        for v in &mut data {
            read_exact(&mut cur, &mut c4, "tensor data")?;
            *v = f32::from_le_bytes(c4);
        }
        let tensor = Tensor::new(shape, data)?;
        if !tensor.is_finite() {
            return Err(CogoError::NonFinite {
                context: format!("checkpoint tensor '{name}'"),
            });
        }
        if weights.insert(name.clone(), tensor).is_some() {
            return Err(CogoError::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }
    let pos = cur.position() as usize;
    let meta_str = std::str::from_utf8(&bytes[pos..])
        .map_err(|_| CogoError::Checkpoint("metadata trailer is not UTF-8".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_str)
        .map_err(|e| CogoError::Checkpoint(format!("bad metadata trailer: {e}")))?;

    // weight names must match the parameter set of the stored spec exactly
    let reference = crate::vit::build(&meta.spec, &mut crate::rng::CogoRng::new(0, 0))?;
    let expected: Vec<&String> = reference.weights().keys().collect();
    let got: Vec<&String> = weights.keys().collect();
    if expected != got {
        return Err(CogoError::Checkpoint(format!(
            "weight names do not match the '{}' parameter set (got {} tensors, expected {})",
            meta.spec.variant,
            got.len(),
            expected.len()
        )));
    }
    for (name, tensor) in &weights {
        let want = reference.weights()[name].shape();
        if tensor.shape() != want {
            return Err(CogoError::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {want:?}",
                tensor.shape()
            )));
        }
    }
    Ok(Checkpoint { weights, meta })
}

/// Load a checkpoint and refuse specs that differ from `expected`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &ModelSpec) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.require_spec(expected)?;
    Ok(ckpt)
}
