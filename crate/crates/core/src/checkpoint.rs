//! Trained parameters on disk, with the configs needed to rebuild the model.
//!
//! Layout:
//!
//! ```text
//! b"PLSTCKPT"            magic
//! u32 LE                 format version
//! u32 LE 0x01020304      byte-order mark
//! u64 LE                 header length
//! header                 UTF-8 JSON: hashes, configs, tensor names and shapes
//! f64 LE * n             tensor data in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::params::Parameters;
use crate::net::NetConfig;
use crate::tensor::Tensor;
use crate::train::{Model, TrainConfig};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PLSTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const BYTE_ORDER_MARK: u32 = 0x0102_0304;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    byte_order: String,
    config_hash: String,
    generator_hash: String,
    net: NetConfig,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Hash of the whole experiment config that produced these weights.
    pub config_hash: String,
    /// Hash of the generator config of the training data.
    pub generator_hash: String,
    /// Network config before the training config resized the heads.
    pub net: NetConfig,
    pub train: TrainConfig,
    pub params: Parameters,
}

impl Checkpoint {
    /// Rebuild the model and check the stored tensors fit its layout.
    pub fn model(&self) -> Result<Model> {
        let (model, _) = Model::new(&self.net, &self.train)?;
        model.network.check_params(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            byte_order: "little".into(),
            config_hash: self.config_hash.clone(),
            generator_hash: self.generator_hash.clone(),
            net: self.net.clone(),
            train: self.train.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + header.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&BYTE_ORDER_MARK.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let out = &bytes[pos..end];
            pos = end;
            Ok(out)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        if u32::from_le_bytes(take(4)?.try_into().unwrap()) != BYTE_ORDER_MARK {
            return Err(bad("byte-order mark mismatch"));
        }
        let header_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(header_len)?).map_err(|e| bad(&format!("header: {e}")))?;
        if header.byte_order != "little" {
            return Err(bad("only little-endian data is supported"));
        }
        let (model, mut params) = Model::new(&header.net, &header.train)?;
        if header.tensors.len() != params.len() {
            return Err(bad("tensor count does not match the network layout"));
        }
        let ids: Vec<_> = params.ids().collect();
        for (entry, id) in header.tensors.iter().zip(ids) {
            let expected = params.get(id);
            if entry.name != params.name(id) || (entry.rows, entry.cols) != expected.shape() {
                return Err(bad(&format!("tensor `{}` does not match the network layout", entry.name)));
            }
            let raw = take(8 * entry.rows * entry.cols)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            *params.get_mut(id) = Tensor::from_vec(entry.rows, entry.cols, data)?;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        model.network.check_params(&params)?;
        Ok(Self {
            config_hash: header.config_hash,
            generator_hash: header.generator_hash,
            net: header.net,
            train: header.train,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
