//! Parameter checkpoints.
//!
//! Layout: one JSON header line terminated by `\n` (see [`CheckpointHeader`]),
//! then every tensor of every collection as little-endian `f64`, in the order
//! the header lists them. Optimizer moments are not stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, NetworkParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "sei-al-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionEntry {
    pub name: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub architecture: ModelConfig,
    pub num_emitters: usize,
    pub length: usize,
    pub seed: u64,
    pub stage: String,
    pub collections: Vec<CollectionEntry>,
}

fn layout(params: &NetworkParams) -> Vec<CollectionEntry> {
    params
        .collections()
        .into_iter()
        .map(|(name, tensors)| CollectionEntry {
            name: name.to_string(),
            tensors: tensors
                .into_iter()
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        })
        .collect()
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &NetworkParams, seed: u64, stage: &str) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        architecture: params.config.clone(),
        num_emitters: params.config.num_classes,
        length: params.config.length,
        seed,
        stage: stage.to_string(),
        collections: layout(params),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.push(b'\n');
    for (_, tensors) in params.collections() {
        for (_, t) in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. When `expected` is given, the stored architecture
/// must match it exactly.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<(NetworkParams, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", header.format)));
    }
    if let Some(cfg) = expected {
        if *cfg != header.architecture {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, expected {:?}",
                header.architecture, cfg
            )));
        }
    }
    if header.num_emitters != header.architecture.num_classes || header.length != header.architecture.length {
        return Err(Error::Checkpoint("header M/L disagree with architecture".into()));
    }
    let mut params = NetworkParams::new(header.architecture.clone(), &mut rand::rng())?;
    if layout(&params) != header.collections {
        return Err(Error::Checkpoint("tensor layout does not match architecture".into()));
    }
    let mut offset = newline + 1;
    let total: usize = params
        .collections()
        .iter()
        .flat_map(|(_, ts)| ts.iter().map(|(_, t)| t.len()))
        .sum();
    if bytes.len() != offset + 8 * total {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, layout needs {}",
            bytes.len() - offset,
            8 * total
        )));
    }
    for collection in params.collections_mut() {
        for t in collection {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8 bytes"));
                offset += 8;
            }
        }
    }
    params.reset_optimizer();
    Ok((params, header))
}
