//! On-disk model snapshots: a JSON manifest describing every tensor plus a
//! single packed blob of little-endian f32 values. Loading is strict; any
//! mismatch between manifest and blob is an error and nothing partial is
//! ever returned.

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{AdlmParams, BlockParams, FisherDiagonal, ModelConfig, Stage};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    stage: Stage,
    seed: u64,
    lambda: f64,
    model: ModelConfig,
    vocab: Vocab,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: AdlmParams,
    pub vocab: Vocab,
    pub stage: Stage,
    pub seed: u64,
    pub lambda: f64,
}

fn push_tensor(entries: &mut Vec<TensorEntry>, blob: &mut Vec<u8>, name: &str, t: &Tensor) {
    let offset = blob.len() / 4;
    for v in t.to_f32() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    entries.push(TensorEntry {
        name: name.to_string(),
        shape: t.shape.clone(),
        offset,
        len: t.numel(),
    });
}

/// Writes `manifest.json` and `tensors.bin` into `dir`, creating it first.
pub fn save(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (_, name, t) in ckpt.params.param_list() {
        push_tensor(&mut entries, &mut blob, &name, t);
    }
    if let Some(anchor) = &ckpt.params.proj_anchor {
        for (name, t) in anchor.tensors() {
            push_tensor(&mut entries, &mut blob, &format!("anchor.{name}"), t);
        }
    }
    if let Some(fisher) = &ckpt.params.fisher {
        for (i, t) in fisher.values.iter().enumerate() {
            let name = BlockParams::FIELD_NAMES[i];
            push_tensor(&mut entries, &mut blob, &format!("fisher.{name}"), t);
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        stage: ckpt.stage,
        seed: ckpt.seed,
        lambda: ckpt.lambda,
        model: ckpt.params.config,
        vocab: ckpt.vocab.clone(),
        tensors: entries,
    };
    let mut mf = fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    fs::File::create(dir.join(TENSORS_FILE))?.write_all(&blob)?;
    Ok(())
}

fn read_tensor(entry: &TensorEntry, blob: &[u8]) -> Result<Vec<f32>> {
    let numel: usize = entry.shape.iter().product();
    if numel != entry.len {
        return Err(Error::Checkpoint(format!(
            "tensor {} declares shape {:?} but length {}",
            entry.name, entry.shape, entry.len
        )));
    }
    let start = entry.offset * 4;
    let end = start + entry.len * 4;
    if end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "tensor blob truncated: {} needs bytes {}..{} of {}",
            entry.name,
            start,
            end,
            blob.len()
        )));
    }
    Ok(blob[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads a checkpoint directory back into memory, verifying the manifest
/// against the blob and the expected parameter inventory.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_reader(fs::File::open(&manifest_path)?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {})",
            manifest.version, FORMAT_VERSION
        )));
    }
    let mut blob = Vec::new();
    fs::File::open(dir.join(TENSORS_FILE))?.read_to_end(&mut blob)?;
    let expected_bytes: usize = manifest.tensors.iter().map(|e| e.len * 4).sum();
    if blob.len() != expected_bytes {
        return Err(Error::Checkpoint(format!(
            "tensor blob holds {} bytes but the manifest describes {}",
            blob.len(),
            expected_bytes
        )));
    }

    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    for e in &manifest.tensors {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
        }
    }

    let mut params = AdlmParams::init(manifest.model)?;
    let mut consumed = 0usize;
    for (_, name, t) in params.param_list_mut() {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if entry.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                entry.shape, t.shape
            )));
        }
        t.assign_f32(&read_tensor(entry, &blob)?)?;
        consumed += 1;
    }

    let has_anchor = by_name.keys().any(|k| k.starts_with("anchor."));
    if has_anchor {
        let mut anchor = params.proj_block.clone();
        for (name, t) in anchor.tensors_mut() {
            let key = format!("anchor.{name}");
            let entry = by_name
                .get(key.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if entry.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    entry.shape, t.shape
                )));
            }
            t.assign_f32(&read_tensor(entry, &blob)?)?;
            consumed += 1;
        }
        params.proj_anchor = Some(anchor);
    }

    let has_fisher = by_name.keys().any(|k| k.starts_with("fisher."));
    if has_fisher {
        let mut fisher = FisherDiagonal::zeros_like(&params.proj_block);
        for (i, t) in fisher.values.iter_mut().enumerate() {
            let key = format!("fisher.{}", BlockParams::FIELD_NAMES[i]);
            let entry = by_name
                .get(key.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if entry.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    entry.shape, t.shape
                )));
            }
            t.assign_f32(&read_tensor(entry, &blob)?)?;
            consumed += 1;
        }
        params.fisher = Some(fisher);
    }

    if consumed != manifest.tensors.len() {
        let known: Vec<&str> = manifest
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| !n.starts_with("anchor.") && !n.starts_with("fisher."))
            .collect();
        return Err(Error::Checkpoint(format!(
            "manifest describes {} tensors but the model consumed {consumed}: {known:?}",
            manifest.tensors.len()
        )));
    }

    Ok(Checkpoint {
        params,
        vocab: manifest.vocab,
        stage: manifest.stage,
        seed: manifest.seed,
        lambda: manifest.lambda,
    })
}
