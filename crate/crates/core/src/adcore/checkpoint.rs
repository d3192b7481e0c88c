//! Parameter checkpoint file: one line of JSON header terminated by `\n`,
//! followed by raw little-endian `f64` values for each tensor in the order the
//! header lists them.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "metainflect-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub model_kind: String,
    pub tensors: Vec<TensorEntry>,
    pub vocab_hash: String,
    pub config_hash: String,
    pub seed: u64,
    /// Free-form model description (dimensions, vocabulary, trained languages).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CheckpointHeader {
    pub fn new(model_kind: &str, params: &ParamSet) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            model_kind: model_kind.to_string(),
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            vocab_hash: String::new(),
            config_hash: String::new(),
            seed: 0,
            meta: serde_json::Value::Null,
        }
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, params: &ParamSet) -> Result<()> {
    let mut header = header.clone();
    header.tensors = params
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for entry in &header.tensors {
        for v in params.get(&entry.name).unwrap().data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(CheckpointHeader, ParamSet)> {
    let mut reader = BufReader::new(r);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Checkpoint("missing header terminator".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", header.format)));
    }
    let mut params = ParamSet::new();
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data for `{}`", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.insert(entry.name.clone(), t);
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ParamSet) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), header, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(file)
}

/// SHA-256 over the raw little-endian parameter bytes in name order.
pub fn params_hash(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
