//! Checkpoint layout: one line of JSON (format version, config, parameter
//! names and shapes, featurizer hash, caller metadata), then every
//! parameter as raw little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    featurizer_hash: String,
    params: Vec<ParamEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Writes `model` with arbitrary caller metadata in `extra`.
pub fn save_checkpoint(path: &Path, model: &Model, extra: &serde_json::Value) -> Result<(), CheckpointError> {
    let store = model.params();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        featurizer_hash: model.config().featurizer().hash(),
        params: store
            .ids()
            .map(|id| ParamEntry {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
            })
            .collect(),
        extra: extra.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| CheckpointError::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for id in store.ids() {
        for v in store.value(id).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the model, the featurizer hash it was trained under and the
/// caller metadata.
pub fn load_checkpoint(path: &Path) -> Result<(Model, String, serde_json::Value), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for entry in header.params {
        let len: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Format(format!("truncated data for {}", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(entry.shape, data).expect("length matches shape");
        store.push(entry.name, t);
    }
    if r.read(&mut buf)? != 0 {
        return Err(CheckpointError::Format("trailing bytes after parameters".into()));
    }
    let model = Model::from_store(header.config, store)?;
    Ok((model, header.featurizer_hash, header.extra))
}
