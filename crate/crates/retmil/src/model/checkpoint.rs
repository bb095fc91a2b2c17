//! Checkpoint format.
//!
//! Binary file (all integers little-endian u32):
//!
//! ```text
//! magic "RMCK" | version=1 | param_count
//! per parameter, sorted by name:
//!   name_len | name bytes (utf-8) | rank | dims[rank] | values as f32 LE
//! ```
//!
//! Values are stored as f32 regardless of in-memory precision. A JSON
//! sidecar at `<path>.json` carries the full model configuration so a
//! checkpoint is self-describing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Sidecar contents.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Precision the checkpoint was written from ("f32" or "f64").
    pub precision: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let store = model.param_store()?;
    let snapshot = store.snapshot();

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(snapshot.len() as u32).to_le_bytes())?;
    for (name, values) in &snapshot {
        let shape = store.get(name).expect("snapshot key").shape().to_vec();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for dim in &shape {
            w.write_all(&(*dim as u32).to_le_bytes())?;
        }
        for v in values {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    w.flush()?;

    let meta = CheckpointMeta { model: model.config.clone(), precision: T::NAME.to_string() };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let meta_text = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Input(format!("missing checkpoint sidecar {}: {e}", sidecar_path(path).display()))
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    let model = Model::<T>::init(meta.model, 0)?;
    let store = model.param_store()?;

    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad checkpoint magic, expected \"RMCK\"".into() });
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: 4, detail: format!("unsupported checkpoint version {version}") });
    }
    let count = read_u32(&mut r)? as usize;
    if count != store.len() {
        return Err(Error::Format {
            offset: 8,
            detail: format!("checkpoint has {count} parameters, model expects {}", store.len()),
        });
    }
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format { offset: 0, detail: "parameter name is not utf-8".into() })?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let tensor = store
            .get(&name)
            .ok_or_else(|| Error::Format { offset: 0, detail: format!("unknown parameter '{name}'") })?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Format {
                offset: 0,
                detail: format!("parameter '{name}' shape {shape:?} vs expected {:?}", tensor.shape()),
            });
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            values.push(T::from_f32(f32::from_le_bytes(buf)));
        }
        tensor.set_data(&values)?;
    }
    Ok(model)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
