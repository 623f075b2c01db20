//! Checkpoint container: magic, version, a JSON table (config + parameter
//! names and shapes), then every parameter as little-endian f32 in table
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{DbfUNet, NetConfig};
use crate::params::ParamStore;
use crate::NetError;

pub const MAGIC: &[u8; 8] = b"DBFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Table {
    config: NetConfig,
    params: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(model: &DbfUNet, meta: serde_json::Value) -> Vec<u8> {
    let table = Table {
        config: model.config.clone(),
        params: model
            .store
            .iter()
            .map(|(_, n, t)| Entry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&table).expect("table serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.store.total());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(model: &DbfUNet, meta: serde_json::Value, path: &Path) -> Result<(), NetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(model, meta))?;
    Ok(())
}

/// Rebuilds the model described by the checkpoint and fills its
/// parameters, checking every name and shape.
pub fn decode(bytes: &[u8]) -> Result<(DbfUNet, serde_json::Value), NetError> {
    let bad = |m: String| NetError::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let jlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + jlen).ok_or_else(|| bad("truncated table".into()))?;
    let table: Table = serde_json::from_slice(json).map_err(|e| bad(format!("table: {e}")))?;
    let mut model = DbfUNet::new(table.config, 0)?;
    if table.params.len() != model.store.len() {
        return Err(bad(format!(
            "checkpoint has {} parameters, model expects {}",
            table.params.len(),
            model.store.len()
        )));
    }
    let mut pos = 20 + jlen;
    let store: &mut ParamStore = &mut model.store;
    for e in &table.params {
        let t = store
            .by_name_mut(&e.name)
            .ok_or_else(|| bad(format!("unknown parameter {}", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(bad(format!("{}: shape {:?} != expected {:?}", e.name, e.shape, t.shape())));
        }
        let n = t.len() * 4;
        let raw = bytes.get(pos..pos + n).ok_or_else(|| bad(format!("truncated data at {}", e.name)))?;
        for (v, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap());
        }
        pos += n;
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((model, table.meta))
}

pub fn load(path: &Path) -> Result<(DbfUNet, serde_json::Value), NetError> {
    decode(&fs::read(path)?)
}
