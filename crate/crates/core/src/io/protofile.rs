//! Prototype set files (`.proto`).
//!
//! A JSON document:
//!
//! ```json
//! {
//!   "format": "protodetect-prototypes",
//!   "version": 1,
//!   "class_table": {"object_classes": [...], "background_count": 200},
//!   "dim": 1024,
//!   "temperature": 0.1,
//!   "provenance": "averaged",
//!   "encoding": "base64-f32le",
//!   "vectors": "<base64 of (J+K)*dim little-endian f32, row-major>"
//! }
//! ```
//!
//! With `"encoding": "sidecar-f32le"`, `vectors` instead names a raw binary
//! file (same byte layout, no header) relative to the `.proto` file.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassTable, PrototypeSet, Provenance};

pub const FORMAT: &str = "protodetect-prototypes";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "base64-f32le")]
    Base64,
    #[serde(rename = "sidecar-f32le")]
    Sidecar,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProtoFile {
    format: String,
    version: u32,
    class_table: ClassTable,
    dim: usize,
    temperature: f64,
    provenance: Provenance,
    encoding: Encoding,
    vectors: String,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f32_from_bytes(b: &[u8], path: &Path) -> Result<Vec<f32>> {
    if !b.len().is_multiple_of(4) {
        return Err(Error::format(path, "float payload length is not a multiple of 4"));
    }
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn to_json(protos: &PrototypeSet) -> Result<Vec<u8>> {
    let file = ProtoFile {
        format: FORMAT.into(),
        version: VERSION,
        class_table: protos.class_table().clone(),
        dim: protos.dim(),
        temperature: protos.temperature(),
        provenance: protos.provenance(),
        encoding: Encoding::Base64,
        vectors: base64::engine::general_purpose::STANDARD.encode(f32_bytes(protos.vectors())),
    };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn from_json(bytes: &[u8], path: &Path) -> Result<PrototypeSet> {
    let file: ProtoFile = serde_json::from_slice(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::format(
            path,
            format!("expected {FORMAT} v{VERSION}, found {} v{}", file.format, file.version),
        ));
    }
    let raw = match file.encoding {
        Encoding::Base64 => base64::engine::general_purpose::STANDARD
            .decode(file.vectors.as_bytes())
            .map_err(|e| Error::format(path, format!("bad base64 payload: {e}")))?,
        Encoding::Sidecar => {
            let side = super::manifest::base_dir(path).join(&file.vectors);
            std::fs::read(&side).map_err(|e| Error::io(side, e))?
        }
    };
    let vectors = f32_from_bytes(&raw, path)?;
    PrototypeSet::from_raw(file.class_table, file.dim, file.temperature, file.provenance, vectors)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write(path: &Path, protos: &PrototypeSet) -> Result<()> {
    super::write_atomic(path, &to_json(protos)?)
}

pub fn read(path: &Path) -> Result<PrototypeSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_json(&bytes, path)
}
