//! Raw prototype-matrix export for external visualization tools.
//!
//! CSV: header `label,d0,...,d{D-1}`, then one row per prototype.
//!
//! Binary (little-endian): magic `b"PROT"`, `version: u32 = 1`,
//! `rows: u32`, `dim: u32`, then per row a `u32` byte length followed by
//! the UTF-8 label, then `rows * dim` × `f32` row-major.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::PrototypeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Binary,
}

const MAGIC: &[u8; 4] = b"PROT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedMatrix {
    pub labels: Vec<String>,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl ExportedMatrix {
    pub fn from_prototypes(protos: &PrototypeSet) -> Self {
        let table = protos.class_table();
        Self {
            labels: (0..protos.num_rows()).map(|r| table.row_label(r)).collect(),
            dim: protos.dim(),
            data: protos.vectors().to_vec(),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

pub fn to_csv(m: &ExportedMatrix) -> String {
    let mut out = String::from("label");
    for d in 0..m.dim {
        write!(out, ",d{d}").unwrap();
    }
    out.push('\n');
    for (r, label) in m.labels.iter().enumerate() {
        out.push_str(label);
        for v in m.row(r) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn to_binary(m: &ExportedMatrix) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.labels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for l in &m.labels {
        out.extend_from_slice(&(l.len() as u32).to_le_bytes());
        out.extend_from_slice(l.as_bytes());
    }
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("<prototype export>", "truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_binary(bytes: &[u8]) -> Result<ExportedMatrix> {
    let bad = |why: &str| Error::format("<prototype export>", why.to_string());
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if cur.u32()? != VERSION {
        return Err(bad("unsupported version"));
    }
    let rows = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let len = cur.u32()? as usize;
        let s = std::str::from_utf8(cur.take(len)?).map_err(|_| bad("label is not UTF-8"))?;
        labels.push(s.to_owned());
    }
    let data = cur
        .take(rows * dim * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(ExportedMatrix { labels, dim, data })
}

pub fn export_prototypes(protos: &PrototypeSet, format: ExportFormat, path: &Path) -> Result<()> {
    let m = ExportedMatrix::from_prototypes(protos);
    match format {
        ExportFormat::Csv => super::write_atomic(path, to_csv(&m).as_bytes()),
        ExportFormat::Binary => super::write_atomic(path, &to_binary(&m)),
    }
}

pub fn import_binary(path: &Path) -> Result<ExportedMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_binary(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ClassEntry, ClassRole, ClassTable, Provenance};

    fn protos() -> PrototypeSet {
        let table = ClassTable::new(
            ["plane", "ship"]
                .iter()
                .map(|n| ClassEntry {
                    name: n.to_string(),
                    role: ClassRole::Novel,
                })
                .collect(),
            1,
        )
        .unwrap();
        PrototypeSet::from_rows(
            table,
            &[
                vec![1.0, 2.0, 3.0, 4.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![-0.3, 0.1, 0.7, 0.2],
            ],
            0.1,
            Provenance::Averaged,
        )
        .unwrap()
    }

    #[test]
    fn csv_shape() {
        let csv = to_csv(&ExportedMatrix::from_prototypes(&protos()));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,d0,d1,d2,d3");
        assert_eq!(lines.len(), 4);
        let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(labels, ["plane", "ship", "bg_0"]);
        for l in &lines[1..] {
            let floats: Vec<f32> = l.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            assert_eq!(floats.len(), 4);
        }
    }

    #[test]
    fn binary_roundtrip_is_bit_exact() {
        let m = ExportedMatrix::from_prototypes(&protos());
        let back = from_binary(&to_binary(&m)).unwrap();
        assert_eq!(back, m);
        let mut truncated = to_binary(&m);
        truncated.pop();
        assert!(from_binary(&truncated).is_err());
    }
}
