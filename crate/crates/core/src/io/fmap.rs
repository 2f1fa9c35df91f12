//! `FMAP` feature-grid files.
//!
//! Layout (little-endian):
//! - magic `b"FMAP"`
//! - `version: u32 = 1`
//! - `grid_h, grid_w, dim, patch_size, image_h, image_w: u32`
//! - `grid_h * grid_w * dim` × `f32`, row-major (row, then column, then channel)

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::FeatureMap;

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FmapHeader {
    pub grid_h: u32,
    pub grid_w: u32,
    pub dim: u32,
    pub patch_size: u32,
    pub image_h: u32,
    pub image_w: u32,
}

impl FmapHeader {
    pub fn payload_len(&self) -> usize {
        self.grid_h as usize * self.grid_w as usize * self.dim as usize
    }

    fn parse(buf: &[u8; HEADER_LEN], path: &Path) -> Result<Self> {
        if &buf[0..4] != MAGIC {
            return Err(Error::format(path, "bad magic, expected FMAP"));
        }
        let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        Ok(Self {
            grid_h: word(1),
            grid_w: word(2),
            dim: word(3),
            patch_size: word(4),
            image_h: word(5),
            image_w: word(6),
        })
    }
}

pub fn encode(fm: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + fm.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        fm.grid_h() as u32,
        fm.grid_w() as u32,
        fm.dim() as u32,
        fm.patch_size() as u32,
        fm.image_h() as u32,
        fm.image_w() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in fm.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<FeatureMap> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    let header = FmapHeader::parse(bytes[..HEADER_LEN].try_into().unwrap(), path)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != header.payload_len() * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                header.payload_len() * 4
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMap::new(
        header.grid_h as usize,
        header.grid_w as usize,
        header.dim as usize,
        header.patch_size as usize,
        header.image_h as usize,
        header.image_w as usize,
        data,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, fm: &FeatureMap) -> Result<()> {
    super::write_atomic(path, &encode(fm))
}

/// Reads only the header and checks the file length against it.
pub fn read_header(path: &Path) -> Result<FmapHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut buf = [0u8; HEADER_LEN];
    BufReader::new(file)
        .read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated header"))?;
    let header = FmapHeader::parse(&buf, path)?;
    let expected = (HEADER_LEN + header.payload_len() * 4) as u64;
    if len != expected {
        return Err(Error::format(
            path,
            format!("file has {len} bytes, header implies {expected}"),
        ));
    }
    Ok(header)
}
