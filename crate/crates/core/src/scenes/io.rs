//! Feature files and dataset manifests.
//!
//! Feature file layout (little-endian): the 8 magic bytes `DIRLFEAT`, a `u32`
//! format version (1), `u32` height, width and channels, then
//! `height·width·channels` `f32` values with height outermost and channels
//! innermost.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cell, ChangeType, DistractorConfig, FeatureGrid};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"DIRLFEAT";
const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

pub fn encode_features(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * grid.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        grid.height as u32,
        grid.width as u32,
        grid.channels as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureGrid> {
    if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected DIRLFEAT"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != FEATURE_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::format(12, format!("zero extent in {h}x{w}x{c}")));
    }
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(12, format!("dimension overflow {h}x{w}x{c}")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count * 4 {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated payload: expected {} bytes, found {}",
                count * 4,
                payload.len()
            ),
        ));
    }
    if payload.len() > count * 4 {
        return Err(Error::format(
            (HEADER_LEN + count * 4) as u64,
            "trailing bytes after payload",
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            (HEADER_LEN + 4 * i) as u64,
            "non-finite feature value",
        ));
    }
    FeatureGrid::new(h, w, c, values)
}

pub fn write_features(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub seed: u64,
    pub change_type: ChangeType,
    pub caption: String,
    pub before_path: String,
    pub after_path: String,
    /// Feature-grid cells showing the change.
    pub change_cells: Vec<Cell>,
    pub distractor: DistractorConfig,
}

pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("manifest record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::format(offset, format!("manifest: {e}")))?;
            out.push(rec);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
