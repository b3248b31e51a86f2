//! The binary weight-file format.
//!
//! Layout: magic `"WVLT"`, format version as little-endian u16, then one
//! record per layer — name length (u16), name bytes (UTF-8), `in_dim` and
//! `out_dim` (u32 each), then `in_dim * out_dim + out_dim` raw little-endian
//! f64 values — and finally a CRC32 over every preceding byte. Floats are
//! copied bit-for-bit, so export followed by import reproduces the exact
//! `WeightMap`, including negative zeros.

use crate::nn::{LayerWeights, ModelDef, NnError, WeightMap};
use std::path::Path;
use thiserror::Error;

pub const WEIGHT_FILE_MAGIC: [u8; 4] = *b"WVLT";
pub const WEIGHT_FILE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed weight file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("weight file checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error(transparent)]
    Model(#[from] NnError),
}

fn format_err(offset: usize, reason: impl Into<String>) -> WeightFileError {
    WeightFileError::Format { offset, reason: reason.into() }
}

/// Serializes a weight map to the file format, layers in map order.
pub fn encode_weights(weights: &WeightMap) -> Result<Vec<u8>, WeightFileError> {
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHT_FILE_MAGIC);
    out.extend_from_slice(&WEIGHT_FILE_VERSION.to_le_bytes());
    for (name, lw) in weights.iter() {
        let expected = lw.in_dim as usize * lw.out_dim as usize + lw.out_dim as usize;
        if lw.values.len() != expected {
            return Err(format_err(
                out.len(),
                format!(
                    "layer {:?} has {} values but dims {}x{} need {}",
                    name,
                    lw.values.len(),
                    lw.in_dim,
                    lw.out_dim,
                    expected
                ),
            ));
        }
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(format_err(out.len(), format!("layer name {} bytes long", name_bytes.len())));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&lw.in_dim.to_le_bytes());
        out.extend_from_slice(&lw.out_dim.to_le_bytes());
        for v in &lw.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses the file format. Structural problems report the byte offset where
/// parsing stopped; a structurally-sound file with a bad trailing CRC reports
/// `ChecksumMismatch`.
pub fn decode_weights(bytes: &[u8]) -> Result<WeightMap, WeightFileError> {
    if bytes.len() < WEIGHT_FILE_MAGIC.len() + 2 + 4 {
        return Err(format_err(bytes.len(), "file shorter than header plus checksum"));
    }
    if bytes[..4] != WEIGHT_FILE_MAGIC {
        return Err(format_err(0, "bad magic bytes"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != WEIGHT_FILE_VERSION {
        return Err(format_err(4, format!("unsupported format version {version}")));
    }

    let body_end = bytes.len() - 4;
    let mut weights = WeightMap::default();
    let mut at = 6usize;
    while at < body_end {
        let take = |at: &mut usize, n: usize, what: &str| -> Result<usize, WeightFileError> {
            if *at + n > body_end {
                return Err(format_err(*at, format!("record truncated reading {what}")));
            }
            let start = *at;
            *at += n;
            Ok(start)
        };

        let s = take(&mut at, 2, "name length")?;
        let name_len = u16::from_le_bytes([bytes[s], bytes[s + 1]]) as usize;
        let s = take(&mut at, name_len, "layer name")?;
        let name = std::str::from_utf8(&bytes[s..s + name_len])
            .map_err(|e| format_err(s, format!("layer name is not UTF-8: {e}")))?
            .to_owned();
        let s = take(&mut at, 8, "layer dims")?;
        let in_dim = u32::from_le_bytes(bytes[s..s + 4].try_into().unwrap());
        let out_dim = u32::from_le_bytes(bytes[s + 4..s + 8].try_into().unwrap());
        if in_dim == 0 || out_dim == 0 {
            return Err(format_err(s, format!("layer {name:?} has zero dimension")));
        }
        let count = in_dim as usize * out_dim as usize + out_dim as usize;
        let s = take(&mut at, count * 8, "weight values")?;
        let values: Vec<f64> = bytes[s..s + count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if weights.get(&name).is_some() {
            return Err(format_err(s, format!("duplicate layer {name:?}")));
        }
        weights.insert(name, LayerWeights { in_dim, out_dim, values });
    }

    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(WeightFileError::ChecksumMismatch { stored, computed });
    }
    Ok(weights)
}

pub fn export_weights(weights: &WeightMap, path: &Path) -> Result<(), WeightFileError> {
    std::fs::write(path, encode_weights(weights)?)?;
    Ok(())
}

pub fn import_weights(path: &Path) -> Result<WeightMap, WeightFileError> {
    decode_weights(&std::fs::read(path)?)
}

/// Import plus a layout check against `model`, so a file missing one of the
/// model's layers fails with `MissingLayerWeights` instead of at first use.
pub fn import_weights_for(path: &Path, model: &ModelDef) -> Result<WeightMap, WeightFileError> {
    let weights = import_weights(path)?;
    weights.check_layout(model)?;
    Ok(weights)
}
