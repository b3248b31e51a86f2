//! The on-device cache: one binary file holding the sparse weight state of
//! one model at one synced version.
//!
//! Layout:
//!
//! ```text
//! "WVLC"  magic, 4 bytes
//! u16 LE  format version (1)
//! u32 LE  header length
//! ...     header, JSON (model identity, seq, tier, layer directory, count)
//! ...     entry_count records of (u64 layer_id, u32 flat_index, f64 value), LE
//! u32 LE  CRC32 over everything above
//! ```
//!
//! Only nonzero positions are stored; reconstruction overlays them onto a
//! zero-initialized weight map, mirroring how the store itself materializes
//! versions. Writes go through a temp file and an atomic rename, so a reader
//! never observes a half-written cache: after a crash the file is either the
//! old state or the new one, and the trailer CRC proves which.

use crate::ClientError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use wvlt_core::nn::{ModelDef, NnError, WeightMap};
use wvlt_core::wire::{model_def_from_layers, LayerInfo};

pub const CACHE_MAGIC: &[u8; 4] = b"WVLC";
pub const CACHE_FORMAT_VERSION: u16 = 1;

/// The JSON header inside a cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheHeader {
    model: String,
    model_id: u64,
    seq: u64,
    lineage_seq: u64,
    tier: Option<String>,
    /// UTC milliseconds of the last successful sync.
    last_sync_ms: i64,
    layers: Vec<LayerInfo>,
    entry_count: u64,
}

/// In-memory form of the cache file.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCache {
    pub model: String,
    pub model_id: u64,
    pub seq: u64,
    pub lineage_seq: u64,
    pub tier: Option<String>,
    pub last_sync_ms: i64,
    /// Layer directory captured from the last full fetch; fixed for the
    /// model's lifetime since layer shapes never change after registration.
    pub layers: Vec<LayerInfo>,
    /// Sparse nonzero weights keyed by (layer_id, flat_index).
    pub entries: BTreeMap<(u64, u32), f64>,
}

impl LocalCache {
    pub fn encode(&self) -> Vec<u8> {
        let header = CacheHeader {
            model: self.model.clone(),
            model_id: self.model_id,
            seq: self.seq,
            lineage_seq: self.lineage_seq,
            tier: self.tier.clone(),
            last_sync_ms: self.last_sync_ms,
            layers: self.layers.clone(),
            entry_count: self.entries.len() as u64,
        };
        let header_json = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::with_capacity(14 + header_json.len() + self.entries.len() * 20);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for ((layer_id, flat), value) in &self.entries {
            out.extend_from_slice(&layer_id.to_le_bytes());
            out.extend_from_slice(&flat.to_le_bytes());
            out.extend_from_slice(&value.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<LocalCache, String> {
        let need = |n: usize, what: &str| {
            if bytes.len() < n { Err(format!("truncated before {what}")) } else { Ok(()) }
        };
        need(10, "header length")?;
        if &bytes[..4] != CACHE_MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != CACHE_FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        need(10 + header_len + 4, "header")?;
        let header: CacheHeader = serde_json::from_slice(&bytes[10..10 + header_len])
            .map_err(|e| format!("header: {e}"))?;

        let body_end = bytes.len() - 4;
        let stored_crc = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored_crc != computed {
            return Err(format!("crc mismatch: stored {stored_crc}, computed {computed}"));
        }

        let entry_bytes = &bytes[10 + header_len..body_end];
        if entry_bytes.len() % 20 != 0 {
            return Err(format!("entry region is {} bytes, not a multiple of 20", entry_bytes.len()));
        }
        if entry_bytes.len() / 20 != header.entry_count as usize {
            return Err(format!(
                "header promises {} entries, file holds {}",
                header.entry_count,
                entry_bytes.len() / 20
            ));
        }
        let mut entries = BTreeMap::new();
        for rec in entry_bytes.chunks_exact(20) {
            let layer_id = u64::from_le_bytes(rec[..8].try_into().unwrap());
            let flat = u32::from_le_bytes(rec[8..12].try_into().unwrap());
            let value = f64::from_le_bytes(rec[12..20].try_into().unwrap());
            entries.insert((layer_id, flat), value);
        }
        Ok(LocalCache {
            model: header.model,
            model_id: header.model_id,
            seq: header.seq,
            lineage_seq: header.lineage_seq,
            tier: header.tier,
            last_sync_ms: header.last_sync_ms,
            layers: header.layers,
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LocalCache, ClientError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        LocalCache::decode(&bytes).map_err(|reason| ClientError::CorruptCache {
            path: path.display().to_string(),
            reason,
        })
    }

    /// Write atomically: temp file in the same directory, fsync, rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClientError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let tmp = path.with_extension("tmp");
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&self.encode())?;
        file.sync_all()?;
        drop(file);
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn model_def(&self) -> Result<ModelDef, NnError> {
        model_def_from_layers(&self.model, &self.layers)
    }

    /// Dense weights: entries overlaid on zeros.
    pub fn to_weight_map(&self) -> Result<WeightMap, NnError> {
        let def = self.model_def()?;
        let mut weights = WeightMap::zeroed(&def);
        let name_of: std::collections::HashMap<u64, &str> =
            self.layers.iter().map(|l| (l.layer_id, l.name.as_str())).collect();
        for ((layer_id, flat), value) in &self.entries {
            let name = name_of.get(layer_id).ok_or_else(|| {
                NnError::IndexOutOfRange(format!("cache entry references unknown layer {layer_id}"))
            })?;
            let lw = weights.get_mut(name).expect("layer directory matches def");
            let slot = lw.values.get_mut(*flat as usize).ok_or_else(|| {
                NnError::IndexOutOfRange(format!("flat index {flat} out of range for {name}"))
            })?;
            *slot = *value;
        }
        Ok(weights)
    }
}
