//! Checksummed full-state snapshots.
//!
//! A snapshot is a single CRC-trailed JSON line (the same codec as journal
//! lines) holding every row plus the transaction watermark it covers. On
//! open, journal lines with `txn <=` the watermark are skipped. Snapshots are
//! written only on request; journals alone are always sufficient.

use super::journal::{seal_line, verify_line};
use super::state::{SnapshotRows, Tables};
use super::StoreError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SNAPSHOT_DIR: &str = "snapshots";

#[derive(Debug, Serialize, Deserialize)]
pub struct SnapshotDoc {
    pub format_version: u32,
    /// Highest committed transaction folded into this snapshot.
    pub txn: u64,
    #[serde(flatten)]
    pub rows: SnapshotRows,
}

pub fn snapshot_path(dir: &Path, txn: u64) -> PathBuf {
    dir.join(SNAPSHOT_DIR).join(format!("{txn:020}.snap"))
}

pub fn write_snapshot(dir: &Path, txn: u64, tables: &Tables, sync: bool) -> Result<PathBuf, StoreError> {
    let doc = SnapshotDoc { format_version: 1, txn, rows: tables.dump() };
    let bytes = seal_line(serde_json::to_vec(&doc).map_err(|e| {
        StoreError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    })?);
    std::fs::create_dir_all(dir.join(SNAPSHOT_DIR))?;
    let path = snapshot_path(dir, txn);
    let tmp = path.with_extension("snap.tmp");
    std::fs::write(&tmp, &bytes)?;
    if sync {
        let f = std::fs::File::open(&tmp)?;
        f.sync_data()?;
    }
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

/// All snapshot files, newest watermark first. Files whose names don't parse
/// as a transaction id are ignored.
pub fn list_snapshots(dir: &Path) -> Result<Vec<(u64, PathBuf)>, StoreError> {
    let snap_dir = dir.join(SNAPSHOT_DIR);
    let mut found = Vec::new();
    let entries = match std::fs::read_dir(&snap_dir) {
        Ok(e) => e,
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(found),
        Err(err) => return Err(err.into()),
    };
    for entry in entries {
        let entry = entry?;
        let path = entry.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().and_then(|e| e.to_str()) != Some("snap") {
            continue;
        }
        if let Ok(txn) = stem.parse::<u64>() {
            found.push((txn, path));
        }
    }
    found.sort_by(|a, b| b.0.cmp(&a.0));
    Ok(found)
}

/// Parse and verify one snapshot file.
pub fn read_snapshot(path: &Path) -> Result<SnapshotDoc, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    let line = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    let original = verify_line(line)?;
    serde_json::from_slice(&original).map_err(|e| e.to_string())
}

/// Rebuild tables from snapshot rows, in parent-before-child order.
pub fn restore(doc: SnapshotDoc) -> Result<Tables, StoreError> {
    let mut tables = Tables::new();
    for row in doc.rows.models {
        tables.apply_model(row);
    }
    for row in doc.rows.layers {
        tables.apply_layer(row);
    }
    for row in doc.rows.versions {
        tables.apply_version(row);
    }
    for row in doc.rows.codebooks {
        tables.apply_codebook(row);
    }
    for row in doc.rows.weights {
        tables.apply_weight(row)?;
    }
    for row in doc.rows.accuracy {
        tables.apply_accuracy(row);
    }
    Ok(tables)
}
