//! Append-only JSONL journals with per-line CRC32 trailers.
//!
//! Each line is a JSON object whose final member is `"crc32"`, computed over
//! the serialized object *without* that member. Verification hashes the raw
//! prefix bytes rather than re-serializing, so it holds regardless of float
//! formatting. The search for the trailer scans for the last `,"crc32":`
//! substring, which cannot occur inside a JSON string because serialization
//! escapes the quote characters.

use super::StoreError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

const CRC_KEY: &[u8] = b",\"crc32\":";

/// Serialize `row`, add the transaction id, and wrap with a CRC trailer and
/// trailing newline.
pub fn encode_line<T: Serialize>(txn: u64, row: &T) -> Result<Vec<u8>, StoreError> {
    let mut value = serde_json::to_value(row).map_err(io_invalid)?;
    let obj = value
        .as_object_mut()
        .expect("journal rows serialize to JSON objects");
    obj.insert("txn".into(), txn.into());
    Ok(seal_line(serde_json::to_vec(&value).map_err(io_invalid)?))
}

/// Wrap already-serialized JSON object bytes with the CRC trailer.
pub fn seal_line(mut bytes: Vec<u8>) -> Vec<u8> {
    debug_assert_eq!(bytes.last(), Some(&b'}'));
    let crc = crc32fast::hash(&bytes);
    bytes.pop();
    bytes.extend_from_slice(CRC_KEY);
    bytes.extend_from_slice(crc.to_string().as_bytes());
    bytes.push(b'}');
    bytes.push(b'\n');
    bytes
}

fn io_invalid(err: serde_json::Error) -> StoreError {
    StoreError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, err))
}

/// Check the CRC trailer of one line (without its newline) and return the
/// original object bytes (trailer stripped, closing brace restored).
pub fn verify_line(line: &[u8]) -> Result<Vec<u8>, String> {
    if line.last() != Some(&b'}') {
        return Err("line does not end with '}'".into());
    }
    let body = &line[..line.len() - 1];
    let at = find_last(body, CRC_KEY).ok_or("missing crc32 trailer")?;
    let digits = &body[at + CRC_KEY.len()..];
    if digits.is_empty() || !digits.iter().all(u8::is_ascii_digit) {
        return Err("malformed crc32 trailer".into());
    }
    let stored: u32 = std::str::from_utf8(digits)
        .unwrap()
        .parse()
        .map_err(|_| "crc32 trailer out of range".to_string())?;
    let mut original = body[..at].to_vec();
    original.push(b'}');
    let computed = crc32fast::hash(&original);
    if computed != stored {
        return Err(format!("crc mismatch: stored {stored}, computed {computed}"));
    }
    Ok(original)
}

fn find_last(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    if haystack.len() < needle.len() {
        return None;
    }
    haystack.windows(needle.len()).rposition(|w| w == needle)
}

/// A journal entry that passed CRC and parsed as `T`.
#[derive(Debug)]
pub struct Entry<T> {
    pub txn: u64,
    pub row: T,
}

/// Result of reading one journal file.
#[derive(Debug)]
pub struct ReadOutcome<T> {
    pub entries: Vec<Entry<T>>,
    /// Byte length of the valid prefix; a writer reopening the store
    /// truncates the file here before appending.
    pub valid_len: u64,
    /// Bytes past `valid_len`, present only when the file ends in a torn
    /// (unparseable or CRC-failing) final line.
    pub torn_bytes: u64,
}

#[derive(serde::Deserialize)]
struct TxnField {
    txn: u64,
}

/// Read and verify a whole journal. A bad *final* line is tolerated as a torn
/// tail from an interrupted append; a bad line anywhere else is corruption.
pub fn read_journal<T: DeserializeOwned>(
    path: &Path,
    file_name: &str,
) -> Result<ReadOutcome<T>, StoreError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
            return Ok(ReadOutcome { entries: Vec::new(), valid_len: 0, torn_bytes: 0 })
        }
        Err(err) => return Err(err.into()),
    };
    let mut entries = Vec::new();
    let mut pos = 0usize;
    let mut line_no = 0usize;
    while pos < bytes.len() {
        line_no += 1;
        let Some(rel) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            // No terminating newline: a torn final write.
            return Ok(ReadOutcome {
                entries,
                valid_len: pos as u64,
                torn_bytes: (bytes.len() - pos) as u64,
            });
        };
        let end = pos + rel;
        match decode_line::<T>(&bytes[pos..end]) {
            Ok((txn, row)) => entries.push(Entry { txn, row }),
            Err(reason) => {
                if end + 1 == bytes.len() {
                    // Complete-looking but invalid final line: treat as torn.
                    return Ok(ReadOutcome {
                        entries,
                        valid_len: pos as u64,
                        torn_bytes: (bytes.len() - pos) as u64,
                    });
                }
                return Err(StoreError::CorruptJournal {
                    file: file_name.to_string(),
                    line: line_no,
                    reason,
                });
            }
        }
        pos = end + 1;
    }
    Ok(ReadOutcome { entries, valid_len: bytes.len() as u64, torn_bytes: 0 })
}

fn decode_line<T: DeserializeOwned>(line: &[u8]) -> Result<(u64, T), String> {
    let original = verify_line(line)?;
    let txn = serde_json::from_slice::<TxnField>(&original)
        .map_err(|e| format!("missing txn field: {e}"))?
        .txn;
    let row = serde_json::from_slice::<T>(&original).map_err(|e| e.to_string())?;
    Ok((txn, row))
}

/// Append-side handle for one journal file.
pub struct JournalWriter {
    file: File,
}

impl JournalWriter {
    /// Open for appending, first truncating any torn tail left by a crash.
    pub fn open(path: PathBuf, valid_len: u64) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() > valid_len {
            file.set_len(valid_len)?;
        }
        Ok(JournalWriter { file })
    }

    pub fn append(&mut self, lines: &[Vec<u8>], sync: bool) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(lines.iter().map(Vec::len).sum());
        for line in lines {
            buf.extend_from_slice(line);
        }
        self.file.write_all(&buf)?;
        if sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}
