//! Wire types shared by the sync server and the edge client: request and
//! response envelopes, the streamed weight-dump framing, and the checksums
//! both sides compute over payloads.
//!
//! Checksums are defined over canonical serializations (serde_json with
//! exact float round-tripping), so a receiver can re-serialize what it
//! parsed and compare — no byte buffering of the original body required.

use crate::nn::{Activation, LayerDef, ModelDef, NnError};
use crate::store::LayerRow;
use crate::versioning::DeltaEntry;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const API_VERSION: u32 = 1;

/// Rows per line in a streamed weight dump.
pub const WEIGHTS_CHUNK_ROWS: usize = 10_000;

pub const HDR_REQUEST_ID: &str = "x-request-id";
pub const HDR_TO_SEQ: &str = "x-to-seq";
pub const HDR_ENTRIES_CRC: &str = "x-entries-crc32";
pub const HDR_PUBLISHER_SECRET: &str = "x-publisher-secret";

/// POST request bodies. Unknown fields are ignored by construction (serde
/// default behavior), per the envelope contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestEnvelope<T> {
    #[serde(default = "default_api_version")]
    pub api_version: u32,
    #[serde(default)]
    pub request_id: String,
    pub payload: T,
    /// Field-selection filter: when present, response payload objects keep
    /// only these keys.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<Vec<String>>,
}

fn default_api_version() -> u32 {
    API_VERSION
}

impl<T> RequestEnvelope<T> {
    pub fn new(payload: T) -> Self {
        RequestEnvelope {
            api_version: API_VERSION,
            request_id: String::new(),
            payload,
            fields: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

/// Every JSON response body: exactly one of `payload` / `error` is set, and
/// `request_id` echoes the caller's.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseEnvelope {
    pub api_version: u32,
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub read_only: bool,
    pub models: u64,
    /// Highest committed seq across models — the store watermark.
    pub max_seq: u64,
}

/// Layer directory entry carried by weight dumps and cached on the client;
/// enough to rebuild the `ModelDef`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub layer_id: u64,
    pub name: String,
    pub index: usize,
    pub in_dim: u32,
    pub out_dim: u32,
    pub activation: Activation,
}

impl From<&LayerRow> for LayerInfo {
    fn from(row: &LayerRow) -> Self {
        LayerInfo {
            layer_id: row.layer_id,
            name: row.name.clone(),
            index: row.index,
            in_dim: row.in_dim,
            out_dim: row.out_dim,
            activation: row.activation,
        }
    }
}

impl LayerInfo {
    pub fn to_layer_def(&self) -> LayerDef {
        LayerDef {
            name: self.name.clone(),
            index: self.index,
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            activation: self.activation,
        }
    }
}

/// Rebuild a `ModelDef` from a dump's layer directory (sorted by index).
pub fn model_def_from_layers(
    model_name: &str,
    layers: &[LayerInfo],
) -> Result<ModelDef, NnError> {
    let mut sorted: Vec<&LayerInfo> = layers.iter().collect();
    sorted.sort_by_key(|l| l.index);
    ModelDef::new(model_name, sorted.into_iter().map(LayerInfo::to_layer_def).collect())
}

/// Payload of `GET /v1/models/{name}/delta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaResponse {
    pub model: String,
    pub model_id: u64,
    /// Seq of the latest major version at or before `to_seq` (0 if none).
    pub lineage_seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<String>,
    pub delta: crate::versioning::DeltaSet,
}

/// First line of a weight-dump body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub api_version: u32,
    pub request_id: String,
    pub model: String,
    pub model_id: u64,
    pub seq: u64,
    pub lineage_seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<String>,
    pub layers: Vec<LayerInfo>,
    pub total_rows: u64,
    pub chunk_rows: u32,
}

/// One chunk line: at most `chunk_rows` `(layer_id, flat_index, value)` rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsChunk {
    pub rows: Vec<(u64, u32, f64)>,
}

/// Last line: row count and CRC32 over every row's canonical serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFooter {
    pub rows: u64,
    pub crc32: u32,
}

/// Payload of `POST /v1/models/{name}/versions`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommitRequest {
    /// The weight-file bytes, base64.
    pub weights_b64: String,
    #[serde(default)]
    pub major: bool,
    #[serde(default)]
    pub message: String,
    /// Rebuild the server's configured static tiers at the new version.
    #[serde(default)]
    pub rebuild_tiers: bool,
    /// Registers the model on first commit; ignored when it already exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_def: Option<ModelDef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommitResponse {
    pub model: String,
    pub model_id: u64,
    pub version_id: u64,
    pub seq: u64,
    pub major: bool,
    pub changed_count: u64,
    pub unchanged_count: u64,
    pub tombstoned_count: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rebuilt_tiers: Vec<TierRebuild>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TierRebuild {
    pub tier: String,
    pub ok: bool,
    pub detail: String,
}

/// Payload of `POST /v1/models/{name}/licenses` (dynamic licensing).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LicenseCreateRequest {
    pub target_accuracy: f64,
    pub tolerance: f64,
    pub k_intervals: u32,
    /// Name of a server-resident evaluation dataset.
    pub eval_dataset_ref: String,
    /// Version to license; defaults to production.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LicenseCreateResponse {
    /// Generated tier name usable as `license=` on weight/delta requests.
    pub tier_token: String,
    pub mask: crate::licensing::LicenseMask,
}

/// Keeps only `fields` keys in a JSON object, or in each element of a JSON
/// array of objects; other shapes pass through untouched.
pub fn project_fields(value: &mut serde_json::Value, fields: &[String]) {
    match value {
        serde_json::Value::Array(items) => {
            for item in items {
                project_fields(item, fields);
            }
        }
        serde_json::Value::Object(map) => {
            map.retain(|k, _| fields.iter().any(|f| f == k));
        }
        _ => {}
    }
}

/// CRC32 of a delta entry list's canonical serialization; carried in the
/// `x-entries-crc32` response header and recomputed by the client.
pub fn entries_crc32(entries: &[DeltaEntry]) -> u32 {
    crc32fast::hash(&serde_json::to_vec(entries).expect("serializable entries"))
}

/// Incremental CRC over weight rows, chunk-boundary independent: each row is
/// hashed as its own canonical serialization.
#[derive(Default)]
pub struct RowsCrc(crc32fast::Hasher);

impl RowsCrc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, row: &(u64, u32, f64)) {
        self.0.update(&serde_json::to_vec(row).expect("serializable row"));
    }

    pub fn finalize(self) -> u32 {
        self.0.finalize()
    }
}

#[derive(Debug, Error)]
pub enum WireParseError {
    #[error("weight dump line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("weight dump is missing its {0} line")]
    MissingPart(&'static str),
    #[error("weight dump checksum mismatch: footer {footer:#010x}, computed {computed:#010x}")]
    CrcMismatch { footer: u32, computed: u32 },
    #[error("weight dump row count mismatch: footer says {footer}, body has {body}")]
    RowCountMismatch { footer: u64, body: u64 },
}

/// Render a weight dump as its NDJSON lines (header, chunks, footer), each
/// line newline-terminated.
pub fn weights_body_lines(header: &WeightsHeader, rows: &[(u64, u32, f64)]) -> Vec<String> {
    let chunk_rows = header.chunk_rows.max(1) as usize;
    let mut lines = Vec::with_capacity(2 + rows.len() / chunk_rows);
    lines.push(format!("{}\n", serde_json::to_string(header).expect("header")));
    let mut crc = RowsCrc::new();
    for chunk in rows.chunks(chunk_rows) {
        for row in chunk {
            crc.update(row);
        }
        let line = serde_json::to_string(&WeightsChunk { rows: chunk.to_vec() }).expect("chunk");
        lines.push(format!("{line}\n"));
    }
    let footer = WeightsFooter { rows: rows.len() as u64, crc32: crc.finalize() };
    lines.push(format!("{}\n", serde_json::to_string(&footer).expect("footer")));
    lines
}

/// A parsed, checksum-verified weight dump.
#[derive(Debug, Clone)]
pub struct WeightsDump {
    pub header: WeightsHeader,
    pub rows: Vec<(u64, u32, f64)>,
}

/// Parse and verify a full weight-dump body.
pub fn parse_weights_body(body: &[u8]) -> Result<WeightsDump, WireParseError> {
    let text = std::str::from_utf8(body)
        .map_err(|e| WireParseError::BadLine { line: 0, reason: format!("not UTF-8: {e}") })?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

    let (n, first) = lines.next().ok_or(WireParseError::MissingPart("header"))?;
    let header: WeightsHeader = serde_json::from_str(first)
        .map_err(|e| WireParseError::BadLine { line: n + 1, reason: e.to_string() })?;

    let mut rows = Vec::new();
    let mut crc = RowsCrc::new();
    let mut footer: Option<WeightsFooter> = None;
    for (n, line) in lines {
        if footer.is_some() {
            return Err(WireParseError::BadLine {
                line: n + 1,
                reason: "content after footer".into(),
            });
        }
        if let Ok(chunk) = serde_json::from_str::<WeightsChunk>(line) {
            for row in &chunk.rows {
                crc.update(row);
            }
            rows.extend(chunk.rows);
        } else {
            footer = Some(
                serde_json::from_str::<WeightsFooter>(line)
                    .map_err(|e| WireParseError::BadLine { line: n + 1, reason: e.to_string() })?,
            );
        }
    }
    let footer = footer.ok_or(WireParseError::MissingPart("footer"))?;
    if footer.rows != rows.len() as u64 {
        return Err(WireParseError::RowCountMismatch { footer: footer.rows, body: rows.len() as u64 });
    }
    let computed = crc.finalize();
    if footer.crc32 != computed {
        return Err(WireParseError::CrcMismatch { footer: footer.crc32, computed });
    }
    Ok(WeightsDump { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(rows: u64) -> WeightsHeader {
        WeightsHeader {
            api_version: API_VERSION,
            request_id: "r1".into(),
            model: "m".into(),
            model_id: 1,
            seq: 3,
            lineage_seq: 0,
            tier: None,
            layers: vec![LayerInfo {
                layer_id: 1,
                name: "dense0".into(),
                index: 0,
                in_dim: 2,
                out_dim: 2,
                activation: Activation::Softmax,
            }],
            total_rows: rows,
            chunk_rows: 3,
        }
    }

    #[test]
    fn weight_dump_round_trips_including_chunk_boundaries() {
        let rows: Vec<(u64, u32, f64)> = (0..8u32)
            .map(|i| (1u64, i, (i as f64 + 0.1) * if i % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let lines = weights_body_lines(&header(8), &rows);
        // 1 header + ceil(8/3)=3 chunks + 1 footer.
        assert_eq!(lines.len(), 5);
        let body: String = lines.concat();
        let dump = parse_weights_body(body.as_bytes()).unwrap();
        assert_eq!(dump.rows, rows);
        assert_eq!(dump.header.model, "m");
    }

    #[test]
    fn empty_dump_has_just_header_and_footer() {
        let lines = weights_body_lines(&header(0), &[]);
        assert_eq!(lines.len(), 2);
        let dump = parse_weights_body(lines.concat().as_bytes()).unwrap();
        assert!(dump.rows.is_empty());
    }

    #[test]
    fn tampered_value_fails_the_crc() {
        let rows = vec![(1u64, 0u32, 0.25f64), (1, 1, -0.5)];
        let body: String = weights_body_lines(&header(2), &rows).concat();
        let tampered = body.replace("-0.5", "-0.75");
        match parse_weights_body(tampered.as_bytes()) {
            Err(WireParseError::CrcMismatch { .. }) => {}
            other => panic!("expected CrcMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_dump_reports_missing_footer() {
        let rows = vec![(1u64, 0u32, 0.25f64)];
        let lines = weights_body_lines(&header(1), &rows);
        let body: String = lines[..lines.len() - 1].concat();
        assert!(matches!(
            parse_weights_body(body.as_bytes()),
            Err(WireParseError::MissingPart("footer"))
        ));
    }

    #[test]
    fn rows_crc_is_chunking_independent() {
        let rows: Vec<(u64, u32, f64)> = (0..10u32).map(|i| (2u64, i, i as f64 / 3.0)).collect();
        let mut h = header(10);
        let one: String = weights_body_lines(&h, &rows).concat();
        h.chunk_rows = 10;
        let other: String = weights_body_lines(&h, &rows).concat();
        let a = parse_weights_body(one.as_bytes()).unwrap();
        let b = parse_weights_body(other.as_bytes()).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn projection_keeps_only_requested_keys() {
        let mut v = serde_json::json!([
            {"seq": 1, "production": true, "message": "a"},
            {"seq": 2, "production": false, "message": "b"}
        ]);
        project_fields(&mut v, &["seq".into(), "production".into()]);
        assert_eq!(
            v,
            serde_json::json!([
                {"seq": 1, "production": true},
                {"seq": 2, "production": false}
            ])
        );
    }

    #[test]
    fn request_envelope_ignores_unknown_fields() {
        let body = r#"{"api_version":1,"request_id":"x","payload":{"target_accuracy":0.7,
            "tolerance":0.05,"k_intervals":20,"eval_dataset_ref":"blobs","surprise":42},
            "another_unknown":true}"#;
        let env: RequestEnvelope<LicenseCreateRequest> = serde_json::from_str(body).unwrap();
        assert_eq!(env.request_id, "x");
        assert_eq!(env.payload.k_intervals, 20);
    }

    #[test]
    fn entries_crc_survives_a_parse_reserialize_cycle() {
        let entries = vec![
            DeltaEntry { layer_id: 1, flat_index: 0, value: 0.1 + 0.2, tombstone: false, seq: 2 },
            DeltaEntry { layer_id: 1, flat_index: 5, value: 0.0, tombstone: true, seq: 3 },
            DeltaEntry { layer_id: 2, flat_index: 9, value: -1.23e-300, tombstone: false, seq: 3 },
        ];
        let crc = entries_crc32(&entries);
        let json = serde_json::to_string(&entries).unwrap();
        let back: Vec<DeltaEntry> = serde_json::from_str(&json).unwrap();
        assert_eq!(entries_crc32(&back), crc);
    }
}
