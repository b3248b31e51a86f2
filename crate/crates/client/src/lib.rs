//! Edge-device client for the weight sync server.
//!
//! The client keeps one cache file per model (see [`cache::LocalCache`]) and
//! exposes three operations: [`sync`] (bring the cache to the server's
//! production version, preferring a single delta request), model loading via
//! the cache, and [`infer`] for running the reconstructed network offline.
//!
//! Sync never leaves a broken cache behind: payloads are checksum-verified
//! before anything is written, and the cache file is replaced atomically.

pub mod cache;

pub use cache::LocalCache;

use serde::Serialize;
use std::path::PathBuf;
use std::time::Duration;
use thiserror::Error;
use wvlt_core::nn::{forward, NnError};
use wvlt_core::versioning::DeltaSet;
use wvlt_core::wire::{
    entries_crc32, parse_weights_body, ResponseEnvelope, WireParseError, HDR_ENTRIES_CRC,
    HDR_REQUEST_ID,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status} {code}: {message}")]
    Server { status: u16, code: String, message: String },
    #[error("cache {path}: {reason}")]
    CorruptCache { path: String, reason: String },
    #[error("payload: {0}")]
    CorruptPayload(#[from] WireParseError),
    #[error("delta checksum mismatch: header says {header}, body hashes to {computed}")]
    DeltaCrc { header: u32, computed: u32 },
    #[error("no usable cache at {0}; run a sync first")]
    NotCached(String),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("malformed response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Server base URL, e.g. `http://127.0.0.1:7070`.
    pub server_url: String,
    pub model: String,
    pub cache_path: PathBuf,
    /// License tier to sync under; `None` fetches unrestricted weights.
    pub tier: Option<String>,
    pub timeout: Duration,
}

impl ClientConfig {
    pub fn new(
        server_url: impl Into<String>,
        model: impl Into<String>,
        cache_path: impl Into<PathBuf>,
    ) -> Self {
        ClientConfig {
            server_url: server_url.into(),
            model: model.into(),
            cache_path: cache_path.into(),
            tier: None,
            timeout: Duration::from_secs(30),
        }
    }
}

/// What one [`sync`] did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncReport {
    pub model: String,
    /// Cache seq before the sync; 0 when there was no usable cache.
    pub from_seq: u64,
    pub to_seq: u64,
    pub lineage_seq: u64,
    pub tier: Option<String>,
    /// Delta entries applied; a full fetch counts its weight rows instead.
    pub entries_applied: u64,
    pub bytes_received: u64,
    pub full_sync: bool,
    pub requests: u32,
}

fn next_request_id() -> String {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(1);
    format!("edge-{}-{}", std::process::id(), N.fetch_add(1, Ordering::Relaxed))
}

fn server_error(status: u16, env: &ResponseEnvelope) -> ClientError {
    match &env.error {
        Some(e) => ClientError::Server {
            status,
            code: e.code.clone(),
            message: e.message.clone(),
        },
        None => ClientError::Server {
            status,
            code: "Unknown".into(),
            message: "error response without an error object".into(),
        },
    }
}

/// Errors on which a delta attempt falls back to a full fetch instead of
/// failing the sync: lineage breaks, rollbacks behind the cache, and tiers
/// that were never built for the cached version.
fn delta_fallback(code: &str) -> bool {
    matches!(code, "CrossLineage" | "BadRange" | "UnknownTier" | "UnknownVersion")
}

/// Bring the cache at `config.cache_path` to the server's current production
/// version.
///
/// With a usable cache for the same model and tier this is a single delta
/// request. Without one — or when the server says the delta cannot bridge the
/// gap — the client discards local state and downloads the full (possibly
/// license-filtered) weight set. A corrupt cache file is treated as absent:
/// sync is the recovery path, so it must not refuse to run.
pub fn sync(config: &ClientConfig) -> Result<SyncReport, ClientError> {
    let http = reqwest::blocking::Client::builder()
        .timeout(config.timeout)
        .build()?;

    let cached = match LocalCache::load(&config.cache_path) {
        Ok(c) if c.model == config.model && c.tier == config.tier => Some(c),
        Ok(c) => {
            tracing::warn!(
                "cache at {} holds {:?}/{:?}, wanted {:?}/{:?}; refetching",
                config.cache_path.display(),
                c.model,
                c.tier,
                config.model,
                config.tier
            );
            None
        }
        Err(ClientError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(ClientError::CorruptCache { path, reason }) => {
            tracing::warn!("discarding corrupt cache at {path}: {reason}");
            None
        }
        Err(e) => return Err(e),
    };

    match cached {
        Some(cache) => sync_by_delta(config, &http, cache),
        None => full_fetch(config, &http, 0, 1),
    }
}

fn sync_by_delta(
    config: &ClientConfig,
    http: &reqwest::blocking::Client,
    mut cache: LocalCache,
) -> Result<SyncReport, ClientError> {
    let mut url = format!(
        "{}/v1/models/{}/delta?from_seq={}",
        config.server_url, config.model, cache.seq
    );
    if let Some(tier) = &config.tier {
        url.push_str(&format!("&license={tier}"));
    }
    let resp = http
        .get(url)
        .header(HDR_REQUEST_ID, next_request_id())
        .send()?;
    let status = resp.status().as_u16();
    let crc_header: Option<u32> = resp
        .headers()
        .get(HDR_ENTRIES_CRC)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok());
    let body = resp.bytes()?;
    let env: ResponseEnvelope = serde_json::from_slice(&body)
        .map_err(|e| ClientError::BadResponse(e.to_string()))?;

    if status != 200 {
        let err = server_error(status, &env);
        if let ClientError::Server { code, .. } = &err {
            if delta_fallback(code) {
                tracing::info!("delta from seq {} refused ({code}); full fetch", cache.seq);
                return full_fetch(config, http, cache.seq, 2);
            }
        }
        return Err(err);
    }

    let payload = env
        .payload
        .ok_or_else(|| ClientError::BadResponse("missing payload".into()))?;
    let lineage_seq = payload
        .get("lineage_seq")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ClientError::BadResponse("missing lineage_seq".into()))?;
    let delta: DeltaSet = serde_json::from_value(
        payload
            .get("delta")
            .cloned()
            .ok_or_else(|| ClientError::BadResponse("missing delta".into()))?,
    )
    .map_err(|e| ClientError::BadResponse(e.to_string()))?;

    let computed = entries_crc32(&delta.entries);
    if let Some(header) = crc_header {
        if header != computed {
            return Err(ClientError::DeltaCrc { header, computed });
        }
    }

    let from_seq = cache.seq;
    for entry in &delta.entries {
        let key = (entry.layer_id, entry.flat_index);
        if entry.tombstone {
            cache.entries.remove(&key);
        } else {
            cache.entries.insert(key, entry.value);
        }
    }
    cache.seq = delta.to_seq;
    cache.lineage_seq = lineage_seq;
    cache.last_sync_ms = now_ms();
    cache.save(&config.cache_path)?;

    Ok(SyncReport {
        model: config.model.clone(),
        from_seq,
        to_seq: delta.to_seq,
        lineage_seq,
        tier: config.tier.clone(),
        entries_applied: delta.entries.len() as u64,
        bytes_received: body.len() as u64,
        full_sync: false,
        requests: 1,
    })
}

fn full_fetch(
    config: &ClientConfig,
    http: &reqwest::blocking::Client,
    from_seq: u64,
    requests: u32,
) -> Result<SyncReport, ClientError> {
    let mut url = format!("{}/v1/models/{}/weights", config.server_url, config.model);
    if let Some(tier) = &config.tier {
        url.push_str(&format!("?license={tier}"));
    }
    let resp = http
        .get(url)
        .header(HDR_REQUEST_ID, next_request_id())
        .send()?;
    let status = resp.status().as_u16();
    let body = resp.bytes()?;
    if status != 200 {
        let env: ResponseEnvelope = serde_json::from_slice(&body)
            .map_err(|e| ClientError::BadResponse(e.to_string()))?;
        return Err(server_error(status, &env));
    }

    let dump = parse_weights_body(&body)?;
    let cache = LocalCache {
        model: dump.header.model.clone(),
        model_id: dump.header.model_id,
        seq: dump.header.seq,
        lineage_seq: dump.header.lineage_seq,
        tier: dump.header.tier.clone(),
        last_sync_ms: now_ms(),
        layers: dump.header.layers.clone(),
        entries: dump
            .rows
            .iter()
            .map(|(layer_id, flat, value)| ((*layer_id, *flat), *value))
            .collect(),
    };
    cache.save(&config.cache_path)?;

    Ok(SyncReport {
        model: config.model.clone(),
        from_seq,
        to_seq: dump.header.seq,
        lineage_seq: dump.header.lineage_seq,
        tier: dump.header.tier,
        entries_applied: dump.rows.len() as u64,
        bytes_received: body.len() as u64,
        full_sync: true,
        requests,
    })
}

fn now_ms() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// One offline prediction from a reconstructed cache.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inference {
    pub class: usize,
    pub outputs: Vec<f64>,
}

/// Run the cached model on one input vector. Entirely offline: the cache
/// carries the layer directory, so no server round trip is needed.
pub fn infer(cache: &LocalCache, input: &[f64]) -> Result<Inference, ClientError> {
    let def = cache.model_def()?;
    let weights = cache.to_weight_map()?;
    let outputs = forward(&def, &weights, input)?;
    Ok(Inference { class: wvlt_core::nn::argmax(&outputs), outputs })
}

/// Load the cache at `path`, failing loudly on corruption (unlike [`sync`],
/// which recovers by refetching).
pub fn load_cache(path: impl Into<PathBuf>) -> Result<LocalCache, ClientError> {
    let path = path.into();
    match LocalCache::load(&path) {
        Err(ClientError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ClientError::NotCached(path.display().to_string()))
        }
        other => other,
    }
}
