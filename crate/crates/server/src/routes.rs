//! Request handlers. Every JSON response is a `ResponseEnvelope` echoing the
//! caller's request id (header `x-request-id`, else the body envelope's,
//! else server-generated); weight dumps stream NDJSON instead and carry
//! their ids in headers only.

use crate::App;
use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Json, Path, Query, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::prelude::{Engine as _, BASE64_STANDARD};
use serde_json::json;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use wvlt_core::licensing::{self, LicenseError, LicenseRequest};
use wvlt_core::nn::evaluate_accuracy;
use wvlt_core::store::StoreError;
use wvlt_core::versioning::{self, DeltaEntry, DeltaSet, VersionError};
use wvlt_core::weightfile;
use wvlt_core::wire::{
    entries_crc32, project_fields, CommitRequest, CommitResponse, DeltaResponse, HealthResponse,
    LayerInfo, LicenseCreateRequest, LicenseCreateResponse, RequestEnvelope, ResponseEnvelope,
    TierRebuild, WeightsHeader, WireError, API_VERSION, HDR_ENTRIES_CRC, HDR_PUBLISHER_SECRET,
    HDR_REQUEST_ID, HDR_TO_SEQ, WEIGHTS_CHUNK_ROWS,
};

pub(crate) fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/models", get(models))
        .route("/v1/models/{name}/versions", get(versions).post(commit))
        .route("/v1/models/{name}/delta", get(delta))
        .route("/v1/models/{name}/weights", get(weights))
        .route("/v1/models/{name}/licenses", post(create_license))
        .layer(DefaultBodyLimit::max(32 * 1024 * 1024))
        .with_state(app)
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    details: Option<serde_json::Value>,
    request_id: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let env = ResponseEnvelope {
            api_version: API_VERSION,
            request_id: self.request_id.clone(),
            payload: None,
            error: Some(WireError {
                code: self.code.to_string(),
                message: self.message,
                details: self.details,
            }),
        };
        with_request_id((self.status, axum::Json(env)).into_response(), &self.request_id)
    }
}

fn api(rid: &str, status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
    ApiError { status, code, message: message.into(), details: None, request_id: rid.to_string() }
}

fn with_request_id(mut resp: Response, rid: &str) -> Response {
    let value = HeaderValue::from_str(rid).unwrap_or(HeaderValue::from_static("invalid"));
    resp.headers_mut().insert(HDR_REQUEST_ID, value);
    resp
}

fn envelope_ok(rid: &str, payload: impl serde::Serialize, fields: Option<&[String]>) -> Response {
    let mut value = serde_json::to_value(payload).expect("serializable payload");
    if let Some(f) = fields {
        project_fields(&mut value, f);
    }
    let env = ResponseEnvelope {
        api_version: API_VERSION,
        request_id: rid.to_string(),
        payload: Some(value),
        error: None,
    };
    with_request_id(axum::Json(env).into_response(), rid)
}

/// Header id, else `fallback` (a POST body's envelope id), else generated.
fn request_id(headers: &HeaderMap, fallback: &str, app: &App) -> String {
    headers
        .get(HDR_REQUEST_ID)
        .and_then(|v| v.to_str().ok())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .or_else(|| (!fallback.is_empty()).then(|| fallback.to_string()))
        .unwrap_or_else(|| format!("srv-{}", app.req_counter.fetch_add(1, Ordering::Relaxed)))
}

fn err_store(rid: &str, e: StoreError) -> ApiError {
    let (status, code) = match &e {
        StoreError::UnknownModel(_) => (StatusCode::NOT_FOUND, "UnknownModel"),
        StoreError::UnknownVersion { .. } | StoreError::UnknownVersionId(_) => {
            (StatusCode::NOT_FOUND, "UnknownVersion")
        }
        StoreError::ReadOnly | StoreError::LockHeld { .. } => {
            (StatusCode::LOCKED, "StoreLocked")
        }
        StoreError::ConstraintViolation(_) => (StatusCode::CONFLICT, "ConstraintViolation"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "StoreError"),
    };
    api(rid, status, code, e.to_string())
}

fn err_version(rid: &str, e: VersionError) -> ApiError {
    match e {
        VersionError::CrossLineage { from_seq, to_seq, major_seq } => ApiError {
            status: StatusCode::CONFLICT,
            code: "CrossLineage",
            message: format!(
                "a major version at seq {major_seq} separates {from_seq} and {to_seq}; fetch full weights"
            ),
            details: Some(json!({ "major_seq": major_seq })),
            request_id: rid.to_string(),
        },
        VersionError::BadRange { .. } => api(rid, StatusCode::BAD_REQUEST, "BadRange", e.to_string()),
        VersionError::NoPredecessor => api(rid, StatusCode::CONFLICT, "NoPredecessor", e.to_string()),
        VersionError::Model(_) => api(rid, StatusCode::BAD_REQUEST, "DimensionMismatch", e.to_string()),
        VersionError::Store(se) => err_store(rid, se),
    }
}

fn err_license(rid: &str, e: LicenseError) -> ApiError {
    match e {
        LicenseError::TargetUnreachable { target, tolerance, best_effort } => ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "TargetUnreachable",
            message: format!(
                "cannot reach accuracy {target} (tolerance {tolerance}); best effort measures {:.4}",
                best_effort.measured_accuracy
            ),
            details: Some(json!({ "best_effort": *best_effort })),
            request_id: rid.to_string(),
        },
        LicenseError::UnknownTier { .. } => api(rid, StatusCode::NOT_FOUND, "UnknownTier", e.to_string()),
        LicenseError::EmptyDataset | LicenseError::InvalidRequest(_) => {
            api(rid, StatusCode::BAD_REQUEST, "InvalidRequest", e.to_string())
        }
        LicenseError::Model(_) => api(rid, StatusCode::BAD_REQUEST, "DimensionMismatch", e.to_string()),
        LicenseError::Store(se) => err_store(rid, se),
        LicenseError::Version(ve) => err_version(rid, ve),
    }
}

fn parse_seq(q: &HashMap<String, String>, key: &str, rid: &str) -> Result<Option<u64>, ApiError> {
    match q.get(key) {
        None => Ok(None),
        Some(raw) => raw.parse::<u64>().map(Some).map_err(|_| {
            api(rid, StatusCode::BAD_REQUEST, "MalformedSeq", format!("{key}={raw:?} is not a seq"))
        }),
    }
}

fn fields_param(q: &HashMap<String, String>) -> Option<Vec<String>> {
    q.get("fields").map(|s| {
        s.split(',')
            .map(|f| f.trim().to_string())
            .filter(|f| !f.is_empty())
            .collect()
    })
}

/// Seq of the newest major version at or before `upto`; 0 when the lineage
/// starts at the first commit.
fn lineage_seq(app: &App, model_id: u64, upto: u64) -> u64 {
    app.store
        .versions_of(model_id)
        .iter()
        .filter(|v| v.major && v.seq <= upto)
        .map(|v| v.seq)
        .max()
        .unwrap_or(0)
}

async fn health(State(app): State<Arc<App>>, headers: HeaderMap) -> Response {
    let rid = request_id(&headers, "", &app);
    let models = app.store.models();
    let max_seq = models
        .iter()
        .filter_map(|m| app.store.latest_seq(m.model_id))
        .max()
        .unwrap_or(0);
    let payload = HealthResponse {
        status: if app.read_only { "degraded".into() } else { "ok".into() },
        read_only: app.read_only,
        models: models.len() as u64,
        max_seq,
    };
    let status = if app.read_only { StatusCode::SERVICE_UNAVAILABLE } else { StatusCode::OK };
    let mut resp = envelope_ok(&rid, payload, None);
    *resp.status_mut() = status;
    resp
}

async fn models(
    State(app): State<Arc<App>>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> Response {
    let rid = request_id(&headers, "", &app);
    envelope_ok(&rid, app.store.models(), fields_param(&q).as_deref())
}

async fn versions(
    State(app): State<Arc<App>>,
    Path(name): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let rid = request_id(&headers, "", &app);
    let model = app.store.model_by_name(&name).map_err(|e| err_store(&rid, e))?;
    let rows = app.store.versions_of(model.model_id);
    Ok(envelope_ok(&rid, rows, fields_param(&q).as_deref()))
}

/// License-filter a delta: restricted new values become tombstones, and
/// positions whose visibility changed between the tier's masks at `from` and
/// `to` get synthetic entries, so applying the result to a masked `from`
/// state lands exactly on the masked `to` state.
fn filter_delta(
    app: &App,
    model_id: u64,
    from: u64,
    to: u64,
    tier: &str,
    mut delta: DeltaSet,
) -> Result<DeltaSet, LicenseError> {
    let mask_to = licensing::load_tier(&app.store, model_id, to, tier)?;
    let mask_from = if from == to {
        mask_to.clone()
    } else {
        licensing::load_tier(&app.store, model_id, from, tier)?
    };

    let changed: HashSet<(u64, u32)> =
        delta.entries.iter().map(|e| (e.layer_id, e.flat_index)).collect();
    for e in delta.entries.iter_mut() {
        if !e.tombstone && mask_to.restricts(e.layer_id, e.value) {
            e.value = 0.0;
            e.tombstone = true;
        }
    }
    for (layer_id, flat_index, v) in app.store.latest_weights_upto(model_id, to) {
        if changed.contains(&(layer_id, flat_index)) {
            continue;
        }
        let at_from = if mask_from.restricts(layer_id, v) { 0.0 } else { v };
        let at_to = if mask_to.restricts(layer_id, v) { 0.0 } else { v };
        if at_from.to_bits() != at_to.to_bits() {
            let tombstone = at_to.to_bits() == 0;
            delta.entries.push(DeltaEntry {
                layer_id,
                flat_index,
                value: at_to,
                tombstone,
                seq: to,
            });
        }
    }
    delta.entries.sort_by_key(|e| (e.layer_id, e.flat_index));

    let referenced: HashSet<u64> = delta.entries.iter().map(|e| e.layer_id).collect();
    delta.layers = app
        .store
        .layers_of(model_id)
        .into_iter()
        .filter(|l| referenced.contains(&l.layer_id))
        .map(|l| (l.layer_id, l.name))
        .collect();
    Ok(delta)
}

async fn delta(
    State(app): State<Arc<App>>,
    Path(name): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let rid = request_id(&headers, "", &app);
    let model = app.store.model_by_name(&name).map_err(|e| err_store(&rid, e))?;
    let from_seq = parse_seq(&q, "from_seq", &rid)?
        .ok_or_else(|| api(&rid, StatusCode::BAD_REQUEST, "MalformedSeq", "missing from_seq"))?;
    let target = match parse_seq(&q, "to_seq", &rid)? {
        Some(s) => s,
        None => app
            .store
            .production_version(model.model_id)
            .map(|v| v.seq)
            .ok_or_else(|| {
                api(&rid, StatusCode::CONFLICT, "NoProduction", "no production version set")
            })?,
    };

    let delta = versioning::delta(&app.store, model.model_id, from_seq, target)
        .map_err(|e| err_version(&rid, e))?;
    let tier = q.get("license").cloned();
    let delta = match &tier {
        Some(t) => filter_delta(&app, model.model_id, from_seq, target, t, delta)
            .map_err(|e| err_license(&rid, e))?,
        None => delta,
    };

    let crc = entries_crc32(&delta.entries);
    let payload = DeltaResponse {
        model: name,
        model_id: model.model_id,
        lineage_seq: lineage_seq(&app, model.model_id, target),
        tier,
        delta,
    };
    let mut resp = envelope_ok(&rid, payload, None);
    resp.headers_mut().insert(HDR_TO_SEQ, HeaderValue::from(target));
    resp.headers_mut().insert(HDR_ENTRIES_CRC, HeaderValue::from(crc));
    Ok(resp)
}

async fn weights(
    State(app): State<Arc<App>>,
    Path(name): Path<String>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let rid = request_id(&headers, "", &app);
    let model = app.store.model_by_name(&name).map_err(|e| err_store(&rid, e))?;
    let seq = match parse_seq(&q, "seq", &rid)? {
        Some(s) => {
            app.store
                .version_by_seq(model.model_id, s)
                .map_err(|e| err_store(&rid, e))?;
            s
        }
        None => app
            .store
            .production_version(model.model_id)
            .map(|v| v.seq)
            .ok_or_else(|| {
                api(&rid, StatusCode::CONFLICT, "NoProduction", "no production version set")
            })?,
    };

    let tier = q.get("license").cloned();
    let rows = match &tier {
        Some(t) => {
            let mask = licensing::load_tier(&app.store, model.model_id, seq, t)
                .map_err(|e| err_license(&rid, e))?;
            licensing::licensed_weight_rows(&app.store, model.model_id, seq, &mask)
                .map_err(|e| err_license(&rid, e))?
        }
        None => app.store.latest_weights_upto(model.model_id, seq),
    };

    let header = WeightsHeader {
        api_version: API_VERSION,
        request_id: rid.clone(),
        model: name,
        model_id: model.model_id,
        seq,
        lineage_seq: lineage_seq(&app, model.model_id, seq),
        tier,
        layers: app.store.layers_of(model.model_id).iter().map(LayerInfo::from).collect(),
        total_rows: rows.len() as u64,
        chunk_rows: WEIGHTS_CHUNK_ROWS as u32,
    };
    let lines = wvlt_core::wire::weights_body_lines(&header, &rows);
    let stream = futures::stream::iter(
        lines.into_iter().map(Ok::<String, std::convert::Infallible>),
    );
    let mut resp = Response::builder()
        .status(StatusCode::OK)
        .header("content-type", "application/x-ndjson")
        .header(HDR_TO_SEQ, seq)
        .body(Body::from_stream(stream))
        .expect("response");
    resp.headers_mut()
        .insert(HDR_REQUEST_ID, HeaderValue::from_str(&rid).unwrap_or(HeaderValue::from_static("invalid")));
    Ok(resp)
}

async fn commit(
    State(app): State<Arc<App>>,
    Path(name): Path<String>,
    headers: HeaderMap,
    Json(env): Json<RequestEnvelope<CommitRequest>>,
) -> Result<Response, ApiError> {
    let rid = request_id(&headers, &env.request_id, &app);
    if let Some(secret) = &app.secret {
        let presented = headers.get(HDR_PUBLISHER_SECRET).and_then(|v| v.to_str().ok());
        if presented != Some(secret.as_str()) {
            return Err(api(&rid, StatusCode::UNAUTHORIZED, "BadSecret", "missing or wrong publisher secret"));
        }
    }
    if app.read_only {
        return Err(api(&rid, StatusCode::LOCKED, "StoreLocked", "store is read-only (writer lock held elsewhere)"));
    }

    let req = env.payload;
    let bytes = BASE64_STANDARD.decode(&req.weights_b64).map_err(|e| {
        api(&rid, StatusCode::BAD_REQUEST, "BadWeightFile", format!("base64: {e}"))
    })?;
    let weights = weightfile::decode_weights(&bytes).map_err(|e| {
        api(&rid, StatusCode::BAD_REQUEST, "BadWeightFile", e.to_string())
    })?;

    let model = match app.store.model_by_name(&name) {
        Ok(m) => m,
        Err(StoreError::UnknownModel(_)) => match &req.model_def {
            Some(def) if def.model_name == name => app
                .store
                .register_model(def)
                .map_err(|e| err_store(&rid, e))?
                .model,
            Some(def) => {
                return Err(api(
                    &rid,
                    StatusCode::BAD_REQUEST,
                    "ModelNameMismatch",
                    format!("model_def names {:?} but the path names {name:?}", def.model_name),
                ))
            }
            None => {
                return Err(api(
                    &rid,
                    StatusCode::NOT_FOUND,
                    "UnknownModel",
                    format!("{name:?} is not registered; include model_def to register it"),
                ))
            }
        },
        Err(e) => return Err(err_store(&rid, e)),
    };

    let model_id = model.model_id;
    let blocking_app = app.clone();
    let (major, message, rebuild) = (req.major, req.message.clone(), req.rebuild_tiers);
    let result = tokio::task::spawn_blocking(move || {
        versioning::commit(&blocking_app.store, model_id, &weights, major, &message)
    })
    .await
    .map_err(|e| api(&rid, StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
    .map_err(|e| err_version(&rid, e))?;

    let mut rebuilt_tiers = Vec::new();
    if rebuild {
        let blocking_app = app.clone();
        let seq = result.seq;
        rebuilt_tiers = tokio::task::spawn_blocking(move || {
            rebuild_static_tiers(&blocking_app, model_id, seq)
        })
        .await
        .map_err(|e| api(&rid, StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
    }

    let payload = CommitResponse {
        model: name,
        model_id,
        version_id: result.version_id,
        seq: result.seq,
        major,
        changed_count: result.changed_count,
        unchanged_count: result.unchanged_count,
        tombstoned_count: result.tombstoned_count,
        rebuilt_tiers,
    };
    Ok(envelope_ok(&rid, payload, env.fields.as_deref()))
}

fn rebuild_static_tiers(app: &App, model_id: u64, seq: u64) -> Vec<TierRebuild> {
    app.tiers
        .iter()
        .map(|tier| {
            let outcome = match app.datasets.get(&tier.dataset) {
                None => Err(format!("unknown dataset {:?}", tier.dataset)),
                Some(data) => licensing::build_mask(
                    &app.store,
                    model_id,
                    seq,
                    data,
                    tier.target_accuracy,
                    tier.k_intervals,
                    tier.tolerance,
                )
                .map_err(|e| e.to_string())
                .and_then(|mask| {
                    licensing::save_tier(&app.store, &mask, &tier.name)
                        .map(|_| format!("measured {:.4}", mask.measured_accuracy))
                        .map_err(|e| e.to_string())
                }),
            };
            match outcome {
                Ok(detail) => TierRebuild { tier: tier.name.clone(), ok: true, detail },
                Err(detail) => TierRebuild { tier: tier.name.clone(), ok: false, detail },
            }
        })
        .collect()
}

async fn create_license(
    State(app): State<Arc<App>>,
    Path(name): Path<String>,
    headers: HeaderMap,
    Json(env): Json<RequestEnvelope<LicenseCreateRequest>>,
) -> Result<Response, ApiError> {
    let rid = request_id(&headers, &env.request_id, &app);
    if app.read_only {
        return Err(api(&rid, StatusCode::LOCKED, "StoreLocked", "store is read-only (writer lock held elsewhere)"));
    }
    let req = env.payload;
    LicenseRequest::Dynamic { target_accuracy: req.target_accuracy, tolerance: req.tolerance }
        .validate()
        .map_err(|e| err_license(&rid, e))?;
    if !app.datasets.contains_key(&req.eval_dataset_ref) {
        return Err(api(
            &rid,
            StatusCode::NOT_FOUND,
            "UnknownDataset",
            format!("no evaluation dataset {:?} registered", req.eval_dataset_ref),
        ));
    }
    let model = app.store.model_by_name(&name).map_err(|e| err_store(&rid, e))?;
    let seq = match req.seq {
        Some(s) => {
            app.store
                .version_by_seq(model.model_id, s)
                .map_err(|e| err_store(&rid, e))?;
            s
        }
        None => app
            .store
            .production_version(model.model_id)
            .map(|v| v.seq)
            .ok_or_else(|| {
                api(&rid, StatusCode::CONFLICT, "NoProduction", "no production version set")
            })?,
    };

    enum BuildFail {
        Precondition(f64),
        License(LicenseError),
    }
    let model_id = model.model_id;
    let blocking_app = app.clone();
    let result = tokio::task::spawn_blocking(move || {
        let data = &blocking_app.datasets[&req.eval_dataset_ref];
        let def = blocking_app
            .store
            .model_def(model_id)
            .map_err(|e| BuildFail::License(e.into()))?;
        let full = versioning::materialize(&blocking_app.store, model_id, seq)
            .map_err(|e| BuildFail::License(e.into()))
            .and_then(|w| {
                evaluate_accuracy(&def, &w, data).map_err(|e| BuildFail::License(e.into()))
            })?;
        if req.target_accuracy > full {
            return Err(BuildFail::Precondition(full));
        }
        let mask = licensing::build_mask(
            &blocking_app.store,
            model_id,
            seq,
            data,
            req.target_accuracy,
            req.k_intervals,
            req.tolerance,
        )
        .map_err(BuildFail::License)?;
        let token = format!(
            "dyn-{seq}-{}",
            blocking_app.dyn_counter.fetch_add(1, Ordering::Relaxed)
        );
        licensing::save_tier(&blocking_app.store, &mask, &token).map_err(BuildFail::License)?;
        Ok((token, mask))
    })
    .await
    .map_err(|e| api(&rid, StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;

    let (token, mut mask) = result.map_err(|fail| match fail {
        BuildFail::Precondition(full) => api(
            &rid,
            StatusCode::BAD_REQUEST,
            "PreconditionFailed",
            format!("target accuracy exceeds the full model's accuracy {full:.4}"),
        ),
        BuildFail::License(e) => err_license(&rid, e),
    })?;
    mask.tier_name = Some(token.clone());
    let payload = LicenseCreateResponse { tier_token: token, mask };
    Ok(envelope_ok(&rid, payload, env.fields.as_deref()))
}
