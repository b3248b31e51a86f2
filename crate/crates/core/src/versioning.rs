//! Version-control semantics over the store: commit, materialize, delta,
//! rollback, history.
//!
//! A commit diffs the incoming dense weights against the model's latest
//! materialized state with exact 64-bit equality and writes rows only for
//! positions that changed; positions that held a value and became zero get
//! tombstones. Major commits additionally rewrite every nonzero position
//! fresh, starting a new baseline lineage — deltas never cross a major
//! boundary. Materialization overlays the latest row per position onto a
//! zeroed parameter map and is a pure function of (store, seq).

use crate::nn::{NnError, WeightMap};
use crate::store::{Store, StoreError, VersionRow, VersionSpec, WeightDraft};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VersionError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("delta {from_seq}..{to_seq} crosses the major baseline at seq {major_seq}; a full sync is required")]
    CrossLineage {
        from_seq: u64,
        to_seq: u64,
        major_seq: u64,
    },
    #[error("invalid range: from_seq {from_seq} > to_seq {to_seq}")]
    BadRange { from_seq: u64, to_seq: u64 },
    #[error("nothing to roll back to: production is already at the earliest version")]
    NoPredecessor,
}

/// What a commit recorded. The three counts partition the positions compared
/// (every flat position of every layer).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitResult {
    pub version_id: u64,
    pub seq: u64,
    pub changed_count: u64,
    pub unchanged_count: u64,
    pub tombstoned_count: u64,
}

/// One collapsed change: the surviving write to a position within a range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub layer_id: u64,
    pub flat_index: u32,
    pub value: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tombstone: bool,
    pub seq: u64,
}

/// The collapsed change set between two seqs on one lineage. Carries a
/// layer-id directory so it can be applied to a name-keyed weight map
/// without further context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSet {
    pub from_seq: u64,
    pub to_seq: u64,
    /// (layer_id, layer_name) for every layer referenced by `entries`.
    pub layers: Vec<(u64, String)>,
    /// Sorted by (layer_id, flat_index); at most one entry per position.
    pub entries: Vec<DeltaEntry>,
}

/// Diff `weights` against the model's latest version and persist a new
/// version row plus rows for the changes. Equality is exact bit equality.
/// With `major`, every nonzero position is written fresh as a new baseline
/// (counts still report the comparison against the previous state).
pub fn commit(
    store: &Store,
    model_id: u64,
    weights: &WeightMap,
    major: bool,
    message: &str,
) -> Result<CommitResult, VersionError> {
    let def = store.model_def(model_id)?;
    weights.check_layout(&def)?;
    let layers = store.layers_of(model_id);

    // Taking the transaction first serializes this commit against other
    // writers, so the diff below sees a stable latest state.
    let mut txn = store.begin()?;
    let last_seq = store.latest_seq(model_id).unwrap_or(0);
    let parent = store
        .versions_of(model_id)
        .last()
        .map(|v| v.version_id);
    let old: HashMap<(u64, u32), f64> = store
        .latest_weights_upto(model_id, last_seq)
        .into_iter()
        .map(|(layer, flat, value)| ((layer, flat), value))
        .collect();

    let mut changed = 0u64;
    let mut unchanged = 0u64;
    let mut tombstoned = 0u64;
    let mut writes: Vec<(u64, u32, f64, bool)> = Vec::new();
    for layer in &layers {
        let lw = weights.get(&layer.name).expect("layout checked");
        for (flat, &new_value) in lw.values.iter().enumerate() {
            let flat = flat as u32;
            let old_value = old.get(&(layer.layer_id, flat)).copied();
            let new_is_zero = new_value.to_bits() == 0;
            match old_value {
                None if new_is_zero => unchanged += 1,
                None => {
                    changed += 1;
                    writes.push((layer.layer_id, flat, new_value, false));
                }
                Some(old_value) if old_value.to_bits() == new_value.to_bits() => {
                    unchanged += 1;
                    if major && !new_is_zero {
                        writes.push((layer.layer_id, flat, new_value, false));
                    }
                }
                Some(_) if new_is_zero => {
                    tombstoned += 1;
                    writes.push((layer.layer_id, flat, 0.0, true));
                }
                Some(_) => {
                    changed += 1;
                    writes.push((layer.layer_id, flat, new_value, false));
                }
            }
        }
    }

    let version = txn.insert_version(VersionSpec {
        model_id,
        major,
        production: false,
        parent_version: parent,
        message: message.to_string(),
        changed_count: changed,
        unchanged_count: unchanged,
        tombstoned_count: tombstoned,
    })?;
    let drafts: Vec<WeightDraft> = writes
        .into_iter()
        .map(|(layer_id, flat_index, value, tombstone)| WeightDraft {
            layer_id,
            flat_index,
            value,
            version_id: version.version_id,
            tombstone,
        })
        .collect();
    txn.insert_weight_rows(&drafts)?;
    txn.commit()?;
    Ok(CommitResult {
        version_id: version.version_id,
        seq: version.seq,
        changed_count: changed,
        unchanged_count: unchanged,
        tombstoned_count: tombstoned,
    })
}

/// Rebuild the full weight map at `seq`: a zeroed layout overlaid with the
/// latest surviving value per position.
pub fn materialize(store: &Store, model_id: u64, seq: u64) -> Result<WeightMap, VersionError> {
    store.version_by_seq(model_id, seq)?;
    let def = store.model_def(model_id)?;
    let name_of: HashMap<u64, String> = store
        .layers_of(model_id)
        .into_iter()
        .map(|l| (l.layer_id, l.name))
        .collect();
    let mut weights = WeightMap::zeroed(&def);
    for (layer_id, flat, value) in store.latest_weights_upto(model_id, seq) {
        let name = &name_of[&layer_id];
        let lw = weights.get_mut(name).expect("layer from def");
        lw.values[flat as usize] = value;
    }
    Ok(weights)
}

/// The collapsed change set carrying a client at `from_seq` to `to_seq`.
/// Refused if a major baseline lies inside `(from_seq, to_seq]`.
pub fn delta(
    store: &Store,
    model_id: u64,
    from_seq: u64,
    to_seq: u64,
) -> Result<DeltaSet, VersionError> {
    if from_seq > to_seq {
        return Err(VersionError::BadRange { from_seq, to_seq });
    }
    store.version_by_seq(model_id, from_seq)?;
    store.version_by_seq(model_id, to_seq)?;
    if let Some(major) = store
        .versions_of(model_id)
        .iter()
        .find(|v| v.major && v.seq > from_seq && v.seq <= to_seq)
    {
        return Err(VersionError::CrossLineage {
            from_seq,
            to_seq,
            major_seq: major.seq,
        });
    }

    let mut entries: Vec<DeltaEntry> = Vec::new();
    for (seq, row) in store.rows_in_range(model_id, from_seq, to_seq) {
        let entry = DeltaEntry {
            layer_id: row.layer_id,
            flat_index: row.flat_index,
            value: row.value,
            tombstone: row.tombstone,
            seq,
        };
        // Rows arrive sorted by (layer_id, flat_index, seq): the last row
        // per position wins, collapsing multi-step histories.
        match entries.last_mut() {
            Some(last) if (last.layer_id, last.flat_index) == (entry.layer_id, entry.flat_index) => {
                *last = entry;
            }
            _ => entries.push(entry),
        }
    }

    let referenced: std::collections::BTreeSet<u64> =
        entries.iter().map(|e| e.layer_id).collect();
    let layers = store
        .layers_of(model_id)
        .into_iter()
        .filter(|l| referenced.contains(&l.layer_id))
        .map(|l| (l.layer_id, l.name))
        .collect();
    Ok(DeltaSet { from_seq, to_seq, layers, entries })
}

/// Overlay a delta onto a base map: entries overwrite their positions,
/// tombstones zero them. Entry order is irrelevant (one entry per position).
pub fn apply_delta(base: &WeightMap, delta: &DeltaSet) -> Result<WeightMap, VersionError> {
    let name_of: HashMap<u64, &str> = delta
        .layers
        .iter()
        .map(|(id, name)| (*id, name.as_str()))
        .collect();
    let mut out = base.clone();
    for entry in &delta.entries {
        let name = name_of.get(&entry.layer_id).ok_or_else(|| {
            NnError::IndexOutOfRange(format!(
                "delta entry references layer {} missing from its directory",
                entry.layer_id
            ))
        })?;
        let lw = out.get_mut(name).ok_or_else(|| {
            NnError::IndexOutOfRange(format!("base map has no layer {name:?}"))
        })?;
        let len = lw.values.len();
        let slot = lw.values.get_mut(entry.flat_index as usize).ok_or_else(|| {
            NnError::IndexOutOfRange(format!(
                "flat index {} outside layer {name:?} ({len} values)",
                entry.flat_index
            ))
        })?;
        *slot = if entry.tombstone { 0.0 } else { entry.value };
    }
    Ok(out)
}

/// Move the production flag to the version at `seq`. Returns the new
/// production seq.
pub fn set_production(store: &Store, model_id: u64, seq: u64) -> Result<u64, VersionError> {
    Ok(store.set_production(model_id, seq)?.seq)
}

/// Move production to the predecessor of the current production version
/// (latest version when no flag is set). Returns the new production seq.
pub fn rollback(store: &Store, model_id: u64) -> Result<u64, VersionError> {
    let versions = store.versions_of(model_id);
    if versions.is_empty() {
        return Err(StoreError::UnknownVersion { model_id, seq: 1 }.into());
    }
    let current = versions
        .iter()
        .find(|v| v.production)
        .or_else(|| versions.last())
        .expect("non-empty");
    let idx = versions
        .iter()
        .position(|v| v.seq == current.seq)
        .expect("current version in list");
    if idx == 0 {
        return Err(VersionError::NoPredecessor);
    }
    let target = versions[idx - 1].seq;
    store.set_production(model_id, target)?;
    Ok(target)
}

/// All versions of a model, ascending seq.
pub fn history(store: &Store, model_id: u64) -> Result<Vec<VersionRow>, VersionError> {
    store.model(model_id)?;
    Ok(store.versions_of(model_id))
}
