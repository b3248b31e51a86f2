//! Accuracy-based licensing: magnitude-interval masks that degrade a stored
//! version to a target accuracy, persisted as named tiers.
//!
//! A mask is built by splitting the version's magnitude range `[0, max|w|]`
//! into `k` equal intervals and cutting (zeroing) them ascending — smallest
//! magnitudes first, layer by layer within each interval — until measured
//! accuracy falls to the target. Serving a tier filters rows whose `|value|`
//! lies in a cut interval on the server side, so restricted values never
//! leave the store; the client's reconstruction then equals `apply_mask` of
//! the full weights. One weight set serves every tier: a tier is only an
//! `AccuracyRow` of cut intervals, never copied weights.

use crate::nn::{evaluate_accuracy, Dataset, NnError, WeightMap};
use crate::store::{AccuracyRow, CutRange, LayerCuts, Store, StoreError};
use crate::versioning::{materialize, VersionError};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LicenseError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Version(#[from] VersionError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid license request: {0}")]
    InvalidRequest(String),
    #[error("no tier {tier:?} recorded at seq {seq}")]
    UnknownTier { seq: u64, tier: String },
    #[error(
        "cannot reach target accuracy {target} (tolerance {tolerance}): cutting everything leaves {:.4}",
        best_effort.measured_accuracy
    )]
    TargetUnreachable {
        target: f64,
        tolerance: f64,
        /// The mask with every (interval, layer) pair cut, usable as-is.
        best_effort: Box<LicenseMask>,
    },
}

/// Cut intervals for one layer. Intervals are grid cells `[lo, hi)`,
/// ascending and disjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLayer {
    pub layer_id: u64,
    pub layer_name: String,
    pub intervals: Vec<CutRange>,
}

/// A license mask over one stored version: which magnitude intervals of
/// which layers are withheld, and the accuracy measured after cutting them.
///
/// The grid has `k_intervals` equal-width cells over `[0, grid_max]`; the
/// top cell's `hi` is nudged one ulp past `grid_max` so membership is
/// uniformly `lo <= |v| < hi` while still covering the maximum. Uncut
/// intervals are the grid complement, see [`LicenseMask::uncut_intervals`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LicenseMask {
    pub model_id: u64,
    pub seq: u64,
    pub tier_name: Option<String>,
    pub measured_accuracy: f64,
    pub k_intervals: u32,
    /// Max |value| of the version the grid was built over; recomputed
    /// deterministically on load.
    pub grid_max: f64,
    /// Only layers with at least one cut appear, in the order they were
    /// first cut (ascending interval, then layer index).
    pub layers: Vec<MaskLayer>,
}

impl LicenseMask {
    /// A mask that cuts nothing.
    pub fn empty(model_id: u64, seq: u64, k_intervals: u32, grid_max: f64, accuracy: f64) -> Self {
        LicenseMask {
            model_id,
            seq,
            tier_name: None,
            measured_accuracy: accuracy,
            k_intervals,
            grid_max,
            layers: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.intervals.is_empty())
    }

    pub fn cuts_for(&self, layer_id: u64) -> &[CutRange] {
        self.layers
            .iter()
            .find(|l| l.layer_id == layer_id)
            .map(|l| l.intervals.as_slice())
            .unwrap_or(&[])
    }

    /// Grid cells of this mask's layer that were *not* cut — the complement
    /// of the cut list within the generating grid.
    pub fn uncut_intervals(&self, layer_id: u64) -> Vec<CutRange> {
        let cuts = self.cuts_for(layer_id);
        grid(self.grid_max, self.k_intervals)
            .into_iter()
            .filter(|cell| !cuts.iter().any(|c| c.lo == cell.lo))
            .collect()
    }

    /// Whether this tier withholds `value` at a position of `layer_id`.
    pub fn restricts(&self, layer_id: u64, value: f64) -> bool {
        is_cut(self.cuts_for(layer_id), value)
    }
}

/// The two request shapes: a precomputed tier by name, or an on-demand
/// accuracy target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LicenseRequest {
    Static { tier_name: String },
    Dynamic { target_accuracy: f64, tolerance: f64 },
}

impl LicenseRequest {
    pub fn validate(&self) -> Result<(), LicenseError> {
        match self {
            LicenseRequest::Static { tier_name } => {
                if tier_name.is_empty() {
                    return Err(LicenseError::InvalidRequest("empty tier name".into()));
                }
            }
            LicenseRequest::Dynamic { target_accuracy, tolerance } => {
                if !(*target_accuracy > 0.0 && *target_accuracy <= 1.0) {
                    return Err(LicenseError::InvalidRequest(format!(
                        "target_accuracy {target_accuracy} outside (0, 1]"
                    )));
                }
                if !(*tolerance > 0.0) {
                    return Err(LicenseError::InvalidRequest(format!(
                        "tolerance {tolerance} must be > 0"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The `k` equal-width magnitude cells over `[0, max_abs]`, top cell closed
/// at the max by extending one ulp past it.
fn grid(max_abs: f64, k: u32) -> Vec<CutRange> {
    let k_f = k as f64;
    (0..k)
        .map(|i| {
            let lo = max_abs * i as f64 / k_f;
            let hi = if i + 1 == k {
                next_up(max_abs)
            } else {
                max_abs * (i + 1) as f64 / k_f
            };
            CutRange { lo, hi }
        })
        .collect()
}

/// Smallest f64 strictly greater than `x` (for finite non-negative `x`).
fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

fn is_cut(intervals: &[CutRange], value: f64) -> bool {
    let a = value.abs();
    intervals.iter().any(|c| a >= c.lo && a < c.hi)
}

/// Derive a mask that degrades the version at `seq` to `target_accuracy`
/// (within `tolerance`, checked as `accuracy <= target + tolerance`).
///
/// Cuts are applied ascending by magnitude interval and, within an interval,
/// in layer-index order; accuracy is re-measured after every layer cut and
/// the first measurement at or below the target stops the search. If even
/// the full grid leaves accuracy above the target, `TargetUnreachable`
/// carries the everything-cut mask as a best effort.
pub fn build_mask(
    store: &Store,
    model_id: u64,
    seq: u64,
    data: &Dataset,
    target_accuracy: f64,
    k_intervals: u32,
    tolerance: f64,
) -> Result<LicenseMask, LicenseError> {
    if k_intervals < 2 {
        return Err(LicenseError::InvalidRequest(format!(
            "k_intervals {k_intervals} must be >= 2"
        )));
    }
    LicenseRequest::Dynamic { target_accuracy, tolerance }.validate()?;
    if data.features.is_empty() || data.labels.is_empty() {
        return Err(LicenseError::EmptyDataset);
    }
    let def = store.model_def(model_id)?;
    let layers = store.layers_of(model_id);
    let weights = materialize(store, model_id, seq)?;

    let max_abs = weights
        .iter()
        .flat_map(|(_, lw)| lw.values.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut mask = LicenseMask::empty(model_id, seq, k_intervals, max_abs, 0.0);

    let mut working = weights;
    let mut accuracy = evaluate_accuracy(&def, &working, data)?;
    mask.measured_accuracy = accuracy;
    if accuracy <= target_accuracy + tolerance {
        return Ok(mask);
    }

    for cell in grid(max_abs, k_intervals) {
        for layer in &layers {
            let lw = working.get_mut(&layer.name).expect("layer from def");
            for v in lw.values.iter_mut() {
                let a = v.abs();
                if a >= cell.lo && a < cell.hi {
                    *v = 0.0;
                }
            }
            match mask.layers.iter_mut().find(|l| l.layer_id == layer.layer_id) {
                Some(ml) => ml.intervals.push(cell),
                None => mask.layers.push(MaskLayer {
                    layer_id: layer.layer_id,
                    layer_name: layer.name.clone(),
                    intervals: vec![cell],
                }),
            }
            accuracy = evaluate_accuracy(&def, &working, data)?;
            mask.measured_accuracy = accuracy;
            if accuracy <= target_accuracy + tolerance {
                return Ok(mask);
            }
        }
    }
    Err(LicenseError::TargetUnreachable {
        target: target_accuracy,
        tolerance,
        best_effort: Box::new(mask),
    })
}

/// Zero every weight whose magnitude falls in a cut interval of its layer.
/// Layers absent from the mask (or the map) pass through; idempotent.
pub fn apply_mask(weights: &WeightMap, mask: &LicenseMask) -> WeightMap {
    let mut out = weights.clone();
    for ml in &mask.layers {
        if let Some(lw) = out.get_mut(&ml.layer_name) {
            for v in lw.values.iter_mut() {
                if is_cut(&ml.intervals, *v) {
                    *v = 0.0;
                }
            }
        }
    }
    out
}

/// Persist a mask as a named tier on its version. Tier names are unique per
/// version; duplicates are a `ConstraintViolation`.
pub fn save_tier(store: &Store, mask: &LicenseMask, tier_name: &str) -> Result<AccuracyRow, LicenseError> {
    let version = store.version_by_seq(mask.model_id, mask.seq)?;
    let cuts: Vec<LayerCuts> = mask
        .layers
        .iter()
        .map(|l| LayerCuts { layer_id: l.layer_id, intervals: l.intervals.clone() })
        .collect();
    Ok(store.insert_accuracy_row(
        version.version_id,
        tier_name,
        mask.measured_accuracy,
        mask.k_intervals,
        cuts,
    )?)
}

/// Load a tier back into a mask. `grid_max` is recomputed from the
/// materialized version, which reproduces the build-time value exactly.
pub fn load_tier(
    store: &Store,
    model_id: u64,
    seq: u64,
    tier_name: &str,
) -> Result<LicenseMask, LicenseError> {
    let version = store.version_by_seq(model_id, seq)?;
    let row = store
        .accuracy_row(version.version_id, tier_name)
        .ok_or_else(|| LicenseError::UnknownTier { seq, tier: tier_name.to_string() })?;
    let name_of: HashMap<u64, String> = store
        .layers_of(model_id)
        .into_iter()
        .map(|l| (l.layer_id, l.name))
        .collect();
    let weights = materialize(store, model_id, seq)?;
    let grid_max = weights
        .iter()
        .flat_map(|(_, lw)| lw.values.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let layers = row
        .cut_intervals
        .iter()
        .map(|lc| {
            let layer_name = name_of.get(&lc.layer_id).cloned().ok_or_else(|| {
                StoreError::ForeignKeyMissing(format!(
                    "tier references unknown layer {}",
                    lc.layer_id
                ))
            })?;
            Ok(MaskLayer {
                layer_id: lc.layer_id,
                layer_name,
                intervals: lc.intervals.clone(),
            })
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    Ok(LicenseMask {
        model_id,
        seq,
        tier_name: Some(row.tier_name.clone()),
        measured_accuracy: row.measured_accuracy,
        k_intervals: row.k_intervals,
        grid_max,
        layers,
    })
}

/// The stored rows at `seq` with masked rows removed — the server-side
/// filter, so restricted values are never serialized at all. Reconstructing
/// a model from the result equals `apply_mask(materialize(seq), mask)`.
pub fn licensed_weight_rows(
    store: &Store,
    model_id: u64,
    seq: u64,
    mask: &LicenseMask,
) -> Result<Vec<(u64, u32, f64)>, LicenseError> {
    store.version_by_seq(model_id, seq)?;
    let cuts_by_layer: HashMap<u64, &[CutRange]> = mask
        .layers
        .iter()
        .map(|l| (l.layer_id, l.intervals.as_slice()))
        .collect();
    Ok(store
        .latest_weights_upto(model_id, seq)
        .into_iter()
        .filter(|(layer_id, _, value)| {
            cuts_by_layer
                .get(layer_id)
                .map_or(true, |cuts| !is_cut(cuts, *value))
        })
        .collect())
}
