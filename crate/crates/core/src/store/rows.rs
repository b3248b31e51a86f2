//! Table row types and the journal file name mapping.

use crate::compress::LayerCodebook;
use crate::nn::Activation;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Every persisted table. `Txns` holds only commit markers; the rest hold
/// row lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Table {
    Models,
    Layers,
    Versions,
    Codebooks,
    Weights,
    Accuracy,
    Txns,
}

impl Table {
    /// Row tables in the order rows are applied during replay (parents
    /// before children).
    pub const ROW_TABLES: [Table; 6] = [
        Table::Models,
        Table::Layers,
        Table::Versions,
        Table::Codebooks,
        Table::Weights,
        Table::Accuracy,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Table::Models => "models.jsonl",
            Table::Layers => "layers.jsonl",
            Table::Versions => "versions.jsonl",
            Table::Codebooks => "codebooks.jsonl",
            Table::Weights => "weights.jsonl",
            Table::Accuracy => "accuracy.jsonl",
            Table::Txns => "txns.jsonl",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Table::Models => "models",
            Table::Layers => "layers",
            Table::Versions => "versions",
            Table::Codebooks => "codebooks",
            Table::Weights => "weights",
            Table::Accuracy => "accuracy",
            Table::Txns => "txns",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model_id: u64,
    pub name: String,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer_id: u64,
    pub model_id: u64,
    pub name: String,
    pub index: usize,
    pub in_dim: u32,
    pub out_dim: u32,
    pub activation: Activation,
}

impl LayerRow {
    pub fn param_count(&self) -> usize {
        self.in_dim as usize * self.out_dim as usize + self.out_dim as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRow {
    pub version_id: u64,
    pub model_id: u64,
    /// Strictly increasing per model, assigned by the store.
    pub seq: u64,
    /// Major versions are full baselines; deltas never cross them.
    pub major: bool,
    pub production: bool,
    pub parent_version: Option<u64>,
    pub message: String,
    pub created_at: i64,
    pub changed_count: u64,
    pub unchanged_count: u64,
    pub tombstoned_count: u64,
}

/// One scalar parameter at one version. A tombstone records "this position
/// became zero here" and always carries `value` 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub layer_id: u64,
    pub flat_index: u32,
    pub value: f64,
    pub version_id: u64,
    pub created_at: i64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tombstone: bool,
}

/// A half-open magnitude interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCuts {
    pub layer_id: u64,
    pub intervals: Vec<CutRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub accuracy_id: u64,
    pub version_id: u64,
    pub tier_name: String,
    pub measured_accuracy: f64,
    /// The interval count the mask's grid was generated with; needed to
    /// reconstruct the mask (and its uncut complement) exactly.
    pub k_intervals: u32,
    pub cut_intervals: Vec<LayerCuts>,
}

/// Per-(layer, version) codebook from the weight-sharing stage, stored once
/// so the compact representation survives on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookRow {
    pub layer_id: u64,
    pub version_id: u64,
    #[serde(flatten)]
    pub blob: LayerCodebook,
}

/// Commit marker: a transaction is committed iff its marker line exists, and
/// complete iff every per-table row count matches what survived on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitMarker {
    pub txn: u64,
    pub commit: bool,
    pub counts: BTreeMap<String, u64>,
}
