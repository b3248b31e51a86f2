//! In-memory projection of the journals, plus the read-side query API.

use super::rows::{AccuracyRow, CodebookRow, LayerRow, ModelRow, VersionRow, WeightRow};
use super::StoreError;
use crate::compress::LayerCodebook;
use crate::nn::{LayerDef, ModelDef};
use std::collections::{BTreeMap, HashMap};

/// One committed write to one weight position.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub seq: u64,
    pub version_id: u64,
    pub value: f64,
    pub tombstone: bool,
    pub created_at: i64,
}

/// The materialized tables. All mutation happens through [`Tables::apply_*`]
/// during replay or post-commit application, so every map stays consistent.
#[derive(Debug, Default)]
pub struct Tables {
    pub models: BTreeMap<u64, ModelRow>,
    pub model_ids_by_name: HashMap<String, u64>,
    pub layers: BTreeMap<u64, LayerRow>,
    /// Layer ids per model, ordered by layer index.
    pub layer_ids_by_model: HashMap<u64, Vec<u64>>,
    pub versions: BTreeMap<u64, VersionRow>,
    /// Version ids per model, ascending seq.
    pub version_ids_by_model: HashMap<u64, Vec<u64>>,
    /// Weight history per model keyed by position; cells ascend by seq.
    pub weight_cells: HashMap<u64, BTreeMap<(u64, u32), Vec<Cell>>>,
    pub accuracy: BTreeMap<u64, AccuracyRow>,
    pub accuracy_ids_by_version: HashMap<u64, Vec<u64>>,
    /// Codebooks per version as (layer_id, blob), insertion order.
    pub codebooks: HashMap<u64, Vec<(u64, LayerCodebook)>>,
    pub next_model_id: u64,
    pub next_layer_id: u64,
    pub next_version_id: u64,
    pub next_accuracy_id: u64,
}

impl Tables {
    pub fn new() -> Self {
        Tables {
            next_model_id: 1,
            next_layer_id: 1,
            next_version_id: 1,
            next_accuracy_id: 1,
            ..Tables::default()
        }
    }

    pub fn apply_model(&mut self, row: ModelRow) {
        self.next_model_id = self.next_model_id.max(row.model_id + 1);
        self.model_ids_by_name.insert(row.name.clone(), row.model_id);
        self.models.insert(row.model_id, row);
    }

    pub fn apply_layer(&mut self, row: LayerRow) {
        self.next_layer_id = self.next_layer_id.max(row.layer_id + 1);
        let model_id = row.model_id;
        let layer_id = row.layer_id;
        self.layers.insert(layer_id, row);
        let layers = &self.layers;
        let ids = self.layer_ids_by_model.entry(model_id).or_default();
        if !ids.contains(&layer_id) {
            ids.push(layer_id);
            ids.sort_by_key(|id| layers[id].index);
        }
    }

    /// Versions may be re-appended with updated flags (production moves);
    /// the same `version_id` overwrites in place, last write wins.
    pub fn apply_version(&mut self, row: VersionRow) {
        self.next_version_id = self.next_version_id.max(row.version_id + 1);
        let known = self.versions.contains_key(&row.version_id);
        if !known {
            let ids = self.version_ids_by_model.entry(row.model_id).or_default();
            ids.push(row.version_id);
        }
        self.versions.insert(row.version_id, row);
    }

    pub fn apply_weight(&mut self, row: WeightRow) -> Result<(), StoreError> {
        let layer = self.layers.get(&row.layer_id).ok_or_else(|| {
            StoreError::ForeignKeyMissing(format!(
                "weight row references unknown layer {}",
                row.layer_id
            ))
        })?;
        let version = self.versions.get(&row.version_id).ok_or_else(|| {
            StoreError::ForeignKeyMissing(format!(
                "weight row references unknown version {}",
                row.version_id
            ))
        })?;
        let model_id = layer.model_id;
        let cell = Cell {
            seq: version.seq,
            version_id: row.version_id,
            value: row.value,
            tombstone: row.tombstone,
            created_at: row.created_at,
        };
        let cells = self
            .weight_cells
            .entry(model_id)
            .or_default()
            .entry((row.layer_id, row.flat_index))
            .or_default();
        // Cells arrive in commit order and seqs only grow, so pushing keeps
        // the vec sorted by seq.
        debug_assert!(cells.last().map_or(true, |c| c.seq <= cell.seq));
        cells.push(cell);
        Ok(())
    }

    pub fn apply_accuracy(&mut self, row: AccuracyRow) {
        self.next_accuracy_id = self.next_accuracy_id.max(row.accuracy_id + 1);
        self.accuracy_ids_by_version
            .entry(row.version_id)
            .or_default()
            .push(row.accuracy_id);
        self.accuracy.insert(row.accuracy_id, row);
    }

    pub fn apply_codebook(&mut self, row: CodebookRow) {
        self.codebooks
            .entry(row.version_id)
            .or_default()
            .push((row.layer_id, row.blob));
    }

    // ---- queries ----------------------------------------------------------

    pub fn model_by_name(&self, name: &str) -> Option<&ModelRow> {
        self.model_ids_by_name.get(name).map(|id| &self.models[id])
    }

    pub fn layers_of(&self, model_id: u64) -> Vec<&LayerRow> {
        self.layer_ids_by_model
            .get(&model_id)
            .map(|ids| ids.iter().map(|id| &self.layers[id]).collect())
            .unwrap_or_default()
    }

    /// Rebuild the architecture from the layer table.
    pub fn model_def(&self, model_id: u64) -> Result<ModelDef, StoreError> {
        let model = self
            .models
            .get(&model_id)
            .ok_or_else(|| StoreError::UnknownModel(format!("model_id {model_id}")))?;
        let layers = self
            .layers_of(model_id)
            .into_iter()
            .map(|l| LayerDef {
                name: l.name.clone(),
                index: l.index,
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                activation: l.activation,
            })
            .collect();
        ModelDef::new(&model.name, layers)
            .map_err(|e| StoreError::ConstraintViolation(format!("stored layer table invalid: {e}")))
    }

    pub fn versions_of(&self, model_id: u64) -> Vec<&VersionRow> {
        self.version_ids_by_model
            .get(&model_id)
            .map(|ids| ids.iter().map(|id| &self.versions[id]).collect())
            .unwrap_or_default()
    }

    pub fn version_by_seq(&self, model_id: u64, seq: u64) -> Option<&VersionRow> {
        let ids = self.version_ids_by_model.get(&model_id)?;
        let at = ids.partition_point(|id| self.versions[id].seq < seq);
        let id = ids.get(at)?;
        let row = &self.versions[id];
        (row.seq == seq).then_some(row)
    }

    pub fn latest_seq(&self, model_id: u64) -> Option<u64> {
        let ids = self.version_ids_by_model.get(&model_id)?;
        ids.last().map(|id| self.versions[id].seq)
    }

    pub fn production_version(&self, model_id: u64) -> Option<&VersionRow> {
        self.versions_of(model_id).into_iter().find(|v| v.production)
    }

    /// Latest surviving value per position at or before `seq`, tombstoned
    /// winners omitted, ordered by (layer_id, flat_index).
    pub fn latest_weights_upto(&self, model_id: u64, seq: u64) -> Vec<(u64, u32, f64)> {
        let Some(cells) = self.weight_cells.get(&model_id) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (&(layer_id, flat_index), history) in cells {
            let at = history.partition_point(|c| c.seq <= seq);
            if at == 0 {
                continue;
            }
            let winner = &history[at - 1];
            if !winner.tombstone {
                out.push((layer_id, flat_index, winner.value));
            }
        }
        out
    }

    /// Every write (tombstones included) with seq in `(from, to]`, ordered by
    /// (layer_id, flat_index, seq). Positions written at multiple seqs in the
    /// range yield one row each.
    pub fn rows_in_range(&self, model_id: u64, from: u64, to: u64) -> Vec<(u64, WeightRow)> {
        let Some(cells) = self.weight_cells.get(&model_id) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (&(layer_id, flat_index), history) in cells {
            let lo = history.partition_point(|c| c.seq <= from);
            let hi = history.partition_point(|c| c.seq <= to);
            for cell in &history[lo..hi] {
                out.push((
                    cell.seq,
                    WeightRow {
                        layer_id,
                        flat_index,
                        value: cell.value,
                        version_id: cell.version_id,
                        created_at: cell.created_at,
                        tombstone: cell.tombstone,
                    },
                ));
            }
        }
        out
    }

    pub fn accuracy_rows(&self, version_id: u64) -> Vec<&AccuracyRow> {
        self.accuracy_ids_by_version
            .get(&version_id)
            .map(|ids| ids.iter().map(|id| &self.accuracy[id]).collect())
            .unwrap_or_default()
    }

    pub fn accuracy_row(&self, version_id: u64, tier: &str) -> Option<&AccuracyRow> {
        self.accuracy_rows(version_id)
            .into_iter()
            .find(|r| r.tier_name == tier)
    }

    pub fn codebooks_of(&self, version_id: u64) -> &[(u64, LayerCodebook)] {
        self.codebooks
            .get(&version_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Dump every row for snapshotting, versions in id order so flag
    /// overwrites collapse to their final state.
    pub fn dump(&self) -> SnapshotRows {
        let mut weights = Vec::new();
        for cells in self.weight_cells.values() {
            for (&(layer_id, flat_index), history) in cells {
                for cell in history {
                    weights.push(WeightRow {
                        layer_id,
                        flat_index,
                        value: cell.value,
                        version_id: cell.version_id,
                        created_at: cell.created_at,
                        tombstone: cell.tombstone,
                    });
                }
            }
        }
        let mut codebooks = Vec::new();
        for (&version_id, blobs) in &self.codebooks {
            for (layer_id, blob) in blobs {
                codebooks.push(CodebookRow {
                    layer_id: *layer_id,
                    version_id,
                    blob: blob.clone(),
                });
            }
        }
        codebooks.sort_by_key(|c| (c.version_id, c.layer_id));
        SnapshotRows {
            models: self.models.values().cloned().collect(),
            layers: self.layers.values().cloned().collect(),
            versions: self.versions.values().cloned().collect(),
            codebooks,
            weights,
            accuracy: self.accuracy.values().cloned().collect(),
        }
    }
}

/// Flat row dump used by snapshots.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct SnapshotRows {
    pub models: Vec<ModelRow>,
    pub layers: Vec<LayerRow>,
    pub versions: Vec<VersionRow>,
    pub codebooks: Vec<CodebookRow>,
    pub weights: Vec<WeightRow>,
    pub accuracy: Vec<AccuracyRow>,
}
