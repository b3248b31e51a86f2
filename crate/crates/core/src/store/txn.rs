//! Single-writer transactions.
//!
//! A [`Txn`] holds the writer mutex for its whole life, stages rows in
//! memory, and validates every constraint up front. `commit` appends the
//! staged rows to their table journals, then appends a commit marker carrying
//! per-table row counts, and only then folds the rows into the shared
//! in-memory state. Dropping an uncommitted transaction discards everything;
//! nothing it wrote (even on a partial I/O failure) is ever replayed, because
//! the marker is absent or the counts cannot match.

use super::journal::encode_line;
use super::rows::{
    AccuracyRow, CodebookRow, CommitMarker, LayerCuts, LayerRow, ModelRow, Table, VersionRow,
    WeightRow,
};
use super::{Inner, StoreError, WriterState};
use crate::compress::LayerCodebook;
use crate::nn::ModelDef;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::MutexGuard;

/// A weight write staged for insertion. Tombstones record a position
/// becoming zero and must carry `value` 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDraft {
    pub layer_id: u64,
    pub flat_index: u32,
    pub value: f64,
    pub version_id: u64,
    pub tombstone: bool,
}

/// Everything about a new version except what the store assigns (id, seq,
/// timestamp).
#[derive(Debug, Clone)]
pub struct VersionSpec {
    pub model_id: u64,
    pub major: bool,
    pub production: bool,
    pub parent_version: Option<u64>,
    pub message: String,
    pub changed_count: u64,
    pub unchanged_count: u64,
    pub tombstoned_count: u64,
}

#[derive(Default)]
pub(super) struct Staged {
    pub models: Vec<ModelRow>,
    pub layers: Vec<LayerRow>,
    pub versions: Vec<VersionRow>,
    pub codebooks: Vec<CodebookRow>,
    pub weights: Vec<WeightRow>,
    pub accuracy: Vec<AccuracyRow>,
}

impl Staged {
    pub fn counts(&self) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        let pairs: [(Table, usize); 6] = [
            (Table::Models, self.models.len()),
            (Table::Layers, self.layers.len()),
            (Table::Versions, self.versions.len()),
            (Table::Codebooks, self.codebooks.len()),
            (Table::Weights, self.weights.len()),
            (Table::Accuracy, self.accuracy.len()),
        ];
        for (table, n) in pairs {
            if n > 0 {
                counts.insert(table.name().to_string(), n as u64);
            }
        }
        counts
    }
}

/// An open transaction. Obtain via `Store::begin`.
pub struct Txn<'a> {
    pub(super) inner: &'a Inner,
    pub(super) writer: MutexGuard<'a, Option<WriterState>>,
    pub(super) txn_id: u64,
    pub(super) now: i64,
    pub(super) staged: Staged,
    // Id reservations, peeked from state at begin and advanced per insert.
    pub(super) next_model_id: u64,
    pub(super) next_layer_id: u64,
    pub(super) next_version_id: u64,
    pub(super) next_accuracy_id: u64,
}

impl<'a> Txn<'a> {
    pub fn id(&self) -> u64 {
        self.txn_id
    }

    /// Register a model and its layer table from an architecture definition.
    pub fn insert_model(&mut self, def: &ModelDef) -> Result<(ModelRow, Vec<LayerRow>), StoreError> {
        def.validate()
            .map_err(|e| StoreError::ConstraintViolation(format!("invalid model: {e}")))?;
        {
            let tables = self.inner.state.read().unwrap();
            if tables.model_by_name(&def.model_name).is_some()
                || self.staged.models.iter().any(|m| m.name == def.model_name)
            {
                return Err(StoreError::ConstraintViolation(format!(
                    "model name {:?} already registered",
                    def.model_name
                )));
            }
        }
        let model = ModelRow {
            model_id: self.next_model_id,
            name: def.model_name.clone(),
            created_at: self.now,
        };
        self.next_model_id += 1;
        let mut layers = Vec::with_capacity(def.layers.len());
        for layer in &def.layers {
            layers.push(LayerRow {
                layer_id: self.next_layer_id,
                model_id: model.model_id,
                name: layer.name.clone(),
                index: layer.index,
                in_dim: layer.in_dim,
                out_dim: layer.out_dim,
                activation: layer.activation,
            });
            self.next_layer_id += 1;
        }
        self.staged.models.push(model.clone());
        self.staged.layers.extend(layers.iter().cloned());
        Ok((model, layers))
    }

    /// Create a version row. The store assigns the next seq for the model.
    /// If `production` is set, any currently-production version of the same
    /// model is flag-cleared in this same transaction.
    pub fn insert_version(&mut self, spec: VersionSpec) -> Result<VersionRow, StoreError> {
        let (last_seq, prior_production) = {
            let tables = self.inner.state.read().unwrap();
            if tables.models.get(&spec.model_id).is_none()
                && !self.staged.models.iter().any(|m| m.model_id == spec.model_id)
            {
                return Err(StoreError::ForeignKeyMissing(format!(
                    "version references unknown model {}",
                    spec.model_id
                )));
            }
            if let Some(parent) = spec.parent_version {
                let known = tables.versions.contains_key(&parent)
                    || self.staged.versions.iter().any(|v| v.version_id == parent);
                if !known {
                    return Err(StoreError::ForeignKeyMissing(format!(
                        "parent version {parent} does not exist"
                    )));
                }
            }
            let state_seq = tables.latest_seq(spec.model_id).unwrap_or(0);
            let prior = tables.production_version(spec.model_id).cloned();
            (state_seq, prior)
        };
        let staged_seq = self
            .staged
            .versions
            .iter()
            .filter(|v| v.model_id == spec.model_id)
            .map(|v| v.seq)
            .max()
            .unwrap_or(0);
        let seq = last_seq.max(staged_seq) + 1;
        if spec.production {
            self.clear_production(spec.model_id, prior_production);
        }
        let row = VersionRow {
            version_id: self.next_version_id,
            model_id: spec.model_id,
            seq,
            major: spec.major,
            production: spec.production,
            parent_version: spec.parent_version,
            message: spec.message,
            created_at: self.now,
            changed_count: spec.changed_count,
            unchanged_count: spec.unchanged_count,
            tombstoned_count: spec.tombstoned_count,
        };
        self.next_version_id += 1;
        self.staged.versions.push(row.clone());
        Ok(row)
    }

    fn clear_production(&mut self, model_id: u64, prior_in_state: Option<VersionRow>) {
        for v in self.staged.versions.iter_mut().filter(|v| v.model_id == model_id) {
            v.production = false;
        }
        if let Some(mut prior) = prior_in_state {
            if !self.staged.versions.iter().any(|v| v.version_id == prior.version_id) {
                prior.production = false;
                self.staged.versions.push(prior);
            }
        }
    }

    /// Re-append a version row with its production flag changed. Setting the
    /// flag clears it from whichever version held it, atomically.
    pub fn set_version_production(&mut self, version_id: u64, production: bool) -> Result<VersionRow, StoreError> {
        let current = self.lookup_version(version_id)?;
        if production {
            let prior = {
                let tables = self.inner.state.read().unwrap();
                tables.production_version(current.model_id).cloned()
            };
            self.clear_production(current.model_id, prior.filter(|p| p.version_id != version_id));
        }
        if let Some(staged) = self
            .staged
            .versions
            .iter_mut()
            .find(|v| v.version_id == version_id)
        {
            staged.production = production;
            return Ok(staged.clone());
        }
        let mut row = current;
        row.production = production;
        self.staged.versions.push(row.clone());
        Ok(row)
    }

    fn lookup_version(&self, version_id: u64) -> Result<VersionRow, StoreError> {
        if let Some(v) = self
            .staged
            .versions
            .iter()
            .rev()
            .find(|v| v.version_id == version_id)
        {
            return Ok(v.clone());
        }
        let tables = self.inner.state.read().unwrap();
        tables
            .versions
            .get(&version_id)
            .cloned()
            .ok_or_else(|| StoreError::ForeignKeyMissing(format!("version {version_id} does not exist")))
    }

    fn lookup_layer(&self, layer_id: u64) -> Option<LayerRow> {
        if let Some(l) = self.staged.layers.iter().find(|l| l.layer_id == layer_id) {
            return Some(l.clone());
        }
        let tables = self.inner.state.read().unwrap();
        tables.layers.get(&layer_id).cloned()
    }

    /// Stage a batch of weight rows, all-or-nothing. Rejects unknown layers
    /// or versions, cross-model rows, out-of-range flat indices, non-finite
    /// values, non-zero tombstones, and duplicate (layer_id, flat_index,
    /// version_id) keys either within the batch or against committed rows.
    pub fn insert_weight_rows(&mut self, rows: &[WeightDraft]) -> Result<usize, StoreError> {
        let mut layer_cache: HashMap<u64, LayerRow> = HashMap::new();
        let mut version_cache: HashMap<u64, VersionRow> = HashMap::new();
        let mut seen: HashSet<(u64, u32, u64)> = HashSet::new();
        let mut staged_rows = Vec::with_capacity(rows.len());
        let tables = self.inner.state.read().unwrap();
        for draft in rows {
            let describe = || {
                format!(
                    "weights row (layer_id={}, flat_index={}, version_id={})",
                    draft.layer_id, draft.flat_index, draft.version_id
                )
            };
            let layer = match layer_cache.get(&draft.layer_id) {
                Some(l) => l.clone(),
                None => {
                    let found = self
                        .staged
                        .layers
                        .iter()
                        .find(|l| l.layer_id == draft.layer_id)
                        .cloned()
                        .or_else(|| tables.layers.get(&draft.layer_id).cloned())
                        .ok_or_else(|| {
                            StoreError::ForeignKeyMissing(format!(
                                "{} references unknown layer",
                                describe()
                            ))
                        })?;
                    layer_cache.insert(draft.layer_id, found.clone());
                    found
                }
            };
            let version = match version_cache.get(&draft.version_id) {
                Some(v) => v.clone(),
                None => {
                    let found = self
                        .staged
                        .versions
                        .iter()
                        .find(|v| v.version_id == draft.version_id)
                        .cloned()
                        .or_else(|| tables.versions.get(&draft.version_id).cloned())
                        .ok_or_else(|| {
                            StoreError::ForeignKeyMissing(format!(
                                "{} references unknown version",
                                describe()
                            ))
                        })?;
                    version_cache.insert(draft.version_id, found.clone());
                    found
                }
            };
            if layer.model_id != version.model_id {
                return Err(StoreError::ConstraintViolation(format!(
                    "{} crosses models: layer belongs to model {}, version to model {}",
                    describe(),
                    layer.model_id,
                    version.model_id
                )));
            }
            if (draft.flat_index as usize) >= layer.param_count() {
                return Err(StoreError::ConstraintViolation(format!(
                    "{} exceeds layer parameter count {}",
                    describe(),
                    layer.param_count()
                )));
            }
            if !draft.value.is_finite() {
                return Err(StoreError::ConstraintViolation(format!(
                    "{} has non-finite value {}",
                    describe(),
                    draft.value
                )));
            }
            if draft.tombstone && draft.value != 0.0 {
                return Err(StoreError::ConstraintViolation(format!(
                    "{} is a tombstone with non-zero value {}",
                    describe(),
                    draft.value
                )));
            }
            let key = (draft.layer_id, draft.flat_index, draft.version_id);
            if !seen.insert(key) {
                return Err(StoreError::ConstraintViolation(format!(
                    "{} violates unique (layer_id, flat_index, version_id): duplicate in batch",
                    describe()
                )));
            }
            let committed_dup = tables
                .weight_cells
                .get(&layer.model_id)
                .and_then(|cells| cells.get(&(draft.layer_id, draft.flat_index)))
                .is_some_and(|history| history.iter().any(|c| c.version_id == draft.version_id));
            if committed_dup
                || self.staged.weights.iter().any(|w| {
                    (w.layer_id, w.flat_index, w.version_id) == key
                })
            {
                return Err(StoreError::ConstraintViolation(format!(
                    "{} violates unique (layer_id, flat_index, version_id): row already exists",
                    describe()
                )));
            }
            staged_rows.push(WeightRow {
                layer_id: draft.layer_id,
                flat_index: draft.flat_index,
                value: draft.value,
                version_id: draft.version_id,
                created_at: self.now,
                tombstone: draft.tombstone,
            });
        }
        drop(tables);
        let n = staged_rows.len();
        self.staged.weights.extend(staged_rows);
        Ok(n)
    }

    /// Record a measured accuracy for a license tier at a version. Tier names
    /// are unique per version; re-inserting one is a constraint violation.
    pub fn insert_accuracy(
        &mut self,
        version_id: u64,
        tier_name: &str,
        measured_accuracy: f64,
        k_intervals: u32,
        cut_intervals: Vec<LayerCuts>,
    ) -> Result<AccuracyRow, StoreError> {
        let version = self.lookup_version(version_id)?;
        if !(0.0..=1.0).contains(&measured_accuracy) {
            return Err(StoreError::ConstraintViolation(format!(
                "measured_accuracy {measured_accuracy} outside [0, 1]"
            )));
        }
        let duplicate = {
            let tables = self.inner.state.read().unwrap();
            tables.accuracy_row(version_id, tier_name).is_some()
        } || self
            .staged
            .accuracy
            .iter()
            .any(|a| a.version_id == version_id && a.tier_name == tier_name);
        if duplicate {
            return Err(StoreError::ConstraintViolation(format!(
                "tier {tier_name:?} already recorded for version {version_id}"
            )));
        }
        for cuts in &cut_intervals {
            let layer = self.lookup_layer(cuts.layer_id).ok_or_else(|| {
                StoreError::ForeignKeyMissing(format!(
                    "cut intervals reference unknown layer {}",
                    cuts.layer_id
                ))
            })?;
            if layer.model_id != version.model_id {
                return Err(StoreError::ConstraintViolation(format!(
                    "cut intervals for layer {} cross into model {}",
                    cuts.layer_id, layer.model_id
                )));
            }
        }
        let row = AccuracyRow {
            accuracy_id: self.next_accuracy_id,
            version_id,
            tier_name: tier_name.to_string(),
            measured_accuracy,
            k_intervals,
            cut_intervals,
        };
        self.next_accuracy_id += 1;
        self.staged.accuracy.push(row.clone());
        Ok(row)
    }

    /// Attach a weight-sharing codebook to (layer, version). One per pair.
    pub fn insert_codebook(
        &mut self,
        version_id: u64,
        layer_id: u64,
        blob: LayerCodebook,
    ) -> Result<(), StoreError> {
        blob.validate()
            .map_err(|e| StoreError::ConstraintViolation(format!("invalid codebook: {e}")))?;
        let version = self.lookup_version(version_id)?;
        let layer = self.lookup_layer(layer_id).ok_or_else(|| {
            StoreError::ForeignKeyMissing(format!("codebook references unknown layer {layer_id}"))
        })?;
        if layer.model_id != version.model_id {
            return Err(StoreError::ConstraintViolation(format!(
                "codebook for layer {layer_id} crosses into model {}",
                layer.model_id
            )));
        }
        if layer.in_dim != blob.in_dim || layer.out_dim != blob.out_dim {
            return Err(StoreError::ConstraintViolation(format!(
                "codebook dims {}x{} do not match layer {} dims {}x{}",
                blob.in_dim, blob.out_dim, layer_id, layer.in_dim, layer.out_dim
            )));
        }
        let duplicate = {
            let tables = self.inner.state.read().unwrap();
            tables
                .codebooks_of(version_id)
                .iter()
                .any(|(l, _)| *l == layer_id)
        } || self
            .staged
            .codebooks
            .iter()
            .any(|c| c.version_id == version_id && c.layer_id == layer_id);
        if duplicate {
            return Err(StoreError::ConstraintViolation(format!(
                "codebook for (layer {layer_id}, version {version_id}) already exists"
            )));
        }
        self.staged.codebooks.push(CodebookRow { layer_id, version_id, blob });
        Ok(())
    }

    /// Durably persist the staged rows: table journals first, commit marker
    /// last, then fold into the in-memory state.
    pub fn commit(mut self) -> Result<u64, StoreError> {
        let txn = self.txn_id;
        let sync = self.inner.sync_writes;
        let counts = self.staged.counts();
        let writer = self.writer.as_mut().expect("txn implies writer");

        let mut batches: Vec<(Table, Vec<Vec<u8>>)> = Vec::new();
        macro_rules! encode_all {
            ($table:expr, $rows:expr) => {
                if !$rows.is_empty() {
                    let mut lines = Vec::with_capacity($rows.len());
                    for row in $rows.iter() {
                        lines.push(encode_line(txn, row)?);
                    }
                    batches.push(($table, lines));
                }
            };
        }
        encode_all!(Table::Models, self.staged.models);
        encode_all!(Table::Layers, self.staged.layers);
        encode_all!(Table::Versions, self.staged.versions);
        encode_all!(Table::Codebooks, self.staged.codebooks);
        encode_all!(Table::Weights, self.staged.weights);
        encode_all!(Table::Accuracy, self.staged.accuracy);

        for (table, lines) in &batches {
            writer
                .files
                .get_mut(table)
                .expect("all journals open")
                .append(lines, sync)?;
        }
        let marker = CommitMarker { txn, commit: true, counts };
        let marker_line = encode_line(txn, &marker)?;
        writer
            .files
            .get_mut(&Table::Txns)
            .expect("txns journal open")
            .append(std::slice::from_ref(&marker_line), sync)?;
        writer.last_committed_txn = txn;

        let mut tables = self.inner.state.write().unwrap();
        for row in self.staged.models.drain(..) {
            tables.apply_model(row);
        }
        for row in self.staged.layers.drain(..) {
            tables.apply_layer(row);
        }
        for row in self.staged.versions.drain(..) {
            tables.apply_version(row);
        }
        for row in self.staged.codebooks.drain(..) {
            tables.apply_codebook(row);
        }
        for row in self.staged.weights.drain(..) {
            tables.apply_weight(row)?;
        }
        for row in self.staged.accuracy.drain(..) {
            tables.apply_accuracy(row);
        }
        Ok(txn)
    }
}
