//! Versioned weight store over append-only JSONL journals.
//!
//! Layout inside the store directory:
//!
//! ```text
//! manifest.json     format/version info, written once
//! models.jsonl      one CRC-trailed JSON row per line, per table
//! layers.jsonl
//! versions.jsonl
//! codebooks.jsonl
//! weights.jsonl
//! accuracy.jsonl
//! txns.jsonl        commit markers with per-table row counts
//! snapshots/        <txn>.snap checkpoint files (written on request)
//! LOCK              present while a writer is open
//! ```
//!
//! Durability model: a transaction's rows are appended to their table
//! journals first, then a commit marker (carrying per-table row counts) is
//! appended to `txns.jsonl`. Replay applies a transaction only when its
//! marker exists *and* every counted row survived, so truncating any one
//! file at any byte never surfaces a partial transaction — the damaged
//! transaction just rolls back, along with any later transaction that
//! referenced its rows. Updates never rewrite history: production-flag moves
//! re-append the version row (last write per `version_id` wins), and weight
//! changes append new rows at new versions, with tombstones marking
//! positions that became zero.
//!
//! Concurrency: one writer (guarded by a lock file and an in-process mutex),
//! any number of readers. Readers see a transaction only after its marker is
//! durable, never mid-commit.

mod journal;
mod rows;
mod snapshot;
mod state;
mod txn;

pub use rows::{
    AccuracyRow, CodebookRow, CommitMarker, CutRange, LayerCuts, LayerRow, ModelRow, Table,
    VersionRow, WeightRow,
};
pub use state::{Cell, Tables};
pub use txn::{Txn, VersionSpec, WeightDraft};

use crate::compress::LayerCodebook;
use crate::nn::ModelDef;
use journal::JournalWriter;
use rows::CommitMarker as Marker;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "LOCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt journal {file} line {line}: {reason}")]
    CorruptJournal { file: String, line: usize, reason: String },
    #[error("store is already locked for writing ({path})")]
    LockHeld { path: PathBuf },
    #[error("store opened read-only")]
    ReadOnly,
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("foreign key missing: {0}")]
    ForeignKeyMissing(String),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("model {model_id} has no version with seq {seq}")]
    UnknownVersion { model_id: u64, seq: u64 },
    #[error("unknown version id {0}")]
    UnknownVersionId(u64),
    #[error("bad manifest: {0}")]
    BadManifest(String),
}

/// Injectable wall clock returning UTC milliseconds.
pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

fn system_now() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("system clock before epoch")
        .as_millis() as i64
}

#[derive(Clone, Default)]
pub struct StoreOptions {
    /// Open without taking the lock; every mutating call fails `ReadOnly`.
    pub read_only: bool,
    /// fsync journal appends at commit. Off by default: buffered appends are
    /// still flushed to the OS per commit and reopen-after-drop sees them;
    /// turn this on when surviving power loss matters more than throughput.
    pub sync_writes: bool,
    /// Override the timestamp source (UTC milliseconds).
    pub clock: Option<Clock>,
}

impl std::fmt::Debug for StoreOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoreOptions")
            .field("read_only", &self.read_only)
            .field("sync_writes", &self.sync_writes)
            .field("clock", &self.clock.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

/// What recovery found and repaired while opening.
#[derive(Debug, Clone, Default)]
pub struct OpenReport {
    /// Files ending in an interrupted append; the tail is ignored and, when
    /// opened for writing, truncated.
    pub torn_tails: Vec<TornTail>,
    /// Committed transactions rolled back because some of their rows were
    /// lost (counts mismatched) or referenced rows from a rolled-back
    /// transaction.
    pub dropped_txns: Vec<u64>,
    /// Rows whose transaction never reached its commit marker.
    pub uncommitted_rows: u64,
    /// Watermark of the snapshot replay started from, if any.
    pub snapshot_loaded: Option<u64>,
    /// Snapshot files skipped as unreadable, with reasons.
    pub snapshots_ignored: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct TornTail {
    pub file: String,
    pub bytes: u64,
}

impl OpenReport {
    pub fn is_clean(&self) -> bool {
        self.torn_tails.is_empty()
            && self.dropped_txns.is_empty()
            && self.uncommitted_rows == 0
            && self.snapshots_ignored.is_empty()
    }
}

/// A model row together with its layer rows, as returned by registration.
#[derive(Debug, Clone)]
pub struct ModelRecord {
    pub model: ModelRow,
    pub layers: Vec<LayerRow>,
}

struct LockFile {
    path: PathBuf,
}

impl LockFile {
    fn acquire(dir: &Path) -> Result<LockFile, StoreError> {
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = writeln!(file, "pid {}", std::process::id());
                Ok(LockFile { path })
            }
            Err(err) if err.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StoreError::LockHeld { path })
            }
            Err(err) => Err(err.into()),
        }
    }
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

struct WriterState {
    files: HashMap<Table, JournalWriter>,
    next_txn: u64,
    last_committed_txn: u64,
    _lock: LockFile,
}

struct Inner {
    dir: PathBuf,
    sync_writes: bool,
    clock: Clock,
    state: RwLock<Tables>,
    writer: Mutex<Option<WriterState>>,
    report: OpenReport,
}

/// Handle to an open store. Cheap to clone; all clones share one state and
/// one writer slot. The lock file is released when the last clone drops.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

impl Store {
    /// Open (creating if needed) with default options: read-write, buffered.
    pub fn open(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        Store::open_with(dir, StoreOptions::default())
    }

    pub fn open_with(dir: impl AsRef<Path>, opts: StoreOptions) -> Result<Store, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        check_or_write_manifest(&dir, opts.read_only)?;
        let lock = if opts.read_only {
            None
        } else {
            Some(LockFile::acquire(&dir)?)
        };
        let loaded = load(&dir)?;
        let writer = match lock {
            None => None,
            Some(lock) => {
                let mut files = HashMap::new();
                for table in Table::ROW_TABLES.into_iter().chain([Table::Txns]) {
                    let valid = loaded.valid_lens.get(&table).copied().unwrap_or(0);
                    files.insert(
                        table,
                        JournalWriter::open(dir.join(table.file_name()), valid)?,
                    );
                }
                Some(WriterState {
                    files,
                    next_txn: loaded.next_txn,
                    last_committed_txn: loaded.last_committed,
                    _lock: lock,
                })
            }
        };
        let clock = opts.clock.unwrap_or_else(|| Arc::new(system_now));
        Ok(Store {
            inner: Arc::new(Inner {
                dir,
                sync_writes: opts.sync_writes,
                clock,
                state: RwLock::new(loaded.tables),
                writer: Mutex::new(writer),
                report: loaded.report,
            }),
        })
    }

    /// Remove a stale lock file left by a killed writer. Only safe when no
    /// writer process is actually alive.
    pub fn break_lock(dir: impl AsRef<Path>) -> Result<(), StoreError> {
        match std::fs::remove_file(dir.as_ref().join(LOCK_FILE)) {
            Ok(()) => Ok(()),
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(err) => Err(err.into()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.inner.dir
    }

    pub fn open_report(&self) -> &OpenReport {
        &self.inner.report
    }

    pub fn is_read_only(&self) -> bool {
        self.inner.writer.lock().unwrap().is_none()
    }

    /// Current time from the (possibly injected) clock, UTC milliseconds.
    pub fn now(&self) -> i64 {
        (self.inner.clock)()
    }

    /// Start a transaction. Holds the writer slot until commit or drop;
    /// dropping without committing discards all staged rows.
    pub fn begin(&self) -> Result<Txn<'_>, StoreError> {
        let inner: &Inner = &self.inner;
        let mut writer = inner.writer.lock().unwrap();
        let txn_id = match writer.as_mut() {
            None => return Err(StoreError::ReadOnly),
            Some(w) => {
                let id = w.next_txn;
                w.next_txn += 1;
                id
            }
        };
        let (next_model_id, next_layer_id, next_version_id, next_accuracy_id) = {
            let t = inner.state.read().unwrap();
            (
                t.next_model_id,
                t.next_layer_id,
                t.next_version_id,
                t.next_accuracy_id,
            )
        };
        Ok(Txn {
            inner,
            writer,
            txn_id,
            now: (inner.clock)(),
            staged: Default::default(),
            next_model_id,
            next_layer_id,
            next_version_id,
            next_accuracy_id,
        })
    }

    // ---- one-shot write operations -----------------------------------------

    /// Register a model and its layer table in one transaction.
    pub fn register_model(&self, def: &ModelDef) -> Result<ModelRecord, StoreError> {
        let mut txn = self.begin()?;
        let (model, layers) = txn.insert_model(def)?;
        txn.commit()?;
        Ok(ModelRecord { model, layers })
    }

    /// Insert a batch of weight rows atomically; on any constraint error
    /// zero rows persist.
    pub fn insert_weights_bulk(&self, rows: &[WeightDraft]) -> Result<usize, StoreError> {
        let mut txn = self.begin()?;
        let n = txn.insert_weight_rows(rows)?;
        txn.commit()?;
        Ok(n)
    }

    /// Record a license tier's measured accuracy at a version.
    pub fn insert_accuracy_row(
        &self,
        version_id: u64,
        tier_name: &str,
        measured_accuracy: f64,
        k_intervals: u32,
        cut_intervals: Vec<LayerCuts>,
    ) -> Result<AccuracyRow, StoreError> {
        let mut txn = self.begin()?;
        let row = txn.insert_accuracy(
            version_id,
            tier_name,
            measured_accuracy,
            k_intervals,
            cut_intervals,
        )?;
        txn.commit()?;
        Ok(row)
    }

    /// Mark the version at `seq` as the model's production version, clearing
    /// the flag from whichever version held it, in one transaction.
    pub fn set_production(&self, model_id: u64, seq: u64) -> Result<VersionRow, StoreError> {
        let version = self.version_by_seq(model_id, seq)?;
        let mut txn = self.begin()?;
        let row = txn.set_version_production(version.version_id, true)?;
        txn.commit()?;
        Ok(row)
    }

    /// Write a checkpoint of the current committed state. Replay afterwards
    /// starts from it instead of the journal head. Never required for
    /// correctness; journals are always sufficient.
    pub fn snapshot(&self) -> Result<PathBuf, StoreError> {
        let writer = self.inner.writer.lock().unwrap();
        let Some(w) = writer.as_ref() else {
            return Err(StoreError::ReadOnly);
        };
        let tables = self.inner.state.read().unwrap();
        snapshot::write_snapshot(
            &self.inner.dir,
            w.last_committed_txn,
            &tables,
            self.inner.sync_writes,
        )
    }

    // ---- queries ------------------------------------------------------------

    /// Run a closure against the live tables under the read lock. For bulk
    /// reads that would be wasteful to clone row by row.
    pub fn with_tables<R>(&self, f: impl FnOnce(&Tables) -> R) -> R {
        let tables = self.inner.state.read().unwrap();
        f(&tables)
    }

    pub fn models(&self) -> Vec<ModelRow> {
        self.with_tables(|t| t.models.values().cloned().collect())
    }

    pub fn model(&self, model_id: u64) -> Result<ModelRow, StoreError> {
        self.with_tables(|t| t.models.get(&model_id).cloned())
            .ok_or_else(|| StoreError::UnknownModel(format!("model_id {model_id}")))
    }

    pub fn model_by_name(&self, name: &str) -> Result<ModelRow, StoreError> {
        self.with_tables(|t| t.model_by_name(name).cloned())
            .ok_or_else(|| StoreError::UnknownModel(format!("{name:?}")))
    }

    pub fn layers_of(&self, model_id: u64) -> Vec<LayerRow> {
        self.with_tables(|t| t.layers_of(model_id).into_iter().cloned().collect())
    }

    /// Rebuild the architecture definition from the stored layer table.
    pub fn model_def(&self, model_id: u64) -> Result<ModelDef, StoreError> {
        self.with_tables(|t| t.model_def(model_id))
    }

    pub fn versions_of(&self, model_id: u64) -> Vec<VersionRow> {
        self.with_tables(|t| t.versions_of(model_id).into_iter().cloned().collect())
    }

    pub fn version(&self, version_id: u64) -> Result<VersionRow, StoreError> {
        self.with_tables(|t| t.versions.get(&version_id).cloned())
            .ok_or(StoreError::UnknownVersionId(version_id))
    }

    pub fn version_by_seq(&self, model_id: u64, seq: u64) -> Result<VersionRow, StoreError> {
        self.with_tables(|t| t.version_by_seq(model_id, seq).cloned())
            .ok_or(StoreError::UnknownVersion { model_id, seq })
    }

    pub fn latest_seq(&self, model_id: u64) -> Option<u64> {
        self.with_tables(|t| t.latest_seq(model_id))
    }

    pub fn production_version(&self, model_id: u64) -> Option<VersionRow> {
        self.with_tables(|t| t.production_version(model_id).cloned())
    }

    /// Latest surviving (layer_id, flat_index, value) at or before `seq`;
    /// tombstoned positions are omitted.
    pub fn latest_weights_upto(&self, model_id: u64, seq: u64) -> Vec<(u64, u32, f64)> {
        self.with_tables(|t| t.latest_weights_upto(model_id, seq))
    }

    /// Every weight write with seq in `(from, to]`, tombstones included,
    /// ordered by (layer_id, flat_index, seq); returned with its seq.
    pub fn rows_in_range(&self, model_id: u64, from: u64, to: u64) -> Vec<(u64, WeightRow)> {
        self.with_tables(|t| t.rows_in_range(model_id, from, to))
    }

    pub fn accuracy_rows(&self, version_id: u64) -> Vec<AccuracyRow> {
        self.with_tables(|t| t.accuracy_rows(version_id).into_iter().cloned().collect())
    }

    pub fn accuracy_row(&self, version_id: u64, tier_name: &str) -> Option<AccuracyRow> {
        self.with_tables(|t| t.accuracy_row(version_id, tier_name).cloned())
    }

    pub fn codebooks_of(&self, version_id: u64) -> Vec<(u64, LayerCodebook)> {
        self.with_tables(|t| t.codebooks_of(version_id).to_vec())
    }

    /// (relative path, bytes) for every file under the store directory.
    pub fn disk_usage(&self) -> Result<Vec<(String, u64)>, StoreError> {
        fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, u64)>) -> std::io::Result<()> {
            for entry in std::fs::read_dir(dir)? {
                let entry = entry?;
                let meta = entry.metadata()?;
                let path = entry.path();
                if meta.is_dir() {
                    walk(base, &path, out)?;
                } else {
                    let rel = path
                        .strip_prefix(base)
                        .unwrap_or(&path)
                        .to_string_lossy()
                        .into_owned();
                    out.push((rel, meta.len()));
                }
            }
            Ok(())
        }
        let mut out = Vec::new();
        walk(&self.inner.dir, &self.inner.dir, &mut out)?;
        out.sort();
        Ok(out)
    }

    pub fn total_disk_bytes(&self) -> Result<u64, StoreError> {
        Ok(self.disk_usage()?.iter().map(|(_, n)| *n).sum())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tables: Vec<String>,
}

fn check_or_write_manifest(dir: &Path, read_only: bool) -> Result<(), StoreError> {
    let path = dir.join(MANIFEST_FILE);
    match std::fs::read(&path) {
        Ok(bytes) => {
            let manifest: Manifest = serde_json::from_slice(&bytes)
                .map_err(|e| StoreError::BadManifest(e.to_string()))?;
            if manifest.format_version != FORMAT_VERSION {
                return Err(StoreError::BadManifest(format!(
                    "unsupported format_version {}",
                    manifest.format_version
                )));
            }
            Ok(())
        }
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
            if read_only {
                return Err(StoreError::BadManifest(
                    "missing manifest.json (store not initialized)".into(),
                ));
            }
            let manifest = Manifest {
                format_version: FORMAT_VERSION,
                tables: Table::ROW_TABLES
                    .iter()
                    .map(|t| t.name().to_string())
                    .chain(std::iter::once(Table::Txns.name().to_string()))
                    .collect(),
            };
            let tmp = path.with_extension("json.tmp");
            std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest).unwrap())?;
            std::fs::rename(&tmp, &path)?;
            Ok(())
        }
        Err(err) => Err(err.into()),
    }
}

#[derive(Default)]
struct TxnRows {
    models: Vec<ModelRow>,
    layers: Vec<LayerRow>,
    versions: Vec<VersionRow>,
    codebooks: Vec<CodebookRow>,
    weights: Vec<WeightRow>,
    accuracy: Vec<AccuracyRow>,
}

impl TxnRows {
    fn count_of(&self, table: Table) -> u64 {
        (match table {
            Table::Models => self.models.len(),
            Table::Layers => self.layers.len(),
            Table::Versions => self.versions.len(),
            Table::Codebooks => self.codebooks.len(),
            Table::Weights => self.weights.len(),
            Table::Accuracy => self.accuracy.len(),
            Table::Txns => 0,
        }) as u64
    }

    fn total(&self) -> u64 {
        Table::ROW_TABLES.iter().map(|t| self.count_of(*t)).sum()
    }

    fn counts_match(&self, expected: &BTreeMap<String, u64>) -> bool {
        Table::ROW_TABLES.iter().all(|t| {
            expected.get(t.name()).copied().unwrap_or(0) == self.count_of(*t)
        })
    }

    /// All foreign keys resolve against already-applied state or rows in
    /// this same transaction.
    fn fk_ok(&self, tables: &Tables) -> bool {
        let model_known = |id: u64| {
            tables.models.contains_key(&id) || self.models.iter().any(|m| m.model_id == id)
        };
        let layer_known = |id: u64| {
            tables.layers.contains_key(&id) || self.layers.iter().any(|l| l.layer_id == id)
        };
        let version_known = |id: u64| {
            tables.versions.contains_key(&id) || self.versions.iter().any(|v| v.version_id == id)
        };
        self.layers.iter().all(|l| model_known(l.model_id))
            && self.versions.iter().all(|v| {
                model_known(v.model_id)
                    && v.parent_version.map_or(true, |p| p == v.version_id || version_known(p))
            })
            && self
                .weights
                .iter()
                .all(|w| layer_known(w.layer_id) && version_known(w.version_id))
            && self.accuracy.iter().all(|a| {
                version_known(a.version_id)
                    && a.cut_intervals.iter().all(|c| layer_known(c.layer_id))
            })
            && self
                .codebooks
                .iter()
                .all(|c| version_known(c.version_id) && layer_known(c.layer_id))
    }
}

struct Loaded {
    tables: Tables,
    report: OpenReport,
    valid_lens: HashMap<Table, u64>,
    next_txn: u64,
    last_committed: u64,
}

fn load(dir: &Path) -> Result<Loaded, StoreError> {
    let mut report = OpenReport::default();

    let mut tables = Tables::new();
    let mut watermark = 0u64;
    for (_, path) in snapshot::list_snapshots(dir)? {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match snapshot::read_snapshot(&path) {
            Ok(doc) => {
                let doc_txn = doc.txn;
                match snapshot::restore(doc) {
                    Ok(restored) => {
                        tables = restored;
                        watermark = doc_txn;
                        report.snapshot_loaded = Some(doc_txn);
                        break;
                    }
                    Err(err) => report.snapshots_ignored.push((name, err.to_string())),
                }
            }
            Err(reason) => report.snapshots_ignored.push((name, reason)),
        }
    }

    let mut valid_lens = HashMap::new();
    let note = |report: &mut OpenReport, table: Table, torn_bytes: u64| {
        if torn_bytes > 0 {
            report.torn_tails.push(TornTail {
                file: table.file_name().to_string(),
                bytes: torn_bytes,
            });
        }
    };

    let txns_out = journal::read_journal::<Marker>(
        &dir.join(Table::Txns.file_name()),
        Table::Txns.file_name(),
    )?;
    note(&mut report, Table::Txns, txns_out.torn_bytes);
    valid_lens.insert(Table::Txns, txns_out.valid_len);
    let mut committed: BTreeMap<u64, BTreeMap<String, u64>> = BTreeMap::new();
    let mut max_txn = watermark;
    for entry in txns_out.entries {
        max_txn = max_txn.max(entry.row.txn);
        if entry.row.txn > watermark && entry.row.commit {
            committed.insert(entry.row.txn, entry.row.counts);
        }
    }

    let mut by_txn: BTreeMap<u64, TxnRows> = BTreeMap::new();
    macro_rules! load_table {
        ($table:expr, $ty:ty, $field:ident) => {{
            let out = journal::read_journal::<$ty>(
                &dir.join($table.file_name()),
                $table.file_name(),
            )?;
            note(&mut report, $table, out.torn_bytes);
            valid_lens.insert($table, out.valid_len);
            for entry in out.entries {
                max_txn = max_txn.max(entry.txn);
                if entry.txn <= watermark {
                    continue;
                }
                by_txn.entry(entry.txn).or_default().$field.push(entry.row);
            }
        }};
    }
    load_table!(Table::Models, ModelRow, models);
    load_table!(Table::Layers, LayerRow, layers);
    load_table!(Table::Versions, VersionRow, versions);
    load_table!(Table::Codebooks, CodebookRow, codebooks);
    load_table!(Table::Weights, WeightRow, weights);
    load_table!(Table::Accuracy, AccuracyRow, accuracy);

    let mut last_committed = watermark;
    for (txn, counts) in &committed {
        let rows = by_txn.remove(txn).unwrap_or_default();
        if !rows.counts_match(counts) || !rows.fk_ok(&tables) {
            report.dropped_txns.push(*txn);
            continue;
        }
        for row in rows.models {
            tables.apply_model(row);
        }
        for row in rows.layers {
            tables.apply_layer(row);
        }
        for row in rows.versions {
            tables.apply_version(row);
        }
        for row in rows.codebooks {
            tables.apply_codebook(row);
        }
        for row in rows.weights {
            tables.apply_weight(row)?;
        }
        for row in rows.accuracy {
            tables.apply_accuracy(row);
        }
        last_committed = *txn;
    }
    report.uncommitted_rows = by_txn.values().map(TxnRows::total).sum();

    Ok(Loaded {
        tables,
        report,
        valid_lens,
        next_txn: max_txn + 1,
        last_committed,
    })
}
