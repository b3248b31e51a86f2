use crate::util::{emit, read_dataset};
use anyhow::{anyhow, Context};
use clap::{Args, Subcommand};
use serde::Serialize;
use std::net::SocketAddr;
use std::path::PathBuf;
use wvlt_core::compress::CodebookBlob;
use wvlt_core::licensing;
use wvlt_core::store::{Store, StoreError, StoreOptions};
use wvlt_core::versioning;

/// Read-side commands open without the writer lock so they work while a
/// server is running against the same store.
fn open_read_only(dir: &PathBuf) -> anyhow::Result<Store> {
    Ok(Store::open_with(
        dir,
        StoreOptions { read_only: true, ..StoreOptions::default() },
    )?)
}

fn open_writer(dir: &PathBuf) -> anyhow::Result<Store> {
    Ok(Store::open(dir)?)
}

#[derive(Args)]
pub struct CommitArgs {
    #[arg(long, env = "WVLT_STORE_DIR")]
    store_dir: PathBuf,
    #[arg(long, env = "WVLT_MODEL")]
    model: String,
    #[arg(long)]
    weights: PathBuf,
    /// Register the model first if the store does not know it (layer shapes
    /// are recovered from the weight file).
    #[arg(long)]
    register: bool,
    /// Commit as a major version: a full baseline deltas never cross.
    #[arg(long)]
    major: bool,
    #[arg(long, default_value = "")]
    message: String,
    /// Attach a codebook (JSON from `wvlt compress --codebook-out`) to the
    /// committed version.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Also mark the new version as production.
    #[arg(long)]
    set_production: bool,
}

#[derive(Serialize)]
struct CommitOutput {
    model: String,
    version_id: u64,
    seq: u64,
    major: bool,
    changed_count: u64,
    unchanged_count: u64,
    tombstoned_count: u64,
    codebook_layers: usize,
    production: bool,
}

pub fn commit(args: CommitArgs, json: bool) -> anyhow::Result<()> {
    let weights = wvlt_core::weightfile::import_weights(&args.weights)
        .with_context(|| format!("reading {}", args.weights.display()))?;
    let store = open_writer(&args.store_dir)?;
    let model_id = match store.model_by_name(&args.model) {
        Ok(m) => m.model_id,
        Err(StoreError::UnknownModel(_)) if args.register => {
            let def = crate::util::def_from_weights(&args.model, &weights)?;
            store.register_model(&def)?.model.model_id
        }
        Err(e) => {
            return Err(anyhow!(e).context(
                "model not registered; pass --register to create it from the weight file",
            ))
        }
    };

    let result = versioning::commit(&store, model_id, &weights, args.major, &args.message)?;

    let mut codebook_layers = 0;
    if let Some(path) = &args.codebook {
        let blob: CodebookBlob = serde_json::from_slice(
            &std::fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        )?;
        let layer_ids: std::collections::HashMap<String, u64> = store
            .layers_of(model_id)
            .into_iter()
            .map(|l| (l.name, l.layer_id))
            .collect();
        let mut txn = store.begin()?;
        for (name, layer) in &blob.layers {
            let layer_id = *layer_ids
                .get(name)
                .ok_or_else(|| anyhow!("codebook names unknown layer {name:?}"))?;
            txn.insert_codebook(result.version_id, layer_id, layer.clone())?;
            codebook_layers += 1;
        }
        txn.commit()?;
    }

    if args.set_production {
        versioning::set_production(&store, model_id, result.seq)?;
    }

    let out = CommitOutput {
        model: args.model.clone(),
        version_id: result.version_id,
        seq: result.seq,
        major: args.major,
        changed_count: result.changed_count,
        unchanged_count: result.unchanged_count,
        tombstoned_count: result.tombstoned_count,
        codebook_layers,
        production: args.set_production,
    };
    emit(json, &out, || {
        println!(
            "committed {} seq {} (version {}): {} changed, {} unchanged, {} tombstoned{}{}",
            out.model,
            out.seq,
            out.version_id,
            out.changed_count,
            out.unchanged_count,
            out.tombstoned_count,
            if out.codebook_layers > 0 {
                format!(", codebook over {} layers", out.codebook_layers)
            } else {
                String::new()
            },
            if out.production { ", now production" } else { "" },
        );
    })
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, env = "WVLT_STORE_DIR")]
    store_dir: PathBuf,
    #[arg(long, env = "WVLT_LISTEN", default_value = "127.0.0.1:7070")]
    listen: SocketAddr,
    /// Require this value in x-publisher-secret on commits.
    #[arg(long, env = "WVLT_PUBLISHER_SECRET")]
    publisher_secret: Option<String>,
    /// Named evaluation dataset, `name=path`; repeatable.
    #[arg(long = "eval-dataset", value_name = "NAME=PATH")]
    eval_datasets: Vec<String>,
    /// Static license tier, `name=target,tolerance,k,dataset`; repeatable.
    #[arg(long = "tier", value_name = "SPEC")]
    tiers: Vec<wvlt_server::TierSpec>,
    /// fsync journal appends on every commit.
    #[arg(long)]
    sync_writes: bool,
}

pub fn serve(args: ServeArgs) -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let mut config = wvlt_server::ServerConfig::new(&args.store_dir);
    config.listen = args.listen;
    config.publisher_secret = args.publisher_secret.clone();
    config.static_tiers = args.tiers.clone();
    config.sync_writes = args.sync_writes;
    for spec in &args.eval_datasets {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--eval-dataset {spec:?}: expected name=path"))?;
        config.eval_datasets.push((name.to_string(), PathBuf::from(path)));
    }

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(wvlt_server::run_with(config, |addr| {
        use std::io::Write as _;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
    }))?;
    Ok(())
}

#[derive(Args)]
pub struct HistoryArgs {
    #[arg(long, env = "WVLT_STORE_DIR")]
    store_dir: PathBuf,
    #[arg(long, env = "WVLT_MODEL")]
    model: String,
    /// Show only the most recent N versions.
    #[arg(long)]
    limit: Option<usize>,
}

pub fn history(args: HistoryArgs, json: bool) -> anyhow::Result<()> {
    let store = open_read_only(&args.store_dir)?;
    let model = store.model_by_name(&args.model)?;
    let mut rows = versioning::history(&store, model.model_id)?;
    if let Some(limit) = args.limit {
        let skip = rows.len().saturating_sub(limit);
        rows.drain(..skip);
    }
    emit(json, &rows, || {
        println!(
            "{:<5} {:<8} {:<6} {:<5} {:>8} {:>10} {:>11}  {}",
            "seq", "version", "major", "prod", "changed", "tombstoned", "created_ms", "message"
        );
        for row in &rows {
            println!(
                "{:<5} {:<8} {:<6} {:<5} {:>8} {:>10} {:>11}  {}",
                row.seq,
                row.version_id,
                if row.major { "yes" } else { "-" },
                if row.production { "yes" } else { "-" },
                row.changed_count,
                row.tombstoned_count,
                row.created_at,
                row.message
            );
        }
    })
}

#[derive(Args)]
pub struct ModelArgs {
    #[arg(long, env = "WVLT_STORE_DIR")]
    store_dir: PathBuf,
    #[arg(long, env = "WVLT_MODEL")]
    model: String,
}

#[derive(Serialize)]
struct ProductionOutput {
    model: String,
    production_seq: u64,
}

pub fn rollback(args: ModelArgs, json: bool) -> anyhow::Result<()> {
    let store = open_writer(&args.store_dir)?;
    let model = store.model_by_name(&args.model)?;
    let seq = versioning::rollback(&store, model.model_id)?;
    let out = ProductionOutput { model: args.model.clone(), production_seq: seq };
    emit(json, &out, || {
        println!("rolled back: production of {} is now seq {}", out.model, out.production_seq);
    })
}

#[derive(Args)]
pub struct SetProductionArgs {
    #[command(flatten)]
    target: ModelArgs,
    #[arg(long)]
    seq: u64,
}

pub fn set_production(args: SetProductionArgs, json: bool) -> anyhow::Result<()> {
    let store = open_writer(&args.target.store_dir)?;
    let model = store.model_by_name(&args.target.model)?;
    let seq = versioning::set_production(&store, model.model_id, args.seq)?;
    let out = ProductionOutput { model: args.target.model.clone(), production_seq: seq };
    emit(json, &out, || {
        println!("production of {} is now seq {}", out.model, out.production_seq);
    })
}

#[derive(Subcommand)]
pub enum LicenseCmd {
    /// Build a license tier for a stored version by cutting magnitude
    /// intervals until accuracy lands at the target.
    Create(LicenseCreateArgs),
    /// List the tiers saved for a model.
    List(LicenseListArgs),
}

#[derive(Args)]
pub struct LicenseCreateArgs {
    #[arg(long, env = "WVLT_STORE_DIR")]
    store_dir: PathBuf,
    #[arg(long, env = "WVLT_MODEL")]
    model: String,
    /// Evaluation dataset (JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// Tier name to save the mask under.
    #[arg(long)]
    tier: String,
    #[arg(long)]
    target: f64,
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[arg(long, default_value_t = 20)]
    k_intervals: u32,
    /// Version to license; defaults to production, then latest.
    #[arg(long)]
    seq: Option<u64>,
}

#[derive(Serialize)]
struct LicenseCreateOutput {
    model: String,
    tier: String,
    seq: u64,
    measured_accuracy: f64,
    k_intervals: u32,
    cut_pairs: usize,
}

pub fn license(cmd: LicenseCmd, json: bool) -> anyhow::Result<()> {
    match cmd {
        LicenseCmd::Create(args) => license_create(args, json),
        LicenseCmd::List(args) => license_list(args, json),
    }
}

fn license_create(args: LicenseCreateArgs, json: bool) -> anyhow::Result<()> {
    let data = read_dataset(&args.dataset)?;
    let store = open_writer(&args.store_dir)?;
    let model = store.model_by_name(&args.model)?;
    let seq = match args.seq {
        Some(s) => s,
        None => store
            .production_version(model.model_id)
            .map(|v| v.seq)
            .or_else(|| store.latest_seq(model.model_id))
            .ok_or_else(|| anyhow!("{} has no versions to license", args.model))?,
    };
    let mask = licensing::build_mask(
        &store,
        model.model_id,
        seq,
        &data,
        args.target,
        args.k_intervals,
        args.tolerance,
    )?;
    licensing::save_tier(&store, &mask, &args.tier)?;

    let out = LicenseCreateOutput {
        model: args.model.clone(),
        tier: args.tier.clone(),
        seq,
        measured_accuracy: mask.measured_accuracy,
        k_intervals: mask.k_intervals,
        cut_pairs: mask.layers.iter().map(|l| l.intervals.len()).sum(),
    };
    emit(json, &out, || {
        println!(
            "tier {:?} on {} seq {}: measured accuracy {:.4}, {} interval cuts (grid k={})",
            out.tier, out.model, out.seq, out.measured_accuracy, out.cut_pairs, out.k_intervals
        );
    })
}

#[derive(Args)]
pub struct LicenseListArgs {
    #[arg(long, env = "WVLT_STORE_DIR")]
    store_dir: PathBuf,
    #[arg(long, env = "WVLT_MODEL")]
    model: String,
    /// Restrict to one version.
    #[arg(long)]
    seq: Option<u64>,
}

#[derive(Serialize)]
struct TierRow {
    seq: u64,
    tier: String,
    measured_accuracy: f64,
    k_intervals: u32,
    cut_pairs: usize,
}

fn license_list(args: LicenseListArgs, json: bool) -> anyhow::Result<()> {
    let store = open_read_only(&args.store_dir)?;
    let model = store.model_by_name(&args.model)?;
    if let Some(seq) = args.seq {
        store.version_by_seq(model.model_id, seq)?;
    }
    let mut rows: Vec<TierRow> = Vec::new();
    for version in store.versions_of(model.model_id) {
        if args.seq.is_some_and(|s| s != version.seq) {
            continue;
        }
        for acc in store.accuracy_rows(version.version_id) {
            rows.push(TierRow {
                seq: version.seq,
                tier: acc.tier_name.clone(),
                measured_accuracy: acc.measured_accuracy,
                k_intervals: acc.k_intervals,
                cut_pairs: acc.cut_intervals.iter().map(|l| l.intervals.len()).sum(),
            });
        }
    }
    emit(json, &rows, || {
        if rows.is_empty() {
            println!("no tiers saved");
            return;
        }
        println!("{:<5} {:<16} {:>9} {:>4} {:>9}", "seq", "tier", "accuracy", "k", "cuts");
        for r in &rows {
            println!(
                "{:<5} {:<16} {:>9.4} {:>4} {:>9}",
                r.seq, r.tier, r.measured_accuracy, r.k_intervals, r.cut_pairs
            );
        }
    })
}
