use crate::util::emit;
use anyhow::{anyhow, Context};
use clap::{Args, Subcommand};
use serde::Serialize;
use std::collections::HashMap;
use std::io::BufRead;
use std::path::PathBuf;
use wvlt_core::store::{Store, StoreOptions};

#[derive(Subcommand)]
pub enum ReportCmd {
    /// Attribute on-disk journal bytes to models and compare against a
    /// baseline model.
    Storage(StorageArgs),
}

#[derive(Args)]
pub struct StorageArgs {
    #[arg(long, env = "WVLT_STORE_DIR")]
    store_dir: PathBuf,
    /// Model to normalize ratios against; defaults to the largest model.
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Serialize)]
struct ModelUsage {
    model: String,
    params: u64,
    versions: usize,
    weight_rows: u64,
    bytes: u64,
    /// Bytes relative to the baseline model's bytes.
    ratio: f64,
}

#[derive(Serialize)]
struct StorageReport {
    store_dir: String,
    baseline: String,
    models: Vec<ModelUsage>,
    /// Transaction log, manifest, lock, snapshots, and unparseable lines.
    shared_bytes: u64,
    total_bytes: u64,
}

pub fn run(cmd: ReportCmd, json: bool) -> anyhow::Result<()> {
    match cmd {
        ReportCmd::Storage(args) => storage(args, json),
    }
}

struct Tally {
    bytes: u64,
    weight_rows: u64,
}

fn storage(args: StorageArgs, json: bool) -> anyhow::Result<()> {
    let store = Store::open_with(
        &args.store_dir,
        StoreOptions { read_only: true, ..StoreOptions::default() },
    )?;
    let models = store.models();

    let mut layer_to_model: HashMap<u64, u64> = HashMap::new();
    let mut version_to_model: HashMap<u64, u64> = HashMap::new();
    let mut params: HashMap<u64, u64> = HashMap::new();
    for m in &models {
        for layer in store.layers_of(m.model_id) {
            layer_to_model.insert(layer.layer_id, m.model_id);
            *params.entry(m.model_id).or_default() +=
                (layer.in_dim as u64 + 1) * layer.out_dim as u64;
        }
        for version in store.versions_of(m.model_id) {
            version_to_model.insert(version.version_id, m.model_id);
        }
    }

    // (file, key, map): which top-level id attributes a line, and how that
    // id resolves to a model. models/layers/versions carry model_id
    // directly; weights and codebooks go through their layer, accuracy
    // through its version.
    let direct: HashMap<u64, u64> = models.iter().map(|m| (m.model_id, m.model_id)).collect();
    let files: [(&str, &str, &HashMap<u64, u64>); 6] = [
        ("models.jsonl", "model_id", &direct),
        ("layers.jsonl", "model_id", &direct),
        ("versions.jsonl", "model_id", &direct),
        ("weights.jsonl", "layer_id", &layer_to_model),
        ("codebooks.jsonl", "layer_id", &layer_to_model),
        ("accuracy.jsonl", "version_id", &version_to_model),
    ];

    let mut tallies: HashMap<u64, Tally> = models
        .iter()
        .map(|m| (m.model_id, Tally { bytes: 0, weight_rows: 0 }))
        .collect();
    let mut attributed_total: u64 = 0;

    for (file, key, map) in files {
        let path = args.store_dir.join(file);
        let handle = match std::fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => return Err(anyhow!(e).context(format!("reading {}", path.display()))),
        };
        let mut reader = std::io::BufReader::new(handle);
        let mut line = Vec::new();
        loop {
            line.clear();
            let n = reader.read_until(b'\n', &mut line)?;
            if n == 0 {
                break;
            }
            let model_id = serde_json::from_slice::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get(key).and_then(|id| id.as_u64()))
                .and_then(|id| map.get(&id).copied());
            if let Some(model_id) = model_id {
                let tally = tallies.entry(model_id).or_insert(Tally { bytes: 0, weight_rows: 0 });
                tally.bytes += n as u64;
                if file == "weights.jsonl" {
                    tally.weight_rows += 1;
                }
                attributed_total += n as u64;
            }
        }
    }

    let total_bytes = store.total_disk_bytes()?;
    let shared_bytes = total_bytes.saturating_sub(attributed_total);

    let baseline_id = match &args.baseline {
        Some(name) => store.model_by_name(name).context("resolving --baseline")?.model_id,
        None => models
            .iter()
            .max_by_key(|m| tallies.get(&m.model_id).map_or(0, |t| t.bytes))
            .map(|m| m.model_id)
            .ok_or_else(|| anyhow!("store has no models"))?,
    };
    let baseline_bytes = tallies.get(&baseline_id).map_or(0, |t| t.bytes);
    let baseline_name = models
        .iter()
        .find(|m| m.model_id == baseline_id)
        .map(|m| m.name.clone())
        .unwrap_or_default();

    let mut usage: Vec<ModelUsage> = models
        .iter()
        .map(|m| {
            let tally = &tallies[&m.model_id];
            ModelUsage {
                model: m.name.clone(),
                params: params.get(&m.model_id).copied().unwrap_or(0),
                versions: store.versions_of(m.model_id).len(),
                weight_rows: tally.weight_rows,
                bytes: tally.bytes,
                ratio: if baseline_bytes == 0 {
                    0.0
                } else {
                    tally.bytes as f64 / baseline_bytes as f64
                },
            }
        })
        .collect();
    usage.sort_by(|a, b| b.bytes.cmp(&a.bytes));

    let report = StorageReport {
        store_dir: args.store_dir.display().to_string(),
        baseline: baseline_name,
        models: usage,
        shared_bytes,
        total_bytes,
    };
    emit(json, &report, || {
        println!("storage for {} (baseline {})", report.store_dir, report.baseline);
        println!(
            "{:<24} {:>10} {:>9} {:>12} {:>12} {:>7}",
            "model", "params", "versions", "weight_rows", "bytes", "ratio"
        );
        for u in &report.models {
            println!(
                "{:<24} {:>10} {:>9} {:>12} {:>12} {:>7.3}",
                u.model, u.params, u.versions, u.weight_rows, u.bytes, u.ratio
            );
        }
        println!("{:<24} {:>10} {:>9} {:>12} {:>12}", "(shared)", "-", "-", "-", report.shared_bytes);
        println!("{:<24} {:>10} {:>9} {:>12} {:>12}", "total", "", "", "", report.total_bytes);
    })
}
