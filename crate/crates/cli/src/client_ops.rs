use crate::util::emit;
use anyhow::Context;
use clap::{Args, Subcommand};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Subcommand)]
pub enum ClientCmd {
    /// Pull the production version into the local cache, by delta when the
    /// cache is current enough and by full fetch otherwise.
    Sync(SyncArgs),
    /// Run the cached model on one input vector, fully offline.
    Infer(InferArgs),
}

#[derive(Args)]
pub struct SyncArgs {
    /// Server base URL, e.g. http://127.0.0.1:7070.
    #[arg(long, env = "WVLT_SERVER")]
    server: String,
    #[arg(long, env = "WVLT_MODEL")]
    model: String,
    #[arg(long, env = "WVLT_CACHE")]
    cache: PathBuf,
    /// License tier token; omitted means unrestricted weights.
    #[arg(long)]
    tier: Option<String>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long, env = "WVLT_CACHE")]
    cache: PathBuf,
    /// Input features, comma separated: --input 0.4,-1.2
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    input: Vec<f64>,
}

#[derive(Serialize)]
struct InferOutput {
    class: usize,
    outputs: Vec<f64>,
}

pub fn run(cmd: ClientCmd, json: bool) -> anyhow::Result<()> {
    match cmd {
        ClientCmd::Sync(args) => sync(args, json),
        ClientCmd::Infer(args) => infer(args, json),
    }
}

fn sync(args: SyncArgs, json: bool) -> anyhow::Result<()> {
    let mut config = wvlt_client::ClientConfig::new(&args.server, &args.model, &args.cache);
    config.tier = args.tier.clone();
    let report = wvlt_client::sync(&config).context("sync failed")?;
    emit(json, &report, || {
        println!(
            "synced {} seq {} -> {}{}: {} entries applied in {} request{} ({} bytes{})",
            report.model,
            report.from_seq,
            report.to_seq,
            report
                .tier
                .as_deref()
                .map(|t| format!(" [{t}]"))
                .unwrap_or_default(),
            report.entries_applied,
            report.requests,
            if report.requests == 1 { "" } else { "s" },
            report.bytes_received,
            if report.full_sync { ", full sync" } else { "" },
        );
    })
}

fn infer(args: InferArgs, json: bool) -> anyhow::Result<()> {
    let cache = wvlt_client::load_cache(&args.cache)?;
    let result = wvlt_client::infer(&cache, &args.input)?;
    let out = InferOutput { class: result.class, outputs: result.outputs };
    emit(json, &out, || {
        let formatted: Vec<String> = out.outputs.iter().map(|v| format!("{v:.6}")).collect();
        println!("class {}  outputs [{}]", out.class, formatted.join(", "));
    })
}
