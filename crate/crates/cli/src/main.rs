//! `wvlt` — operator CLI for the versioned weight store.
//!
//! Ties the whole pipeline together: train a model, compress it, commit
//! versions to a store, serve them, mint license tiers, sync an edge cache,
//! run offline inference, and account for storage.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. Every subcommand
//! accepts `--json` for machine-readable output; flags can be supplied via
//! `WVLT_*` environment variables where noted.

mod client_ops;
mod model_ops;
mod report;
mod store_ops;
mod util;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "wvlt", version, about = "Versioned neural-network weight store")]
struct Cli {
    /// Print machine-readable JSON instead of human-readable text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh MLP on a synthetic blobs dataset and write a weight file.
    Train(model_ops::TrainArgs),
    /// Prune, fine-tune, quantize, and weight-share a trained weight file.
    Compress(model_ops::CompressArgs),
    /// Commit a weight file to a store as a new version.
    Commit(store_ops::CommitArgs),
    /// Serve a store over HTTP.
    Serve(store_ops::ServeArgs),
    /// List a model's version history.
    History(store_ops::HistoryArgs),
    /// Move production back to the previous version.
    Rollback(store_ops::ModelArgs),
    /// Mark a specific version as production.
    SetProduction(store_ops::SetProductionArgs),
    /// License tier operations.
    #[command(subcommand)]
    License(store_ops::LicenseCmd),
    /// Edge-client operations (sync a cache, run inference).
    #[command(subcommand)]
    Client(client_ops::ClientCmd),
    /// Accounting reports.
    #[command(subcommand)]
    Report(report::ReportCmd),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => model_ops::train(args, cli.json),
        Command::Compress(args) => model_ops::compress(args, cli.json),
        Command::Commit(args) => store_ops::commit(args, cli.json),
        Command::Serve(args) => store_ops::serve(args),
        Command::History(args) => store_ops::history(args, cli.json),
        Command::Rollback(args) => store_ops::rollback(args, cli.json),
        Command::SetProduction(args) => store_ops::set_production(args, cli.json),
        Command::License(cmd) => store_ops::license(cmd, cli.json),
        Command::Client(cmd) => client_ops::run(cmd, cli.json),
        Command::Report(cmd) => report::run(cmd, cli.json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
