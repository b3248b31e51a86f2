//! The cloud-side sync server: model catalog, version history, low-latency
//! deltas, license-filtered weight dumps, and publisher commits over
//! HTTP/JSON.
//!
//! The server owns a [`Store`] opened at startup. If another process holds
//! the writer lock it falls back to read-only serving and reports itself
//! degraded: `GET /v1/health` answers 503 and commits answer 423.
//!
//! Endpoints (all under `/v1`):
//!
//! | method | path                           | purpose                         |
//! |--------|--------------------------------|---------------------------------|
//! | GET    | `/health`                      | liveness + store watermark      |
//! | GET    | `/models`                      | model catalog                   |
//! | GET    | `/models/{name}/versions`      | version history, ascending      |
//! | GET    | `/models/{name}/delta`         | collapsed delta, license-aware  |
//! | GET    | `/models/{name}/weights`       | chunked full dump, license-aware|
//! | POST   | `/models/{name}/versions`      | publisher commit                |
//! | POST   | `/models/{name}/licenses`      | dynamic licensing               |

mod routes;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use thiserror::Error;
use wvlt_core::nn::Dataset;
use wvlt_core::store::{Store, StoreError, StoreOptions};

/// A precomputed tier definition, rebuilt on publish when the commit asks
/// for it. Flag form: `name=target,tolerance,k_intervals,dataset`.
#[derive(Debug, Clone, PartialEq)]
pub struct TierSpec {
    pub name: String,
    pub target_accuracy: f64,
    pub tolerance: f64,
    pub k_intervals: u32,
    pub dataset: String,
}

impl std::str::FromStr for TierSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, rest) = s
            .split_once('=')
            .ok_or_else(|| format!("tier spec {s:?}: expected name=target,tol,k,dataset"))?;
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 4 {
            return Err(format!("tier spec {s:?}: expected 4 comma-separated values"));
        }
        let parse_f = |v: &str, what: &str| {
            v.parse::<f64>().map_err(|e| format!("tier spec {s:?}: bad {what}: {e}"))
        };
        Ok(TierSpec {
            name: name.to_string(),
            target_accuracy: parse_f(parts[0], "target")?,
            tolerance: parse_f(parts[1], "tolerance")?,
            k_intervals: parts[2]
                .parse()
                .map_err(|e| format!("tier spec {s:?}: bad k: {e}"))?,
            dataset: parts[3].to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub store_dir: PathBuf,
    /// Bind address; port 0 picks an ephemeral port (reported by `start`).
    pub listen: SocketAddr,
    /// When set, `POST /versions` requires this value in `x-publisher-secret`.
    pub publisher_secret: Option<String>,
    /// Named evaluation datasets loaded at startup (JSON `Dataset` files).
    pub eval_datasets: Vec<(String, PathBuf)>,
    pub static_tiers: Vec<TierSpec>,
    /// fsync journal appends on commit.
    pub sync_writes: bool,
}

impl ServerConfig {
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            store_dir: store_dir.into(),
            listen: "127.0.0.1:0".parse().unwrap(),
            publisher_secret: None,
            eval_datasets: Vec::new(),
            static_tiers: Vec::new(),
            sync_writes: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("evaluation dataset {name:?} ({path}): {reason}")]
    Dataset { name: String, path: String, reason: String },
    #[error("static tier {tier:?} references unknown dataset {dataset:?}")]
    TierDataset { tier: String, dataset: String },
}

pub(crate) struct App {
    pub store: Store,
    pub read_only: bool,
    pub secret: Option<String>,
    pub datasets: HashMap<String, Dataset>,
    pub tiers: Vec<TierSpec>,
    pub req_counter: AtomicU64,
    pub dyn_counter: AtomicU64,
}

/// Open the store (degrading to read-only when the writer lock is held),
/// load datasets, and assemble the router.
pub fn build(config: &ServerConfig) -> Result<axum::Router, ServerError> {
    let (store, read_only) = match Store::open_with(
        &config.store_dir,
        StoreOptions { sync_writes: config.sync_writes, ..StoreOptions::default() },
    ) {
        Ok(store) => (store, false),
        Err(StoreError::LockHeld { path }) => {
            tracing::warn!("writer lock held ({}); serving read-only", path.display());
            let store = Store::open_with(
                &config.store_dir,
                StoreOptions { read_only: true, ..StoreOptions::default() },
            )?;
            (store, true)
        }
        Err(err) => return Err(err.into()),
    };

    let mut datasets = HashMap::new();
    for (name, path) in &config.eval_datasets {
        let bytes = std::fs::read(path).map_err(|e| ServerError::Dataset {
            name: name.clone(),
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let data: Dataset = serde_json::from_slice(&bytes).map_err(|e| ServerError::Dataset {
            name: name.clone(),
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        datasets.insert(name.clone(), data);
    }
    for tier in &config.static_tiers {
        if !datasets.contains_key(&tier.dataset) {
            return Err(ServerError::TierDataset {
                tier: tier.name.clone(),
                dataset: tier.dataset.clone(),
            });
        }
    }

    let app = Arc::new(App {
        store,
        read_only,
        secret: config.publisher_secret.clone(),
        datasets,
        tiers: config.static_tiers.clone(),
        req_counter: AtomicU64::new(1),
        dyn_counter: AtomicU64::new(1),
    });
    Ok(routes::router(app))
}

/// Serve until the process is interrupted. Used by `wvlt serve`.
pub async fn run(config: ServerConfig) -> Result<(), ServerError> {
    run_with(config, |_| {}).await
}

/// [`run`] with a callback invoked once the listener is bound; lets callers
/// report the actual address when the config asked for port 0.
pub async fn run_with(
    config: ServerConfig,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<(), ServerError> {
    let router = build(&config)?;
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    let addr = listener.local_addr()?;
    tracing::info!("listening on {addr}");
    on_bound(addr);
    axum::serve(listener, router)
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    Ok(())
}

/// Resolve on SIGINT or, on unix, SIGTERM — the latter so supervisors (and
/// plain `kill`) get a clean shutdown that releases the store's writer lock.
async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = match signal(SignalKind::terminate()) {
            Ok(s) => s,
            Err(_) => return tokio::signal::ctrl_c().await.unwrap_or(()),
        };
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// A server running on its own thread and runtime; shuts down on drop.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Start a server in the background; returns once it is accepting
/// connections. Suitable for tests and the CLI's foreground runner.
pub fn start(config: ServerConfig) -> Result<ServerHandle, ServerError> {
    let router = build(&config)?;
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
    let listen = config.listen;
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(listen).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = addr_tx.send(Err(e));
                    return;
                }
            };
            let addr = listener.local_addr().expect("local addr");
            let _ = addr_tx.send(Ok(addr));
            let _ = axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                })
                .await;
        });
    });
    let addr = addr_rx
        .recv()
        .map_err(|_| std::io::Error::other("server thread died before binding"))??;
    Ok(ServerHandle { addr, shutdown: Some(shutdown_tx), thread: Some(thread) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tier_spec_parses_the_flag_form() {
        let spec: TierSpec = "free=0.7,0.05,20,blobs".parse().unwrap();
        assert_eq!(
            spec,
            TierSpec {
                name: "free".into(),
                target_accuracy: 0.7,
                tolerance: 0.05,
                k_intervals: 20,
                dataset: "blobs".into(),
            }
        );
        assert!("free=0.7,0.05,20".parse::<TierSpec>().is_err());
        assert!("free".parse::<TierSpec>().is_err());
        assert!("free=x,0.05,20,blobs".parse::<TierSpec>().is_err());
    }
}
