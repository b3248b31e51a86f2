//! End-to-end runs of the `wvlt` binary, checked against the library crates
//! doing the same work directly.

use serde_json::Value;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};
use wvlt_core::compress::{prune_magnitude, CodebookBlob};
use wvlt_core::licensing;
use wvlt_core::nn::forward;
use wvlt_core::store::{Store, StoreOptions};
use wvlt_core::versioning;
use wvlt_core::weightfile::{export_weights, import_weights};

fn wvlt() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wvlt"));
    // Keep host configuration out of test runs.
    cmd.env_remove("WVLT_STORE_DIR")
        .env_remove("WVLT_MODEL")
        .env_remove("WVLT_SERVER")
        .env_remove("WVLT_CACHE")
        .env_remove("WVLT_LISTEN");
    cmd
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn wvlt");
    assert!(
        out.status.success(),
        "wvlt failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn run_json(cmd: &mut Command) -> Value {
    let stdout = run_ok(cmd.arg("--json"));
    serde_json::from_str(&stdout).expect("json stdout")
}

fn run_err(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().expect("spawn wvlt");
    assert!(!out.status.success(), "expected failure, got success");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn read_store(dir: &Path) -> Store {
    Store::open_with(dir, StoreOptions { read_only: true, ..StoreOptions::default() })
        .expect("read-only open")
}

/// Train a small blobs classifier and commit it as the first version.
fn seed(dir: &Path, model: &str) -> (PathBuf, PathBuf) {
    let weights = dir.join("w1.json");
    let dataset = dir.join("data.json");
    run_ok(wvlt().args([
        "train",
        "--model",
        model,
        "--dims",
        "2,8,4",
        "--classes",
        "4",
        "--epochs",
        "10",
        "--weights-out",
        weights.to_str().unwrap(),
        "--dataset-out",
        dataset.to_str().unwrap(),
    ]));
    run_ok(wvlt().args([
        "commit",
        "--store-dir",
        dir.join("store").to_str().unwrap(),
        "--model",
        model,
        "--weights",
        weights.to_str().unwrap(),
        "--register",
        "--set-production",
        "--message",
        "initial",
    ]));
    (weights, dataset)
}

struct ServeGuard {
    child: Child,
    store_dir: PathBuf,
}

impl ServeGuard {
    fn start(store_dir: &Path, extra: &[&str]) -> (ServeGuard, String) {
        let mut child = wvlt()
            .args([
                "serve",
                "--store-dir",
                store_dir.to_str().unwrap(),
                "--listen",
                "127.0.0.1:0",
            ])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn serve");
        let stdout = child.stdout.take().expect("stdout pipe");
        let mut line = String::new();
        std::io::BufReader::new(stdout)
            .read_line(&mut line)
            .expect("read bound address");
        let url = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected serve banner: {line:?}"))
            .to_string();
        (ServeGuard { child, store_dir: store_dir.to_path_buf() }, url)
    }

    fn stop(mut self) {
        // SIGTERM for a graceful shutdown that releases the writer lock;
        // SIGKILL only as a last resort.
        let _ = Command::new("kill").arg(self.child.id().to_string()).status();
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(50))
                }
                _ => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    let _ = std::fs::remove_file(self.store_dir.join("LOCK"));
                    break;
                }
            }
        }
    }
}

impl Drop for ServeGuard {
    fn drop(&mut self) {
        if self.child.try_wait().map_or(true, |s| s.is_none()) {
            let _ = self.child.kill();
            let _ = self.child.wait();
            let _ = std::fs::remove_file(self.store_dir.join("LOCK"));
        }
    }
}

#[test]
fn train_commit_and_history_agree_with_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let store_dir = dir.join("store");

    let weights_path = dir.join("w1.json");
    let trained = run_json(wvlt().args([
        "train",
        "--model",
        "blobs",
        "--dims",
        "2,8,4",
        "--classes",
        "4",
        "--epochs",
        "10",
        "--weights-out",
        weights_path.to_str().unwrap(),
    ]));
    assert_eq!(trained["param_count"], 60);
    assert!(trained["accuracy"].as_f64().unwrap() > 0.9);
    assert!(weights_path.exists());
    assert!(trained["dataset_out"].is_null());

    let committed = run_json(wvlt().args([
        "commit",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--weights",
        weights_path.to_str().unwrap(),
        "--register",
        "--set-production",
        "--message",
        "initial",
    ]));
    assert_eq!(committed["seq"], 1);
    assert_eq!(committed["changed_count"], 60);
    assert_eq!(committed["production"], true);

    // One-position edit, then a major rebaseline.
    let mut w = import_weights(&weights_path).unwrap();
    w.get_mut("dense0").unwrap().values[0] += 0.25;
    let w2_path = dir.join("w2.json");
    export_weights(&w, &w2_path).unwrap();
    let second = run_json(wvlt().args([
        "commit",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--weights",
        w2_path.to_str().unwrap(),
        "--message",
        "tweak",
    ]));
    assert_eq!(second["seq"], 2);
    assert_eq!(second["changed_count"], 1);
    assert_eq!(second["unchanged_count"], 59);

    w.get_mut("dense1").unwrap().values[5] -= 0.5;
    let w3_path = dir.join("w3.json");
    export_weights(&w, &w3_path).unwrap();
    let third = run_json(wvlt().args([
        "commit",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--weights",
        w3_path.to_str().unwrap(),
        "--major",
        "--message",
        "rebase",
    ]));
    assert_eq!(third["seq"], 3);
    assert_eq!(third["major"], true);

    // The CLI's history must be byte-for-byte the library's history.
    let history = run_json(wvlt().args([
        "history",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
    ]));
    let store = read_store(&store_dir);
    let model_id = store.model_by_name("blobs").unwrap().model_id;
    let direct = versioning::history(&store, model_id).unwrap();
    assert_eq!(history, serde_json::to_value(&direct).unwrap());
    assert_eq!(history.as_array().unwrap().len(), 3);

    let limited = run_json(wvlt().args([
        "history",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--limit",
        "2",
    ]));
    let seqs: Vec<u64> = limited
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["seq"].as_u64().unwrap())
        .collect();
    assert_eq!(seqs, [2, 3]);

    // Flags can come from the environment instead.
    let via_env = run_json(
        wvlt()
            .args(["history"])
            .env("WVLT_STORE_DIR", &store_dir)
            .env("WVLT_MODEL", "blobs"),
    );
    assert_eq!(via_env, history);

    // Production moves with set-production and rollback.
    let set = run_json(wvlt().args([
        "set-production",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--seq",
        "3",
    ]));
    assert_eq!(set["production_seq"], 3);
    let rolled = run_json(wvlt().args([
        "rollback",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
    ]));
    assert_eq!(rolled["production_seq"], 2);
}

#[test]
fn usage_and_runtime_failures_use_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let store_dir = tmp.path().join("store");
    seed(tmp.path(), "blobs");

    // Missing required flag: clap usage error, exit 2.
    let (code, stderr) = run_err(wvlt().args(["history", "--store-dir", store_dir.to_str().unwrap()]));
    assert_eq!(code, 2, "stderr: {stderr}");

    // Unknown model: runtime error, exit 1, message names the model.
    let (code, stderr) = run_err(wvlt().args([
        "history",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "missing",
    ]));
    assert_eq!(code, 1);
    assert!(stderr.contains("missing"), "stderr: {stderr}");

    // Rolling back past the first version is a runtime error.
    let (code, stderr) = run_err(wvlt().args([
        "rollback",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
    ]));
    assert_eq!(code, 1);
    assert!(stderr.contains("roll back"), "stderr: {stderr}");
}

#[test]
fn license_create_matches_a_direct_mask_build() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let store_dir = dir.join("store");
    let weights = dir.join("w.json");
    let dataset = dir.join("data.json");

    // The wider net gives the mask search enough granularity to land inside
    // the tolerance band.
    run_ok(wvlt().args([
        "train",
        "--model",
        "blobs",
        "--dims",
        "2,16,16,4",
        "--classes",
        "4",
        "--weights-out",
        weights.to_str().unwrap(),
        "--dataset-out",
        dataset.to_str().unwrap(),
    ]));
    run_ok(wvlt().args([
        "commit",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--weights",
        weights.to_str().unwrap(),
        "--register",
        "--set-production",
    ]));

    let created = run_json(wvlt().args([
        "license",
        "create",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--dataset",
        dataset.to_str().unwrap(),
        "--tier",
        "free",
        "--target",
        "0.70",
    ]));
    let measured = created["measured_accuracy"].as_f64().unwrap();
    assert!((0.65..=0.75).contains(&measured), "measured {measured}");
    assert_eq!(created["seq"], 1);

    // Same search, run directly, must land on the identical mask.
    let store = read_store(&store_dir);
    let model_id = store.model_by_name("blobs").unwrap().model_id;
    let data: wvlt_core::nn::Dataset =
        serde_json::from_slice(&std::fs::read(&dataset).unwrap()).unwrap();
    let direct = licensing::build_mask(&store, model_id, 1, &data, 0.70, 20, 0.05).unwrap();
    assert_eq!(measured, direct.measured_accuracy);
    assert_eq!(
        created["cut_pairs"].as_u64().unwrap() as usize,
        direct.layers.iter().map(|l| l.intervals.len()).sum::<usize>()
    );

    let listed = run_json(wvlt().args([
        "license",
        "list",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
    ]));
    assert_eq!(listed.as_array().unwrap().len(), 1);
    assert_eq!(listed[0]["tier"], "free");
    assert_eq!(listed[0]["measured_accuracy"].as_f64().unwrap(), measured);

    // Tiers are immutable: saving the same name again must fail.
    let (code, stderr) = run_err(wvlt().args([
        "license",
        "create",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--dataset",
        dataset.to_str().unwrap(),
        "--tier",
        "free",
        "--target",
        "0.70",
    ]));
    assert_eq!(code, 1);
    assert!(stderr.contains("free"), "stderr: {stderr}");
}

#[test]
fn report_storage_attributes_bytes_per_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let store_dir = dir.join("store");
    let (weights, dataset) = seed(dir, "dense");

    // A heavily pruned variant of the same weights, committed as its own
    // model: zero positions are never stored, so it should take a fraction
    // of the dense model's bytes.
    let pruned_path = dir.join("pruned.json");
    run_ok(wvlt().args([
        "compress",
        "--model",
        "dense",
        "--weights",
        weights.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--stage",
        "prune",
        "--sparsity",
        "0.8",
        "--fine-tune-epochs",
        "0",
        "--out",
        pruned_path.to_str().unwrap(),
    ]));
    run_ok(wvlt().args([
        "commit",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "pruned",
        "--weights",
        pruned_path.to_str().unwrap(),
        "--register",
    ]));

    let report = run_json(wvlt().args([
        "report",
        "storage",
        "--store-dir",
        store_dir.to_str().unwrap(),
    ]));
    let models = report["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    let by_name = |name: &str| {
        models
            .iter()
            .find(|m| m["model"] == name)
            .unwrap_or_else(|| panic!("{name} missing from report"))
    };
    let dense = by_name("dense");
    let pruned = by_name("pruned");

    assert_eq!(dense["params"], 60);
    assert_eq!(pruned["params"], 60);
    assert_eq!(dense["versions"], 1);
    assert_eq!(dense["weight_rows"], 60);

    // Pruning floors per layer: 24 params keep 5, 36 keep 8.
    let kept = prune_magnitude(&import_weights(&weights).unwrap(), 0.8)
        .0
        .iter()
        .flat_map(|(_, lw)| lw.values.iter())
        .filter(|v| **v != 0.0)
        .count();
    assert_eq!(pruned["weight_rows"].as_u64().unwrap() as usize, kept);
    assert_eq!(kept, 13);

    // Baseline defaults to the biggest model; the pruned one must come in
    // well under it.
    assert_eq!(report["baseline"], "dense");
    assert_eq!(dense["ratio"].as_f64().unwrap(), 1.0);
    let ratio = pruned["ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio < 0.6, "pruned ratio {ratio}");

    let attributed: u64 = models.iter().map(|m| m["bytes"].as_u64().unwrap()).sum();
    assert_eq!(
        attributed + report["shared_bytes"].as_u64().unwrap(),
        report["total_bytes"].as_u64().unwrap()
    );
    assert!(report["shared_bytes"].as_u64().unwrap() > 0);

    // Explicit baseline flips the normalization.
    let flipped = run_json(wvlt().args([
        "report",
        "storage",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--baseline",
        "pruned",
    ]));
    assert_eq!(flipped["baseline"], "pruned");
    let dense_ratio = flipped["models"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["model"] == "dense")
        .unwrap()["ratio"]
        .as_f64()
        .unwrap();
    assert!(dense_ratio > 1.0, "dense ratio {dense_ratio}");
}

#[test]
fn serve_syncs_clients_and_reports_zero_when_current() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let store_dir = dir.join("store");
    let (weights, dataset) = seed(dir, "blobs");

    // Second version: a single changed position, left off production for now.
    let mut w = import_weights(&weights).unwrap();
    w.get_mut("dense0").unwrap().values[0] += 0.25;
    let w2 = dir.join("w2.json");
    export_weights(&w, &w2).unwrap();
    run_ok(wvlt().args([
        "commit",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--weights",
        w2.to_str().unwrap(),
        "--message",
        "tweak",
    ]));

    let cache = dir.join("edge.wvlc");
    let (server, url) = ServeGuard::start(&store_dir, &[]);
    let first = run_json(wvlt().args([
        "client",
        "sync",
        "--server",
        &url,
        "--model",
        "blobs",
        "--cache",
        cache.to_str().unwrap(),
    ]));
    assert_eq!(first["full_sync"], true);
    assert_eq!(first["to_seq"], 1);
    assert_eq!(first["entries_applied"], 60);
    server.stop();

    // Move production while the server is down, then restart; the client
    // should catch up with a single delta request.
    run_ok(wvlt().args([
        "set-production",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--seq",
        "2",
    ]));
    let (server, url) = ServeGuard::start(&store_dir, &[]);
    let second = run_json(wvlt().args([
        "client",
        "sync",
        "--server",
        &url,
        "--model",
        "blobs",
        "--cache",
        cache.to_str().unwrap(),
    ]));
    assert_eq!(second["full_sync"], false);
    assert_eq!(second["requests"], 1);
    assert_eq!(second["to_seq"], 2);
    assert_eq!(second["entries_applied"], 1);

    // Already current: the human line must say so in as many words.
    let third = run_ok(wvlt().args([
        "client",
        "sync",
        "--server",
        &url,
        "--model",
        "blobs",
        "--cache",
        cache.to_str().unwrap(),
    ]));
    assert!(third.contains("0 entries applied"), "stdout: {third}");

    // Offline inference from the cache matches the library run bit for bit.
    let input = [0.4, -1.2];
    let inferred = run_json(wvlt().args([
        "client",
        "infer",
        "--cache",
        cache.to_str().unwrap(),
        "--input",
        "0.4,-1.2",
    ]));
    server.stop();

    let store = read_store(&store_dir);
    let model_id = store.model_by_name("blobs").unwrap().model_id;
    let def = wvlt_core::wire::model_def_from_layers("blobs", &{
        store
            .layers_of(model_id)
            .iter()
            .map(|l| wvlt_core::wire::LayerInfo {
                layer_id: l.layer_id,
                name: l.name.clone(),
                index: l.index,
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                activation: l.activation,
            })
            .collect::<Vec<_>>()
    })
    .unwrap();
    let state = versioning::materialize(&store, model_id, 2).unwrap();
    let expected = forward(&def, &state, &input).unwrap();
    let got: Vec<f64> = inferred["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(got, expected);
    assert_eq!(
        inferred["class"].as_u64().unwrap() as usize,
        wvlt_core::nn::argmax(&expected)
    );

    // A licensed sync carries exactly the rows the mask lets through.
    run_ok(wvlt().args([
        "license",
        "create",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--dataset",
        dataset.to_str().unwrap(),
        "--tier",
        "lite",
        "--target",
        "0.60",
        "--seq",
        "2",
    ]));
    let mask = {
        let store = read_store(&store_dir);
        licensing::load_tier(&store, model_id, 2, "lite").unwrap()
    };
    let allowed = {
        let store = read_store(&store_dir);
        licensing::licensed_weight_rows(&store, model_id, 2, &mask)
            .unwrap()
            .len()
    };

    let (server, url) = ServeGuard::start(&store_dir, &[]);
    let licensed_cache = dir.join("lite.wvlc");
    let licensed = run_json(wvlt().args([
        "client",
        "sync",
        "--server",
        &url,
        "--model",
        "blobs",
        "--cache",
        licensed_cache.to_str().unwrap(),
        "--tier",
        "lite",
    ]));
    server.stop();
    assert_eq!(licensed["full_sync"], true);
    assert_eq!(licensed["tier"], "lite");
    assert_eq!(licensed["entries_applied"].as_u64().unwrap() as usize, allowed);
    assert!(allowed < 60, "mask cut nothing");
}

#[test]
fn compress_stage_outputs_match_direct_pipeline_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let weights = dir.join("w.json");
    let dataset = dir.join("data.json");
    run_ok(wvlt().args([
        "train",
        "--model",
        "blobs",
        "--dims",
        "2,8,4",
        "--classes",
        "4",
        "--epochs",
        "10",
        "--weights-out",
        weights.to_str().unwrap(),
        "--dataset-out",
        dataset.to_str().unwrap(),
    ]));

    // Prune stage output is exactly the library's pruning.
    let pruned_path = dir.join("pruned.json");
    run_ok(wvlt().args([
        "compress",
        "--model",
        "blobs",
        "--weights",
        weights.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--stage",
        "prune",
        "--sparsity",
        "0.5",
        "--fine-tune-epochs",
        "0",
        "--out",
        pruned_path.to_str().unwrap(),
    ]));
    let direct = prune_magnitude(&import_weights(&weights).unwrap(), 0.5).0;
    assert_eq!(import_weights(&pruned_path).unwrap(), direct);

    // Full pipeline: the exported weights are the codebook reconstruction.
    let shared_path = dir.join("shared.json");
    let codebook_path = dir.join("cb.json");
    let out = run_json(wvlt().args([
        "compress",
        "--model",
        "blobs",
        "--weights",
        weights.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--sparsity",
        "0.5",
        "--clusters",
        "4",
        "--fine-tune-epochs",
        "3",
        "--out",
        shared_path.to_str().unwrap(),
        "--codebook-out",
        codebook_path.to_str().unwrap(),
    ]));
    let stages: Vec<&str> = out["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["stage"].as_str().unwrap())
        .collect();
    assert_eq!(stages, ["input", "prune", "fine_tune", "quantize", "weight_share"]);

    let blob: CodebookBlob =
        serde_json::from_slice(&std::fs::read(&codebook_path).unwrap()).unwrap();
    let def = wvlt_core::nn::ModelDef::mlp("blobs", &[2, 8, 4]).unwrap();
    assert_eq!(blob.reconstruct(&def).unwrap(), import_weights(&shared_path).unwrap());

    // Committing with the codebook attaches one row per layer.
    let store_dir = dir.join("store");
    let committed = run_json(wvlt().args([
        "commit",
        "--store-dir",
        store_dir.to_str().unwrap(),
        "--model",
        "blobs",
        "--weights",
        shared_path.to_str().unwrap(),
        "--register",
        "--codebook",
        codebook_path.to_str().unwrap(),
    ]));
    assert_eq!(committed["codebook_layers"], 2);
    let store = read_store(&store_dir);
    let version_id = committed["version_id"].as_u64().unwrap();
    assert_eq!(store.codebooks_of(version_id).len(), 2);
}
