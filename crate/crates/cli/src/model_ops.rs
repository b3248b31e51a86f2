use crate::util::{dims_arrow, emit, read_dataset};
use anyhow::{bail, Context};
use clap::Args;
use serde::Serialize;
use std::path::PathBuf;
use wvlt_core::compress::{
    fine_tune, prune_magnitude, quantize, weight_share_capped, QuantParams,
};
use wvlt_core::nn::{evaluate_accuracy, gen_blobs, train as train_mlp, ModelDef, TrainConfig};
use wvlt_core::weightfile::{export_weights, import_weights};

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, env = "WVLT_MODEL")]
    model: String,
    /// Layer sizes, input first, e.g. 2,16,16,4. The last entry must match
    /// --classes.
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<u32>,
    /// Where to write the trained weight file.
    #[arg(long)]
    weights_out: PathBuf,
    /// Also write the generated dataset as JSON (for licensing/fine-tuning).
    #[arg(long)]
    dataset_out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    data_seed: u64,
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Seed for weight init and minibatch shuffling.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Serialize)]
struct TrainOutput {
    model: String,
    dims: Vec<u32>,
    param_count: usize,
    accuracy: f64,
    weights_out: String,
    dataset_out: Option<String>,
}

pub fn train(args: TrainArgs, json: bool) -> anyhow::Result<()> {
    if args.dims.last().copied() != Some(args.classes as u32) {
        bail!(
            "the last layer emits {} outputs but --classes is {}",
            args.dims.last().copied().unwrap_or(0),
            args.classes
        );
    }
    let def = ModelDef::mlp(&args.model, &args.dims)?;
    let data = gen_blobs(args.data_seed, args.n_per_class, args.classes, args.spread);
    let cfg = TrainConfig {
        learning_rate: args.learning_rate,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
    };
    let weights = train_mlp(&def, &data, &cfg)?;
    let accuracy = evaluate_accuracy(&def, &weights, &data)?;
    export_weights(&weights, &args.weights_out)
        .with_context(|| format!("writing {}", args.weights_out.display()))?;
    if let Some(path) = &args.dataset_out {
        std::fs::write(path, serde_json::to_vec_pretty(&data)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }

    let out = TrainOutput {
        model: args.model.clone(),
        dims: args.dims.clone(),
        param_count: def.param_count(),
        accuracy,
        weights_out: args.weights_out.display().to_string(),
        dataset_out: args.dataset_out.as_ref().map(|p| p.display().to_string()),
    };
    emit(json, &out, || {
        println!(
            "trained {} ({}, {} params) to accuracy {:.4} in {} epochs",
            out.model,
            dims_arrow(&out.dims),
            out.param_count,
            out.accuracy,
            args.epochs
        );
        println!("weights -> {}", out.weights_out);
        if let Some(d) = &out.dataset_out {
            println!("dataset -> {d}");
        }
    })
}

#[derive(Clone, Copy, PartialEq, clap::ValueEnum)]
pub enum Stage {
    /// Magnitude pruning only.
    Prune,
    /// Pruning plus mask-respecting fine-tuning.
    Tune,
    /// Pruned, tuned, then symmetric fixed-bit quantization.
    Quantize,
    /// Full pipeline: quantized values re-clustered into a shared codebook.
    Share,
}

#[derive(Args)]
pub struct CompressArgs {
    /// Model name used to rebuild the layer definitions from the weight file.
    #[arg(long, env = "WVLT_MODEL")]
    model: String,
    #[arg(long)]
    weights: PathBuf,
    /// Evaluation/fine-tuning dataset (JSON, as written by `wvlt train`).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    sparsity: f64,
    #[arg(long, default_value_t = 8)]
    bits: u8,
    /// Codebook size cap; clamped per layer to the kept-weight count.
    #[arg(long, default_value_t = 16)]
    clusters: usize,
    #[arg(long, default_value_t = 15)]
    fine_tune_epochs: usize,
    /// Which stage's weights to write to --out.
    #[arg(long, value_enum, default_value_t = Stage::Share)]
    stage: Stage,
    #[arg(long)]
    out: PathBuf,
    /// Write the shared codebook as JSON (stage `share` only); commit it
    /// alongside the weights with `wvlt commit --codebook`.
    #[arg(long)]
    codebook_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct StageLine {
    stage: &'static str,
    accuracy: f64,
    nonzero: usize,
}

#[derive(Serialize)]
struct CompressOutput {
    model: String,
    param_count: usize,
    stages: Vec<StageLine>,
    out: String,
    codebook_out: Option<String>,
    codebook_entries: Option<usize>,
}

pub fn compress(args: CompressArgs, json: bool) -> anyhow::Result<()> {
    let weights = import_weights(&args.weights)
        .with_context(|| format!("reading {}", args.weights.display()))?;
    let def = crate::util::def_from_weights(&args.model, &weights)?;
    let data = read_dataset(&args.dataset)?;
    let mut stages = Vec::new();
    let mut record = |name: &'static str, w: &wvlt_core::nn::WeightMap| -> anyhow::Result<()> {
        stages.push(StageLine {
            stage: name,
            accuracy: evaluate_accuracy(&def, w, &data)?,
            nonzero: w.nonzero_count(),
        });
        Ok(())
    };
    record("input", &weights)?;

    let (pruned, mask) = prune_magnitude(&weights, args.sparsity);
    record("prune", &pruned)?;

    let tuned = if args.fine_tune_epochs > 0 && args.stage != Stage::Prune {
        let cfg = TrainConfig { epochs: args.fine_tune_epochs, ..TrainConfig::default() };
        let tuned = fine_tune(&def, pruned.clone(), &mask, &data, &cfg)?;
        record("fine_tune", &tuned)?;
        tuned
    } else {
        pruned.clone()
    };

    let mut codebook_entries = None;
    let selected = match args.stage {
        Stage::Prune => pruned,
        Stage::Tune => tuned,
        Stage::Quantize | Stage::Share => {
            let quantized = quantize(&tuned, QuantParams { bits: args.bits })?;
            let dequantized = quantized.dequantize();
            record("quantize", &dequantized)?;
            if args.stage == Stage::Quantize {
                dequantized
            } else {
                let blob = weight_share_capped(&dequantized, &mask, args.clusters)?;
                let shared = blob.reconstruct(&def)?;
                record("weight_share", &shared)?;
                codebook_entries = Some(blob.entry_count());
                if let Some(path) = &args.codebook_out {
                    std::fs::write(path, serde_json::to_vec_pretty(&blob)?)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
                shared
            }
        }
    };
    export_weights(&selected, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;

    let out = CompressOutput {
        model: args.model.clone(),
        param_count: def.param_count(),
        stages,
        out: args.out.display().to_string(),
        codebook_out: args.codebook_out.as_ref().map(|p| p.display().to_string()),
        codebook_entries,
    };
    emit(json, &out, || {
        println!("{:<12} {:>9} {:>9}", "stage", "accuracy", "nonzero");
        for s in &out.stages {
            println!("{:<12} {:>9.4} {:>9}", s.stage, s.accuracy, s.nonzero);
        }
        println!("weights -> {}", out.out);
        if let Some(c) = &out.codebook_out {
            println!(
                "codebook -> {c} ({} entries)",
                out.codebook_entries.unwrap_or(0)
            );
        }
    })
}
