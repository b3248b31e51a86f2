//! The four-stage compression pipeline and its per-stage report.

use super::codebook::weight_share_scaled;
use super::{fine_tune, prune_magnitude, quantize, CodebookBlob, CompressError, QuantParams};
use crate::nn::{evaluate_accuracy, Dataset, ModelDef, TrainConfig, WeightMap};
use serde::{Deserialize, Serialize};

/// Accuracy and size after one pipeline stage.
///
/// `bytes_encoded` counts a canonical sparse encoding of the stage's output:
/// 4 bytes of flat index per kept weight plus the value payload (8-byte f64,
/// quantized integers of the configured width, or 1-byte codebook
/// assignments plus the codebook itself), plus 8 bytes per layer scale.
/// `bytes_dense` is always `param_count * 8`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub accuracy: f64,
    pub bytes_dense: u64,
    pub bytes_encoded: u64,
    pub sparsity_achieved: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompressionReport {
    pub stages: Vec<StageReport>,
}

impl CompressionReport {
    pub fn final_stage(&self) -> &StageReport {
        self.stages.last().expect("report has at least the input stage")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.stages).expect("report serializes")
    }
}

fn sparse_f64_bytes(weights: &WeightMap) -> u64 {
    weights.nonzero_count() as u64 * (4 + 8)
}

fn stage(
    name: &str,
    model: &ModelDef,
    weights: &WeightMap,
    data: &Dataset,
    bytes_encoded: u64,
) -> Result<StageReport, CompressError> {
    Ok(StageReport {
        stage: name.to_owned(),
        accuracy: evaluate_accuracy(model, weights, data)?,
        bytes_dense: weights.param_count() as u64 * 8,
        bytes_encoded,
        sparsity_achieved: 1.0 - weights.nonzero_count() as f64 / weights.param_count() as f64,
    })
}

/// Runs prune → fine-tune → quantize → weight-share and reports accuracy and
/// encoded bytes after each stage. Clustering happens on the dequantized
/// values, so centroid granularity is set by the quantization step.
pub fn compress_pipeline(
    model: &ModelDef,
    weights: &WeightMap,
    data: &Dataset,
    sparsity: f64,
    k_clusters: usize,
    qp: QuantParams,
    cfg: &TrainConfig,
) -> Result<(CodebookBlob, CompressionReport), CompressError> {
    data.validate().map_err(CompressError::Nn)?;
    let mut report = CompressionReport::default();
    report.stages.push(stage(
        "input",
        model,
        weights,
        data,
        weights.param_count() as u64 * 8,
    )?);

    let (pruned, mask) = prune_magnitude(weights, sparsity);
    report
        .stages
        .push(stage("prune", model, &pruned, data, sparse_f64_bytes(&pruned))?);

    let tuned = fine_tune(model, pruned, &mask, data, cfg)?;
    report
        .stages
        .push(stage("fine_tune", model, &tuned, data, sparse_f64_bytes(&tuned))?);

    let quantized = quantize(&tuned, qp)?;
    let dequantized = quantized.dequantize();
    let kept = mask.kept_count() as u64;
    let q_bytes = kept * 4 + (kept * qp.bits as u64).div_ceil(8) + 8 * quantized.layers.len() as u64;
    report
        .stages
        .push(stage("quantize", model, &dequantized, data, q_bytes)?);

    let blob = weight_share_scaled(&dequantized, &mask, k_clusters, |name| {
        quantized.layers[name].scale
    })?;
    let reconstructed = blob.reconstruct(model)?;
    let cb_bytes: u64 = blob
        .layers
        .values()
        .map(|l| l.flat_indices.len() as u64 * (4 + 1) + l.codebook.len() as u64 * 8 + 8)
        .sum();
    report
        .stages
        .push(stage("weight_share", model, &reconstructed, data, cb_bytes)?);

    Ok((blob, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gen_blobs, init_weights, train, ModelDef};
    use crate::rng::SplitMix64;

    #[test]
    fn pipeline_on_trained_blobs_model() {
        let model = ModelDef::mlp("m", &[2, 16, 16, 2]).unwrap();
        let data = gen_blobs(42, 100, 2, 0.5);
        let trained = train(&model, &data, &TrainConfig::default()).unwrap();

        let cfg = TrainConfig { epochs: 15, ..TrainConfig::default() };
        let (blob, report) = compress_pipeline(
            &model,
            &trained,
            &data,
            0.5,
            8,
            QuantParams::default(),
            &cfg,
        )
        .unwrap();

        let names: Vec<&str> = report.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(names, ["input", "prune", "fine_tune", "quantize", "weight_share"]);
        assert!(report.stages[0].sparsity_achieved < 0.01);
        assert!((report.stages[1].sparsity_achieved - 0.5).abs() < 0.02);
        assert!(report.final_stage().accuracy >= 0.9);
        assert_eq!(blob.entry_count(), {
            let (_, mask) = super::super::prune_magnitude(&trained, 0.5);
            mask.kept_count()
        });
    }

    #[test]
    fn empty_dataset_is_rejected_up_front() {
        let model = ModelDef::mlp("m", &[2, 4, 2]).unwrap();
        let mut rng = SplitMix64::new(1);
        let w = init_weights(&model, &mut rng);
        let empty = Dataset { n_features: 2, n_classes: 2, features: vec![], labels: vec![] };
        match compress_pipeline(
            &model,
            &w,
            &empty,
            0.5,
            4,
            QuantParams::default(),
            &TrainConfig::default(),
        ) {
            Err(CompressError::Nn(crate::nn::NnError::InvalidDataset(_))) => {}
            other => panic!("expected InvalidDataset, got {other:?}"),
        }
    }

    #[test]
    fn report_json_shape() {
        let model = ModelDef::mlp("m", &[2, 8, 2]).unwrap();
        let data = gen_blobs(3, 30, 2, 0.5);
        let trained = train(
            &model,
            &data,
            &TrainConfig { epochs: 5, batch_size: 16, ..TrainConfig::default() },
        )
        .unwrap();
        let (_, report) = compress_pipeline(
            &model,
            &trained,
            &data,
            0.25,
            4,
            QuantParams::default(),
            &TrainConfig { epochs: 1, batch_size: 16, ..TrainConfig::default() },
        )
        .unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        let first = &parsed.as_array().unwrap()[0];
        for key in ["stage", "accuracy", "bytes_dense", "bytes_encoded", "sparsity_achieved"] {
            assert!(first.get(key).is_some(), "missing key {key}");
        }
    }
}
