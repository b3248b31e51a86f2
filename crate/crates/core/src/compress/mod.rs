//! The model compression pipeline: magnitude pruning, mask-respecting
//! fine-tuning, symmetric low-bit quantization and k-means weight sharing,
//! run in that order. Each stage is usable on its own; `compress_pipeline`
//! chains them and reports accuracy and encoded size after every stage.

mod codebook;
mod kmeans;
mod pipeline;
mod quantize;

pub use codebook::{weight_share, weight_share_capped, CodebookBlob, LayerCodebook};
pub use kmeans::{kmeans_1d, kmeans_sse};
pub use pipeline::{compress_pipeline, CompressionReport, StageReport};
pub use quantize::{quantize, QuantParams, QuantizedLayer, QuantizedWeights};

use crate::nn::{
    fine_tune_weights, Dataset, ModelDef, NnError, StepInfo, TrainConfig, WeightMap,
};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("layer {layer:?} keeps {kept} weights, fewer than {k} clusters")]
    TooFewValues { layer: String, kept: usize, k: usize },
    #[error("cluster count {0} outside [1, 256]")]
    InvalidClusterCount(usize),
    #[error("quantization bits must be 4, 8 or 16, got {0}")]
    InvalidBits(u8),
    #[error("layer {0:?} contains non-finite weights")]
    NonFinite(String),
    #[error("mask layout does not match weights: {0}")]
    MaskMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Keep/drop flags aligned with a `WeightMap`'s flat arrays; `true` = kept.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: IndexMap<String, Vec<bool>>,
}

impl PruneMask {
    /// All-true mask with the same shape as `weights`.
    pub fn all_kept(weights: &WeightMap) -> Self {
        let layers = weights
            .iter()
            .map(|(name, lw)| (name.to_owned(), vec![true; lw.values.len()]))
            .collect();
        PruneMask { layers }
    }

    pub fn kept_count(&self) -> usize {
        self.layers.values().map(|m| m.iter().filter(|k| **k).count()).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    fn check_against(&self, weights: &WeightMap) -> Result<(), CompressError> {
        for (name, lw) in weights.iter() {
            match self.layers.get(name) {
                Some(m) if m.len() == lw.values.len() => {}
                Some(m) => {
                    return Err(CompressError::MaskMismatch(format!(
                        "layer {:?}: mask has {} flags for {} values",
                        name,
                        m.len(),
                        lw.values.len()
                    )))
                }
                None => {
                    return Err(CompressError::MaskMismatch(format!("no mask for layer {name:?}")))
                }
            }
        }
        Ok(())
    }

    /// Zeroes every masked-out position in place.
    pub fn zero_dropped(&self, weights: &mut WeightMap) {
        for (name, lw) in weights.iter_mut() {
            if let Some(mask) = self.layers.get(name) {
                for (v, &keep) in lw.values.iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Zeroes the `floor(sparsity * len)` smallest-magnitude weights per layer;
/// magnitude ties are broken by zeroing the lower flat index first.
pub fn prune_magnitude(weights: &WeightMap, sparsity: f64) -> (WeightMap, PruneMask) {
    assert!(
        (0.0..1.0).contains(&sparsity),
        "sparsity must be in [0, 1), got {sparsity}"
    );
    let mut pruned = weights.clone();
    let mut mask = PruneMask::default();
    for (name, lw) in pruned.iter_mut() {
        let n_cut = (sparsity * lw.values.len() as f64).floor() as usize;
        let mut order: Vec<usize> = (0..lw.values.len()).collect();
        order.sort_by(|&a, &b| {
            lw.values[a]
                .abs()
                .total_cmp(&lw.values[b].abs())
                .then(a.cmp(&b))
        });
        let mut keep = vec![true; lw.values.len()];
        for &i in &order[..n_cut] {
            lw.values[i] = 0.0;
            keep[i] = false;
        }
        mask.layers.insert(name.to_owned(), keep);
    }
    (pruned, mask)
}

/// Training continuation that re-zeroes masked-out positions after every
/// update step, so dropped weights are exactly zero at all times.
pub fn fine_tune(
    model: &ModelDef,
    weights: WeightMap,
    mask: &PruneMask,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<WeightMap, CompressError> {
    fine_tune_observed(model, weights, mask, data, cfg, |_, _| {})
}

/// `fine_tune` with a per-step callback; the callback sees the weights after
/// the mask has been re-applied.
pub fn fine_tune_observed(
    model: &ModelDef,
    mut weights: WeightMap,
    mask: &PruneMask,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&WeightMap, StepInfo),
) -> Result<WeightMap, CompressError> {
    mask.check_against(&weights)?;
    mask.zero_dropped(&mut weights);
    let mut hook = |w: &mut WeightMap, info: StepInfo| {
        mask.zero_dropped(w);
        observe(w, info);
    };
    Ok(fine_tune_weights(model, weights, data, cfg, &mut hook)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gen_blobs, init_weights, train, train_from, LayerWeights};
    use crate::rng::SplitMix64;

    fn model_and_weights(dims: &[u32], seed: u64) -> (ModelDef, WeightMap) {
        let model = ModelDef::mlp("m", dims).unwrap();
        let mut rng = SplitMix64::new(seed);
        let w = init_weights(&model, &mut rng);
        (model, w)
    }

    #[test]
    fn prune_zero_sparsity_is_identity() {
        let (_, w) = model_and_weights(&[3, 4, 2], 1);
        let (pruned, mask) = prune_magnitude(&w, 0.0);
        assert_eq!(pruned, w);
        assert_eq!(mask.kept_count(), mask.total());
    }

    #[test]
    fn prune_cuts_smallest_magnitudes() {
        let mut w = WeightMap::new();
        w.insert(
            "l",
            LayerWeights { in_dim: 1, out_dim: 2, values: vec![0.1, -0.5, 0.2, 0.9] },
        );
        let (pruned, mask) = prune_magnitude(&w, 0.5);
        assert_eq!(pruned.get("l").unwrap().values, vec![0.0, -0.5, 0.0, 0.9]);
        assert_eq!(mask.layers["l"], vec![false, true, false, true]);
    }

    #[test]
    fn prune_tie_break_zeroes_lower_index_first() {
        let mut w = WeightMap::new();
        w.insert(
            "l",
            LayerWeights { in_dim: 1, out_dim: 2, values: vec![0.5, -0.5, 0.5, 0.5] },
        );
        // floor(0.5 * 4) = 2: all magnitudes tie, so flat 0 and 1 go.
        let (pruned, _) = prune_magnitude(&w, 0.5);
        assert_eq!(pruned.get("l").unwrap().values, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn prune_count_matches_floor_rule_per_layer() {
        let (_, mut w) = model_and_weights(&[7, 5, 3], 9);
        // The floor-rule count assumes no incidental zeros in the input, so
        // give the zero-initialized biases real values.
        let mut rng = SplitMix64::new(10);
        for (_, lw) in w.iter_mut() {
            for v in lw.values.iter_mut() {
                if *v == 0.0 {
                    *v = rng.uniform(0.5, 1.0);
                }
            }
        }
        for sparsity in [0.1, 0.25, 0.5, 0.8, 0.99] {
            let (pruned, mask) = prune_magnitude(&w, sparsity);
            for (name, lw) in pruned.iter() {
                let len = lw.values.len();
                let expect_kept = len - (sparsity * len as f64).floor() as usize;
                let nonzero = lw.values.iter().filter(|v| **v != 0.0).count();
                assert_eq!(nonzero, expect_kept, "layer {name} at sparsity {sparsity}");
                let mask_kept = mask.layers[name].iter().filter(|k| **k).count();
                assert_eq!(mask_kept, expect_kept);
            }
        }
    }

    #[test]
    fn all_true_mask_fine_tune_equals_train_continuation() {
        let model = ModelDef::mlp("m", &[2, 6, 2]).unwrap();
        let data = gen_blobs(3, 40, 2, 0.5);
        let cfg = TrainConfig { epochs: 4, batch_size: 16, ..TrainConfig::default() };
        let start = train(&model, &data, &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();

        let mask = PruneMask::all_kept(&start);
        let tuned = fine_tune(&model, start.clone(), &mask, &data, &cfg).unwrap();
        let continued = train_from(&model, start, &data, &cfg).unwrap();
        assert_eq!(tuned, continued);
    }

    #[test]
    fn all_false_layer_stays_zero() {
        let model = ModelDef::mlp("m", &[2, 4, 2]).unwrap();
        let data = gen_blobs(5, 20, 2, 0.5);
        let cfg = TrainConfig { epochs: 3, batch_size: 10, ..TrainConfig::default() };
        let start = train(&model, &data, &TrainConfig { epochs: 0, ..cfg.clone() }).unwrap();

        let mut mask = PruneMask::all_kept(&start);
        let n = mask.layers["dense1"].len();
        mask.layers.insert("dense1".into(), vec![false; n]);

        let tuned = fine_tune(&model, start, &mask, &data, &cfg).unwrap();
        assert!(tuned.get("dense1").unwrap().values.iter().all(|v| *v == 0.0));
        // The unmasked layer still trained.
        assert!(tuned.get("dense0").unwrap().values.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn fine_tune_keeps_masked_positions_zero_at_every_step() {
        let model = ModelDef::mlp("m", &[2, 8, 2]).unwrap();
        let data = gen_blobs(7, 50, 2, 0.5);
        let cfg = TrainConfig { epochs: 3, batch_size: 20, ..TrainConfig::default() };
        let start = train(&model, &data, &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
        let (pruned, mask) = prune_magnitude(&start, 0.6);

        let mut steps = 0usize;
        let tuned = fine_tune_observed(&model, pruned, &mask, &data, &cfg, |w, _| {
            steps += 1;
            for (name, flags) in &mask.layers {
                let values = &w.get(name).unwrap().values;
                for (v, &keep) in values.iter().zip(flags) {
                    if !keep {
                        assert_eq!(v.to_bits(), 0, "masked weight drifted at step {steps}");
                    }
                }
            }
        })
        .unwrap();
        assert_eq!(steps, 5 * 3); // 100 samples / batch 20 → 5 steps per epoch
        mask.check_against(&tuned).unwrap();
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let (model, w) = model_and_weights(&[2, 3, 2], 4);
        let data = gen_blobs(1, 10, 2, 0.5);
        let cfg = TrainConfig { epochs: 1, batch_size: 5, ..TrainConfig::default() };
        let mut mask = PruneMask::all_kept(&w);
        mask.layers.shift_remove("dense1");
        match fine_tune(&model, w, &mask, &data, &cfg) {
            Err(CompressError::MaskMismatch(_)) => {}
            other => panic!("expected MaskMismatch, got {other:?}"),
        }
    }

    #[test]
    fn pruned_blobs_model_recovers_accuracy_after_fine_tune() {
        let model = ModelDef::mlp("m", &[2, 16, 16, 2]).unwrap();
        let data = gen_blobs(42, 100, 2, 0.5);
        let trained = train(&model, &data, &TrainConfig::default()).unwrap();
        let full_acc = crate::nn::evaluate_accuracy(&model, &trained, &data).unwrap();

        let (pruned, mask) = prune_magnitude(&trained, 0.8);
        let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
        let tuned = fine_tune(&model, pruned, &mask, &data, &cfg).unwrap();
        let tuned_acc = crate::nn::evaluate_accuracy(&model, &tuned, &data).unwrap();
        assert!(
            tuned_acc >= full_acc - 0.02,
            "fine-tuned accuracy {tuned_acc} vs full {full_acc}"
        );
    }
}
