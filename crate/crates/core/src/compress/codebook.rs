//! Shared-weight codebooks: the compact representation produced by k-means
//! clustering of the kept (unpruned) weights.

use super::{kmeans::kmeans_1d, CompressError, PruneMask};
use crate::nn::{ModelDef, NnError, WeightMap};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// One layer's cluster model: `flat_indices[i]` holds the position of the
/// i-th kept weight, whose reconstructed value is `codebook[assignments[i]]`.
/// `scale` records the quantization step the values went through before
/// clustering (1.0 when clustering raw weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCodebook {
    pub in_dim: u32,
    pub out_dim: u32,
    pub codebook: Vec<f64>,
    pub assignments: Vec<u8>,
    pub scale: f64,
    pub flat_indices: Vec<u32>,
}

impl LayerCodebook {
    pub fn validate(&self) -> Result<(), CompressError> {
        let k = self.codebook.len();
        if k == 0 || k > 256 {
            return Err(CompressError::InvalidClusterCount(k));
        }
        if self.assignments.len() != self.flat_indices.len() {
            return Err(CompressError::MaskMismatch(format!(
                "{} assignments for {} indices",
                self.assignments.len(),
                self.flat_indices.len()
            )));
        }
        if self.assignments.iter().any(|a| *a as usize >= k) {
            return Err(CompressError::InvalidClusterCount(k));
        }
        if self.flat_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CompressError::MaskMismatch(
                "flat indices not strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Codebooks for every layer of one model version.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CodebookBlob {
    pub layers: IndexMap<String, LayerCodebook>,
}

impl CodebookBlob {
    /// Kept-weight count across layers.
    pub fn entry_count(&self) -> usize {
        self.layers.values().map(|l| l.flat_indices.len()).sum()
    }

    /// Zero-filled weights per the model layout, overlaid with each kept
    /// position's centroid value.
    pub fn reconstruct(&self, model: &ModelDef) -> Result<WeightMap, CompressError> {
        let mut weights = WeightMap::zeroed(model);
        for (name, cb) in &self.layers {
            cb.validate()?;
            let lw = weights
                .get_mut(name)
                .ok_or_else(|| NnError::MissingLayerWeights(name.clone()))?;
            let len = lw.values.len();
            for (&flat, &a) in cb.flat_indices.iter().zip(&cb.assignments) {
                let slot = lw.values.get_mut(flat as usize).ok_or_else(|| {
                    NnError::IndexOutOfRange(format!(
                        "flat {flat} in layer {name:?} of {len} values"
                    ))
                })?;
                *slot = cb.codebook[a as usize];
            }
        }
        Ok(weights)
    }
}

/// Clusters each layer's kept weights into `k_clusters` shared values.
pub fn weight_share(
    weights: &WeightMap,
    mask: &PruneMask,
    k_clusters: usize,
) -> Result<CodebookBlob, CompressError> {
    weight_share_scaled(weights, mask, k_clusters, |_| 1.0)
}

/// `weight_share` with the cluster count clamped per layer to the number of
/// kept weights, so heavily pruned small layers don't abort the whole model.
pub fn weight_share_capped(
    weights: &WeightMap,
    mask: &PruneMask,
    max_k: usize,
) -> Result<CodebookBlob, CompressError> {
    if max_k == 0 || max_k > 256 {
        return Err(CompressError::InvalidClusterCount(max_k));
    }
    mask.check_against(weights)?;
    let mut blob = CodebookBlob::default();
    for (name, _) in weights.iter() {
        let kept = mask.layers[name].iter().filter(|&&k| k).count();
        if kept == 0 {
            return Err(CompressError::TooFewValues {
                layer: name.to_owned(),
                kept: 0,
                k: max_k,
            });
        }
        let one = single_layer(weights, mask, name, max_k.min(kept), 1.0)?;
        blob.layers.insert(name.to_owned(), one);
    }
    Ok(blob)
}

/// Clusters one layer's kept weights; shared by the uniform and capped paths.
fn single_layer(
    weights: &WeightMap,
    mask: &PruneMask,
    name: &str,
    k_clusters: usize,
    scale: f64,
) -> Result<LayerCodebook, CompressError> {
    let lw = weights.get(name).expect("checked layer");
    let flags = &mask.layers[name];
    let mut flat_indices = Vec::new();
    let mut kept = Vec::new();
    for (i, (&v, &keep)) in lw.values.iter().zip(flags).enumerate() {
        if keep {
            flat_indices.push(i as u32);
            kept.push(v);
        }
    }
    if kept.len() < k_clusters {
        return Err(CompressError::TooFewValues {
            layer: name.to_owned(),
            kept: kept.len(),
            k: k_clusters,
        });
    }
    let (codebook, assignments) = kmeans_1d(&kept, k_clusters);
    Ok(LayerCodebook {
        in_dim: lw.in_dim,
        out_dim: lw.out_dim,
        codebook,
        assignments,
        scale,
        flat_indices,
    })
}

/// `weight_share` with a per-layer scale annotation (the pipeline passes the
/// quantization scale through so the blob is self-describing).
pub(crate) fn weight_share_scaled(
    weights: &WeightMap,
    mask: &PruneMask,
    k_clusters: usize,
    scale_of: impl Fn(&str) -> f64,
) -> Result<CodebookBlob, CompressError> {
    if k_clusters == 0 || k_clusters > 256 {
        return Err(CompressError::InvalidClusterCount(k_clusters));
    }
    mask.check_against(weights)?;

    let mut blob = CodebookBlob::default();
    for (name, _) in weights.iter() {
        let one = single_layer(weights, mask, name, k_clusters, scale_of(name))?;
        blob.layers.insert(name.to_owned(), one);
    }
    Ok(blob)
}

#[cfg(test)]
mod tests {
    use super::super::prune_magnitude;
    use super::*;
    use crate::nn::{init_weights, ModelDef};
    use crate::rng::SplitMix64;

    fn setup(sparsity: f64) -> (ModelDef, WeightMap, PruneMask) {
        let model = ModelDef::mlp("m", &[8, 12, 4]).unwrap();
        let mut rng = SplitMix64::new(2);
        let w = init_weights(&model, &mut rng);
        let (pruned, mask) = prune_magnitude(&w, sparsity);
        (model, pruned, mask)
    }

    #[test]
    fn reconstruction_only_uses_centroid_values() {
        let (model, pruned, mask) = setup(0.5);
        let blob = weight_share(&pruned, &mask, 16).unwrap();
        let recon = blob.reconstruct(&model).unwrap();
        for (name, lw) in recon.iter() {
            let cb = &blob.layers[name];
            let mut distinct: Vec<u64> = lw
                .values
                .iter()
                .filter(|v| **v != 0.0)
                .map(|v| v.to_bits())
                .collect();
            distinct.sort_unstable();
            distinct.dedup();
            assert!(distinct.len() <= 16, "layer {name}");
            for bits in distinct {
                let v = f64::from_bits(bits);
                assert!(cb.codebook.iter().any(|c| c.to_bits() == v.to_bits()));
            }
        }
    }

    #[test]
    fn masked_positions_stay_zero_after_reconstruction() {
        let (model, pruned, mask) = setup(0.7);
        let blob = weight_share(&pruned, &mask, 8).unwrap();
        let recon = blob.reconstruct(&model).unwrap();
        for (name, flags) in &mask.layers {
            for (v, &keep) in recon.get(name).unwrap().values.iter().zip(flags) {
                if !keep {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn too_few_kept_values_is_an_error() {
        let (_, pruned, mask) = setup(0.9);
        // Smallest layer keeps ~6 values; ask for more clusters than that.
        match weight_share(&pruned, &mask, 64) {
            Err(CompressError::TooFewValues { kept, k: 64, .. }) => assert!(kept < 64),
            other => panic!("expected TooFewValues, got {other:?}"),
        }
    }

    #[test]
    fn blob_round_trips_through_json() {
        let (_, pruned, mask) = setup(0.5);
        let blob = weight_share(&pruned, &mask, 4).unwrap();
        let json = serde_json::to_string(&blob).unwrap();
        let back: CodebookBlob = serde_json::from_str(&json).unwrap();
        assert_eq!(back, blob);
    }

    #[test]
    fn invalid_blob_rejected_on_reconstruct() {
        let (model, pruned, mask) = setup(0.5);
        let mut blob = weight_share(&pruned, &mask, 4).unwrap();
        blob.layers.get_index_mut(0).unwrap().1.assignments[0] = 200;
        assert!(matches!(
            blob.reconstruct(&model),
            Err(CompressError::InvalidClusterCount(_))
        ));
    }
}
