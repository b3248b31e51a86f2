//! Shared fixtures for the criterion benches: synthetic weight maps and
//! stores pre-populated with a commit chain.

use std::path::Path;
use wvlt_core::nn::{LayerWeights, ModelDef, WeightMap};
use wvlt_core::rng::SplitMix64;
use wvlt_core::store::Store;
use wvlt_core::versioning;

/// A dense random weight map for an MLP with the given layer widths.
pub fn random_weights(dims: &[u32], seed: u64) -> (ModelDef, WeightMap) {
    let def = ModelDef::mlp("bench", dims).expect("valid dims");
    let mut rng = SplitMix64::new(seed);
    let mut weights = WeightMap::new();
    for layer in &def.layers {
        let n = ((layer.in_dim + 1) * layer.out_dim) as usize;
        let values: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        weights.insert(
            layer.name.clone(),
            LayerWeights { in_dim: layer.in_dim, out_dim: layer.out_dim, values },
        );
    }
    (def, weights)
}

/// Open a store seeded with `versions` commits of `def`, each perturbing
/// `churn` positions of the first hidden layer. Returns the model id.
pub fn seeded_store(dir: &Path, dims: &[u32], versions: u64, churn: usize) -> (Store, u64) {
    let (def, mut weights) = random_weights(dims, 7);
    let store = Store::open(dir).expect("open store");
    let model_id = store.register_model(&def).expect("register").model.model_id;
    let mut rng = SplitMix64::new(11);
    for v in 0..versions {
        if v > 0 {
            let layer = weights.get_mut("dense0").expect("dense0");
            for _ in 0..churn {
                let at = rng.below(layer.values.len() as u64) as usize;
                layer.values[at] += rng.uniform(-0.05, 0.05);
            }
        }
        versioning::commit(&store, model_id, &weights, false, "bench").expect("commit");
    }
    (store, model_id)
}
