//! Minibatch SGD training and the backprop gradient.
//!
//! Everything here is a pure function of its arguments. Determinism contract:
//! `train` seeds one [`SplitMix64`] with `cfg.seed`, draws the initial kernel
//! entries from it layer by layer in flat order (uniform in
//! `[-sqrt(6/(in+out)), sqrt(6/(in+out))]`, biases start at zero), then keeps
//! drawing from the same stream for the per-epoch Fisher-Yates shuffles.
//! Repeated runs with identical inputs produce bit-identical weights.

use super::{Activation, Dataset, LayerDef, ModelDef, NnError, WeightMap};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};

/// Hyperparameters for `train` and `fine_tune`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Zero epochs is allowed and returns the starting weights unchanged.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.1, epochs: 50, batch_size: 32, seed: 42 }
    }
}

impl TrainConfig {
    fn validate(&self, data: &Dataset) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0) {
            return Err(NnError::InvalidModel("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > data.n_samples() {
            return Err(NnError::DimensionMismatch(format!(
                "batch size {} outside [1, {}]",
                self.batch_size,
                data.n_samples()
            )));
        }
        Ok(())
    }
}

/// Loss/epoch/step snapshot passed to a step observer.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Called after every parameter update with the post-step weights.
pub type StepObserver<'a> = &'a mut dyn FnMut(&mut WeightMap, StepInfo);

/// Glorot-uniform kernels, zero biases, drawn from `rng` layer by layer.
pub fn init_weights(model: &ModelDef, rng: &mut SplitMix64) -> WeightMap {
    let mut weights = WeightMap::zeroed(model);
    for layer in &model.layers {
        let bound = (6.0 / (layer.in_dim as f64 + layer.out_dim as f64)).sqrt();
        let lw = weights.get_mut(&layer.name).unwrap();
        let kernel_len = layer.in_dim as usize * layer.out_dim as usize;
        for v in &mut lw.values[..kernel_len] {
            *v = rng.uniform(-bound, bound);
        }
    }
    weights
}

fn check_training_dims(model: &ModelDef, data: &Dataset) -> Result<(), NnError> {
    if data.n_features != model.input_dim() || data.n_classes != model.output_dim() {
        return Err(NnError::DimensionMismatch(format!(
            "dataset is {} features / {} classes, model is {} -> {}",
            data.n_features,
            data.n_classes,
            model.input_dim(),
            model.output_dim()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the batch plus its gradient, same layout as `weights`.
///
/// The loss per sample is `-ln(max(p_label, 1e-12))` on the network output,
/// averaged over the batch. Where the clamp is active the gradient is zero.
pub fn loss_and_grad(
    model: &ModelDef,
    weights: &WeightMap,
    features: &[f64],
    labels: &[u32],
) -> Result<(f64, WeightMap), NnError> {
    if labels.is_empty() {
        return Err(NnError::InvalidDataset("empty batch".into()));
    }
    let in_dim = model.input_dim() as usize;
    if features.len() != labels.len() * in_dim {
        return Err(NnError::DimensionMismatch(format!(
            "batch has {} feature values for {} labels of width {in_dim}",
            features.len(),
            labels.len()
        )));
    }
    weights.check_layout(model)?;

    let batch = labels.len();
    let inv_batch = 1.0 / batch as f64;
    let mut grad = WeightMap::zeroed(model);
    let mut total_loss = 0.0;

    for (s, &label) in labels.iter().enumerate() {
        let x = &features[s * in_dim..(s + 1) * in_dim];
        // Forward, keeping each layer's pre- and post-activation values.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len() + 1);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len());
        acts.push(x.to_vec());
        for layer in &model.layers {
            let lw = weights.get(&layer.name).unwrap();
            let z = linear(layer, &lw.values, acts.last().unwrap());
            let mut a = z.clone();
            super::apply_activation(layer.activation, &mut a);
            pre.push(z);
            acts.push(a);
        }

        let probs = acts.last().unwrap();
        let p = probs[label as usize];
        // f64::max(NaN, x) returns x, which would hide a diverged forward
        // pass behind the clamp; keep NaN so the caller can detect it.
        let clamped = if p.is_nan() { f64::NAN } else { p.max(1e-12) };
        total_loss += -clamped.ln() * inv_batch;

        // d(loss)/d(output); only the label coordinate is touched directly,
        // and the clamp kills the gradient when it is active.
        let mut da = vec![0.0; probs.len()];
        if p > 1e-12 {
            da[label as usize] = -inv_batch / p;
        }

        for (i, layer) in model.layers.iter().enumerate().rev() {
            let z = &pre[i];
            let a = &acts[i + 1];
            let dz = activation_backward(layer.activation, &da, z, a);
            let x_in = &acts[i];
            let lw = weights.get(&layer.name).unwrap();
            let g = grad.get_mut(&layer.name).unwrap();
            da = linear_backward(layer, &lw.values, x_in, &dz, &mut g.values);
        }
    }

    Ok((total_loss, grad))
}

fn linear(layer: &LayerDef, values: &[f64], x: &[f64]) -> Vec<f64> {
    let (in_dim, out_dim) = (layer.in_dim as usize, layer.out_dim as usize);
    let bias_base = in_dim * out_dim;
    let mut z: Vec<f64> = values[bias_base..bias_base + out_dim].to_vec();
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &values[r * out_dim..(r + 1) * out_dim];
        for (c, &w) in row.iter().enumerate() {
            z[c] += xv * w;
        }
    }
    z
}

fn activation_backward(act: Activation, da: &[f64], z: &[f64], a: &[f64]) -> Vec<f64> {
    match act {
        Activation::Identity => da.to_vec(),
        Activation::Relu => da
            .iter()
            .zip(z)
            .map(|(&g, &zv)| if zv > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Softmax => {
            // Full softmax Jacobian: dz_j = a_j * (da_j - sum_k da_k a_k).
            let dot: f64 = da.iter().zip(a).map(|(g, p)| g * p).sum();
            da.iter().zip(a).map(|(&g, &p)| p * (g - dot)).collect()
        }
    }
}

/// Accumulates kernel/bias gradients into `grad_values` and returns dL/dx.
fn linear_backward(
    layer: &LayerDef,
    values: &[f64],
    x: &[f64],
    dz: &[f64],
    grad_values: &mut [f64],
) -> Vec<f64> {
    let (in_dim, out_dim) = (layer.in_dim as usize, layer.out_dim as usize);
    let bias_base = in_dim * out_dim;
    let mut dx = vec![0.0; in_dim];
    for (r, &xv) in x.iter().enumerate() {
        let row = &values[r * out_dim..(r + 1) * out_dim];
        let grow = &mut grad_values[r * out_dim..(r + 1) * out_dim];
        let mut acc = 0.0;
        for c in 0..out_dim {
            grow[c] += xv * dz[c];
            acc += row[c] * dz[c];
        }
        dx[r] = acc;
    }
    for c in 0..out_dim {
        grad_values[bias_base + c] += dz[c];
    }
    dx
}

/// The shared epoch/batch loop. `post_step` runs after every parameter
/// update and may rewrite weights (fine-tuning uses it to re-zero pruned
/// positions).
pub(crate) fn train_loop(
    model: &ModelDef,
    weights: &mut WeightMap,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
    mut post_step: Option<StepObserver<'_>>,
) -> Result<(), NnError> {
    check_training_dims(model, data)?;
    cfg.validate(data)?;
    weights.check_layout(model)?;

    let in_dim = model.input_dim() as usize;
    let mut order: Vec<usize> = (0..data.n_samples()).collect();
    let mut batch_features = Vec::with_capacity(cfg.batch_size * in_dim);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch_features.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_features.extend_from_slice(data.sample(i));
                batch_labels.push(data.labels[i]);
            }
            let (loss, grad) = loss_and_grad(model, weights, &batch_features, &batch_labels)?;
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch, step });
            }
            for (name, lw) in weights.iter_mut() {
                let g = grad.get(name).unwrap();
                for (w, gv) in lw.values.iter_mut().zip(&g.values) {
                    *w -= cfg.learning_rate * gv;
                }
            }
            if let Some(obs) = post_step.as_mut() {
                obs(weights, StepInfo { epoch, step, loss });
            }
        }
    }
    Ok(())
}

/// Train from a fresh seeded initialization.
pub fn train(model: &ModelDef, data: &Dataset, cfg: &TrainConfig) -> Result<WeightMap, NnError> {
    let mut rng = SplitMix64::new(cfg.seed);
    let mut weights = init_weights(model, &mut rng);
    train_loop(model, &mut weights, data, cfg, &mut rng, None)?;
    Ok(weights)
}

/// Continue training from existing weights (no re-initialization; the shuffle
/// stream is seeded fresh from `cfg.seed`).
pub fn train_from(
    model: &ModelDef,
    start: WeightMap,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<WeightMap, NnError> {
    let mut weights = start;
    let mut rng = SplitMix64::new(cfg.seed);
    train_loop(model, &mut weights, data, cfg, &mut rng, None)?;
    Ok(weights)
}

/// `train_from` with a step observer; used by fine-tuning and by tests that
/// need to watch every update.
pub fn fine_tune_weights(
    model: &ModelDef,
    start: WeightMap,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: StepObserver<'_>,
) -> Result<WeightMap, NnError> {
    let mut weights = start;
    let mut rng = SplitMix64::new(cfg.seed);
    train_loop(model, &mut weights, data, cfg, &mut rng, Some(observer))?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::super::{evaluate_accuracy, forward, gen_blobs};
    use super::*;

    fn tiny_net(seed: u64) -> (ModelDef, WeightMap) {
        let model = ModelDef::mlp("tiny", &[2, 3, 2]).unwrap();
        let mut rng = SplitMix64::new(seed);
        let weights = init_weights(&model, &mut rng);
        (model, weights)
    }

    /// Central finite differences on the batch loss, the independent oracle
    /// backprop is checked against.
    fn fd_gradient(
        model: &ModelDef,
        weights: &WeightMap,
        features: &[f64],
        labels: &[u32],
        layer: &str,
        at: usize,
        h: f64,
    ) -> f64 {
        let mut plus = weights.clone();
        plus.get_mut(layer).unwrap().values[at] += h;
        let mut minus = weights.clone();
        minus.get_mut(layer).unwrap().values[at] -= h;
        let (lp, _) = loss_and_grad(model, &plus, features, labels).unwrap();
        let (lm, _) = loss_and_grad(model, &minus, features, labels).unwrap();
        (lp - lm) / (2.0 * h)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let (model, weights) = tiny_net(7);
        let mut rng = SplitMix64::new(99);
        let features: Vec<f64> = (0..8).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let labels = vec![0u32, 1, 1, 0];
        let (_, grad) = loss_and_grad(&model, &weights, &features, &labels).unwrap();

        let mut checked = 0;
        for layer in &model.layers {
            for at in 0..layer.param_count() {
                let g = grad.get(&layer.name).unwrap().values[at];
                let fd = fd_gradient(&model, &weights, &features, &labels, &layer.name, at, 1e-5);
                let tol = 1e-4 * g.abs().max(fd.abs()).max(1e-5);
                assert!(
                    (g - fd).abs() <= tol,
                    "layer {} at {}: backprop {} vs fd {}",
                    layer.name,
                    at,
                    g,
                    fd
                );
                checked += 1;
            }
        }
        assert!(checked >= model.param_count());
    }

    #[test]
    fn gradient_zero_at_constructed_stationary_point() {
        let model = ModelDef::mlp("m", &[2, 2]).unwrap();
        let weights = WeightMap::zeroed(&model);
        let features = vec![0.0; 8];
        let labels = vec![0, 1, 0, 1];
        let (_, grad) = loss_and_grad(&model, &weights, &features, &labels).unwrap();
        let kernel = &grad.get("dense0").unwrap().values[..4];
        assert!(kernel.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_grad_unchanged() {
        let (model, weights) = tiny_net(3);
        let features = vec![0.5, -1.0, 2.0, 0.25];
        let labels = vec![1u32, 0];
        let (l1, g1) = loss_and_grad(&model, &weights, &features, &labels).unwrap();
        let mut dup_f = features.clone();
        dup_f.extend_from_slice(&features);
        let mut dup_l = labels.clone();
        dup_l.extend_from_slice(&labels);
        let (l2, g2) = loss_and_grad(&model, &weights, &dup_f, &dup_l).unwrap();
        assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
        for (name, lw) in g1.iter() {
            for (a, b) in lw.values.iter().zip(&g2.get(name).unwrap().values) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn train_zero_epochs_returns_initial_weights() {
        let model = ModelDef::mlp("m", &[2, 4, 2]).unwrap();
        let data = gen_blobs(1, 10, 2, 0.5);
        let cfg = TrainConfig { epochs: 0, batch_size: 8, ..TrainConfig::default() };
        let trained = train(&model, &data, &cfg).unwrap();
        let mut rng = SplitMix64::new(cfg.seed);
        assert_eq!(trained, init_weights(&model, &mut rng));
    }

    #[test]
    fn train_is_deterministic_per_seed() {
        let model = ModelDef::mlp("m", &[2, 8, 2]).unwrap();
        let data = gen_blobs(5, 30, 2, 0.6);
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let other = train(&model, &data, &TrainConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn training_reduces_loss_and_separates_blobs() {
        let model = ModelDef::mlp("blobs", &[2, 16, 16, 2]).unwrap();
        let data = gen_blobs(42, 100, 2, 0.5);
        let cfg = TrainConfig::default();

        let mut rng = SplitMix64::new(cfg.seed);
        let init = init_weights(&model, &mut rng);
        let (initial_loss, _) =
            loss_and_grad(&model, &init, &data.features, &data.labels).unwrap();

        let trained = train(&model, &data, &cfg).unwrap();
        let (final_loss, _) =
            loss_and_grad(&model, &trained, &data.features, &data.labels).unwrap();
        assert!(final_loss <= initial_loss);

        let acc = evaluate_accuracy(&model, &trained, &data).unwrap();
        assert!(acc >= 0.98, "blobs accuracy {acc}");
    }

    #[test]
    fn diverging_learning_rate_reports_non_finite_loss() {
        let model = ModelDef::mlp("m", &[2, 8, 2]).unwrap();
        let data = gen_blobs(2, 50, 2, 0.3);
        // Moderately-absurd rates merely saturate the softmax (clamped loss
        // stays finite); the rate has to push weights past f64 range so the
        // forward pass itself overflows.
        let cfg = TrainConfig { learning_rate: 1e155, epochs: 50, ..TrainConfig::default() };
        match train(&model, &data, &cfg) {
            Err(NnError::NonFiniteLoss { .. }) => {}
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn forward_probabilities_sum_to_one_after_training() {
        let model = ModelDef::mlp("m", &[2, 8, 2]).unwrap();
        let data = gen_blobs(11, 20, 2, 0.5);
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let w = train(&model, &data, &cfg).unwrap();
        for i in 0..data.n_samples() {
            let out = forward(&model, &w, data.sample(i)).unwrap();
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(out.iter().all(|p| *p >= 0.0));
        }
    }
}
