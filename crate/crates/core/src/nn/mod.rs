//! Model definitions, parameter layout and inference.
//!
//! A model is a chain of dense layers. Each layer owns one flat `f64` array:
//! the kernel in row-major order (`in_dim` rows of `out_dim` columns)
//! followed by the bias, so a layer has `in_dim * out_dim + out_dim`
//! addressable positions. Every other subsystem — the storage engine, the
//! delta protocol, licensing masks — identifies a single scalar parameter by
//! `(layer name, flat index)` using exactly this layout.

mod blobs;
mod train;

pub use blobs::gen_blobs;
pub use train::{
    fine_tune_weights, init_weights, loss_and_grad, train, train_from, StepInfo, StepObserver,
    TrainConfig,
};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no weights for layer {0:?}")]
    MissingLayerWeights(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("loss became non-finite at epoch {epoch}, step {step} (learning rate too high?)")]
    NonFiniteLoss { epoch: usize, step: usize },
}

/// Per-neuron nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self, NnError> {
        match s {
            "relu" => Ok(Activation::Relu),
            "softmax" => Ok(Activation::Softmax),
            "identity" => Ok(Activation::Identity),
            other => Err(NnError::InvalidModel(format!("unknown activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One dense layer: `out = act(x W + b)` with `W` of shape `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDef {
    pub name: String,
    /// Ordinal position in the network, 0-based and gapless.
    pub index: usize,
    pub in_dim: u32,
    pub out_dim: u32,
    pub activation: Activation,
}

impl LayerDef {
    /// Kernel length plus bias length: the number of flat positions.
    pub fn param_count(&self) -> usize {
        (self.in_dim as usize) * (self.out_dim as usize) + self.out_dim as usize
    }

    /// Flat position of kernel entry `(row, col)`, row-major; `row == in_dim`
    /// addresses the bias block, where `col` is the bias slot.
    pub fn flatten_index(&self, row: u32, col: u32) -> Result<usize, NnError> {
        if col >= self.out_dim || row > self.in_dim {
            return Err(NnError::IndexOutOfRange(format!(
                "({row}, {col}) outside layer {:?} of {}x{}",
                self.name, self.in_dim, self.out_dim
            )));
        }
        Ok(row as usize * self.out_dim as usize + col as usize)
    }

    /// Inverse of [`flatten_index`](Self::flatten_index). Bias positions come
    /// back as `(in_dim, slot)`.
    pub fn unflatten(&self, flat: usize) -> Result<(u32, u32), NnError> {
        if flat >= self.param_count() {
            return Err(NnError::IndexOutOfRange(format!(
                "flat {flat} outside layer {:?} with {} positions",
                self.name,
                self.param_count()
            )));
        }
        let out = self.out_dim as usize;
        Ok(((flat / out) as u32, (flat % out) as u32))
    }
}

/// An ordered stack of layers. Construction validates the chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDef {
    pub model_name: String,
    pub layers: Vec<LayerDef>,
}

impl ModelDef {
    pub fn new(model_name: impl Into<String>, layers: Vec<LayerDef>) -> Result<Self, NnError> {
        let def = ModelDef { model_name: model_name.into(), layers };
        def.validate()?;
        Ok(def)
    }

    /// Convenience constructor: dense ReLU hidden layers and a softmax head,
    /// layer names `dense0..denseN`.
    pub fn mlp(model_name: impl Into<String>, dims: &[u32]) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::InvalidModel("need at least input and output dims".into()));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerDef {
                name: format!("dense{i}"),
                index: i,
                in_dim: w[0],
                out_dim: w[1],
                activation: if i == last { Activation::Softmax } else { Activation::Relu },
            })
            .collect();
        ModelDef::new(model_name, layers)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::InvalidModel("model has no layers".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.name.is_empty() {
                return Err(NnError::InvalidModel(format!("layer {i} has an empty name")));
            }
            if !seen.insert(layer.name.as_str()) {
                return Err(NnError::InvalidModel(format!("duplicate layer name {:?}", layer.name)));
            }
            if layer.index != i {
                return Err(NnError::InvalidModel(format!(
                    "layer {:?} has index {} at position {i}",
                    layer.name, layer.index
                )));
            }
            if layer.in_dim == 0 || layer.out_dim == 0 {
                return Err(NnError::InvalidModel(format!("layer {:?} has a zero dim", layer.name)));
            }
            if i > 0 && self.layers[i - 1].out_dim != layer.in_dim {
                return Err(NnError::InvalidModel(format!(
                    "layer {:?} expects in_dim {} but layer {:?} outputs {}",
                    layer.name,
                    layer.in_dim,
                    self.layers[i - 1].name,
                    self.layers[i - 1].out_dim
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> u32 {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> u32 {
        self.layers.last().unwrap().out_dim
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDef> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Total parameter count across all layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }
}

/// The flat parameter array of one layer.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub in_dim: u32,
    pub out_dim: u32,
    /// Kernel row-major, then bias. Length `in_dim * out_dim + out_dim`.
    pub values: Vec<f64>,
}

impl LayerWeights {
    pub fn zeroed(in_dim: u32, out_dim: u32) -> Self {
        let len = in_dim as usize * out_dim as usize + out_dim as usize;
        LayerWeights { in_dim, out_dim, values: vec![0.0; len] }
    }

    pub fn kernel(&self, row: u32, col: u32) -> f64 {
        self.values[row as usize * self.out_dim as usize + col as usize]
    }

    pub fn bias(&self, slot: u32) -> f64 {
        self.values[self.in_dim as usize * self.out_dim as usize + slot as usize]
    }
}

/// All parameters of a model, keyed by layer name in layer order.
///
/// Equality is bitwise on the raw `f64` bits: two maps are equal only if every
/// position holds the identical bit pattern. Versioning and the sync protocol
/// promise bit-exact round trips, so this is the equality the whole crate
/// reasons with.
#[derive(Debug, Clone, Default)]
pub struct WeightMap {
    layers: IndexMap<String, LayerWeights>,
}

impl WeightMap {
    pub fn new() -> Self {
        WeightMap::default()
    }

    /// Zero-filled parameters laid out per the model definition.
    pub fn zeroed(model: &ModelDef) -> Self {
        let mut layers = IndexMap::new();
        for l in &model.layers {
            layers.insert(l.name.clone(), LayerWeights::zeroed(l.in_dim, l.out_dim));
        }
        WeightMap { layers }
    }

    pub fn insert(&mut self, name: impl Into<String>, weights: LayerWeights) {
        self.layers.insert(name.into(), weights);
    }

    pub fn get(&self, name: &str) -> Option<&LayerWeights> {
        self.layers.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerWeights> {
        self.layers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerWeights)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut LayerWeights)> {
        self.layers.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total scalar count.
    pub fn param_count(&self) -> usize {
        self.layers.values().map(|l| l.values.len()).sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.layers.values().flat_map(|l| &l.values).filter(|v| **v != 0.0).count()
    }

    /// Check that the map covers exactly the model's layers with matching dims.
    pub fn check_layout(&self, model: &ModelDef) -> Result<(), NnError> {
        for l in &model.layers {
            let lw = self
                .layers
                .get(&l.name)
                .ok_or_else(|| NnError::MissingLayerWeights(l.name.clone()))?;
            if lw.in_dim != l.in_dim || lw.out_dim != l.out_dim || lw.values.len() != l.param_count()
            {
                return Err(NnError::DimensionMismatch(format!(
                    "layer {:?}: weights are {}x{} ({} values), model wants {}x{}",
                    l.name,
                    lw.in_dim,
                    lw.out_dim,
                    lw.values.len(),
                    l.in_dim,
                    l.out_dim
                )));
            }
        }
        if self.layers.len() != model.layers.len() {
            let extra: Vec<_> = self
                .layers
                .keys()
                .filter(|k| model.layer(k).is_none())
                .cloned()
                .collect();
            return Err(NnError::DimensionMismatch(format!(
                "weight map has layers not in the model: {extra:?}"
            )));
        }
        Ok(())
    }
}

impl PartialEq for WeightMap {
    fn eq(&self, other: &Self) -> bool {
        if self.layers.len() != other.layers.len() {
            return false;
        }
        self.layers.iter().all(|(name, a)| match other.layers.get(name) {
            Some(b) => {
                a.in_dim == b.in_dim
                    && a.out_dim == b.out_dim
                    && a.values.len() == b.values.len()
                    && a.values
                        .iter()
                        .zip(&b.values)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            }
            None => false,
        })
    }
}

impl Eq for WeightMap {}

/// A labeled classification dataset with row-major features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n_features: u32,
    pub n_classes: u32,
    /// `n_samples * n_features` values, sample-major.
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(
        n_features: u32,
        n_classes: u32,
        features: Vec<f64>,
        labels: Vec<u32>,
    ) -> Result<Self, NnError> {
        let ds = Dataset { n_features, n_classes, features, labels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.labels.is_empty() {
            return Err(NnError::InvalidDataset("dataset has no samples".into()));
        }
        if self.n_classes == 0 {
            return Err(NnError::InvalidDataset("n_classes must be positive".into()));
        }
        if self.features.len() != self.labels.len() * self.n_features as usize {
            return Err(NnError::InvalidDataset(format!(
                "{} feature values for {} samples of width {}",
                self.features.len(),
                self.labels.len(),
                self.n_features
            )));
        }
        if let Some(bad) = self.labels.iter().find(|l| **l >= self.n_classes) {
            return Err(NnError::InvalidDataset(format!(
                "label {bad} outside [0, {})",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.n_features as usize;
        &self.features[i * w..(i + 1) * w]
    }
}

fn apply_activation(act: Activation, z: &mut [f64]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for v in z.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Softmax => {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in z.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in z.iter_mut() {
                *v /= sum;
            }
        }
    }
}

/// Run the layer chain on one input vector.
pub fn forward(model: &ModelDef, weights: &WeightMap, input: &[f64]) -> Result<Vec<f64>, NnError> {
    if input.len() != model.input_dim() as usize {
        return Err(NnError::DimensionMismatch(format!(
            "input has {} values, model expects {}",
            input.len(),
            model.input_dim()
        )));
    }
    weights.check_layout(model)?;
    let mut a = input.to_vec();
    for layer in &model.layers {
        let lw = weights.get(&layer.name).expect("checked by check_layout");
        a = layer_forward(layer, lw, &a);
    }
    Ok(a)
}

/// `act(x W + b)` for one layer; `x` must have `in_dim` entries.
fn layer_forward(layer: &LayerDef, lw: &LayerWeights, x: &[f64]) -> Vec<f64> {
    let (in_dim, out_dim) = (layer.in_dim as usize, layer.out_dim as usize);
    let bias_base = in_dim * out_dim;
    let mut z: Vec<f64> = lw.values[bias_base..bias_base + out_dim].to_vec();
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &lw.values[r * out_dim..(r + 1) * out_dim];
        for (c, &w) in row.iter().enumerate() {
            z[c] += xv * w;
        }
    }
    apply_activation(layer.activation, &mut z);
    z
}

/// Fraction of samples whose argmax prediction matches the label. Argmax ties
/// go to the lowest class index.
pub fn evaluate_accuracy(
    model: &ModelDef,
    weights: &WeightMap,
    data: &Dataset,
) -> Result<f64, NnError> {
    if data.n_features != model.input_dim() || data.n_classes != model.output_dim() {
        return Err(NnError::DimensionMismatch(format!(
            "dataset is {} features / {} classes, model is {} -> {}",
            data.n_features,
            data.n_classes,
            model.input_dim(),
            model.output_dim()
        )));
    }
    weights.check_layout(model)?;
    let mut correct = 0usize;
    for i in 0..data.n_samples() {
        let out = forward(model, weights, data.sample(i))?;
        if argmax(&out) == data.labels[i] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.n_samples() as f64)
}

/// Lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
