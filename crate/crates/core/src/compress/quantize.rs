//! Symmetric per-layer quantization to 4/8/16-bit signed integers.

use super::CompressError;
use crate::nn::{LayerWeights, WeightMap};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
}

impl Default for QuantParams {
    fn default() -> Self {
        QuantParams { bits: 8 }
    }
}

impl QuantParams {
    pub fn new(bits: u8) -> Result<Self, CompressError> {
        if !matches!(bits, 4 | 8 | 16) {
            return Err(CompressError::InvalidBits(bits));
        }
        Ok(QuantParams { bits })
    }

    /// The largest representable magnitude, `2^(bits-1) - 1`.
    pub fn q_max(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub in_dim: u32,
    pub out_dim: u32,
    pub scale: f64,
    pub q: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantizedWeights {
    pub bits: u8,
    pub layers: IndexMap<String, QuantizedLayer>,
}

impl QuantizedWeights {
    /// Maps every integer back to `q * scale`.
    pub fn dequantize(&self) -> WeightMap {
        let mut out = WeightMap::new();
        for (name, layer) in &self.layers {
            let values = layer.q.iter().map(|&q| q as f64 * layer.scale).collect();
            out.insert(
                name.clone(),
                LayerWeights { in_dim: layer.in_dim, out_dim: layer.out_dim, values },
            );
        }
        out
    }
}

/// `q = clamp(round_half_away_from_zero(w / scale), -q_max, q_max)` with
/// `scale = max|w| / q_max` per layer; an all-zero layer takes `scale = 1`.
pub fn quantize(weights: &WeightMap, qp: QuantParams) -> Result<QuantizedWeights, CompressError> {
    QuantParams::new(qp.bits)?;
    let q_max = qp.q_max();
    let mut out = QuantizedWeights { bits: qp.bits, layers: IndexMap::new() };
    for (name, lw) in weights.iter() {
        if lw.values.iter().any(|v| !v.is_finite()) {
            return Err(CompressError::NonFinite(name.to_owned()));
        }
        let max_abs = lw.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if max_abs == 0.0 { 1.0 } else { max_abs / q_max as f64 };
        let q = lw
            .values
            .iter()
            // f64::round rounds half away from zero, exactly the contract.
            .map(|&v| ((v / scale).round() as i32).clamp(-q_max, q_max))
            .collect();
        out.layers.insert(
            name.to_owned(),
            QuantizedLayer { in_dim: lw.in_dim, out_dim: lw.out_dim, scale, q },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, ModelDef};
    use crate::rng::SplitMix64;

    fn single_layer(values: Vec<f64>) -> WeightMap {
        let mut w = WeightMap::new();
        let out_dim = 1;
        let in_dim = values.len() as u32 - 1;
        w.insert("l", LayerWeights { in_dim, out_dim, values });
        w
    }

    #[test]
    fn spec_example_scale_and_codes() {
        let w = single_layer(vec![-1.0, 0.5, 0.127]);
        let qw = quantize(&w, QuantParams { bits: 8 }).unwrap();
        let layer = &qw.layers["l"];
        assert!((layer.scale - 1.0 / 127.0).abs() < 1e-15);
        assert_eq!(layer.q, vec![-127, 64, 16]);
    }

    #[test]
    fn all_zero_layer_uses_unit_scale() {
        let w = single_layer(vec![0.0, 0.0, 0.0]);
        let qw = quantize(&w, QuantParams::default()).unwrap();
        assert_eq!(qw.layers["l"].scale, 1.0);
        assert!(qw.layers["l"].q.iter().all(|q| *q == 0));
    }

    #[test]
    fn round_trip_error_bounded_by_half_scale() {
        let model = ModelDef::mlp("m", &[6, 8, 3]).unwrap();
        let mut rng = SplitMix64::new(21);
        let w = init_weights(&model, &mut rng);
        for bits in [4u8, 8, 16] {
            let qw = quantize(&w, QuantParams { bits }).unwrap();
            let back = qw.dequantize();
            for (name, lw) in w.iter() {
                let scale = qw.layers[name].scale;
                for (a, b) in lw.values.iter().zip(&back.get(name).unwrap().values) {
                    assert!(
                        (a - b).abs() <= scale / 2.0 + 1e-15,
                        "bits={bits} layer={name}: |{a} - {b}| > {}",
                        scale / 2.0
                    );
                }
            }
        }
    }

    #[test]
    fn codes_stay_in_range() {
        let w = single_layer(vec![3.0, -3.0, 2.9999, 0.0, 1e-300]);
        for bits in [4u8, 8, 16] {
            let qp = QuantParams { bits };
            let qw = quantize(&w, qp).unwrap();
            for q in &qw.layers["l"].q {
                assert!(q.abs() <= qp.q_max());
            }
        }
    }

    #[test]
    fn non_finite_weights_rejected() {
        let w = single_layer(vec![1.0, f64::NAN]);
        match quantize(&w, QuantParams::default()) {
            Err(CompressError::NonFinite(name)) => assert_eq!(name, "l"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn invalid_bits_rejected() {
        let w = single_layer(vec![1.0, 2.0]);
        assert!(matches!(
            quantize(&w, QuantParams { bits: 7 }),
            Err(CompressError::InvalidBits(7))
        ));
    }
}
