use anyhow::{bail, Context};
use serde::Serialize;
use std::path::Path;
use wvlt_core::nn::{Dataset, ModelDef, WeightMap};

/// Print `value` as pretty JSON when `--json` was given, otherwise run the
/// human-readable printer.
pub fn emit(json: bool, value: &impl Serialize, human: impl FnOnce()) -> anyhow::Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        human();
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading dataset {}", path.display()))?;
    let data: Dataset = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing dataset {}", path.display()))?;
    data.validate()?;
    Ok(data)
}

/// Recover an MLP definition from a weight file laid out by `wvlt train`:
/// layers named dense0..denseN whose dimensions chain, hidden relu, softmax
/// head.
pub fn def_from_weights(model_name: &str, weights: &WeightMap) -> anyhow::Result<ModelDef> {
    let mut dims: Vec<u32> = Vec::new();
    for (i, (name, lw)) in weights.iter().enumerate() {
        if name != format!("dense{i}") {
            bail!("layer {i} is named {name:?}; expected \"dense{i}\" (not an MLP weight file?)");
        }
        if i == 0 {
            dims.push(lw.in_dim);
        } else if dims[i] != lw.in_dim {
            bail!(
                "layer {name} expects {} inputs but the previous layer emits {}",
                lw.in_dim,
                dims[i]
            );
        }
        dims.push(lw.out_dim);
    }
    Ok(ModelDef::mlp(model_name, &dims)?)
}

pub fn dims_arrow(dims: &[u32]) -> String {
    dims.iter().map(u32::to_string).collect::<Vec<_>>().join("→")
}
