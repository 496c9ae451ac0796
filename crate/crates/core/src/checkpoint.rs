//! Model checkpoints: `manifest.toml` describing the layout plus
//! `params.hsta`, all parameter values concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HstaError, Result};
use crate::io;
use crate::model::{HstaConfig, HstaModel};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.toml";
pub const PARAMS: &str = "params.hsta";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    config: HstaConfig,
    params: Vec<Entry>,
}

pub fn save(dir: &Path, model: &HstaModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HstaError::io(dir, e))?;
    let mut flat = Vec::with_capacity(model.store.scalar_count());
    let mut params = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        flat.extend_from_slice(p.value.data());
        params.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        seed: model.seed,
        config: model.config.clone(),
        params,
    };
    let path = dir.join(MANIFEST);
    let text = toml::to_string(&manifest).map_err(|e| HstaError::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&path, text).map_err(|e| HstaError::io(&path, e))?;
    let n = flat.len();
    io::write_tensor(&dir.join(PARAMS), &Tensor::new(vec![n], flat)?)
}

/// Rebuilds the model from its config and overwrites every parameter with
/// the stored values. Names and shapes must match exactly.
pub fn load(dir: &Path) -> Result<HstaModel> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| HstaError::io(&path, e))?;
    let format_err = |reason: String| HstaError::Format {
        path: path.clone(),
        reason,
    };
    let manifest: Manifest = toml::from_str(&text).map_err(|e| format_err(e.to_string()))?;
    let mut model = HstaModel::new(manifest.config, manifest.seed)?;
    let flat = io::read_tensor(&dir.join(PARAMS))?;
    if manifest.params.len() != model.store.len() {
        return Err(format_err(format!(
            "{} stored parameters, model has {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    let mut offset = 0;
    for entry in &manifest.params {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| format_err(format!("unknown parameter {}", entry.name)))?;
        let n: usize = entry.shape.iter().product();
        let chunk = flat
            .data()
            .get(offset..offset + n)
            .ok_or_else(|| format_err("parameter file is too short".into()))?;
        model
            .store
            .set_value(id, Tensor::new(entry.shape.clone(), chunk.to_vec())?)?;
        offset += n;
    }
    if offset != flat.numel() {
        return Err(format_err(format!("{} trailing values", flat.numel() - offset)));
    }
    Ok(model)
}
