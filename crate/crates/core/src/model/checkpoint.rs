//! Checkpoints: one flat S4DT tensor plus a JSON sidecar naming its slices.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::state::{LoraAdapter, ModelState};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::io::{self, DType, Tensor};
use crate::real::Real;

const CHECKPOINT_FORMAT: &str = "groundlab-checkpoint";
const LORA_FORMAT: &str = "groundlab-lora";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slice {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointSidecar {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<Slice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoraEntry {
    target: String,
    rank: usize,
    scale: f64,
    down: Slice,
    up: Slice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoraSidecar {
    format: String,
    version: u32,
    adapters: Vec<LoraEntry>,
}

/// `ckpt.s4dt` → `ckpt.s4dt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn flat_tensor<T: Real>(values: Vec<T>) -> Result<Tensor> {
    let n = values.len();
    match T::DTYPE {
        DType::F64 => Tensor::f64(&[n], values.into_iter().map(|v| v.as_f64()).collect()),
        _ => Tensor::f32(&[n], values.into_iter().map(|v| v.as_f64() as f32).collect()),
    }
}

struct Packer<T> {
    values: Vec<T>,
}

impl<T: Real> Packer<T> {
    fn push(&mut self, name: &str, m: &Mat<T>) -> Slice {
        let offset = self.values.len();
        self.values.extend(m.iter().copied());
        Slice {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            offset,
        }
    }
}

fn unpack<T: Real>(flat: &[f64], s: &Slice, path: &Path) -> Result<Mat<T>> {
    let end = s
        .rows
        .checked_mul(s.cols)
        .and_then(|n| n.checked_add(s.offset))
        .filter(|&e| e <= flat.len())
        .ok_or_else(|| Error::load(path, format!("slice {} exceeds the tensor", s.name)))?;
    let data = flat[s.offset..end].iter().map(|&v| T::of(v)).collect();
    Mat::from_shape_vec((s.rows, s.cols), data).map_err(|e| Error::load(path, e.to_string()))
}

fn read_flat(path: &Path) -> Result<Vec<f64>> {
    let t = io::read_tensor(path)?;
    if t.dims.len() != 1 {
        return Err(Error::load(path, "checkpoint payload must be one-dimensional"));
    }
    Ok(t.to_f64_vec())
}

/// Writes the base parameters (adapters are not included).
pub fn save_checkpoint<T: Real>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let mut p = Packer { values: Vec::new() };
    let tensors = state.params.iter().map(|(_, name, m)| p.push(name, m)).collect();
    io::write_tensor(&flat_tensor(p.values)?, path)?;
    io::write_json(
        &sidecar_path(path),
        &CheckpointSidecar {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: state.config.clone(),
            tensors,
        },
    )
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelState<T>> {
    let side_path = sidecar_path(path);
    let side: CheckpointSidecar = io::read_json(&side_path)?;
    if side.format != CHECKPOINT_FORMAT || side.version != 1 {
        return Err(Error::load(
            &side_path,
            format!("not a checkpoint sidecar ({} v{})", side.format, side.version),
        ));
    }
    side.config
        .validate()
        .map_err(|e| Error::load(&side_path, e.to_string()))?;
    let flat = read_flat(path)?;
    let named = side
        .tensors
        .iter()
        .map(|s| Ok((s.name.clone(), unpack(&flat, s, path)?)))
        .collect::<Result<Vec<_>>>()?;
    ModelState::from_named(&side.config, named).map_err(|e| Error::load(path, e.to_string()))
}

pub fn save_lora<T: Real>(adapters: &[LoraAdapter<T>], path: &Path) -> Result<()> {
    let mut p = Packer { values: Vec::new() };
    let entries = adapters
        .iter()
        .map(|a| LoraEntry {
            target: a.target.clone(),
            rank: a.rank,
            scale: a.scale.as_f64(),
            down: p.push(&format!("{}.down", a.target), &a.down),
            up: p.push(&format!("{}.up", a.target), &a.up),
        })
        .collect();
    io::write_tensor(&flat_tensor(p.values)?, path)?;
    io::write_json(
        &sidecar_path(path),
        &LoraSidecar {
            format: LORA_FORMAT.into(),
            version: 1,
            adapters: entries,
        },
    )
}

pub fn load_lora<T: Real>(path: &Path) -> Result<Vec<LoraAdapter<T>>> {
    let side_path = sidecar_path(path);
    let side: LoraSidecar = io::read_json(&side_path)?;
    if side.format != LORA_FORMAT || side.version != 1 {
        return Err(Error::load(
            &side_path,
            format!("not a LoRA sidecar ({} v{})", side.format, side.version),
        ));
    }
    let flat = read_flat(path)?;
    side.adapters
        .iter()
        .map(|e| {
            Ok(LoraAdapter {
                target: e.target.clone(),
                rank: e.rank,
                down: unpack(&flat, &e.down, path)?,
                up: unpack(&flat, &e.up, path)?,
                scale: T::of(e.scale),
            })
        })
        .collect()
}
