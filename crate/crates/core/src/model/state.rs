use std::collections::HashMap;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{split, stream};

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Mat<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn push(&mut self, name: String, value: Mat<T>) -> ParamId {
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Mat<T>] {
        &self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Weight (`in × out`) and bias (`1 × out`) of an affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameters of one modality stream inside an MM-DiT block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamIds {
    /// Produces shift/scale/gate for attention and MLP from the conditioning vector.
    pub modulation: LinearIds,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub mlp_in: LinearIds,
    pub mlp_out: LinearIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub image: StreamIds,
    pub text: StreamIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub token_embedding: ParamId,
    pub text_pos: ParamId,
    pub patch: LinearIds,
    pub time_in: LinearIds,
    pub time_out: LinearIds,
    pub blocks: Vec<BlockIds>,
    pub final_mod: LinearIds,
    pub final_proj: LinearIds,
}

/// Projections that accept LoRA adapters, per block and stream.
pub const LORA_PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

/// Low-rank additive update `scale · down · up` of a frozen projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Real> {
    /// Name of the target projection, e.g. `blocks.3.image.q`.
    pub target: String,
    pub rank: usize,
    pub down: Mat<T>,
    pub up: Mat<T>,
    pub scale: T,
}

/// How to build adapters for [`ModelState::apply_lora`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    /// Projection names; empty means every `q/k/v/o` of every block and stream.
    #[serde(default)]
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec {
            rank: 16,
            alpha: 16.0,
            targets: Vec::new(),
            seed: 0,
        }
    }
}

/// All learnable state of the toy MM-DiT.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: Layout,
    /// Fixed 2-D sinusoidal encoding of the image grid (`hw × d`).
    pub image_pos: Mat<T>,
    pub lora: Vec<LoraAdapter<T>>,
    lora_index: HashMap<ParamId, usize>,
}

fn gaussian<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = gaussian(&mut self.rng, rows, cols, std);
        self.store.push(name, m)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let weight = self.matrix(format!("{name}.weight"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
        let bias = self.store.push(format!("{name}.bias"), Mat::zeros((1, fan_out)));
        LinearIds { weight, bias }
    }

    fn stream(&mut self, prefix: &str, cfg: &ModelConfig) -> StreamIds {
        let d = cfg.model_dim;
        StreamIds {
            modulation: self.linear(&format!("{prefix}.modulation"), d, 6 * d),
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
            mlp_in: self.linear(&format!("{prefix}.mlp_in"), d, cfg.mlp_dim()),
            mlp_out: self.linear(&format!("{prefix}.mlp_out"), cfg.mlp_dim(), d),
        }
    }
}

/// Sinusoidal 2-D position table, `grid_h · grid_w` rows in row-major order.
///
/// Half of the channels encode the row index, half the column index.
pub fn sincos_2d(grid_h: usize, grid_w: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let quarter = half / 2;
    let mut out = Array2::zeros((grid_h * grid_w, dim));
    for y in 0..grid_h {
        for x in 0..grid_w {
            let row = y * grid_w + x;
            for (offset, pos) in [(0, y as f64), (half, x as f64)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter.max(1) as f64);
                    out[[row, offset + i]] = (pos * omega).sin();
                    out[[row, offset + quarter + i]] = (pos * omega).cos();
                }
            }
        }
    }
    out
}

/// Sinusoidal embedding of a timestep in `[0, 1]` (scaled to `[0, 1000]`).
pub fn timestep_embedding(t: f64, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[[0, i]] = arg.cos();
        out[[0, half + i]] = arg.sin();
    }
    out
}

impl<T: Real> ModelState<T> {
    /// Deterministic initialization for `(config, seed)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut store = ParamStore::default();
        let mut b = Builder {
            store: &mut store,
            rng: split(seed, stream::INIT, &[]),
        };
        let token_embedding = b.matrix("token_embedding".into(), config.vocab_size, d, 1.0);
        let text_pos = b.matrix("text_pos".into(), config.text_len, d, 1.0);
        let patch = b.linear("patch", config.patch_dim(), d);
        let time_in = b.linear("time_in", d, d);
        let time_out = b.linear("time_out", d, d);
        let blocks = (0..config.num_layers)
            .map(|i| BlockIds {
                image: b.stream(&format!("blocks.{i}.image"), config),
                text: b.stream(&format!("blocks.{i}.text"), config),
            })
            .collect();
        let final_mod = b.linear("final_mod", d, 2 * d);
        let final_proj = b.linear("final_proj", d, config.patch_dim());
        let layout = Layout {
            token_embedding,
            text_pos,
            patch,
            time_in,
            time_out,
            blocks,
            final_mod,
            final_proj,
        };
        let image_pos = sincos_2d(config.grid_h, config.grid_w, d).mapv(T::of);
        Ok(ModelState {
            config: config.clone(),
            params: store,
            layout,
            image_pos,
            lora: Vec::new(),
            lora_index: HashMap::new(),
        })
    }

    /// Rebuilds a state from named tensors (used by checkpoint loading).
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Mat<T>)>) -> Result<Self> {
        let mut state = Self::init(config, 0)?;
        if named.len() != state.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                state.params.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = state
                .params
                .find(&name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if state.params.get(id).dim() != value.dim() {
                return Err(Error::Config(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    state.params.get(id).dim(),
                    value.dim()
                )));
            }
            *state.params.get_mut(id) = value;
        }
        Ok(state)
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        let mut params = ParamStore::default();
        for (_, name, t) in self.params.iter() {
            params.push(name.to_string(), t.mapv(|v| U::of(v.as_f64())));
        }
        ModelState {
            config: self.config.clone(),
            params,
            layout: self.layout.clone(),
            image_pos: self.image_pos.mapv(|v| U::of(v.as_f64())),
            lora: self
                .lora
                .iter()
                .map(|a| LoraAdapter {
                    target: a.target.clone(),
                    rank: a.rank,
                    down: a.down.mapv(|v| U::of(v.as_f64())),
                    up: a.up.mapv(|v| U::of(v.as_f64())),
                    scale: U::of(a.scale.as_f64()),
                })
                .collect(),
            lora_index: self.lora_index.clone(),
        }
    }

    /// Names of every projection that accepts an adapter.
    pub fn lora_target_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.config.num_layers {
            for stream in ["image", "text"] {
                for p in LORA_PROJECTIONS {
                    out.push(format!("blocks.{i}.{stream}.{p}"));
                }
            }
        }
        out
    }

    fn weight_of_target(&self, target: &str) -> Option<ParamId> {
        if !self.lora_target_names().iter().any(|n| n == target) {
            return None;
        }
        self.params.find(&format!("{target}.weight"))
    }

    /// Builds fresh adapters: `down` variance-scaled Gaussian, `up` zero.
    pub fn new_adapters(&self, spec: &LoraSpec) -> Result<Vec<LoraAdapter<T>>> {
        if spec.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let targets = if spec.targets.is_empty() {
            self.lora_target_names()
        } else {
            spec.targets.clone()
        };
        let mut rng = split(spec.seed, stream::MAGNET, &[0x10_4a]);
        targets
            .into_iter()
            .map(|target| {
                let w = self
                    .weight_of_target(&target)
                    .ok_or_else(|| Error::Config(format!("unknown LoRA target {target}")))?;
                let (fan_in, fan_out) = self.params.get(w).dim();
                Ok(LoraAdapter {
                    target,
                    rank: spec.rank,
                    down: gaussian(&mut rng, fan_in, spec.rank, 1.0 / (fan_in as f64).sqrt()),
                    up: Mat::zeros((spec.rank, fan_out)),
                    scale: T::of(spec.alpha / spec.rank as f64),
                })
            })
            .collect()
    }

    /// Attaches adapters; their deltas are evaluated at forward time.
    pub fn apply_lora(&mut self, adapters: Vec<LoraAdapter<T>>) -> Result<()> {
        let mut index = HashMap::new();
        for (i, a) in adapters.iter().enumerate() {
            if a.rank == 0 {
                return Err(Error::Config(format!("LoRA adapter {} has rank 0", a.target)));
            }
            let w = self
                .weight_of_target(&a.target)
                .ok_or_else(|| Error::Config(format!("unknown LoRA target {}", a.target)))?;
            let (fan_in, fan_out) = self.params.get(w).dim();
            if a.down.dim() != (fan_in, a.rank) || a.up.dim() != (a.rank, fan_out) {
                return Err(Error::Config(format!(
                    "LoRA adapter {} has shapes {:?}/{:?}, target is {fan_in}x{fan_out}",
                    a.target,
                    a.down.dim(),
                    a.up.dim()
                )));
            }
            if index.insert(w, i).is_some() {
                return Err(Error::Config(format!("duplicate LoRA target {}", a.target)));
            }
        }
        self.lora = adapters;
        self.lora_index = index;
        Ok(())
    }

    /// Folds every adapter into its base weight and detaches the adapters.
    pub fn merge_lora(&mut self) {
        let adapters = std::mem::take(&mut self.lora);
        let index = std::mem::take(&mut self.lora_index);
        for (w, i) in index {
            let a = &adapters[i];
            let delta = a.down.dot(&a.up) * a.scale;
            *self.params.get_mut(w) += &delta;
        }
    }

    pub fn adapter_for(&self, weight: ParamId) -> Option<usize> {
        self.lora_index.get(&weight).copied()
    }

    pub fn all_finite(&self) -> bool {
        self.params.all_finite()
            && self
                .lora
                .iter()
                .all(|a| a.down.iter().chain(a.up.iter()).all(|v| v.is_finite()))
    }
}
