//! Command-line surface. Each subcommand resolves to a [`Job`] with
//! precedence: explicit flag, then `--config` file, then defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use groundlab::data::{Manifest, ShapesConfig};
use groundlab::flow::{GuidanceOrder, OptimizerConfig, SamplerConfig};
use groundlab::io;
use groundlab::magnet::{CandidateGranularity, MagnetConfig};
use groundlab::model::{Intervention, ModelConfig};
use groundlab::perturb::BlurSpec;
use groundlab::segment::{NormMode, SegmentConfig, DEFAULT_TAU_GRID};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::jobs::*;
use crate::manifest;

#[derive(Parser, Debug)]
#[command(
    name = "groundlab",
    version,
    about = "Toy MM-DiT: training, attention analysis, segmentation, fine-tuning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shapes dataset
    GenData(GenDataArgs),
    /// Train a model with flow matching
    Train(TrainArgs),
    /// Sample an image, optionally with I2T blur or perturbation guidance
    Sample(SampleArgs),
    /// Attention-mass and value-norm report per layer, plus PCA of values
    Analyze(AnalyzeArgs),
    /// Open-vocabulary segmentation from I2T attention
    Segment(SegmentArgs),
    /// Unsupervised segmentation from <pad> token attention
    SegmentUnsup(SegmentUnsupArgs),
    /// Segmentation scores over layers, timesteps and optionally heads
    Sweep(SweepArgs),
    /// Mask-alignment LoRA fine-tuning
    Finetune(FinetuneArgs),
    /// Score predicted masks against a dataset
    EvalSeg(EvalSegArgs),
    /// Re-run the job recorded in a run manifest
    Replay(ReplayArgs),
}

impl Command {
    pub fn into_job(self) -> Result<Job> {
        match self {
            Command::GenData(a) => a.resolve(),
            Command::Train(a) => a.resolve(),
            Command::Sample(a) => a.resolve(),
            Command::Analyze(a) => a.resolve(),
            Command::Segment(a) => a.resolve(),
            Command::SegmentUnsup(a) => a.resolve(),
            Command::Sweep(a) => a.resolve(),
            Command::Finetune(a) => a.resolve(),
            Command::EvalSeg(a) => Ok(Job::EvalSeg(EvalSegJob {
                pred: a.pred,
                gt: a.gt,
                keep_background: a.keep_background,
                out: a.out,
            })),
            Command::Replay(a) => {
                let mut job = manifest::load(&a.manifest)?.job;
                if let Some(out) = a.out {
                    *job.out_mut() = out;
                }
                Ok(job)
            }
        }
    }
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(io::read_json(p).with_context(|| format!("reading config {}", p.display()))?),
        None => Ok(T::default()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// `AUTO` or a layer index.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerArg(pub Option<usize>);

impl FromStr for LayerArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LayerArg(None));
        }
        s.parse()
            .map(|l| LayerArg(Some(l)))
            .map_err(|_| format!("expected AUTO or a layer index, got {s:?}"))
    }
}

fn parse_norm(s: &str) -> std::result::Result<NormMode, String> {
    s.parse().map_err(|e: groundlab::Error| e.to_string())
}

/// Segmentation settings shared by several commands.
#[derive(Args, Debug, Clone)]
pub struct SegmentOpts {
    /// JSON file with segmentation settings
    #[arg(long = "seg-config")]
    pub seg_config: Option<PathBuf>,
    /// Noise fraction of the segmentation forward pass (default 8/28)
    #[arg(long)]
    pub tseg: Option<f64>,
    /// Use 1 - tseg as the noise fraction
    #[arg(long)]
    pub invert_tseg: bool,
    /// post_softmax_raw | pre_softmax | minmax | softmax_minmax
    #[arg(long, value_parser = parse_norm)]
    pub norm: Option<NormMode>,
    /// Predict background where every class score is below this level
    #[arg(long)]
    pub bg_threshold: Option<f64>,
    /// Use per-head <pad> maps as unsupervised proposals
    #[arg(long)]
    pub head_level_proposals: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SegmentOpts {
    fn resolve(&self) -> Result<SegmentConfig> {
        let mut cfg: SegmentConfig = config_or_default(self.seg_config.as_deref())?;
        set(&mut cfg.t_seg, self.tseg);
        set(&mut cfg.norm, self.norm);
        set(&mut cfg.seed, self.seed);
        cfg.invert_tseg |= self.invert_tseg;
        cfg.head_level_proposals |= self.head_level_proposals;
        if self.bg_threshold.is_some() {
            cfg.background_threshold = self.bg_threshold;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON generator settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

impl GenDataArgs {
    fn resolve(self) -> Result<Job> {
        let mut config: ShapesConfig = config_or_default(self.config.as_deref())?;
        set(&mut config.seed, self.seed);
        set(&mut config.num_samples, self.num_samples);
        set(&mut config.image_size, self.image_size);
        config.validate()?;
        Ok(Job::GenData(GenDataJob { config, out: self.out }))
    }
}

/// Contents of `train --config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    /// Defaults to the standard toy model sized to the dataset.
    model: Option<ModelConfig>,
    optimizer: OptimizerConfig,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with `model` and `optimizer` sections
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Start from an existing checkpoint
    #[arg(long)]
    pub init: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(self) -> Result<Job> {
        let file: TrainFile = config_or_default(self.config.as_deref())?;
        let mut optimizer = file.optimizer;
        set(&mut optimizer.learning_rate, self.lr);
        set(&mut optimizer.batch_size, self.batch_size);
        set(&mut optimizer.warmup_steps, self.warmup);
        optimizer.validate()?;
        let model = match file.model {
            Some(m) => m,
            None => {
                let manifest: Manifest = io::read_json(&self.data.join("manifest.json"))?;
                model_for_data(&manifest, &ModelConfig::default())?
            }
        };
        let model = ModelConfig {
            seed: self.seed,
            ..model
        };
        model.validate()?;
        Ok(Job::Train(TrainJob {
            data: self.data,
            out: self.out,
            steps: self.steps,
            seed: self.seed,
            model,
            optimizer,
            init: self.init,
        }))
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OrderArg {
    AfterCfg,
    BeforeCfg,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub lora: Option<PathBuf>,
    /// Prompt token ids, padded with <pad> to the model's text length
    #[arg(long, value_delimiter = ',', required = true)]
    pub prompt_ids: Vec<usize>,
    /// JSON sampler settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg: Option<f64>,
    /// Perturbation-guidance strength; 0 disables the blur entirely. Without
    /// this flag, --blur-layers blurs the conditional branch directly.
    #[arg(long)]
    pub guide_s: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub blur_layers: Vec<usize>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub blur_kernel: Option<usize>,
    #[arg(long, value_enum)]
    pub guidance_order: Option<OrderArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output image (S4DT, f32, channels × height × width in [0, 1])
    #[arg(long)]
    pub out: PathBuf,
}

impl SampleArgs {
    fn resolve(self) -> Result<Job> {
        let mut s: SamplerConfig = config_or_default(self.config.as_deref())?;
        set(&mut s.num_steps, self.steps);
        set(&mut s.cfg_scale, self.cfg);
        set(&mut s.seed, self.seed);
        set(&mut s.guidance_scale, self.guide_s);
        if let Some(o) = self.guidance_order {
            s.guidance_order = match o {
                OrderArg::AfterCfg => GuidanceOrder::AfterCfg,
                OrderArg::BeforeCfg => GuidanceOrder::BeforeCfg,
            };
        }
        if !self.blur_layers.is_empty() {
            let blur = match &s.intervention {
                Intervention::BlurI2t { blur, .. } => *blur,
                Intervention::None => BlurSpec::default(),
            };
            s.intervention = Intervention::blur(self.blur_layers.iter().copied(), blur);
        }
        if let Intervention::BlurI2t { blur, .. } = &mut s.intervention {
            set(&mut blur.sigma, self.blur_sigma);
            set(&mut blur.kernel_size, self.blur_kernel);
        }
        if self.guide_s == Some(0.0) {
            s.intervention = Intervention::None;
        }
        s.validate()?;
        Ok(Job::Sample(SampleJob {
            ckpt: self.ckpt,
            lora: self.lora,
            prompt: self.prompt_ids,
            sampler: s,
            out: self.out,
        }))
    }
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub lora: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Noise fractions to trace at
    #[arg(long, value_delimiter = ',', required = true)]
    pub timesteps: Vec<f64>,
    /// Number of leading dataset samples per timestep
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// PCA components of the value projections (0 disables the dump)
    #[arg(long, default_value_t = 3)]
    pub pca_components: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV report; PCA projections go to `<out>.pca.s4dt`
    #[arg(long)]
    pub out: PathBuf,
}

impl AnalyzeArgs {
    fn resolve(self) -> Result<Job> {
        if let Some(t) = self.timesteps.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(groundlab::Error::Input(format!("timestep {t} outside [0, 1]")).into());
        }
        Ok(Job::Analyze(AnalyzeJob {
            ckpt: self.ckpt,
            lora: self.lora,
            data: self.data,
            timesteps: self.timesteps,
            samples: self.samples,
            pca_components: self.pca_components,
            seed: self.seed,
            out: self.out,
        }))
    }
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub lora: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// AUTO ranks layers by mIoU on --val-data (or --data)
    #[arg(long, default_value = "AUTO")]
    pub layer: LayerArg,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[command(flatten)]
    pub seg: SegmentOpts,
    /// Output directory: masks/*.pgm, scores.json, run.json
    #[arg(long)]
    pub out: PathBuf,
}

impl SegmentArgs {
    fn resolve(self) -> Result<Job> {
        Ok(Job::Segment(SegmentJob {
            segment: self.seg.resolve()?,
            ckpt: self.ckpt,
            lora: self.lora,
            data: self.data,
            layer: self.layer.0,
            val_data: self.val_data,
            out: self.out,
        }))
    }
}

#[derive(Args, Debug)]
pub struct SegmentUnsupArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub lora: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "AUTO")]
    pub layer: LayerArg,
    /// Merge threshold; omitted selects it from --tau-grid by mIoU
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Vec<f64>,
    #[command(flatten)]
    pub seg: SegmentOpts,
    #[arg(long)]
    pub out: PathBuf,
}

impl SegmentUnsupArgs {
    fn resolve(self) -> Result<Job> {
        if let Some(t) = self.tau.filter(|t| !(*t >= 0.0)) {
            return Err(groundlab::Error::Input(format!("tau must be >= 0, got {t}")).into());
        }
        let tau_grid = if self.tau_grid.is_empty() {
            DEFAULT_TAU_GRID.to_vec()
        } else {
            self.tau_grid
        };
        Ok(Job::SegmentUnsup(SegmentUnsupJob {
            segment: self.seg.resolve()?,
            ckpt: self.ckpt,
            lora: self.lora,
            data: self.data,
            layer: self.layer.0,
            tau: self.tau,
            tau_grid,
            out: self.out,
        }))
    }
}

/// Noise fractions used by `sweep --timesteps grid`.
pub fn timestep_grid() -> Vec<f64> {
    (1..=6).map(|k| (4 * k) as f64 / 28.0).collect()
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub lora: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// `all` or comma-separated layer indices
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// `grid` (4/28, 8/28, ..., 24/28) or comma-separated noise fractions
    #[arg(long, default_value = "grid")]
    pub timesteps: String,
    #[arg(long)]
    pub per_head: bool,
    #[command(flatten)]
    pub seg: SegmentOpts,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| groundlab::Error::Input(format!("bad {what} {p:?}")).into())
        })
        .collect()
}

impl SweepArgs {
    fn resolve(self) -> Result<Job> {
        let layers = if self.layers == "all" {
            Vec::new()
        } else {
            parse_list(&self.layers, "layer")?
        };
        let timesteps = if self.timesteps == "grid" {
            timestep_grid()
        } else {
            parse_list(&self.timesteps, "timestep")?
        };
        Ok(Job::Sweep(SweepJob {
            segment: self.seg.resolve()?,
            ckpt: self.ckpt,
            lora: self.lora,
            data: self.data,
            layers,
            timesteps,
            per_head: self.per_head,
            out: self.out,
        }))
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GranularityArg {
    Head,
    Token,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON fine-tuning settings
    #[arg(long)]
    pub magnet: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    /// AUTO ranks layers on --data; an index overrides the file's expert_layer
    #[arg(long, default_value = "AUTO")]
    pub expert_layer: LayerArg,
    #[arg(long)]
    pub lambda_mask: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    #[command(flatten)]
    pub seg: SegmentOpts,
    /// Adapter file (S4DT + JSON sidecar); losses go to `<out>.loss.csv`
    #[arg(long)]
    pub out: PathBuf,
}

impl FinetuneArgs {
    fn resolve(self) -> Result<Job> {
        let mut magnet: MagnetConfig = config_or_default(self.magnet.as_deref())?;
        set(&mut magnet.lambda_mask, self.lambda_mask);
        set(&mut magnet.optimizer.learning_rate, self.lr);
        set(&mut magnet.seed, self.seg.seed);
        if let Some(g) = self.granularity {
            magnet.granularity = match g {
                GranularityArg::Head => CandidateGranularity::Head,
                GranularityArg::Token => CandidateGranularity::Token,
            };
        }
        Ok(Job::Finetune(FinetuneJob {
            segment: self.seg.resolve()?,
            ckpt: self.ckpt,
            data: self.data,
            steps: self.steps,
            expert_layer: self.expert_layer.0,
            magnet,
            out: self.out,
        }))
    }
}

#[derive(Args, Debug)]
pub struct EvalSegArgs {
    /// Directory holding masks/<name>.pgm predictions
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory with the ground truth
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub keep_background: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded location
    #[arg(long)]
    pub out: Option<PathBuf>,
}
