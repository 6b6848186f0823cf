//! Resolved commands and their execution.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use groundlab::attnlab::{attention_mass_ratios, pca_features, summarize, summary_csv, value_norms, LayerRanking};
use groundlab::data::{gen_shapes, load_dataset, save_dataset, Dataset, Manifest, ShapesConfig};
use groundlab::flow::{
    euler_sample, latent_to_image, write_loss_csv, LossReport, OptimizerConfig, SamplerConfig, Trainer,
};
use groundlab::io::{self, Gray8, Tensor};
use groundlab::magnet::{finetune, write_magnet_csv, MagnetConfig};
use groundlab::metrics::{confusion, seg_scores, ConfusionMatrix, SegScores, IGNORE};
use groundlab::model::{load_checkpoint, load_lora, save_checkpoint, save_lora, ModelConfig, ModelState, PAD};
use groundlab::segment::{
    open_vocab_gt, proposals_to_mask, rank_expert_layers, segment_sample, select_tau, sweep, sweep_csv, trace_at,
    unsup_proposals, SegmentConfig,
};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{manifest_path, RunManifest};

/// Numeric type used for every model computation driven by the CLI.
type F = f32;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    GenData(GenDataJob),
    Train(TrainJob),
    Sample(SampleJob),
    Analyze(AnalyzeJob),
    Segment(SegmentJob),
    SegmentUnsup(SegmentUnsupJob),
    Sweep(SweepJob),
    Finetune(FinetuneJob),
    EvalSeg(EvalSegJob),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataJob {
    pub config: ShapesConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub data: PathBuf,
    pub out: PathBuf,
    pub steps: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Continue from these weights instead of a fresh initialization.
    pub init: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleJob {
    pub ckpt: PathBuf,
    pub lora: Option<PathBuf>,
    pub prompt: Vec<usize>,
    pub sampler: SamplerConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeJob {
    pub ckpt: PathBuf,
    pub lora: Option<PathBuf>,
    pub data: PathBuf,
    pub timesteps: Vec<f64>,
    /// Number of leading samples traced per timestep.
    pub samples: usize,
    pub pca_components: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentJob {
    pub ckpt: PathBuf,
    pub lora: Option<PathBuf>,
    pub data: PathBuf,
    /// `None` selects the expert layer automatically.
    pub layer: Option<usize>,
    /// Dataset used for automatic layer selection (defaults to `data`).
    pub val_data: Option<PathBuf>,
    pub segment: SegmentConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentUnsupJob {
    pub ckpt: PathBuf,
    pub lora: Option<PathBuf>,
    pub data: PathBuf,
    /// `None` selects the expert layer automatically.
    pub layer: Option<usize>,
    /// `None` selects the merge threshold from `tau_grid`.
    pub tau: Option<f64>,
    pub tau_grid: Vec<f64>,
    pub segment: SegmentConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepJob {
    pub ckpt: PathBuf,
    pub lora: Option<PathBuf>,
    pub data: PathBuf,
    pub layers: Vec<usize>,
    pub timesteps: Vec<f64>,
    pub per_head: bool,
    pub segment: SegmentConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneJob {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub steps: u64,
    /// `None` picks the expert layer automatically (overrides `magnet.expert_layer`).
    pub expert_layer: Option<usize>,
    pub magnet: MagnetConfig,
    pub segment: SegmentConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSegJob {
    pub pred: PathBuf,
    pub gt: PathBuf,
    /// Score background pixels instead of ignoring them.
    pub keep_background: bool,
    pub out: PathBuf,
}

impl Job {
    pub fn seed(&self) -> u64 {
        match self {
            Job::GenData(j) => j.config.seed,
            Job::Train(j) => j.seed,
            Job::Sample(j) => j.sampler.seed,
            Job::Analyze(j) => j.seed,
            Job::Segment(j) => j.segment.seed,
            Job::SegmentUnsup(j) => j.segment.seed,
            Job::Sweep(j) => j.segment.seed,
            Job::Finetune(j) => j.magnet.seed,
            Job::EvalSeg(_) => 0,
        }
    }

    pub fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Job::GenData(j) => &mut j.out,
            Job::Train(j) => &mut j.out,
            Job::Sample(j) => &mut j.out,
            Job::Analyze(j) => &mut j.out,
            Job::Segment(j) => &mut j.out,
            Job::SegmentUnsup(j) => &mut j.out,
            Job::Sweep(j) => &mut j.out,
            Job::Finetune(j) => &mut j.out,
            Job::EvalSeg(j) => &mut j.out,
        }
    }

    /// Whether the output is a directory.
    fn writes_dir(&self) -> bool {
        matches!(self, Job::GenData(_) | Job::Segment(_) | Job::SegmentUnsup(_))
    }
}

/// Runs `job` and writes its manifest next to the output.
pub fn execute(mut job: Job, command_line: Vec<String>) -> Result<()> {
    let derived = match &job {
        Job::GenData(j) => gen_data(j)?,
        Job::Train(j) => train(j)?,
        Job::Sample(j) => sample(j)?,
        Job::Analyze(j) => analyze(j)?,
        Job::Segment(j) => segment(j)?,
        Job::SegmentUnsup(j) => segment_unsup(j)?,
        Job::Sweep(j) => run_sweep(j)?,
        Job::Finetune(j) => run_finetune(j)?,
        Job::EvalSeg(j) => eval_seg(j)?,
    };
    let is_dir = job.writes_dir();
    let path = manifest_path(job.out_mut(), is_dir);
    io::write_json(&path, &RunManifest::new(job, command_line, derived))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let d = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if d.is_empty() {
        return Err(groundlab::Error::Input(format!("dataset {} has no samples", dir.display())).into());
    }
    Ok(d)
}

fn load_model(ckpt: &Path, lora: Option<&Path>) -> Result<ModelState<F>> {
    let mut state = load_checkpoint::<F>(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    if let Some(p) = lora {
        let adapters = load_lora::<F>(p).with_context(|| format!("loading adapters {}", p.display()))?;
        state.apply_lora(adapters)?;
    }
    Ok(state)
}

/// Model shape matching a dataset: grid from the image size, text length and
/// vocabulary from the manifest.
pub fn model_for_data(m: &Manifest, base: &ModelConfig) -> Result<ModelConfig> {
    let p = base.patch_size;
    if !m.image_height.is_multiple_of(p) || !m.image_width.is_multiple_of(p) {
        return Err(groundlab::Error::Config(format!(
            "image {}x{} is not divisible by patch size {p}",
            m.image_height, m.image_width
        ))
        .into());
    }
    Ok(ModelConfig {
        grid_h: m.image_height / p,
        grid_w: m.image_width / p,
        text_len: m.text_len,
        vocab_size: base.vocab_size.max(m.vocab.len()),
        image_channels: m.image_channels,
        ..base.clone()
    })
}

fn gen_data(j: &GenDataJob) -> Result<serde_json::Value> {
    let data = gen_shapes(&j.config)?;
    save_dataset(&data, &j.out)?;
    Ok(json!({ "samples": data.len(), "classes": data.num_classes() }))
}

fn train(j: &TrainJob) -> Result<serde_json::Value> {
    let data = load_data(&j.data)?;
    let state = match &j.init {
        Some(p) => load_checkpoint::<F>(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
        None => ModelState::<F>::init(&j.model, j.seed)?,
    };
    let examples = data.train_examples::<F>();
    let mut trainer = Trainer::new(state, j.optimizer.clone(), j.seed)?;
    let mut report = LossReport::default();
    trainer.train_steps(&examples, j.steps, &mut report)?;
    save_checkpoint(&trainer.state, &j.out)?;
    write_loss_csv(&with_suffix(&j.out, ".loss.csv"), &report)?;
    Ok(json!({ "final_loss": report.last() }))
}

fn sample(j: &SampleJob) -> Result<serde_json::Value> {
    let state = load_model(&j.ckpt, j.lora.as_deref())?;
    let tokens = pad_prompt(&j.prompt, state.config.text_len)?;
    let latent = euler_sample(&state, &tokens, &j.sampler)?;
    let image = latent_to_image(&latent);
    let (c, h, w) = image.dim();
    io::write_tensor(&Tensor::f32(&[c, h, w], image.iter().copied().collect())?, &j.out)?;
    Ok(json!({ "tokens": tokens }))
}

/// Pads a prompt with `<pad>` up to the model's text length.
pub fn pad_prompt(prompt: &[usize], text_len: usize) -> Result<Vec<usize>> {
    if prompt.is_empty() || prompt.len() > text_len {
        return Err(groundlab::Error::Input(format!(
            "prompt has {} tokens; the model takes 1 to {text_len}",
            prompt.len()
        ))
        .into());
    }
    let mut tokens = prompt.to_vec();
    tokens.resize(text_len, PAD);
    Ok(tokens)
}

fn analyze(j: &AnalyzeJob) -> Result<serde_json::Value> {
    let state = load_model(&j.ckpt, j.lora.as_deref())?;
    let data = load_data(&j.data)?;
    let n = j.samples.min(data.len()).max(1);
    let mut csv = String::new();
    let mut pca = Vec::new();
    let mut explained = Vec::new();
    let mut pca_dims = (0, 0);
    for &t in &j.timesteps {
        let traces = data.samples[..n]
            .par_iter()
            .enumerate()
            .map(|(i, s)| trace_at(&state, &s.image, &s.tokens, t, j.seed, i as u64))
            .collect::<groundlab::Result<Vec<_>>>()?;
        let per_trace = traces
            .iter()
            .map(|tr| Ok((attention_mass_ratios(tr)?, value_norms(tr, &tr.pad_mask)?)))
            .collect::<groundlab::Result<Vec<_>>>()?;
        summary_csv(t, &summarize(&per_trace)?, &mut csv);
        if j.pca_components > 0 {
            let mut ratios = Vec::new();
            for (l, rec) in traces[0].layers.iter().enumerate() {
                let values = rec
                    .values
                    .as_ref()
                    .ok_or_else(|| anyhow!("layer {l} has no captured values"))?;
                let (proj, r) = pca_features(values, j.pca_components)?;
                pca_dims = proj.dim();
                pca.extend(proj.iter().copied());
                ratios.push(r);
            }
            explained.push(ratios);
        }
    }
    io::write_atomic(&j.out, csv.as_bytes())?;
    if j.pca_components > 0 {
        let dims = [j.timesteps.len(), state.config.num_layers, pca_dims.0, pca_dims.1];
        io::write_tensor(&Tensor::f64(&dims, pca)?, &with_suffix(&j.out, ".pca.s4dt"))?;
    }
    Ok(json!({ "samples": n, "pca_explained_variance": explained }))
}

fn choose_layer(
    state: &ModelState<F>,
    data: &Dataset,
    layer: Option<usize>,
    cfg: &SegmentConfig,
) -> Result<(usize, Option<LayerRanking>)> {
    match layer {
        Some(l) if l >= state.config.num_layers => {
            Err(groundlab::Error::Input(format!("layer {l} out of range ({} layers)", state.config.num_layers)).into())
        }
        Some(l) => Ok((l, None)),
        None => {
            let ranking = rank_expert_layers(state, data, cfg)?;
            Ok((ranking.expert, Some(ranking)))
        }
    }
}

fn mask_gray(labels: &Array2<u8>) -> Gray8 {
    let (h, w) = labels.dim();
    Gray8 {
        width: w,
        height: h,
        data: labels.iter().copied().collect(),
    }
}

fn segment(j: &SegmentJob) -> Result<serde_json::Value> {
    let state = load_model(&j.ckpt, j.lora.as_deref())?;
    let data = load_data(&j.data)?;
    let val = match &j.val_data {
        Some(p) => Some(load_data(p)?),
        None => None,
    };
    let (layer, ranking) = choose_layer(&state, val.as_ref().unwrap_or(&data), j.layer, &j.segment)?;
    let nc = data.num_classes();
    let preds = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (pred, _) = segment_sample(&state, s, i as u64, layer, &j.segment)?;
            let gt = open_vocab_gt(&s.mask, j.segment.background_threshold.is_some());
            let cm = confusion(&pred.labels, &gt.labels, nc, IGNORE)?;
            Ok((pred, cm))
        })
        .collect::<groundlab::Result<Vec<_>>>()?;
    let mut total = ConfusionMatrix::new(nc);
    for ((pred, cm), entry) in preds.iter().zip(&data.manifest.samples) {
        total.add(cm)?;
        let path = j.out.join("masks").join(format!("{}.pgm", entry.name));
        io::write_pgm(&mask_gray(&pred.labels), &path)?;
    }
    let scores = seg_scores(&total)?;
    io::write_json(
        &j.out.join("scores.json"),
        &json!({ "layer": layer, "noise_fraction": j.segment.noise_fraction(), "scores": scores }),
    )?;
    Ok(json!({ "layer": layer, "ranking": ranking }))
}

fn segment_unsup(j: &SegmentUnsupJob) -> Result<serde_json::Value> {
    let state = load_model(&j.ckpt, j.lora.as_deref())?;
    let data = load_data(&j.data)?;
    let (layer, ranking) = choose_layer(&state, &data, j.layer, &j.segment)?;
    let (tau, grid) = match j.tau {
        Some(t) => (t, Vec::new()),
        None => select_tau(&state, &data, layer, &j.tau_grid, &j.segment)?,
    };
    let scores = groundlab::segment::evaluate_unsup(&state, &data, layer, tau, &j.segment)?;
    let masks = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let props = unsup_proposals(&state, &s.image, i as u64, layer, tau, &j.segment)?;
            Ok(proposals_to_mask(&props, s.mask.dim()))
        })
        .collect::<groundlab::Result<Vec<_>>>()?;
    for (m, entry) in masks.iter().zip(&data.manifest.samples) {
        io::write_pgm(&mask_gray(m), &j.out.join("masks").join(format!("{}.pgm", entry.name)))?;
    }
    let grid: Vec<_> = grid
        .into_iter()
        .map(|(t, s)| json!({ "tau": t, "miou": s.miou }))
        .collect();
    io::write_json(
        &j.out.join("scores.json"),
        &json!({ "layer": layer, "tau": tau, "tau_grid": grid, "scores": scores }),
    )?;
    Ok(json!({ "layer": layer, "tau": tau, "ranking": ranking }))
}

fn run_sweep(j: &SweepJob) -> Result<serde_json::Value> {
    let state = load_model(&j.ckpt, j.lora.as_deref())?;
    let data = load_data(&j.data)?;
    let layers = if j.layers.is_empty() {
        (0..state.config.num_layers).collect()
    } else {
        j.layers.clone()
    };
    let rows = sweep(&state, &data, &layers, &j.timesteps, j.per_head, &j.segment)?;
    io::write_atomic(&j.out, sweep_csv(&rows).as_bytes())?;
    let best = groundlab::segment::best_layer(&rows).map(|(layer, miou)| json!({ "layer": layer, "miou": miou }));
    Ok(json!({ "best": best }))
}

fn run_finetune(j: &FinetuneJob) -> Result<serde_json::Value> {
    let state = load_model(&j.ckpt, None)?;
    let data = load_data(&j.data)?;
    let (expert, ranking) = choose_layer(&state, &data, j.expert_layer, &j.segment)?;
    let magnet = MagnetConfig {
        expert_layer: expert,
        ..j.magnet.clone()
    };
    let (tuned, report) = finetune(state, &data, &magnet, j.steps)?;
    save_lora(&tuned.lora, &j.out)?;
    write_magnet_csv(&with_suffix(&j.out, ".loss.csv"), &report)?;
    Ok(json!({ "expert_layer": magnet.expert_layer, "ranking": ranking }))
}

fn eval_seg(j: &EvalSegJob) -> Result<serde_json::Value> {
    let gt = load_data(&j.gt)?;
    let nc = gt.num_classes();
    let mut total = ConfusionMatrix::new(nc);
    for (entry, s) in gt.manifest.samples.iter().zip(&gt.samples) {
        let path = j.pred.join("masks").join(format!("{}.pgm", entry.name));
        let g = io::read_pgm(&path)?;
        let pred = Array2::from_shape_vec((g.height, g.width), g.data)?;
        if pred.dim() != s.mask.dim() {
            return Err(groundlab::Error::load(
                &path,
                format!("prediction is {:?}, ground truth is {:?}", pred.dim(), s.mask.dim()),
            )
            .into());
        }
        let gt_mask = open_vocab_gt(&s.mask, j.keep_background);
        total.add(
            &confusion(&pred, &gt_mask.labels, nc, IGNORE).map_err(|e| groundlab::Error::load(&path, e.to_string()))?,
        )?;
    }
    let scores: SegScores = seg_scores(&total)?;
    io::write_json(&j.out, &json!({ "samples": gt.len(), "scores": scores }))?;
    Ok(json!({}))
}
