//! Zero-shot segmentation from image-to-text attention, and unsupervised
//! proposals from `<pad>` token attention.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attnlab::{rank_layers, value_norms, LayerRanking};
use crate::autodiff::Mat;
use crate::data::{Dataset, ShapesSample};
use crate::error::{Error, Result};
use crate::flow::{gaussian_latent, image_to_latent, interpolate};
use crate::metrics::{
    binarize_proposal, confusion, proposal_tally, seg_scores, ConfusionMatrix, IndexMask, ProposalAccumulator,
    SegScores, IGNORE,
};
use crate::model::{embed_image, model_forward, AttentionTrace, Intervention, Latent, ModelState, EOS, PAD, SOS};
use crate::real::Real;
use crate::rng::stream;

/// Token positions naming one class; ranges are half-open `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpan {
    pub class: usize,
    pub ranges: Vec<[usize; 2]>,
}

impl ClassSpan {
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r[0]..r[1])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTokenSpans {
    pub spans: Vec<ClassSpan>,
}

impl ClassTokenSpans {
    /// Checks that spans are non-empty, disjoint, inside the prompt, and
    /// never cover `<sos>`, `<eos>` or `<pad>`.
    pub fn validate(&self, tokens: &[usize]) -> Result<()> {
        let mut used = vec![false; tokens.len()];
        let mut classes = std::collections::BTreeSet::new();
        for span in &self.spans {
            if !classes.insert(span.class) {
                return Err(Error::Input(format!("class {} has two spans", span.class)));
            }
            if span.ranges.is_empty() || span.ranges.iter().any(|r| r[0] >= r[1]) {
                return Err(Error::Input(format!("class {} has an empty span", span.class)));
            }
            for p in span.positions() {
                if p >= tokens.len() {
                    return Err(Error::Input(format!(
                        "span position {p} outside a {}-token prompt",
                        tokens.len()
                    )));
                }
                if matches!(tokens[p], SOS | EOS | PAD) {
                    return Err(Error::Input(format!(
                        "span of class {} covers special token at {p}",
                        span.class
                    )));
                }
                if std::mem::replace(&mut used[p], true) {
                    return Err(Error::Input(format!("token {p} belongs to two spans")));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.class).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Attention probabilities as they are.
    #[default]
    PostSoftmaxRaw,
    /// Raw scores before the softmax.
    PreSoftmax,
    /// Pre-softmax scores, min-max rescaled per class map.
    Minmax,
    /// Probabilities, min-max rescaled per class map.
    SoftmaxMinmax,
}

impl NormMode {
    pub fn uses_probabilities(self) -> bool {
        matches!(self, NormMode::PostSoftmaxRaw | NormMode::SoftmaxMinmax)
    }

    fn rescales(self) -> bool {
        matches!(self, NormMode::Minmax | NormMode::SoftmaxMinmax)
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::PostSoftmaxRaw => "post_softmax_raw",
            NormMode::PreSoftmax => "pre_softmax",
            NormMode::Minmax => "minmax",
            NormMode::SoftmaxMinmax => "softmax_minmax",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "post_softmax_raw" => NormMode::PostSoftmaxRaw,
            "pre_softmax" => NormMode::PreSoftmax,
            "minmax" => NormMode::Minmax,
            "softmax_minmax" => NormMode::SoftmaxMinmax,
            _ => return Err(Error::Config(format!("unknown normalization mode {s:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Token,
    Class,
    Head,
}

/// Spatial score maps, `grid_h × grid_w × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub scores: Array3<f64>,
    pub granularity: Granularity,
    pub layer: usize,
    pub probabilities: bool,
}

impl MaskLogits {
    pub fn channels(&self) -> usize {
        self.scores.dim().2
    }

    pub fn channel(&self, c: usize) -> Array2<f64> {
        self.scores.index_axis(Axis(2), c).to_owned()
    }
}

pub const DEFAULT_T_SEG: f64 = 8.0 / 28.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    /// Noise fraction of the segmentation input (`t = 1` is pure noise).
    pub t_seg: f64,
    /// Use `1 − t_seg` as the noise fraction instead.
    pub invert_tseg: bool,
    pub norm: NormMode,
    pub seed: u64,
    /// Open-vocabulary only: score background pixels against a constant
    /// channel at this level instead of ignoring them.
    pub background_threshold: Option<f64>,
    /// Unsupervised only: per-head pad maps instead of head means.
    pub head_level_proposals: bool,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            t_seg: DEFAULT_T_SEG,
            invert_tseg: false,
            norm: NormMode::default(),
            seed: 0,
            background_threshold: None,
            head_level_proposals: false,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t_seg) {
            return Err(Error::Input(format!("t_seg {} outside [0, 1]", self.t_seg)));
        }
        Ok(())
    }

    pub fn noise_fraction(&self) -> f64 {
        if self.invert_tseg {
            1.0 - self.t_seg
        } else {
            self.t_seg
        }
    }
}

/// Clean latent of `image` interpolated toward seeded noise at level `t`.
/// `index` separates the noise of different images under one seed.
pub fn noisy_latent<T: Real>(image: &Array3<f32>, t: f64, seed: u64, index: u64) -> Result<Latent<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("t_seg {t} outside [0, 1]")));
    }
    let x0: Latent<T> = image_to_latent(image);
    let eps = gaussian_latent(x0.dim(), seed, stream::SEGMENT, &[index]);
    interpolate(&x0, &eps, t)
}

/// Image tokens of [`noisy_latent`].
pub fn noisy_tokens<T: Real>(
    state: &ModelState<T>,
    image: &Array3<f32>,
    t: f64,
    seed: u64,
    index: u64,
) -> Result<Mat<T>> {
    embed_image(&noisy_latent::<T>(image, t, seed, index)?, state)
}

/// Forward pass at noise level `t` capturing all layers.
pub fn trace_at<T: Real>(
    state: &ModelState<T>,
    image: &Array3<f32>,
    tokens: &[usize],
    t: f64,
    seed: u64,
    index: u64,
) -> Result<AttentionTrace> {
    let x = noisy_latent::<T>(image, t, seed, index)?;
    let out = model_forward(state, &x, tokens, t, true, &Intervention::None)?;
    Ok(out.trace.expect("capture requested"))
}

fn grid_stack(trace: &AttentionTrace, cols: Vec<Array2<f64>>) -> Array3<f64> {
    let (gh, gw) = (trace.grid_h, trace.grid_w);
    let mut out = Array3::zeros((gh, gw, cols.len()));
    for (c, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[[i / gw, i % gw, c]] = *v;
        }
    }
    out
}

fn head_blocks(trace: &AttentionTrace, layer: usize, probabilities: bool) -> Result<Vec<Array2<f64>>> {
    let rec = trace.check_layer(layer)?;
    if probabilities {
        Ok((0..rec.heads.len()).map(|h| trace.i2t(layer, h).to_owned()).collect())
    } else {
        rec.i2t_logits
            .clone()
            .ok_or_else(|| Error::Input(format!("layer {layer} has no pre-softmax scores")))
    }
}

fn token_maps(trace: &AttentionTrace, layer: usize, probabilities: bool) -> Result<MaskLogits> {
    let blocks = head_blocks(trace, layer, probabilities)?;
    let mut mean = Array2::<f64>::zeros(blocks[0].dim());
    for b in &blocks {
        mean += b;
    }
    mean /= blocks.len() as f64;
    let cols = mean
        .columns()
        .into_iter()
        .map(|c| c.to_owned().insert_axis(Axis(1)))
        .collect();
    Ok(MaskLogits {
        scores: grid_stack(trace, cols),
        granularity: Granularity::Token,
        layer,
        probabilities,
    })
}

/// Head-mean I2T probabilities, one grid map per text token.
pub fn extract_token_maps(trace: &AttentionTrace, layer: usize) -> Result<MaskLogits> {
    token_maps(trace, layer, true)
}

/// Head-mean pre-softmax I2T scores, one grid map per text token.
pub fn extract_token_scores(trace: &AttentionTrace, layer: usize) -> Result<MaskLogits> {
    token_maps(trace, layer, false)
}

/// Per-head I2T probability maps of one text token.
pub fn extract_head_maps(trace: &AttentionTrace, layer: usize, token: usize) -> Result<MaskLogits> {
    let blocks = head_blocks(trace, layer, true)?;
    if token >= trace.text_len {
        return Err(Error::Input(format!(
            "token {token} outside a {}-token prompt",
            trace.text_len
        )));
    }
    let cols = blocks
        .iter()
        .map(|b| b.column(token).to_owned().insert_axis(Axis(1)))
        .collect();
    Ok(MaskLogits {
        scores: grid_stack(trace, cols),
        granularity: Granularity::Head,
        layer,
        probabilities: true,
    })
}

fn minmax(map: &mut ndarray::ArrayViewMut2<f64>) {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (hi - lo).max(1e-12);
    map.mapv_inplace(|v| (v - lo) / range);
}

/// Averages token maps over each class span, in span order, then applies
/// the normalization of `norm`. `maps` must come from the matching source
/// (probabilities or pre-softmax scores).
pub fn class_logits(maps: &MaskLogits, spans: &ClassTokenSpans, norm: NormMode) -> Result<MaskLogits> {
    if maps.probabilities != norm.uses_probabilities() {
        return Err(Error::Input(format!(
            "{norm} needs {} maps",
            if norm.uses_probabilities() {
                "post-softmax"
            } else {
                "pre-softmax"
            }
        )));
    }
    let (gh, gw, l) = maps.scores.dim();
    let mut out = Array3::zeros((gh, gw, spans.spans.len()));
    for (c, span) in spans.spans.iter().enumerate() {
        let positions: Vec<usize> = span.positions().collect();
        if positions.is_empty() {
            return Err(Error::Input(format!("class {} has an empty span", span.class)));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= l) {
            return Err(Error::Input(format!("span position {p} outside {l} token maps")));
        }
        let mut acc = out.index_axis_mut(Axis(2), c);
        for &p in &positions {
            acc += &maps.scores.index_axis(Axis(2), p);
        }
        acc /= positions.len() as f64;
        if norm.rescales() {
            minmax(&mut acc);
        }
    }
    Ok(MaskLogits {
        scores: out,
        granularity: Granularity::Class,
        layer: maps.layer,
        probabilities: maps.probabilities,
    })
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn bilinear_resize(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = map.dim();
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|y| coord(y, in_h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, in_w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Upsamples every channel and takes the per-pixel argmax (lowest channel
/// index on ties). Labels are channel indices.
pub fn predict_mask(logits: &MaskLogits, out_h: usize, out_w: usize) -> Result<IndexMask> {
    let c = logits.channels();
    if c == 0 || c > IGNORE as usize {
        return Err(Error::Input(format!("cannot predict from {c} channels")));
    }
    let up: Vec<Array2<f64>> = (0..c)
        .map(|k| bilinear_resize(&logits.channel(k), out_h, out_w))
        .collect();
    let labels = Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if up[k][[y, x]] > up[best][[y, x]] {
                best = k;
            }
        }
        best as u8
    });
    IndexMask::new(labels, c)
}

/// Prediction in dataset class ids for one sample's prompt classes.
///
/// Without a background threshold, only the prompt classes compete. With
/// one, a constant background channel is prepended.
pub fn predict_classes(
    class_maps: &MaskLogits,
    spans: &ClassTokenSpans,
    num_classes: usize,
    background_threshold: Option<f64>,
    out: (usize, usize),
) -> Result<IndexMask> {
    let mut ids = spans.classes();
    let logits = match background_threshold {
        None => class_maps.clone(),
        Some(th) => {
            let (gh, gw, c) = class_maps.scores.dim();
            let mut s = Array3::from_elem((gh, gw, c + 1), th);
            s.slice_mut(ndarray::s![.., .., 1..]).assign(&class_maps.scores);
            ids.insert(0, 0);
            MaskLogits {
                scores: s,
                ..class_maps.clone()
            }
        }
    };
    let pred = predict_mask(&logits, out.0, out.1)?;
    IndexMask::new(pred.labels.mapv(|k| ids[k as usize] as u8), num_classes)
}

/// Ground truth for open-vocabulary scoring: background becomes ignore
/// unless it is being predicted.
pub fn open_vocab_gt(mask: &IndexMask, keep_background: bool) -> IndexMask {
    let labels = if keep_background {
        mask.labels.clone()
    } else {
        mask.labels.mapv(|l| if l == 0 { IGNORE } else { l })
    };
    IndexMask {
        labels,
        num_classes: mask.num_classes,
    }
}

/// One sample scored at one layer (optionally a single head).
fn sample_confusion(
    trace: &AttentionTrace,
    sample: &ShapesSample,
    layer: usize,
    head: Option<usize>,
    cfg: &SegmentConfig,
) -> Result<ConfusionMatrix> {
    let maps = match head {
        None if cfg.norm.uses_probabilities() => extract_token_maps(trace, layer)?,
        None => extract_token_scores(trace, layer)?,
        Some(h) => single_head_maps(trace, layer, h, cfg.norm.uses_probabilities())?,
    };
    let class_maps = class_logits(&maps, &sample.spans, cfg.norm)?;
    let (h, w) = sample.mask.dim();
    let nc = sample.mask.num_classes;
    let pred = predict_classes(&class_maps, &sample.spans, nc, cfg.background_threshold, (h, w))?;
    let gt = open_vocab_gt(&sample.mask, cfg.background_threshold.is_some());
    confusion(&pred.labels, &gt.labels, nc, IGNORE)
}

fn single_head_maps(trace: &AttentionTrace, layer: usize, head: usize, probabilities: bool) -> Result<MaskLogits> {
    let blocks = head_blocks(trace, layer, probabilities)?;
    let block = blocks
        .get(head)
        .ok_or_else(|| Error::Input(format!("head {head} out of range")))?;
    let cols = block
        .columns()
        .into_iter()
        .map(|c| c.to_owned().insert_axis(Axis(1)))
        .collect();
    Ok(MaskLogits {
        scores: grid_stack(trace, cols),
        granularity: Granularity::Token,
        layer,
        probabilities,
    })
}

/// Segments one sample at `layer`; labels are dataset class ids.
pub fn segment_sample<T: Real>(
    state: &ModelState<T>,
    sample: &ShapesSample,
    index: u64,
    layer: usize,
    cfg: &SegmentConfig,
) -> Result<(IndexMask, MaskLogits)> {
    cfg.validate()?;
    let trace = trace_at(
        state,
        &sample.image,
        &sample.tokens,
        cfg.noise_fraction(),
        cfg.seed,
        index,
    )?;
    let maps = if cfg.norm.uses_probabilities() {
        extract_token_maps(&trace, layer)?
    } else {
        extract_token_scores(&trace, layer)?
    };
    let class_maps = class_logits(&maps, &sample.spans, cfg.norm)?;
    let (h, w) = sample.mask.dim();
    let pred = predict_classes(
        &class_maps,
        &sample.spans,
        sample.mask.num_classes,
        cfg.background_threshold,
        (h, w),
    )?;
    Ok((pred, class_maps))
}

/// Open-vocabulary scores of the whole dataset at one layer.
pub fn evaluate_layer<T: Real>(
    state: &ModelState<T>,
    data: &Dataset,
    layer: usize,
    cfg: &SegmentConfig,
) -> Result<SegScores> {
    let rows = sweep(state, data, &[layer], &[cfg.noise_fraction()], false, cfg)?;
    Ok(rows.into_iter().next().expect("one row").scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    /// Noise fraction used for the forward pass.
    pub timestep: f64,
    pub head: Option<usize>,
    pub scores: SegScores,
}

/// Scores every `(timestep, layer[, head])` combination over the dataset.
/// `timesteps` are noise fractions and override `cfg.t_seg`.
pub fn sweep<T: Real>(
    state: &ModelState<T>,
    data: &Dataset,
    layers: &[usize],
    timesteps: &[f64],
    per_head: bool,
    cfg: &SegmentConfig,
) -> Result<Vec<SweepRow>> {
    if data.is_empty() {
        return Err(Error::Input("sweep needs a non-empty dataset".into()));
    }
    let num_layers = state.config.num_layers;
    if let Some(&l) = layers.iter().find(|&&l| l >= num_layers) {
        return Err(Error::Input(format!("layer {l} out of range ({num_layers} layers)")));
    }
    let heads: Vec<Option<usize>> = if per_head {
        std::iter::once(None)
            .chain((0..state.config.num_heads).map(Some))
            .collect()
    } else {
        vec![None]
    };
    let nc = data.num_classes();
    let mut rows = Vec::new();
    for &t in timesteps {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Input(format!("timestep {t} outside [0, 1]")));
        }
        let per_sample: Vec<Vec<ConfusionMatrix>> = data
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let trace = trace_at(state, &s.image, &s.tokens, t, cfg.seed, i as u64)?;
                let mut out = Vec::with_capacity(layers.len() * heads.len());
                for &layer in layers {
                    for &head in &heads {
                        out.push(sample_confusion(&trace, s, layer, head, cfg)?);
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let mut k = 0;
        for &layer in layers {
            for &head in &heads {
                let mut cm = ConfusionMatrix::new(nc);
                for s in &per_sample {
                    cm.add(&s[k])?;
                }
                rows.push(SweepRow {
                    layer,
                    timestep: t,
                    head,
                    scores: seg_scores(&cm)?,
                });
                k += 1;
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("layer,timestep,head,pacc,macc,miou\n");
    for r in rows {
        let head = r.head.map(|h| h.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.layer, r.timestep, head, r.scores.pacc, r.scores.macc, r.scores.miou
        ));
    }
    out
}

/// Best mIoU over layers among head-mean rows, with its layer.
pub fn best_layer(rows: &[SweepRow]) -> Option<(usize, f64)> {
    rows.iter()
        .filter(|r| r.head.is_none())
        .fold(None, |best: Option<(usize, f64)>, r| match best {
            Some((_, m)) if m >= r.scores.miou => best,
            _ => Some((r.layer, r.scores.miou)),
        })
}

/// Grid maps of the `<pad>` positions, each normalized to sum 1.
/// With `head_level`, every head contributes its own map per position.
pub fn pad_token_proposals(trace: &AttentionTrace, layer: usize, head_level: bool) -> Result<Vec<Array2<f64>>> {
    let pads: Vec<usize> = trace
        .pad_mask
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| p.then_some(i))
        .take(trace.text_len.saturating_sub(2))
        .collect();
    if pads.is_empty() {
        return Err(Error::Input("prompt has no <pad> positions".into()));
    }
    let maps: Vec<Array2<f64>> = if head_level {
        let mut out = Vec::new();
        for &p in &pads {
            let m = extract_head_maps(trace, layer, p)?;
            out.extend((0..m.channels()).map(|h| m.channel(h)));
        }
        out
    } else {
        let m = extract_token_maps(trace, layer)?;
        pads.iter().map(|&p| m.channel(p)).collect()
    };
    Ok(maps.into_iter().map(normalize_l1).collect())
}

fn normalize_l1(mut m: Array2<f64>) -> Array2<f64> {
    let s: f64 = m.iter().map(|v| v.max(0.0)).sum();
    if s > 0.0 {
        m.mapv_inplace(|v| v.max(0.0) / s);
    } else {
        let n = m.len() as f64;
        m.fill(1.0 / n);
    }
    m
}

const KL_FLOOR: f64 = 1e-12;

fn kl(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(&a, &b)| {
            if a > 0.0 {
                a * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln())
            } else {
                0.0
            }
        })
        .sum()
}

pub fn symmetric_kl(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    0.5 * kl(p, q) + 0.5 * kl(q, p)
}

/// Greedily merges the closest pair (symmetric KL) while it is below `tau`.
/// A merged proposal is the renormalized mean of its original members and
/// takes the lower index.
pub fn kl_merge(proposals: &[Array2<f64>], tau: f64) -> Result<Vec<Array2<f64>>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("merge threshold must be positive, got {tau}")));
    }
    let mut groups: Vec<Vec<usize>> = (0..proposals.len()).map(|i| vec![i]).collect();
    let mut maps: Vec<Array2<f64>> = proposals.to_vec();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..maps.len() {
            for j in i + 1..maps.len() {
                let d = symmetric_kl(&maps[i], &maps[j]);
                if best.is_none_or(|(b, _, _)| d < b) {
                    best = Some((d, i, j));
                }
            }
        }
        match best {
            Some((d, i, j)) if d < tau => {
                let members = groups.remove(j);
                maps.remove(j);
                groups[i].extend(members);
                let mut mean = Array2::zeros(proposals[0].dim());
                for &m in &groups[i] {
                    mean += &proposals[m];
                }
                maps[i] = normalize_l1(mean);
            }
            _ => return Ok(maps),
        }
    }
}

/// Ranks every layer as a grounding expert: open-vocabulary mIoU over
/// `data` at the configured noise level, ties broken by the mean value norm
/// of the non-pad prompt tokens.
pub fn rank_expert_layers<T: Real>(state: &ModelState<T>, data: &Dataset, cfg: &SegmentConfig) -> Result<LayerRanking> {
    cfg.validate()?;
    let t = cfg.noise_fraction();
    let layers: Vec<usize> = (0..state.config.num_layers).collect();
    let rows = sweep(state, data, &layers, &[t], false, cfg)?;
    let miou: Vec<f64> = rows.iter().map(|r| r.scores.miou).collect();
    let norms = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let trace = trace_at(state, &s.image, &s.tokens, t, cfg.seed, i as u64)?;
            value_norms(&trace, &trace.pad_mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let prompt: Vec<f64> = layers
        .iter()
        .map(|&l| norms.iter().map(|n| n[l].prompt).sum::<f64>() / norms.len() as f64)
        .collect();
    rank_layers(&miou, &prompt)
}

/// Pad-token proposals of one sample under the unconditional prompt,
/// merged and upsampled to image size.
pub fn unsup_proposals<T: Real>(
    state: &ModelState<T>,
    image: &Array3<f32>,
    index: u64,
    layer: usize,
    tau: f64,
    cfg: &SegmentConfig,
) -> Result<Vec<Array2<f64>>> {
    cfg.validate()?;
    let null = state.config.null_prompt();
    let trace = trace_at(state, image, &null, cfg.noise_fraction(), cfg.seed, index)?;
    let props = pad_token_proposals(&trace, layer, cfg.head_level_proposals)?;
    let merged = kl_merge(&props, tau)?;
    let (_, h, w) = image.dim();
    Ok(merged.iter().map(|m| bilinear_resize(m, h, w)).collect())
}

/// Ground-truth masks for unsupervised scoring: background plus instances.
pub fn unsup_targets(sample: &ShapesSample) -> (Vec<Array2<bool>>, Vec<usize>) {
    let mut masks = Vec::new();
    let mut classes = Vec::new();
    let bg = sample.mask.labels.mapv(|l| l == 0);
    if bg.iter().any(|&b| b) {
        masks.push(bg);
        classes.push(0);
    }
    masks.extend(sample.instances.iter().cloned());
    classes.extend(sample.instance_classes());
    (masks, classes)
}

/// Unsupervised proposal scores of the dataset at one layer.
pub fn evaluate_unsup<T: Real>(
    state: &ModelState<T>,
    data: &Dataset,
    layer: usize,
    tau: f64,
    cfg: &SegmentConfig,
) -> Result<SegScores> {
    let tallies = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let props = unsup_proposals(state, &s.image, i as u64, layer, tau, cfg)?;
            let (masks, classes) = unsup_targets(s);
            Ok((proposal_tally(&props, &masks)?, classes))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = ProposalAccumulator::new(data.num_classes());
    for (t, c) in &tallies {
        acc.add(t, c)?;
    }
    acc.scores()
}

/// Picks the merge threshold with the best unsupervised mIoU over `grid`
/// (first wins on ties).
pub fn select_tau<T: Real>(
    state: &ModelState<T>,
    data: &Dataset,
    layer: usize,
    grid: &[f64],
    cfg: &SegmentConfig,
) -> Result<(f64, Vec<(f64, SegScores)>)> {
    let mut results = Vec::with_capacity(grid.len());
    for &tau in grid {
        results.push((tau, evaluate_unsup(state, data, layer, tau, cfg)?));
    }
    let best = results
        .iter()
        .fold(None, |b: Option<(f64, f64)>, (tau, s)| match b {
            Some((_, m)) if m >= s.miou => b,
            _ => Some((*tau, s.miou)),
        })
        .ok_or_else(|| Error::Config("empty merge-threshold grid".into()))?;
    Ok((best.0, results))
}

pub const DEFAULT_TAU_GRID: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 1.0, 2.0];

/// Converts binarized proposals to an index mask (later proposals win).
pub fn proposals_to_mask(proposals: &[Array2<f64>], dim: (usize, usize)) -> Array2<u8> {
    let mut out = Array2::<u8>::zeros(dim);
    for (k, p) in proposals.iter().enumerate() {
        for (o, &b) in out.iter_mut().zip(binarize_proposal(p).iter()) {
            if b {
                *o = (k + 1).min(254) as u8;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerRecord;

    fn trace_from(heads: Vec<Array2<f64>>, grid: (usize, usize), l: usize) -> AttentionTrace {
        AttentionTrace {
            grid_h: grid.0,
            grid_w: grid.1,
            text_len: l,
            layers: vec![LayerRecord {
                heads,
                i2t_logits: None,
                values: None,
            }],
            pad_mask: vec![false; l],
        }
    }

    /// Embeds a `hw × l` I2T block into a full joint matrix.
    fn joint(i2t: &Array2<f64>) -> Array2<f64> {
        let (hw, l) = i2t.dim();
        let mut a = Array2::zeros((hw + l, hw + l));
        a.slice_mut(ndarray::s![..hw, hw..]).assign(i2t);
        a
    }

    #[test]
    fn token_maps_average_heads() {
        let h0 = ndarray::array![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]];
        let h1 = ndarray::array![[0.3, 0.0], [0.1, 0.2], [0.9, 0.2], [0.1, 0.4]];
        let tr = trace_from(vec![joint(&h0), joint(&h1)], (2, 2), 2);
        let m = extract_token_maps(&tr, 0).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let want = (h0[[i, j]] + h1[[i, j]]) / 2.0;
                assert!((m.scores[[i / 2, i % 2, j]] - want).abs() < 1e-15);
            }
        }
        let hm = extract_head_maps(&tr, 0, 1).unwrap();
        assert_eq!(hm.scores[[1, 0, 0]], h0[[2, 1]]);
        assert_eq!(hm.scores[[1, 0, 1]], h1[[2, 1]]);
        for y in 0..2 {
            for x in 0..2 {
                let mean = (hm.scores[[y, x, 0]] + hm.scores[[y, x, 1]]) / 2.0;
                assert!((mean - m.scores[[y, x, 1]]).abs() < 1e-9);
            }
        }
        assert!(extract_token_maps(&tr, 1).is_err());
        assert!(extract_head_maps(&tr, 0, 2).is_err());
    }

    #[test]
    fn class_maps_average_spans() {
        let i2t = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 / 16.0);
        let tr = trace_from(vec![joint(&i2t)], (2, 2), 4);
        let tokens = [SOS, 5, 6, EOS];
        let spans = ClassTokenSpans {
            spans: vec![
                ClassSpan {
                    class: 2,
                    ranges: vec![[1, 2]],
                },
                ClassSpan {
                    class: 1,
                    ranges: vec![[2, 3]],
                },
            ],
        };
        spans.validate(&tokens).unwrap();
        let maps = extract_token_maps(&tr, 0).unwrap();
        let c = class_logits(&maps, &spans, NormMode::PostSoftmaxRaw).unwrap();
        assert_eq!(c.channel(0), maps.channel(1));
        assert_eq!(c.channel(1), maps.channel(2));
        let two = ClassTokenSpans {
            spans: vec![ClassSpan {
                class: 1,
                ranges: vec![[1, 3]],
            }],
        };
        let c = class_logits(&maps, &two, NormMode::PostSoftmaxRaw).unwrap();
        assert_eq!(c.channel(0), (maps.channel(1) + maps.channel(2)) / 2.0);
        let mm = class_logits(&maps, &two, NormMode::SoftmaxMinmax).unwrap();
        let (lo, hi) = mm
            .scores
            .iter()
            .fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        assert!(class_logits(&maps, &two, NormMode::PreSoftmax).is_err());
    }

    #[test]
    fn spans_reject_special_tokens_and_overlap() {
        let tokens = [SOS, 5, 6, EOS, PAD];
        let span = |class, a, b| ClassSpan {
            class,
            ranges: vec![[a, b]],
        };
        assert!(ClassTokenSpans {
            spans: vec![span(1, 0, 1)]
        }
        .validate(&tokens)
        .is_err());
        assert!(ClassTokenSpans {
            spans: vec![span(1, 3, 4)]
        }
        .validate(&tokens)
        .is_err());
        assert!(ClassTokenSpans {
            spans: vec![span(1, 1, 3), span(2, 2, 3)]
        }
        .validate(&tokens)
        .is_err());
        assert!(ClassTokenSpans {
            spans: vec![span(1, 2, 2)]
        }
        .validate(&tokens)
        .is_err());
        assert!(ClassTokenSpans {
            spans: vec![span(1, 4, 9)]
        }
        .validate(&tokens)
        .is_err());
        ClassTokenSpans {
            spans: vec![span(1, 1, 2), span(2, 2, 3)],
        }
        .validate(&tokens)
        .unwrap();
    }

    /// Scalar bilinear sampling with half-pixel centers.
    fn bilinear_oracle(m: &Array2<f64>, oh: usize, ow: usize, y: usize, x: usize) -> f64 {
        let (ih, iw) = m.dim();
        let sy = ((y as f64 + 0.5) * ih as f64 / oh as f64 - 0.5).clamp(0.0, (ih - 1) as f64);
        let sx = ((x as f64 + 0.5) * iw as f64 / ow as f64 - 0.5).clamp(0.0, (iw - 1) as f64);
        let mut acc = 0.0;
        for yy in 0..ih {
            for xx in 0..iw {
                let wy = (1.0 - (sy - yy as f64).abs()).max(0.0);
                let wx = (1.0 - (sx - xx as f64).abs()).max(0.0);
                acc += wy * wx * m[[yy, xx]];
            }
        }
        acc
    }

    #[test]
    fn bilinear_matches_oracle() {
        let m = ndarray::array![[1.0, 2.0], [3.0, 5.0]];
        let up = bilinear_resize(&m, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert!((up[[y, x]] - bilinear_oracle(&m, 4, 4, y, x)).abs() < 1e-12);
            }
        }
        assert_eq!(up[[0, 0]], 1.0);
        assert!((up[[1, 1]] - (1.0 * 0.5625 + 2.0 * 0.1875 + 3.0 * 0.1875 + 5.0 * 0.0625)).abs() < 1e-12);
        let m = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let up = bilinear_resize(&m, 8, 7);
        for y in 0..8 {
            for x in 0..7 {
                assert!((up[[y, x]] - bilinear_oracle(&m, 8, 7, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_prediction() {
        let one = MaskLogits {
            scores: Array3::from_elem((2, 2, 1), 0.3),
            granularity: Granularity::Class,
            layer: 0,
            probabilities: true,
        };
        assert!(predict_mask(&one, 4, 4).unwrap().labels.iter().all(|&l| l == 0));
        let mut two = one.clone();
        two.scores = Array3::from_shape_fn((2, 2, 2), |(_, _, c)| if c == 0 { 0.2 } else { 0.7 });
        assert!(predict_mask(&two, 4, 4).unwrap().labels.iter().all(|&l| l == 1));
        two.scores.fill(0.5);
        assert!(predict_mask(&two, 3, 3).unwrap().labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn background_threshold_adds_channel() {
        let maps = MaskLogits {
            scores: Array3::from_shape_fn((2, 2, 1), |(y, _, _)| if y == 0 { 0.9 } else { 0.1 }),
            granularity: Granularity::Class,
            layer: 0,
            probabilities: true,
        };
        let spans = ClassTokenSpans {
            spans: vec![ClassSpan {
                class: 3,
                ranges: vec![[1, 2]],
            }],
        };
        let pred = predict_classes(&maps, &spans, 4, None, (2, 2)).unwrap();
        assert!(pred.labels.iter().all(|&l| l == 3));
        let pred = predict_classes(&maps, &spans, 4, Some(0.5), (2, 2)).unwrap();
        assert_eq!(pred.labels, ndarray::array![[3, 3], [0, 0]]);
    }

    #[test]
    fn pad_proposals() {
        let l = 3;
        let hw = 4;
        let mut a = Array2::from_elem((hw + l, hw + l), 1.0 / (hw + l) as f64);
        a[[0, hw + 2]] = 0.5;
        let mut tr = trace_from(vec![a], (2, 2), l);
        tr.pad_mask = vec![false, false, true];
        let p = pad_token_proposals(&tr, 0, false).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].sum() - 1.0).abs() < 1e-12);
        assert!(p[0][[0, 0]] > p[0][[1, 1]]);
        tr.pad_mask = vec![false; 3];
        assert!(pad_token_proposals(&tr, 0, false).is_err());
    }

    fn dist(v: &[f64], w: usize) -> Array2<f64> {
        let s: f64 = v.iter().sum();
        Array2::from_shape_vec((v.len() / w, w), v.iter().map(|x| x / s).collect()).unwrap()
    }

    /// Greedy merging by repeated full scans of the pairwise table.
    fn greedy_oracle(p: &[Array2<f64>], tau: f64) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = (0..p.len()).map(|i| vec![i]).collect();
        let mean = |g: &Vec<usize>| {
            let mut m = Array2::<f64>::zeros(p[0].dim());
            for &i in g {
                m += &p[i];
            }
            let s = m.sum();
            m / s
        };
        loop {
            let mut table = Vec::new();
            for i in 0..groups.len() {
                for j in i + 1..groups.len() {
                    let (a, b) = (mean(&groups[i]), mean(&groups[j]));
                    let mut d = 0.0;
                    for (x, y) in a.iter().zip(b.iter()) {
                        let (x1, y1) = (x.max(1e-12), y.max(1e-12));
                        if *x > 0.0 {
                            d += 0.5 * x * (x1 / y1).ln();
                        }
                        if *y > 0.0 {
                            d += 0.5 * y * (y1 / x1).ln();
                        }
                    }
                    table.push((d, i, j));
                }
            }
            let Some(&(d, i, j)) = table.iter().min_by(|a, b| a.0.partial_cmp(&b.0).unwrap()) else {
                return groups;
            };
            if d >= tau {
                return groups;
            }
            let g = groups.remove(j);
            groups[i].extend(g);
        }
    }

    #[test]
    fn merging() {
        let a = dist(&[1.0, 2.0, 3.0, 4.0], 2);
        let merged = kl_merge(&[a.clone(), a.clone()], 1e-9).unwrap();
        assert_eq!(merged.len(), 1);
        let x = dist(&[1.0, 0.0, 0.0, 0.0], 2);
        let y = dist(&[0.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(kl_merge(&[x, y], 1.0).unwrap().len(), 2);
        assert!(kl_merge(std::slice::from_ref(&a), 0.0).is_err());

        let p = vec![
            dist(&[5.0, 1.0, 1.0, 1.0], 2),
            dist(&[1.0, 1.0, 1.0, 5.0], 2),
            dist(&[4.0, 1.0, 1.0, 2.0], 2),
            dist(&[1.0, 5.0, 1.0, 1.0], 2),
        ];
        for tau in [0.05, 0.2, 0.5, 1.0, 5.0] {
            let groups = greedy_oracle(&p, tau);
            let merged = kl_merge(&p, tau).unwrap();
            assert_eq!(merged.len(), groups.len(), "tau {tau}");
            for (m, g) in merged.iter().zip(&groups) {
                let mut want = Array2::<f64>::zeros((2, 2));
                for &i in g {
                    want += &p[i];
                }
                let want = &want / want.sum();
                assert!(m.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
        assert_eq!(kl_merge(&p, 1e-12).unwrap(), p);
    }

    #[test]
    fn noisy_latent_endpoints() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| ((c + y + x) % 3) as f32 / 2.0);
        let clean: Latent<f64> = noisy_latent(&img, 0.0, 1, 0).unwrap();
        assert_eq!(clean, image_to_latent::<f64>(&img));
        let n1: Latent<f64> = noisy_latent(&img, 1.0, 1, 0).unwrap();
        let n2: Latent<f64> = noisy_latent(&img.mapv(|v| 1.0 - v), 1.0, 1, 0).unwrap();
        assert_eq!(n1, n2);
        assert!(noisy_latent::<f64>(&img, 1.5, 1, 0).is_err());
        assert!((SegmentConfig::default().t_seg - 0.2857).abs() < 1e-4);
        let inv = SegmentConfig {
            invert_tseg: true,
            ..SegmentConfig::default()
        };
        assert!((inv.noise_fraction() - 20.0 / 28.0).abs() < 1e-15);
    }

    #[test]
    fn norm_mode_names_round_trip() {
        for m in [
            NormMode::PostSoftmaxRaw,
            NormMode::PreSoftmax,
            NormMode::Minmax,
            NormMode::SoftmaxMinmax,
        ] {
            assert_eq!(m.to_string().parse::<NormMode>().unwrap(), m);
        }
        assert!("soft".parse::<NormMode>().is_err());
    }
}
