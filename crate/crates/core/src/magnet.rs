//! Mask-alignment fine-tuning: expert-layer attention maps are matched to
//! ground-truth masks and pulled toward them through LoRA adapters, next to
//! the usual flow-matching objective.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::data::{Dataset, ShapesSample};
use crate::error::{Error, Result};
use crate::flow::train::{draw, Draw};
use crate::flow::{image_to_latent, interpolate, target_velocity, AdamW, OptimizerConfig};
use crate::matching::{hungarian_match, MatchResult};
use crate::model::{build_forward, patchify, AttentionTrace, GradMode, Intervention, Latent, LoraSpec, ModelState};
use crate::real::Real;
use crate::rng::{split, stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateGranularity {
    /// One candidate per (token, head): `l · H` maps.
    #[default]
    Head,
    /// One head-mean candidate per token: `l` maps.
    Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagnetConfig {
    pub expert_layer: usize,
    pub granularity: CandidateGranularity,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub lambda_mask: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lora: LoraSpec,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for MagnetConfig {
    fn default() -> Self {
        MagnetConfig {
            expert_layer: 0,
            granularity: CandidateGranularity::Head,
            lambda_focal: 20.0,
            lambda_dice: 1.0,
            lambda_mask: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            lora: LoraSpec::default(),
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                warmup_steps: 50,
                batch_size: 4,
                cond_dropout: 0.0,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
            seed: 0,
        }
    }
}

impl MagnetConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let lambdas = [self.lambda_focal, self.lambda_dice, self.lambda_mask];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("focal loss needs gamma >= 0 and alpha in [0, 1]".into()));
        }
        if self.expert_layer >= num_layers {
            return Err(Error::Config(format!(
                "expert layer {} out of range ({num_layers} layers)",
                self.expert_layer
            )));
        }
        self.optimizer.validate()
    }
}

const MINMAX_EPS: f64 = 1e-12;

fn minmax(map: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < MINMAX_EPS {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Pulls `grad` (w.r.t. the min-max output) back to the raw map. The
/// extremes are treated as selected entries (a subgradient at ties).
fn minmax_backward(map: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let flat: Vec<f64> = map.iter().copied().collect();
    let (mut imin, mut imax) = (0, 0);
    for (i, &v) in flat.iter().enumerate() {
        if v < flat[imin] {
            imin = i;
        }
        if v > flat[imax] {
            imax = i;
        }
    }
    let (lo, hi) = (flat[imin], flat[imax]);
    let r = hi - lo;
    if r < MINMAX_EPS {
        return Array2::zeros(map.dim());
    }
    let mut out: Vec<f64> = grad.iter().map(|g| g / r).collect();
    let (mut d_lo, mut d_hi) = (0.0, 0.0);
    for (&g, &a) in grad.iter().zip(&flat) {
        let c = (a - lo) / r;
        d_lo += g * (c - 1.0) / r;
        d_hi -= g * c / r;
    }
    out[imin] += d_lo;
    out[imax] += d_hi;
    Array2::from_shape_vec(map.dim(), out).expect("same shape")
}

/// Raw (un-normalized) candidate grid maps, in candidate order.
fn raw_candidates(
    heads: &[Array2<f64>],
    hw: usize,
    grid: (usize, usize),
    granularity: CandidateGranularity,
) -> Vec<Array2<f64>> {
    let l = heads[0].ncols() - hw;
    let column = |a: &Array2<f64>, j: usize| {
        Array2::from_shape_vec(grid, a.slice(ndarray::s![..hw, hw + j]).to_vec()).expect("grid matches hw")
    };
    match granularity {
        CandidateGranularity::Head => (0..l).flat_map(|j| heads.iter().map(move |a| column(a, j))).collect(),
        CandidateGranularity::Token => (0..l)
            .map(|j| {
                let mut m = Array2::zeros(grid);
                for a in heads {
                    m += &column(a, j);
                }
                m / heads.len() as f64
            })
            .collect(),
    }
}

/// Min-max normalized expert-layer I2T maps. Head granularity orders
/// candidates token-major (`token · H + head`).
pub fn candidate_masks(
    trace: &AttentionTrace,
    layer: usize,
    granularity: CandidateGranularity,
) -> Result<Vec<Array2<f64>>> {
    let rec = trace.check_layer(layer)?;
    let raw = raw_candidates(&rec.heads, trace.hw(), (trace.grid_h, trace.grid_w), granularity);
    Ok(raw.iter().map(minmax).collect())
}

const P_CLAMP: f64 = 1e-7;

fn check_pair(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Input(format!(
            "prediction {:?} and mask {:?} differ in size",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Mean sigmoid-free focal loss on probabilities, with its gradient.
pub fn focal_loss_grad(pred: &Array2<f64>, gt: &Array2<bool>, alpha: f64, gamma: f64) -> Result<(f64, Array2<f64>)> {
    check_pair(pred, gt)?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    for ((g, &p), &pos) in grad.iter_mut().zip(pred.iter()).zip(gt.iter()) {
        let inside = p > P_CLAMP && p < 1.0 - P_CLAMP;
        let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
        let (l, d) = if pos {
            let q = 1.0 - p;
            let l = -alpha * q.powf(gamma) * p.ln();
            let d = -alpha * (q.powf(gamma) / p - gamma * q.powf(gamma - 1.0) * p.ln());
            (l, d)
        } else {
            let q = 1.0 - p;
            let l = -(1.0 - alpha) * p.powf(gamma) * q.ln();
            let d = -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
            (l, d)
        };
        loss += l;
        *g = if inside { d / n } else { 0.0 };
    }
    Ok((loss / n, grad))
}

pub fn focal_loss(pred: &Array2<f64>, gt: &Array2<bool>, alpha: f64, gamma: f64) -> Result<f64> {
    Ok(focal_loss_grad(pred, gt, alpha, gamma)?.0)
}

const DICE_EPS: f64 = 1.0;

pub fn dice_loss_grad(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<(f64, Array2<f64>)> {
    check_pair(pred, gt)?;
    let inter: f64 = pred.iter().zip(gt.iter()).map(|(&p, &g)| if g { p } else { 0.0 }).sum();
    let num = 2.0 * inter + DICE_EPS;
    let den = pred.sum() + gt.iter().filter(|&&g| g).count() as f64 + DICE_EPS;
    let grad = Array2::from_shape_fn(pred.dim(), |ix| {
        let g = if gt[ix] { 1.0 } else { 0.0 };
        -(2.0 * g * den - num) / (den * den)
    });
    Ok((1.0 - num / den, grad))
}

pub fn dice_loss(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<f64> {
    Ok(dice_loss_grad(pred, gt)?.0)
}

fn pair_loss(pred: &Array2<f64>, gt: &Array2<bool>, cfg: &MagnetConfig) -> Result<(f64, Array2<f64>)> {
    let (f, gf) = focal_loss_grad(pred, gt, cfg.focal_alpha, cfg.focal_gamma)?;
    let (d, gd) = dice_loss_grad(pred, gt)?;
    Ok((
        cfg.lambda_focal * f + cfg.lambda_dice * d,
        gf * cfg.lambda_focal + gd * cfg.lambda_dice,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLoss {
    pub loss: f64,
    pub matching: MatchResult,
    /// Gradient w.r.t. each candidate (zero for unmatched ones).
    pub grads: Vec<Array2<f64>>,
}

/// Hungarian-matched mean of `λ_focal · focal + λ_dice · dice` over pairs.
pub fn mask_loss(candidates: &[Array2<f64>], gt_masks: &[Array2<bool>], cfg: &MagnetConfig) -> Result<MaskLoss> {
    if gt_masks.is_empty() {
        return Err(Error::Input("mask loss needs at least one ground-truth mask".into()));
    }
    let per_pair: Vec<Vec<(f64, Array2<f64>)>> = candidates
        .par_iter()
        .map(|c| {
            gt_masks
                .iter()
                .map(|g| pair_loss(c, g, cfg))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let cost: Vec<Vec<f64>> = per_pair
        .iter()
        .map(|row| row.iter().map(|(l, _)| *l).collect())
        .collect();
    let matching = hungarian_match(&cost)?;
    let mut grads: Vec<Array2<f64>> = candidates.iter().map(|c| Array2::zeros(c.dim())).collect();
    let k = matching.pairs.len();
    if k == 0 {
        return Ok(MaskLoss {
            loss: 0.0,
            matching,
            grads,
        });
    }
    let mut loss = 0.0;
    for &(i, j) in &matching.pairs {
        loss += per_pair[i][j].0;
        grads[i] = &per_pair[i][j].1 / k as f64;
    }
    Ok(MaskLoss {
        loss: loss / k as f64,
        matching,
        grads,
    })
}

pub fn total_loss(fm: f64, mask: f64, lambda_mask: f64) -> f64 {
    if lambda_mask == 0.0 {
        return fm;
    }
    fm + lambda_mask * mask
}

/// Downsamples a pixel mask to the token grid: a cell is inside when at
/// least half of its pixels are.
pub fn grid_mask(mask: &Array2<bool>, grid: (usize, usize)) -> Result<Array2<bool>> {
    let (h, w) = mask.dim();
    if grid.0 == 0 || grid.1 == 0 || h % grid.0 != 0 || w % grid.1 != 0 {
        return Err(Error::Input(format!(
            "mask {h}x{w} does not tile a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let (ch, cw) = (h / grid.0, w / grid.1);
    Ok(Array2::from_shape_fn(grid, |(gy, gx)| {
        let mut n = 0;
        for y in gy * ch..(gy + 1) * ch {
            for x in gx * cw..(gx + 1) * cw {
                n += mask[[y, x]] as usize;
            }
        }
        2 * n >= ch * cw
    }))
}

/// Ground-truth masks of a sample at grid resolution (empty ones dropped):
/// instances for head granularity, per-class masks for token granularity.
pub fn grid_targets(
    sample: &ShapesSample,
    grid: (usize, usize),
    granularity: CandidateGranularity,
) -> Result<Vec<Array2<bool>>> {
    let full: Vec<Array2<bool>> = match granularity {
        CandidateGranularity::Head => sample.instances.clone(),
        CandidateGranularity::Token => sample
            .spans
            .classes()
            .into_iter()
            .map(|c| sample.mask.labels.mapv(|l| l as usize == c))
            .collect(),
    };
    let mut out = Vec::with_capacity(full.len());
    for m in &full {
        let g = grid_mask(m, grid)?;
        if g.iter().any(|&b| b) {
            out.push(g);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MagnetRecord {
    pub step: u64,
    pub fm: f64,
    pub mask: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MagnetReport {
    pub records: Vec<MagnetRecord>,
}

impl MagnetReport {
    fn mean_of(&self, range: std::ops::Range<usize>, f: impl Fn(&MagnetRecord) -> f64) -> f64 {
        let r = &self.records[range];
        r.iter().map(f).sum::<f64>() / r.len().max(1) as f64
    }

    pub fn head_mask_mean(&self, k: usize) -> f64 {
        self.mean_of(0..k.min(self.records.len()), |r| r.mask)
    }

    pub fn tail_mask_mean(&self, k: usize) -> f64 {
        let n = self.records.len();
        self.mean_of(n - k.min(n)..n, |r| r.mask)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,fm,mask,total\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.fm, r.mask, r.total));
        }
        out
    }
}

pub fn write_magnet_csv(path: &Path, report: &MagnetReport) -> Result<()> {
    crate::io::write_atomic(path, report.to_csv().as_bytes())
}

struct SampleResult<T: Real> {
    fm: f64,
    mask: f64,
    grads: Vec<Option<(Mat<T>, Mat<T>)>>,
}

fn sample_step<T: Real>(
    state: &ModelState<T>,
    sample: &ShapesSample,
    d: &Draw<T>,
    cfg: &MagnetConfig,
) -> Result<SampleResult<T>> {
    let mc = &state.config;
    let x0: Latent<T> = image_to_latent(&sample.image);
    let x_t = interpolate(&x0, &d.eps, d.t)?;
    let target = patchify(&target_velocity(&x0, &d.eps)?, mc)?;
    let mut tape = Tape::new();
    let graph = build_forward(
        &mut tape,
        state,
        &x_t,
        &sample.tokens,
        d.t,
        &Intervention::None,
        GradMode::Lora,
    )?;
    let fm_var = tape.mse(graph.output, target);
    let fm = tape.value(fm_var)[[0, 0]].as_f64();

    let hw = mc.hw();
    let grid = (mc.grid_h, mc.grid_w);
    let prob_vars = &graph.attention[cfg.expert_layer];
    let heads: Vec<Array2<f64>> = prob_vars.iter().map(|&v| tape.value(v).mapv(|x| x.as_f64())).collect();
    let gts = grid_targets(sample, grid, cfg.granularity)?;
    let mut seeds = vec![(fm_var, Mat::<T>::ones((1, 1)))];
    let mut mask = 0.0;
    if !gts.is_empty() {
        let raw = raw_candidates(&heads, hw, grid, cfg.granularity);
        let cands: Vec<Array2<f64>> = raw.iter().map(minmax).collect();
        let ml = mask_loss(&cands, &gts, cfg)?;
        mask = ml.loss;
        if cfg.lambda_mask > 0.0 {
            let nh = heads.len();
            let n = heads[0].nrows();
            let mut head_grads = vec![Array2::<f64>::zeros((n, n)); nh];
            for &(i, _) in &ml.matching.pairs {
                let g = minmax_backward(&raw[i], &ml.grads[i]);
                let flat = g.into_shape_with_order(hw).expect("grid has hw cells");
                let (token, targets): (usize, Vec<(usize, f64)>) = match cfg.granularity {
                    CandidateGranularity::Head => (i / nh, vec![(i % nh, 1.0)]),
                    CandidateGranularity::Token => (i, (0..nh).map(|h| (h, 1.0 / nh as f64)).collect()),
                };
                for (h, w) in targets {
                    let mut col = head_grads[h].slice_mut(ndarray::s![..hw, hw + token]);
                    col.scaled_add(w * cfg.lambda_mask, &flat);
                }
            }
            for (&v, g) in prob_vars.iter().zip(head_grads) {
                seeds.push((v, g.mapv(T::of)));
            }
        }
    }
    let mut grads = tape.backward(&seeds);
    Ok(SampleResult {
        fm,
        mask,
        grads: graph.lora_grads(&mut grads),
    })
}

/// LoRA fine-tuning state for [`finetune`].
pub struct MagnetTrainer<T: Real> {
    pub state: ModelState<T>,
    pub config: MagnetConfig,
    optimizer: AdamW<T>,
    step: u64,
}

impl<T: Real> MagnetTrainer<T> {
    /// Attaches fresh adapters to `state` unless it already carries some.
    pub fn new(mut state: ModelState<T>, config: MagnetConfig) -> Result<Self> {
        config.validate(state.config.num_layers)?;
        if state.lora.is_empty() {
            let adapters = state.new_adapters(&config.lora)?;
            state.apply_lora(adapters)?;
        }
        let shapes: Vec<(usize, usize)> = state.lora.iter().flat_map(|a| [a.down.dim(), a.up.dim()]).collect();
        Ok(MagnetTrainer {
            optimizer: AdamW::new(config.optimizer.clone(), shapes),
            state,
            config,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, data: &Dataset) -> Result<MagnetRecord> {
        if data.is_empty() {
            return Err(Error::Input("fine-tuning set is empty".into()));
        }
        let bs = self.config.optimizer.batch_size;
        let step = self.step;
        let seed = self.config.seed;
        let mut pick = split(seed, stream::MAGNET, &[step]);
        let batch: Vec<usize> = (0..bs)
            .map(|_| rand::Rng::random_range(&mut pick, 0..data.len()))
            .collect();
        let mc = &self.state.config;
        let shape = (mc.image_channels, mc.image_h(), mc.image_w());
        let (state, cfg) = (&self.state, &self.config);
        let results: Vec<Result<SampleResult<T>>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let d = draw(seed, stream::MAGNET, step, slot as u64 + 1, shape, 0.0);
                sample_step(state, &data.samples[i], &d, cfg)
            })
            .collect();
        let (mut fm, mut mask) = (0.0, 0.0);
        let mut parts: Vec<Vec<Option<Mat<T>>>> = Vec::with_capacity(bs);
        for r in results {
            let r = r?;
            fm += r.fm;
            mask += r.mask;
            parts.push(
                r.grads
                    .into_iter()
                    .flat_map(|g| match g {
                        Some((d, u)) => [Some(d), Some(u)],
                        None => [None, None],
                    })
                    .collect(),
            );
        }
        fm /= bs as f64;
        mask /= bs as f64;
        let total = total_loss(fm, mask, cfg.lambda_mask);
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "fine-tuning loss is not finite at step {step} (fm {fm}, mask {mask})"
            )));
        }
        let grads = crate::flow::train::average(parts);
        let mut params: Vec<&mut Mat<T>> = self
            .state
            .lora
            .iter_mut()
            .flat_map(|a| [&mut a.down, &mut a.up])
            .collect();
        self.optimizer.step(&mut params, &grads)?;
        if !self.state.all_finite() {
            return Err(Error::Numeric(format!("adapters became non-finite at step {step}")));
        }
        self.step += 1;
        Ok(MagnetRecord {
            step: self.step,
            fm,
            mask,
            total,
        })
    }
}

/// Runs `steps` fine-tuning steps and returns the adapted state.
pub fn finetune<T: Real>(
    state: ModelState<T>,
    data: &Dataset,
    config: &MagnetConfig,
    steps: u64,
) -> Result<(ModelState<T>, MagnetReport)> {
    let mut trainer = MagnetTrainer::new(state, config.clone())?;
    let mut report = MagnetReport::default();
    for _ in 0..steps {
        report.records.push(trainer.step(data)?);
    }
    Ok((trainer.state, report))
}

/// Mean of the candidate maps' mask loss over a dataset at fixed noise
/// level; used to compare checkpoints.
pub fn mean_mask_loss<T: Real>(state: &ModelState<T>, data: &Dataset, cfg: &MagnetConfig, t: f64) -> Result<f64> {
    let losses = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let trace = crate::segment::trace_at(state, &s.image, &s.tokens, t, cfg.seed, i as u64)?;
            let grid = (trace.grid_h, trace.grid_w);
            let gts = grid_targets(s, grid, cfg.granularity)?;
            if gts.is_empty() {
                return Ok(None);
            }
            let c = candidate_masks(&trace, cfg.expert_layer, cfg.granularity)?;
            Ok(Some(mask_loss(&c, &gts, cfg)?.loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let vals: Vec<f64> = losses.into_iter().flatten().collect();
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::tests::brute_force;
    use crate::model::{LayerRecord, ModelConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_pair(seed: u64, n: usize) -> (Array2<f64>, Array2<bool>) {
        let mut rng = split(seed, 31, &[]);
        let p = Array2::from_shape_simple_fn((1, n), || rng.random_range(0.05..0.95));
        let g = Array2::from_shape_simple_fn((1, n), || rng.random_bool(0.4));
        (p, g)
    }

    #[test]
    fn focal_values() {
        let one = ndarray::array![[0.5]];
        let pos = ndarray::array![[true]];
        let l = focal_loss(&one, &pos, 0.25, 2.0).unwrap();
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
        let gt = ndarray::array![[true, false, true, false]];
        let exact = gt.mapv(|b| if b { 1.0 } else { 0.0 });
        assert!(focal_loss(&exact, &gt, 0.25, 2.0).unwrap() < 1e-5);
        let (p, g) = rand_pair(3, 16);
        let bce: f64 = p
            .iter()
            .zip(g.iter())
            .map(|(&p, &g)| if g { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 16.0;
        assert!((focal_loss(&p, &g, 0.5, 0.0).unwrap() - bce / 2.0).abs() < 1e-12);
        assert!(focal_loss(&p, &ndarray::array![[true]], 0.25, 2.0).is_err());
    }

    #[test]
    fn dice_values() {
        let gt = ndarray::array![[true, true, false, false]];
        let half = Array2::from_elem((1, 4), 0.5);
        assert!((dice_loss(&half, &gt).unwrap() - 0.4).abs() < 1e-12);
        let empty = Array2::from_elem((2, 2), false);
        assert_eq!(dice_loss(&Array2::zeros((2, 2)), &empty).unwrap(), 0.0);
        let big = Array2::from_shape_fn((8, 8), |(y, _)| y < 4);
        let pred = big.mapv(|b| if b { 1.0 } else { 0.0 });
        assert!(dice_loss(&pred, &big).unwrap() < 1e-2);
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let cfg = MagnetConfig::default();
        for probe in 0..24u64 {
            let (p, g) = rand_pair(probe, 12);
            let (_, grad) = pair_loss(&p, &g, &cfg).unwrap();
            let k = (probe as usize * 5) % 12;
            let h = 1e-5;
            let mut a = p.clone();
            a[[0, k]] += h;
            let mut b = p.clone();
            b[[0, k]] -= h;
            let fd = (pair_loss(&a, &g, &cfg).unwrap().0 - pair_loss(&b, &g, &cfg).unwrap().0) / (2.0 * h);
            let rel = (fd - grad[[0, k]]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "probe {probe}: fd {fd} analytic {}", grad[[0, k]]);
        }
    }

    #[test]
    fn minmax_gradient_matches_finite_differences() {
        let mut rng = split(2, 32, &[]);
        let raw = Array2::from_shape_simple_fn((3, 4), || rng.random::<f64>());
        let gt = Array2::from_shape_fn((3, 4), |(y, x)| (y + x) % 3 == 0);
        let cfg = MagnetConfig::default();
        let f = |m: &Array2<f64>| {
            pair_loss(&minmax(m).mapv(|v| v.clamp(0.01, 0.99)), &gt, &cfg)
                .unwrap()
                .0
        };
        let (_, g) = pair_loss(&minmax(&raw).mapv(|v| v.clamp(0.01, 0.99)), &gt, &cfg).unwrap();
        let cm = minmax(&raw);
        let g = Array2::from_shape_fn(g.dim(), |ix| if cm[ix] > 0.01 && cm[ix] < 0.99 { g[ix] } else { 0.0 });
        let back = minmax_backward(&raw, &g);
        for k in 0..12 {
            let (y, x) = (k / 4, k % 4);
            let h = 1e-6;
            let mut a = raw.clone();
            a[[y, x]] += h;
            let mut b = raw.clone();
            b[[y, x]] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!(
                (fd - back[[y, x]]).abs() < 1e-4 * fd.abs().max(1.0),
                "{k}: {fd} vs {}",
                back[[y, x]]
            );
        }
    }

    #[test]
    fn candidate_counts_and_normalization() {
        let (hw, l, nh) = (4, 4, 4);
        let heads: Vec<Array2<f64>> = (0..nh)
            .map(|h| Array2::from_shape_fn((hw + l, hw + l), |(i, j)| ((i * 3 + j * 5 + h) % 7) as f64 / 7.0))
            .collect();
        let tr = AttentionTrace {
            grid_h: 2,
            grid_w: 2,
            text_len: l,
            layers: vec![LayerRecord {
                heads,
                i2t_logits: None,
                values: None,
            }],
            pad_mask: vec![false; l],
        };
        let c = candidate_masks(&tr, 0, CandidateGranularity::Head).unwrap();
        assert_eq!(c.len(), 16);
        assert_eq!(candidate_masks(&tr, 0, CandidateGranularity::Token).unwrap().len(), 4);
        assert!(candidate_masks(&tr, 1, CandidateGranularity::Head).is_err());
        assert_eq!(minmax(&Array2::from_elem((2, 2), 0.3)), Array2::<f64>::zeros((2, 2)));
        assert_eq!(minmax(&ndarray::array![[0.1, 0.3]]), ndarray::array![[0.0, 1.0]]);
    }

    #[test]
    fn mask_loss_matching() {
        let cfg = MagnetConfig::default();
        let g1 = Array2::from_shape_fn((4, 4), |(y, _)| y < 2);
        let g2 = Array2::from_shape_fn((4, 4), |(_, x)| x == 3);
        let f = |m: &Array2<bool>| m.mapv(|b| if b { 1.0 } else { 0.0 });
        let noise = Array2::from_shape_fn((4, 4), |(y, x)| ((y * 4 + x) % 5) as f64 / 5.0);
        let cands = vec![noise.clone(), f(&g2), f(&g1)];
        let ml = mask_loss(&cands, &[g1.clone(), g2.clone()], &cfg).unwrap();
        assert!(ml.loss < 0.05);
        assert_eq!(ml.matching.pairs, vec![(1, 1), (2, 0)]);
        assert!(ml.grads[0].iter().all(|&v| v == 0.0));

        let single = mask_loss(std::slice::from_ref(&noise), std::slice::from_ref(&g1), &cfg).unwrap();
        let direct = cfg.lambda_focal * focal_loss(&noise, &g1, 0.25, 2.0).unwrap()
            + cfg.lambda_dice * dice_loss(&noise, &g1).unwrap();
        assert!((single.loss - direct).abs() < 1e-12);

        let cands = vec![noise.clone(), noise.mapv(|v| 1.0 - v), Array2::from_elem((4, 4), 0.4)];
        let gts = [g1.clone(), g2.clone()];
        let cost: Vec<Vec<f64>> = cands
            .iter()
            .map(|c| gts.iter().map(|g| pair_loss(c, g, &cfg).unwrap().0).collect())
            .collect();
        let ml = mask_loss(&cands, &gts, &cfg).unwrap();
        let bf = brute_force(&cost);
        assert!((ml.loss * 2.0 - bf.total_cost).abs() < 1e-9);
        assert!(mask_loss(&cands, &[], &cfg).is_err());
    }

    #[test]
    fn total_loss_is_linear() {
        assert_eq!(total_loss(0.5, 0.2, 0.5), 0.6);
        assert_eq!(total_loss(0.123, 9.0, 0.0).to_bits(), 0.123f64.to_bits());
        let a = total_loss(1.0, 0.1, 2.0) - total_loss(1.0, 0.0, 2.0);
        let b = total_loss(1.0, 0.2, 2.0) - total_loss(1.0, 0.1, 2.0);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn grid_downsampling() {
        let m = Array2::from_shape_fn((4, 4), |(y, x)| y < 2 && x < 3);
        let g = grid_mask(&m, (2, 2)).unwrap();
        assert_eq!(g, ndarray::array![[true, true], [false, false]]);
        assert!(grid_mask(&m, (3, 3)).is_err());
    }

    fn tiny_setup() -> (ModelState<f64>, Dataset) {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            head_dim: 8,
            grid_h: 8,
            grid_w: 8,
            text_len: 8,
            vocab_size: 8,
            patch_size: 2,
            ..ModelConfig::default()
        };
        let data = crate::data::gen_shapes(&crate::data::ShapesConfig {
            image_size: 16,
            min_shapes: 1,
            max_shapes: 1,
            num_samples: 6,
            text_len: 8,
            ..Default::default()
        });
        (ModelState::init(&cfg, 1).unwrap(), data.unwrap())
    }

    #[test]
    fn zero_steps_and_determinism() {
        let (state, data) = tiny_setup();
        let cfg = MagnetConfig {
            expert_layer: 1,
            lora: LoraSpec {
                rank: 2,
                ..LoraSpec::default()
            },
            ..MagnetConfig::default()
        };
        let (s0, r0) = finetune(state.clone(), &data, &cfg, 0).unwrap();
        assert!(r0.records.is_empty());
        assert_eq!(s0.params, state.params);
        assert!(s0.lora.iter().all(|a| a.up.iter().all(|&v| v == 0.0)));
        let (a, ra) = finetune(state.clone(), &data, &cfg, 3).unwrap();
        let (b, rb) = finetune(state.clone(), &data, &cfg, 3).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.lora, b.lora);
        assert_eq!(a.params, state.params);
        assert!(a.lora.iter().any(|x| x.up.iter().any(|&v| v != 0.0)));
        let bad = MagnetConfig { expert_layer: 2, ..cfg };
        assert!(finetune(state, &data, &bad, 1).is_err());
    }

    #[test]
    fn lambda_zero_still_logs_mask_loss() {
        let (state, data) = tiny_setup();
        let cfg = MagnetConfig {
            lambda_mask: 0.0,
            lora: LoraSpec {
                rank: 2,
                ..LoraSpec::default()
            },
            ..MagnetConfig::default()
        };
        let (_, r) = finetune(state, &data, &cfg, 2).unwrap();
        for rec in &r.records {
            assert!(rec.mask > 0.0);
            assert_eq!(rec.total, rec.fm);
        }
    }

    /// Finite differences of the full mask objective through the network,
    /// w.r.t. one LoRA `up` entry.
    #[test]
    fn lora_gradient_of_mask_loss() {
        let (mut state, data) = tiny_setup();
        let mut adapters = state
            .new_adapters(&LoraSpec {
                rank: 2,
                ..LoraSpec::default()
            })
            .unwrap();
        let mut rng = split(4, 33, &[]);
        for a in adapters.iter_mut() {
            a.up.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        state.apply_lora(adapters).unwrap();
        let cfg = MagnetConfig {
            expert_layer: 1,
            lambda_mask: 1.0,
            ..MagnetConfig::default()
        };
        let shape = (3, 16, 16);
        let d: Draw<f64> = draw(0, stream::MAGNET, 0, 1, shape, 0.0);
        let objective = |st: &ModelState<f64>| {
            let r = sample_step(st, &data.samples[0], &d, &cfg).unwrap();
            total_loss(r.fm, r.mask, cfg.lambda_mask)
        };
        let r = sample_step(&state, &data.samples[0], &d, &cfg).unwrap();
        let mut checked = 0;
        for (ai, a) in [(4usize, 0usize), (5, 1), (6, 2), (12, 3)] {
            let (gd, gu) = r.grads[ai].clone().unwrap();
            let _ = gd;
            let (i, j) = (a % 2, a);
            let h = 1e-6;
            let mut p = state.clone();
            p.lora[ai].up[[i, j]] += h;
            let mut m = state.clone();
            m.lora[ai].up[[i, j]] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            let an = gu[[i, j]];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(1e-3),
                "adapter {ai}: fd {fd} analytic {an}"
            );
            checked += 1;
        }
        assert_eq!(checked, 4);
    }

    proptest! {
        #[test]
        fn mask_loss_permutation_invariant(seed in 0u64..300) {
            let cfg = MagnetConfig::default();
            let mut rng = split(seed, 34, &[]);
            let cands: Vec<Array2<f64>> = (0..4).map(|_| Array2::from_shape_simple_fn((3, 3), || rng.random::<f64>())).collect();
            let gts: Vec<Array2<bool>> = (0..3).map(|_| Array2::from_shape_simple_fn((3, 3), || rng.random_bool(0.5))).collect();
            let base = mask_loss(&cands, &gts, &cfg).unwrap().loss;
            let rc: Vec<_> = cands.iter().rev().cloned().collect();
            let rg: Vec<_> = [gts[2].clone(), gts[0].clone(), gts[1].clone()].to_vec();
            let perm = mask_loss(&rc, &rg, &cfg).unwrap().loss;
            prop_assert!((base - perm).abs() < 1e-9);
        }
    }
}
