use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gaussian_latent, interpolate, target_velocity, AdamW, OptimizerConfig};
use crate::autodiff::{Mat, Tape};
use crate::error::{Error, Result};
use crate::model::{build_forward, patchify, GradMode, Intervention, Latent, ModelState};
use crate::real::Real;
use crate::rng::{split, stream};

/// One training pair: a clean latent and its prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample<T: Real> {
    pub latent: Latent<T>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub records: Vec<LossRecord>,
}

impl LossReport {
    pub fn last(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Mean loss over the first/last `k` records.
    pub fn head_mean(&self, k: usize) -> f64 {
        mean(self.records.iter().take(k).map(|r| r.loss))
    }

    pub fn tail_mean(&self, k: usize) -> f64 {
        mean(self.records.iter().rev().take(k).map(|r| r.loss))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Writes `step,loss,lr` rows.
pub fn write_loss_csv(path: &Path, report: &LossReport) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "step,loss,lr").expect("write to vec");
    for r in &report.records {
        writeln!(buf, "{},{},{}", r.step, r.loss, r.lr).expect("write to vec");
    }
    crate::io::write_atomic(path, &buf)
}

/// Per-sample randomness of one training step.
pub(crate) struct Draw<T: Real> {
    pub t: f64,
    pub eps: Latent<T>,
    pub drop_prompt: bool,
}

pub(crate) fn draw<T: Real>(
    seed: u64,
    namespace: u64,
    step: u64,
    slot: u64,
    shape: (usize, usize, usize),
    dropout: f64,
) -> Draw<T> {
    let mut rng = split(seed, namespace, &[step, slot]);
    let t: f64 = rng.random();
    let drop_prompt = dropout > 0.0 && rng.random::<f64>() < dropout;
    let eps = gaussian_latent(shape, seed, namespace, &[step, slot, 1]);
    Draw { t, eps, drop_prompt }
}

/// Gradients for one example under the flow-matching loss.
pub(crate) fn fm_sample_grads<T: Real>(
    state: &ModelState<T>,
    ex: &TrainExample<T>,
    d: &Draw<T>,
) -> Result<(f64, Vec<Option<Mat<T>>>)> {
    let x_t = interpolate(&ex.latent, &d.eps, d.t)?;
    let target = patchify(&target_velocity(&ex.latent, &d.eps)?, &state.config)?;
    let null;
    let tokens = if d.drop_prompt {
        null = state.config.null_prompt();
        &null
    } else {
        &ex.tokens
    };
    let mut tape = Tape::new();
    let g = build_forward(&mut tape, state, &x_t, tokens, d.t, &Intervention::None, GradMode::Base)?;
    let loss = tape.mse(g.output, target);
    let value = tape.value(loss)[[0, 0]].as_f64();
    let mut grads = tape.backward(&[(loss, Array2::ones((1, 1)))]);
    Ok((value, g.param_grads(&mut grads)))
}

/// Averages per-sample gradient lists in a fixed order.
pub(crate) fn average<T: Real>(parts: Vec<Vec<Option<Mat<T>>>>) -> Vec<Option<Mat<T>>> {
    let n = parts.len();
    let mut it = parts.into_iter();
    let Some(mut acc) = it.next() else { return Vec::new() };
    for part in it {
        for (a, g) in acc.iter_mut().zip(part) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => *a += &g,
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    let inv = T::of(1.0 / n as f64);
    for g in acc.iter_mut().flatten() {
        g.mapv_inplace(|x| x * inv);
    }
    acc
}

/// Stateful trainer: parameters, AdamW moments, and a shuffled data cursor.
pub struct Trainer<T: Real> {
    pub state: ModelState<T>,
    pub optimizer: AdamW<T>,
    pub seed: u64,
    step: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(state: ModelState<T>, config: OptimizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<_> = state.params.tensors().iter().map(|m| m.dim()).collect();
        Ok(Trainer {
            optimizer: AdamW::new(config, shapes),
            state,
            seed,
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn next_batch(&mut self, len: usize) -> Vec<usize> {
        let bs = self.optimizer.config.batch_size;
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if self.cursor >= self.order.len() {
                self.order = (0..len).collect();
                self.order
                    .shuffle(&mut split(self.seed, stream::SHUFFLE, &[self.epoch]));
                self.epoch += 1;
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer step on the next batch; returns the mean batch loss.
    pub fn step(&mut self, data: &[TrainExample<T>]) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let batch = self.next_batch(data.len());
        let step = self.step;
        let cfg = &self.state.config;
        let shape = (cfg.image_channels, cfg.image_h(), cfg.image_w());
        let dropout = self.optimizer.config.cond_dropout;
        let (seed, state) = (self.seed, &self.state);
        let results: Vec<Result<(f64, Vec<Option<Mat<T>>>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let d = draw(seed, stream::TRAIN, step, slot as u64, shape, dropout);
                fm_sample_grads(state, &data[i], &d)
            })
            .collect();
        let mut loss = 0.0;
        let mut parts = Vec::with_capacity(results.len());
        for r in results {
            let (l, g) = r?;
            loss += l;
            parts.push(g);
        }
        loss /= batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("flow-matching loss is {loss} at step {step}")));
        }
        let grads = average(parts);
        let mut params: Vec<&mut Mat<T>> = self.state.params.tensors_mut().iter_mut().collect();
        self.optimizer.step(&mut params, &grads)?;
        if !self.state.all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite at step {step}")));
        }
        self.step += 1;
        Ok(LossRecord {
            step: self.step,
            loss,
            lr: self.optimizer.config.lr_at(self.step),
        })
    }

    pub fn train_steps(&mut self, data: &[TrainExample<T>], n: u64, report: &mut LossReport) -> Result<()> {
        for _ in 0..n {
            let r = self.step(data)?;
            report.records.push(r);
        }
        Ok(())
    }
}

/// One pass over the data (`⌈n / batch⌉` optimizer steps).
pub fn train_epoch<T: Real>(trainer: &mut Trainer<T>, data: &[TrainExample<T>]) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let bs = trainer.optimizer.config.batch_size;
    let mut report = LossReport::default();
    trainer.train_steps(data, data.len().div_ceil(bs) as u64, &mut report)?;
    Ok(report)
}

/// Flow-matching loss on fixed per-example `(t, eps)` draws.
pub fn fm_validation_loss<T: Real>(state: &ModelState<T>, data: &[TrainExample<T>], seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    let cfg = &state.config;
    let shape = (cfg.image_channels, cfg.image_h(), cfg.image_w());
    let losses: Vec<Result<f64>> = data
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let d: Draw<T> = draw(seed, stream::VALID, 0, i as u64, shape, 0.0);
            let x_t = interpolate(&ex.latent, &d.eps, d.t)?;
            let v = crate::model::model_forward(state, &x_t, &ex.tokens, d.t, false, &Intervention::None)?;
            super::fm_loss(&v.velocity, &ex.latent, &d.eps)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}
