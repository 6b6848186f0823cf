use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    /// Probability of replacing the prompt by the null prompt during training.
    pub cond_dropout: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            grad_clip: Some(1.0),
            batch_size: 8,
            cond_dropout: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && (0.0..=1.0).contains(&self.cond_dropout)
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }

    /// Learning rate at (1-based) step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: OptimizerConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let m: Vec<Mat<T>> = shapes.into_iter().map(Mat::zeros).collect();
        let v = m.clone();
        AdamW { config, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut [&mut Mat<T>], grads: &[Option<Mat<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Input(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let clip = match c.grad_clip {
            Some(max) => {
                let norm = global_norm(grads);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let decay = T::of(1.0 - lr * c.weight_decay);
        let eps = T::of(c.eps);
        let clip = T::of(clip);
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if let Some(g) = &grads[i] {
                ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                    let g = g * clip;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                });
            } else {
                m.mapv_inplace(|x| x * b1);
                v.mapv_inplace(|x| x * b2);
            }
            ndarray::Zip::from(&mut **p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p = *p * decay - step_size * m / ((v * inv_bc2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

pub(crate) fn global_norm<T: Real>(grads: &[Option<Mat<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_learning_rate_leaves_params() {
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        };
        let mut p = array![[1.0f64, -2.0]];
        let before = p.clone();
        let mut opt = AdamW::new(cfg, [(1, 2)]);
        opt.step(&mut [&mut p], &[Some(array![[0.5, 0.5]])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            warmup_steps: 0,
            grad_clip: None,
            ..OptimizerConfig::default()
        };
        let mut p = array![[2.0f64]];
        let mut opt = AdamW::new(cfg, [(1, 1)]);
        opt.step(&mut [&mut p], &[Some(array![[3.0]])]).unwrap();
        // m̂ = g, v̂ = g², update = g / (|g| + eps)
        let want = 2.0 * (1.0 - 0.1 * 0.5) - 0.1 * 3.0 / (3.0 + 1e-8);
        assert!((p[[0, 0]] - want).abs() < 1e-12);
    }

    #[test]
    fn clipping_rescales_gradients() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            warmup_steps: 0,
            grad_clip: Some(1.0),
            eps: 1e-30,
            ..OptimizerConfig::default()
        };
        let mut a = array![[0.0f64]];
        let mut b = array![[0.0f64]];
        let mut opt = AdamW::new(cfg.clone(), [(1, 1)]);
        opt.step(&mut [&mut a], &[Some(array![[30.0]])]).unwrap();
        let mut opt2 = AdamW::new(cfg, [(1, 1)]);
        opt2.step(&mut [&mut b], &[Some(array![[0.5]])]).unwrap();
        // Adam's first step is scale-invariant, so both move by -lr
        assert!((a[[0, 0]] + 0.1).abs() < 1e-9 && (b[[0, 0]] + 0.1).abs() < 1e-9);
        assert!((global_norm(&[Some(array![[3.0f64, 4.0]])]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = OptimizerConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..OptimizerConfig::default()
        };
        assert_eq!(cfg.lr_at(1), 0.25);
        assert_eq!(cfg.lr_at(4), 1.0);
        assert_eq!(cfg.lr_at(40), 1.0);
    }
}
