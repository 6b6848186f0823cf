//! Rectified flow: interpolation, the flow-matching objective, guided Euler
//! sampling, and training.
//!
//! Time runs from data (`t = 0`) to noise (`t = 1`). Sampling integrates the
//! predicted velocity backwards from pure noise.

mod optim;
pub(crate) mod train;

pub use optim::{AdamW, OptimizerConfig};
pub use train::{fm_validation_loss, train_epoch, write_loss_csv, LossRecord, LossReport, TrainExample, Trainer};

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{model_forward, Intervention, Latent, ModelState};
use crate::real::Real;
use crate::rng::{normal_vec, split, stream};

fn same_shape<T: Real>(a: &Latent<T>, b: &Latent<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `x_t = (1 − t)·x0 + t·eps`.
pub fn interpolate<T: Real>(x0: &Latent<T>, eps: &Latent<T>, t: f64) -> Result<Latent<T>> {
    same_shape(x0, eps, "interpolate")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("timestep {t} outside [0, 1]")));
    }
    let (a, b) = (T::of(1.0 - t), T::of(t));
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// The constant velocity `eps − x0` of the straight path.
pub fn target_velocity<T: Real>(x0: &Latent<T>, eps: &Latent<T>) -> Result<Latent<T>> {
    same_shape(x0, eps, "target_velocity")?;
    Ok(eps - x0)
}

/// Mean squared error between `eps − x0` and the prediction.
pub fn fm_loss<T: Real>(v_pred: &Latent<T>, x0: &Latent<T>, eps: &Latent<T>) -> Result<f64> {
    same_shape(v_pred, x0, "fm_loss")?;
    same_shape(x0, eps, "fm_loss")?;
    let n = v_pred.len().max(1) as f64;
    let mut acc = 0.0;
    Zip::from(v_pred).and(x0).and(eps).for_each(|&v, &x, &e| {
        let d = (e - x).as_f64() - v.as_f64();
        acc += d * d;
    });
    Ok(acc / n)
}

/// Classifier-free guidance `v_u + w·(v_c − v_u)`.
pub fn cfg_combine<T: Real>(v_cond: &Latent<T>, v_uncond: &Latent<T>, scale: f64) -> Result<Latent<T>> {
    same_shape(v_cond, v_uncond, "cfg_combine")?;
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    let w = T::of(scale);
    Ok(Zip::from(v_cond).and(v_uncond).map_collect(|&c, &u| u + w * (c - u)))
}

/// Steers away from the perturbed prediction: `v_std + s·(v_std − v_pert)`.
pub fn perturbation_guided_velocity<T: Real>(v_std: &Latent<T>, v_pert: &Latent<T>, s: f64) -> Result<Latent<T>> {
    same_shape(v_std, v_pert, "perturbation_guided_velocity")?;
    if s.is_nan() || s < 0.0 {
        return Err(Error::Input(format!("guidance scale must be non-negative, got {s}")));
    }
    let s = T::of(s);
    Ok(Zip::from(v_std).and(v_pert).map_collect(|&a, &p| a + s * (a - p)))
}

/// Where perturbation guidance sits relative to classifier-free guidance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceOrder {
    /// Guide the CFG-combined velocity against the CFG-combined perturbed one.
    #[default]
    AfterCfg,
    /// Guide the conditional velocity, then apply CFG.
    BeforeCfg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub cfg_scale: f64,
    /// Perturbation guidance strength. With `0`, the intervention (if any)
    /// is applied directly to the conditional branch instead.
    pub guidance_scale: f64,
    pub intervention: Intervention,
    pub guidance_order: GuidanceOrder,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 28,
            cfg_scale: 7.5,
            guidance_scale: 0.0,
            intervention: Intervention::None,
            guidance_order: GuidanceOrder::AfterCfg,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(Error::Config(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!(
                "guidance_scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        self.intervention.validate()
    }
}

/// Standard normal latent for `(seed, counters)`.
pub fn gaussian_latent<T: Real>(
    shape: (usize, usize, usize),
    rng_seed: u64,
    namespace: u64,
    counters: &[u64],
) -> Latent<T> {
    let mut rng = split(rng_seed, namespace, counters);
    let n = shape.0 * shape.1 * shape.2;
    Array3::from_shape_vec(shape, normal_vec(&mut rng, n).into_iter().map(T::of).collect())
        .expect("shape matches length")
}

/// Velocity used for one Euler step, combining CFG and the intervention.
pub fn guided_velocity<T: Real>(
    state: &ModelState<T>,
    x: &Latent<T>,
    tokens: &[usize],
    t: f64,
    cfg: &SamplerConfig,
) -> Result<Latent<T>> {
    let null = state.config.null_prompt();
    let none = Intervention::None;
    let guiding = cfg.guidance_scale > 0.0 && cfg.intervention != Intervention::None;
    let direct = if guiding { &none } else { &cfg.intervention };
    let v_c = model_forward(state, x, tokens, t, false, direct)?.velocity;
    // At scale 1 the unconditional branch drops out entirely.
    let needs_uncond = cfg.cfg_scale != 1.0;
    let v_u = if needs_uncond {
        model_forward(state, x, &null, t, false, &none)?.velocity
    } else {
        v_c.clone()
    };
    if !guiding {
        return cfg_combine(&v_c, &v_u, cfg.cfg_scale);
    }
    let v_p = model_forward(state, x, tokens, t, false, &cfg.intervention)?.velocity;
    match cfg.guidance_order {
        GuidanceOrder::AfterCfg => {
            let std = cfg_combine(&v_c, &v_u, cfg.cfg_scale)?;
            let pert = cfg_combine(&v_p, &v_u, cfg.cfg_scale)?;
            perturbation_guided_velocity(&std, &pert, cfg.guidance_scale)
        }
        GuidanceOrder::BeforeCfg => {
            let guided = perturbation_guided_velocity(&v_c, &v_p, cfg.guidance_scale)?;
            cfg_combine(&guided, &v_u, cfg.cfg_scale)
        }
    }
}

/// Integrates from `x_1 ~ N(0, I)` to `t = 0` on a uniform grid.
pub fn euler_sample<T: Real>(state: &ModelState<T>, tokens: &[usize], cfg: &SamplerConfig) -> Result<Latent<T>> {
    cfg.validate()?;
    let mc = &state.config;
    let shape = (mc.image_channels, mc.image_h(), mc.image_w());
    let x = gaussian_latent(shape, cfg.seed, stream::SAMPLE, &[]);
    euler_from(state, x, tokens, cfg)
}

/// Euler integration from a given starting latent at `t = 1`.
pub fn euler_from<T: Real>(
    state: &ModelState<T>,
    mut x: Latent<T>,
    tokens: &[usize],
    cfg: &SamplerConfig,
) -> Result<Latent<T>> {
    cfg.validate()?;
    let n = cfg.num_steps;
    let dt = 1.0 / n as f64;
    for i in 0..n {
        let t = 1.0 - i as f64 / n as f64;
        let v = guided_velocity(state, &x, tokens, t, cfg)?;
        euler_step(&mut x, &v, dt)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sampler diverged at step {i} (t = {t})")));
        }
    }
    Ok(x)
}

/// `x ← x − dt·v`: one step from `t` toward `t − dt`.
pub fn euler_step<T: Real>(x: &mut Latent<T>, v: &Latent<T>, dt: f64) -> Result<()> {
    same_shape(x, v, "euler_step")?;
    let dt = T::of(dt);
    Zip::from(x).and(v).for_each(|x, &v| *x -= dt * v);
    Ok(())
}

/// Maps an image in `[0, 1]` to the model's latent range `[-1, 1]`.
pub fn image_to_latent<T: Real>(image: &Array3<f32>) -> Latent<T> {
    image.mapv(|v| T::of(2.0 * v as f64 - 1.0))
}

/// Inverse of [`image_to_latent`], clamped to `[0, 1]`.
pub fn latent_to_image<T: Real>(latent: &Latent<T>) -> Array3<f32> {
    latent.mapv(|v| ((v.as_f64() + 1.0) / 2.0).clamp(0.0, 1.0) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::perturb::BlurSpec;

    fn lat(seed: u64) -> Latent<f64> {
        gaussian_latent((3, 4, 4), seed, 99, &[])
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let (x0, eps) = (lat(1), lat(2));
        assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), eps);
        assert_eq!(
            interpolate(&x0, &x0, 0.37).unwrap(),
            x0.mapv(|v| (1.0 - 0.37) * v + 0.37 * v)
        );
        assert!(interpolate(&x0, &eps, 1.1).is_err());
        assert!(interpolate(&x0, &Array3::zeros((3, 4, 5)), 0.5).is_err());
    }

    #[test]
    fn velocity_identities() {
        let (x0, eps) = (lat(1), lat(2));
        let u = target_velocity(&x0, &eps).unwrap();
        let neg = target_velocity(&eps, &x0).unwrap();
        assert_eq!(u, -neg);
        assert!(target_velocity(&x0, &x0).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(target_velocity(&Array3::zeros((3, 4, 4)), &eps).unwrap(), eps);
        // the path derivative is the target velocity
        let h = 1e-3;
        let d = (interpolate(&x0, &eps, 0.5 + h).unwrap() - interpolate(&x0, &eps, 0.5 - h).unwrap()) / (2.0 * h);
        assert!((&d - &u).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn loss_values() {
        let (x0, eps) = (lat(1), lat(2));
        let u = target_velocity(&x0, &eps).unwrap();
        assert_eq!(fm_loss(&u, &x0, &eps).unwrap(), 0.0);
        let off = fm_loss(&(&u + 0.5), &x0, &eps).unwrap();
        assert!((off - 0.25).abs() < 1e-12);
        let v = Array3::from_shape_vec((1, 2, 2), vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let a = Array3::from_shape_vec((1, 2, 2), vec![1.0, 0.5, -0.25, 0.0]).unwrap();
        let b = Array3::from_shape_vec((1, 2, 2), vec![-0.7, 0.2, 1.5, 3.0]).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            let d = (b.as_slice().unwrap()[i] - a.as_slice().unwrap()[i]) - v.as_slice().unwrap()[i];
            want += d * d;
        }
        assert!((fm_loss(&v, &a, &b).unwrap() - want / 4.0).abs() < 1e-12);
    }

    #[test]
    fn euler_step_with_true_velocity_stays_on_path() {
        // dyadic values keep every product exact
        let x0 = Array3::from_shape_fn((2, 2, 2), |(c, i, j)| {
            (c as f64 - i as f64 * 0.5 + j as f64 * 0.25) / 4.0
        });
        let eps = Array3::from_shape_fn((2, 2, 2), |(c, i, j)| (i as f64 * 0.75 - c as f64 + j as f64) / 8.0);
        let u = target_velocity(&x0, &eps).unwrap();
        let (t, dt) = (0.75, 0.25);
        let x_t = interpolate(&x0, &eps, t).unwrap();
        let mut stepped = x_t.clone();
        euler_step(&mut stepped, &u, dt).unwrap();
        assert_eq!(stepped, interpolate(&x0, &eps, t - dt).unwrap());
    }

    #[test]
    fn guidance_identities() {
        let (a, b) = (lat(3), lat(4));
        assert_eq!(cfg_combine(&a, &b, 1.0).unwrap(), a);
        assert_eq!(cfg_combine(&a, &b, 0.0).unwrap(), b);
        assert_eq!(cfg_combine(&a, &a, 7.5).unwrap(), a);
        assert_eq!(perturbation_guided_velocity(&a, &b, 0.0).unwrap(), a);
        assert_eq!(perturbation_guided_velocity(&a, &a, 3.0).unwrap(), a);
        let two = perturbation_guided_velocity(&a, &b, 1.0).unwrap();
        assert!((&two - &(&a * 2.0 - &b)).iter().all(|v| v.abs() < 1e-12));
        assert!(perturbation_guided_velocity(&a, &b, -1.0).is_err());
    }

    fn tiny_state() -> ModelState<f64> {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            head_dim: 4,
            grid_h: 2,
            grid_w: 2,
            text_len: 4,
            vocab_size: 8,
            patch_size: 2,
            image_channels: 3,
            mlp_ratio: 2,
            seed: 0,
        };
        ModelState::init(&cfg, 3).unwrap()
    }

    #[test]
    fn sampler_is_deterministic_and_validates() {
        let st = tiny_state();
        let cfg = SamplerConfig {
            num_steps: 4,
            seed: 5,
            ..SamplerConfig::default()
        };
        let a = euler_sample(&st, &[0, 4, 1, 2], &cfg).unwrap();
        let b = euler_sample(&st, &[0, 4, 1, 2], &cfg).unwrap();
        assert_eq!(a, b);
        let zero = SamplerConfig {
            num_steps: 0,
            ..cfg.clone()
        };
        assert!(matches!(euler_sample(&st, &[0, 4, 1, 2], &zero), Err(Error::Config(_))));
    }

    #[test]
    fn zero_cfg_ignores_content() {
        let st = tiny_state();
        let cfg = SamplerConfig {
            num_steps: 3,
            cfg_scale: 0.0,
            seed: 1,
            ..SamplerConfig::default()
        };
        let a = euler_sample(&st, &[0, 4, 1, 2], &cfg).unwrap();
        let b = euler_sample(&st, &[0, 6, 5, 1], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_guidance_is_a_no_op() {
        let st = tiny_state();
        let base = SamplerConfig {
            num_steps: 3,
            seed: 1,
            ..SamplerConfig::default()
        };
        let guided = SamplerConfig {
            guidance_scale: 2.0,
            intervention: Intervention::blur([], BlurSpec::default()),
            ..base.clone()
        };
        let a = euler_sample(&st, &[0, 4, 1, 2], &base).unwrap();
        let b = euler_sample(&st, &[0, 4, 1, 2], &guided).unwrap();
        assert_eq!(a, b);
        let real = SamplerConfig {
            intervention: Intervention::blur(
                [0, 1],
                BlurSpec {
                    sigma: 2.0,
                    kernel_size: 3,
                },
            ),
            ..guided
        };
        assert_ne!(a, euler_sample(&st, &[0, 4, 1, 2], &real).unwrap());
    }

    #[test]
    fn image_latent_round_trip() {
        let img = Array3::from_shape_fn((3, 2, 2), |(c, i, j)| (c + i + j) as f32 / 8.0);
        let back = latent_to_image(&image_to_latent::<f64>(&img));
        assert!((&back - &img).iter().all(|v| v.abs() < 1e-6));
    }
}
