//! Gaussian blur of image-to-text attention along the text-token axis.
//!
//! The blur acts on post-softmax probabilities. Each image-token row of the
//! I2T block is convolved with a normalized 1-D Gaussian using reflective
//! boundaries, so the attention mass a row assigns to text is unchanged.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::reflect_index;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurSpec {
    pub sigma: f64,
    pub kernel_size: usize,
}

impl Default for BlurSpec {
    fn default() -> Self {
        BlurSpec {
            sigma: 9.0,
            kernel_size: 5,
        }
    }
}

impl BlurSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Input(format!(
                "blur kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::Input(format!("blur sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<Vec<f64>> {
        gaussian_kernel_1d(self.sigma, self.kernel_size)
    }
}

/// Normalized weights `∝ exp(−x² / 2σ²)` at offsets `−(k−1)/2 ..= (k−1)/2`.
pub fn gaussian_kernel_1d(sigma: f64, k: usize) -> Result<Vec<f64>> {
    BlurSpec { sigma, kernel_size: k }.validate()?;
    let r = (k / 2) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Blurs every row of an `hw × l` I2T block along the text dimension.
pub fn blur_i2t(block: &Array2<f64>, spec: &BlurSpec) -> Result<Array2<f64>> {
    let l = block.ncols();
    if l < 1 {
        return Err(Error::Input("I2T block has no text columns".into()));
    }
    let kernel = spec.kernel()?;
    let r = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros(block.dim());
    for (src, mut dst) in block.rows().into_iter().zip(out.rows_mut()) {
        for j in 0..l {
            dst[j] = kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| w * src[reflect_index(j as isize + k as isize - r, l)])
                .sum();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Independent reference: materialize the edge-repeating mirror padding,
    /// then slide the kernel over the padded row.
    fn padded_convolution(row: &[f64], kernel: &[f64]) -> Vec<f64> {
        fn mirror(mut idx: isize, n: isize) -> usize {
            loop {
                if idx < 0 {
                    idx = -idx - 1;
                } else if idx >= n {
                    idx = 2 * n - idx - 1;
                } else {
                    return idx as usize;
                }
            }
        }
        let r = (kernel.len() / 2) as isize;
        let n = row.len() as isize;
        let padded: Vec<f64> = (-r..n + r).map(|p| row[mirror(p, n)]).collect();
        (0..row.len())
            .map(|j| (0..kernel.len()).map(|k| kernel[k] * padded[j + k]).sum())
            .collect()
    }

    #[test]
    fn unit_kernel() {
        assert_eq!(gaussian_kernel_1d(3.0, 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn sigma_nine_kernel_five() {
        // exp(-x²/162) at x = -2..2, normalized
        let raw: Vec<f64> = (-2i32..=2).map(|x| (-(x * x) as f64 / 162.0).exp()).collect();
        let s: f64 = raw.iter().sum();
        let k = gaussian_kernel_1d(9.0, 5).unwrap();
        let expected = [0.19754, 0.20123, 0.20247, 0.20123, 0.19754];
        for i in 0..5 {
            assert!((k[i] - expected[i]).abs() < 1e-5);
            assert!((k[i] - raw[i] / s).abs() < 1e-15);
        }
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_sigma_is_uniform() {
        let k = gaussian_kernel_1d(f64::INFINITY, 7).unwrap();
        assert!(k.iter().all(|&w| (w - 1.0 / 7.0).abs() < 1e-15));
        let wide = gaussian_kernel_1d(1e9, 3).unwrap();
        assert!(wide.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn invalid_specs() {
        assert!(gaussian_kernel_1d(1.0, 4).is_err());
        assert!(gaussian_kernel_1d(0.0, 3).is_err());
        assert!(blur_i2t(&Array2::zeros((3, 0)), &BlurSpec::default()).is_err());
    }

    #[test]
    fn impulse_row_matches_padded_reference() {
        let spec = BlurSpec::default();
        let row = [1.0, 0.0, 0.0, 0.0, 0.0];
        let out = blur_i2t(&array![[1.0, 0.0, 0.0, 0.0, 0.0]], &spec).unwrap();
        let reference = padded_convolution(&row, &spec.kernel().unwrap());
        for j in 0..5 {
            assert!((out[[0, j]] - reference[j]).abs() < 1e-9);
        }
        assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_row_unchanged() {
        let b = Array2::from_elem((2, 6), 0.25);
        let out = blur_i2t(&b, &BlurSpec::default()).unwrap();
        for v in out.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn double_blur_differs_from_single() {
        let spec = BlurSpec {
            sigma: 1.0,
            kernel_size: 3,
        };
        let b = array![[0.7, 0.1, 0.05, 0.15]];
        let once = blur_i2t(&b, &spec).unwrap();
        let twice = blur_i2t(&once, &spec).unwrap();
        let diff: f64 = (&once - &twice).mapv(f64::abs).sum();
        assert!(diff > 1e-6);
    }

    proptest! {
        #[test]
        fn mass_is_preserved(
            raw in proptest::collection::vec(0.0f64..1.0, 1..40),
            sigma in 0.3f64..20.0,
            half in 0usize..4,
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-3;
            let row: Vec<f64> = raw.iter().map(|v| (v + 1e-3 / raw.len() as f64) / total).collect();
            let spec = BlurSpec { sigma, kernel_size: 2 * half + 1 };
            let b = Array2::from_shape_vec((1, row.len()), row.clone()).unwrap();
            let out = blur_i2t(&b, &spec).unwrap();
            let before: f64 = row.iter().sum();
            prop_assert!(((out.sum() - before) / before).abs() < 1e-6);
            let reference = padded_convolution(&row, &spec.kernel().unwrap());
            for j in 0..row.len() {
                prop_assert!((out[[0, j]] - reference[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn reversal_symmetry(row in proptest::collection::vec(0.0f64..1.0, 1..20), sigma in 0.3f64..10.0) {
            let spec = BlurSpec { sigma, kernel_size: 5 };
            let fwd = blur_i2t(&Array2::from_shape_vec((1, row.len()), row.clone()).unwrap(), &spec).unwrap();
            let rev: Vec<f64> = row.iter().rev().copied().collect();
            let back = blur_i2t(&Array2::from_shape_vec((1, rev.len()), rev).unwrap(), &spec).unwrap();
            for j in 0..row.len() {
                prop_assert!((fwd[[0, j]] - back[[0, row.len() - 1 - j]]).abs() < 1e-12);
            }
        }
    }
}
