use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Saved state for [`batchnorm2d_backward`].
#[derive(Debug, Clone)]
pub struct BnCache {
    mode: Mode,
    x_hat: Tensor4,
    inv_std: Vec<f64>,
}

/// Batch statistics from a train-mode forward, for updating running stats.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Exponential moving average update of running statistics in place.
    pub fn apply(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * self.mean[c];
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * self.var[c];
        }
    }
}

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics over `(n, h, w)`; eval mode with the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    mode: Mode,
    eps: f64,
) -> Result<(Tensor4, BnCache, Option<BatchStats>)> {
    let [n, c, h, w] = x.shape();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(shape_err(
            "batchnorm2d",
            format!("{c} channels of parameters"),
            format!("gamma {} beta {}", gamma.len(), beta.len()),
        ));
    }
    let count = n * h * w;
    if count == 0 {
        return Err(Error::EmptyBatch("batchnorm2d"));
    }
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let s: f64 = (0..n).map(|b| x.plane(b, ch).iter().sum::<f64>()).sum();
                let m = s / count as f64;
                let ss: f64 = (0..n)
                    .map(|b| x.plane(b, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum();
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
            let unbiased = var
                .iter()
                .map(|v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { *v })
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
    let mut x_hat = Tensor4::zeros_like(x);
    let mut y = Tensor4::zeros_like(x);
    for b in 0..n {
        for ch in 0..c {
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = x.plane(b, ch);
            {
                let xh = x_hat.plane_mut(b, ch);
                for (d, s) in xh.iter_mut().zip(src) {
                    *d = (s - m) * is;
                }
            }
            let xh = x_hat.plane(b, ch);
            for (d, s) in y.plane_mut(b, ch).iter_mut().zip(xh) {
                *d = g * s + bt;
            }
        }
    }
    Ok((y, BnCache { mode, x_hat, inv_std }, stats))
}

/// Backward pass; accumulates into `grad_gamma`/`grad_beta` and returns dx.
pub fn batchnorm2d_backward(
    dy: &Tensor4,
    cache: &BnCache,
    gamma: &[f64],
    grad_gamma: &mut [f64],
    grad_beta: &mut [f64],
) -> Result<Tensor4> {
    dy.expect_same("batchnorm2d_backward", &cache.x_hat)?;
    let [n, c, h, w] = dy.shape();
    let count = (n * h * w) as f64;
    let mut dx = Tensor4::zeros_like(dy);
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for b in 0..n {
            for (g, xh) in dy.plane(b, ch).iter().zip(cache.x_hat.plane(b, ch)) {
                sum_dy += g;
                sum_dy_xh += g * xh;
            }
        }
        grad_gamma[ch] += sum_dy_xh;
        grad_beta[ch] += sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            let xh = cache.x_hat.plane(b, ch);
            let g = dy.plane(b, ch);
            let d = dx.plane_mut(b, ch);
            match cache.mode {
                Mode::Train => {
                    let mean_dy = sum_dy / count;
                    let mean_dy_xh = sum_dy_xh / count;
                    for i in 0..d.len() {
                        d[i] = scale * (g[i] - mean_dy - xh[i] * mean_dy_xh);
                    }
                }
                Mode::Eval => {
                    for i in 0..d.len() {
                        d[i] = scale * g[i];
                    }
                }
            }
        }
    }
    Ok(dx)
}
