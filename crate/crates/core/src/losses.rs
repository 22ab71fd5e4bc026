//! Training objectives. Every reduction is a mean so values do not depend on
//! crop size. Each loss returns its value together with the gradient with
//! respect to the prediction.

use crate::basenet::{BaseOutputGrads, BaseOutputs};
use crate::error::Result;
use crate::imagecore::{downsample, recover_foreground_batch};
use crate::tensor::Tensor4;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamped(v: usize, d: isize, len: usize) -> usize {
    (v as isize + d).clamp(0, len as isize - 1) as usize
}

/// Horizontal and vertical Sobel responses of a `[n, 1, h, w]` matte with
/// replicate padding, as `[n, 2, h, w]`.
pub fn sobel_gradient(alpha: &Tensor4) -> Tensor4 {
    let (n, h, w) = (alpha.n(), alpha.h(), alpha.w());
    let mut out = Tensor4::zeros(n, 2, h, w);
    for b in 0..n {
        let src = alpha.plane(b, 0);
        for (ch, k) in [SOBEL_X, SOBEL_Y].iter().enumerate() {
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ky, row) in k.iter().enumerate() {
                        let sy = clamped(y, ky as isize - 1, h);
                        for (kx, &kv) in row.iter().enumerate() {
                            if kv != 0.0 {
                                acc += kv * src[sy * w + clamped(x, kx as isize - 1, w)];
                            }
                        }
                    }
                    dst[y * w + x] = acc;
                }
            }
        }
    }
    out
}

/// Adjoint of [`sobel_gradient`].
pub fn sobel_backward(dg: &Tensor4) -> Tensor4 {
    let (n, h, w) = (dg.n(), dg.h(), dg.w());
    let mut out = Tensor4::zeros(n, 1, h, w);
    for b in 0..n {
        for (ch, k) in [SOBEL_X, SOBEL_Y].iter().enumerate() {
            let g = dg.plane(b, ch).to_vec();
            let dst = out.plane_mut(b, 0);
            for y in 0..h {
                for x in 0..w {
                    let v = g[y * w + x];
                    if v == 0.0 {
                        continue;
                    }
                    for (ky, row) in k.iter().enumerate() {
                        let sy = clamped(y, ky as isize - 1, h);
                        for (kx, &kv) in row.iter().enumerate() {
                            if kv != 0.0 {
                                dst[sy * w + clamped(x, kx as isize - 1, w)] += kv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference of mattes plus mean absolute difference of their
/// Sobel gradients.
pub fn loss_alpha(alpha: &Tensor4, alpha_star: &Tensor4) -> Result<(f64, Tensor4)> {
    alpha.expect_same("loss_alpha", alpha_star)?;
    let n = alpha.len() as f64;
    let mut grad = alpha.zip_map(alpha_star, |a, t| sign(a - t) / n)?;
    let mut value = alpha
        .data()
        .iter()
        .zip(alpha_star.data())
        .map(|(a, t)| libm::fabs(a - t))
        .sum::<f64>()
        / n;
    let ga = sobel_gradient(alpha);
    let gt = sobel_gradient(alpha_star);
    let m = ga.len() as f64;
    value += ga
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, t)| libm::fabs(a - t))
        .sum::<f64>()
        / m;
    let dg = ga.zip_map(&gt, |a, t| sign(a - t) / m)?;
    grad.add_assign(&sobel_backward(&dg));
    Ok((value, grad))
}

/// Masked L1 over pixels where `alpha_star > 0`, normalized by the number of
/// masked elements. Zero when the mask is empty.
pub fn loss_foreground(fg: &Tensor4, fg_star: &Tensor4, alpha_star: &Tensor4) -> Result<(f64, Tensor4)> {
    fg.expect_same("loss_foreground", fg_star)?;
    alpha_star.expect_shape("loss_foreground", [fg.n(), 1, fg.h(), fg.w()])?;
    let mut grad = Tensor4::zeros_like(fg);
    let count: usize = alpha_star.data().iter().filter(|&&a| a > 0.0).count() * fg.c();
    if count == 0 {
        return Ok((0.0, grad));
    }
    let denom = count as f64;
    let mut sum = 0.0;
    for b in 0..fg.n() {
        let mask = alpha_star.plane(b, 0);
        for c in 0..fg.c() {
            let f = fg.plane(b, c);
            let t = fg_star.plane(b, c);
            let g = grad.plane_mut(b, c);
            for i in 0..mask.len() {
                if mask[i] > 0.0 {
                    let d = f[i] - t[i];
                    sum += libm::fabs(d);
                    g[i] = sign(d) / denom;
                }
            }
        }
    }
    Ok((sum / denom, grad))
}

/// Mean squared error between the predicted error map and `|alpha - alpha_star|`.
/// The target is treated as a constant: no gradient flows to `alpha`.
pub fn loss_error(err: &Tensor4, alpha: &Tensor4, alpha_star: &Tensor4) -> Result<(f64, Tensor4)> {
    err.expect_same("loss_error", alpha)?;
    err.expect_same("loss_error", alpha_star)?;
    let n = err.len() as f64;
    let mut value = 0.0;
    let mut grad = Tensor4::zeros_like(err);
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        let target = libm::fabs(alpha.data()[i] - alpha_star.data()[i]);
        let d = err.data()[i] - target;
        value += d * d;
        *g = 2.0 * d / n;
    }
    Ok((value / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    BaseOnly,
    Joint,
}

/// Individual and combined loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub alpha_c: f64,
    pub fgr_c: f64,
    pub err_c: f64,
    pub alpha: f64,
    pub fgr: f64,
    pub base: f64,
    pub refine: f64,
    pub total: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.base.is_finite() && self.refine.is_finite()
    }
}

/// Gradients of the total loss with respect to network outputs.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub base: BaseOutputGrads,
    /// `[n,1,h,w]` and `[n,3,h,w]` at full resolution; `None` in base-only mode.
    pub refined_alpha: Option<Tensor4>,
    pub refined_fgr: Option<Tensor4>,
}

/// Ground truth and inputs at full resolution.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub image: &'a Tensor4,
    pub alpha: &'a Tensor4,
    pub fg: &'a Tensor4,
}

/// Coarse targets (`1/c` bilinear downsamples) for the base loss.
pub fn coarse_targets(t: &Targets<'_>, c: usize) -> Result<(Tensor4, Tensor4, Tensor4)> {
    Ok((downsample(t.image, c)?, downsample(t.alpha, c)?, downsample(t.fg, c)?))
}

/// Base loss on coarse outputs plus, in joint mode, the refinement loss on
/// full-resolution predictions.
pub fn compute_losses(
    base: &BaseOutputs,
    refined: Option<(&Tensor4, &Tensor4)>,
    targets: &Targets<'_>,
    mode: LossMode,
    c: usize,
) -> Result<(LossValues, LossGrads)> {
    let (image_c, alpha_star_c, fg_star_c) = coarse_targets(targets, c)?;
    let (alpha_c, d_alpha_c) = loss_alpha(&base.alpha, &alpha_star_c)?;
    let (fg_c, pass_c) = recover_foreground_batch(&base.fgr, &image_c)?;
    let (fgr_c, d_fg_c) = loss_foreground(&fg_c, &fg_star_c, &alpha_star_c)?;
    let d_fgr_c = d_fg_c.zip_map(&pass_c, |g, m| g * m)?;
    let (err_c, d_err_c) = loss_error(&base.err, &base.alpha, &alpha_star_c)?;
    let mut v = LossValues {
        alpha_c,
        fgr_c,
        err_c,
        base: alpha_c + fgr_c + err_c,
        ..LossValues::default()
    };
    let mut grads = LossGrads {
        base: BaseOutputGrads {
            alpha: Some(d_alpha_c),
            fgr: Some(d_fgr_c),
            err: Some(d_err_c),
            hid: None,
        },
        refined_alpha: None,
        refined_fgr: None,
    };
    if let (LossMode::Joint, Some((alpha, fgr))) = (mode, refined) {
        let (la, da) = loss_alpha(alpha, targets.alpha)?;
        let (fg, pass) = recover_foreground_batch(fgr, targets.image)?;
        let (lf, dfg) = loss_foreground(&fg, targets.fg, targets.alpha)?;
        v.alpha = la;
        v.fgr = lf;
        v.refine = la + lf;
        grads.refined_alpha = Some(da);
        grads.refined_fgr = Some(dfg.zip_map(&pass, |g, m| g * m)?);
    }
    v.total = v.base + v.refine;
    Ok((v, grads))
}
