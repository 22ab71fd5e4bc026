//! Trimap construction and matting error metrics over the unknown region.
//!
//! Reporting scale follows the common matting benchmark convention: SAD,
//! Grad and Conn are divided by 1000, MSE values are multiplied by 1000.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::imagecore::{AlphaMatte, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Background,
    Unknown,
    Foreground,
}

/// How the unknown band is widened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrimapMorphology {
    /// Erode the certain-foreground and certain-background masks.
    #[default]
    ErodeCertain,
    /// Dilate then erode the fractional band itself (a closing).
    CloseBand,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl Trimap {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err("Trimap::new", alloc::format!("{}", height * width), alloc::format!("{}", labels.len())));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    pub fn is_unknown(&self, i: usize) -> bool {
        self.labels[i] == Label::Unknown
    }

    pub fn unknown_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Unknown).count()
    }

    /// 0 for background, 128 for unknown, 255 for foreground.
    pub fn to_gray(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| match l {
                Label::Background => 0,
                Label::Unknown => 128,
                Label::Foreground => 255,
            })
            .collect()
    }
}

/// One step with the 4-connected cross. `grow` selects dilation; pixels
/// outside the raster never change the result.
fn morph_step(mask: &[bool], h: usize, w: usize, grow: bool) -> Vec<bool> {
    let mut out = mask.to_vec();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut nb = [None; 4];
            if y > 0 {
                nb[0] = Some(i - w);
            }
            if y + 1 < h {
                nb[1] = Some(i + w);
            }
            if x > 0 {
                nb[2] = Some(i - 1);
            }
            if x + 1 < w {
                nb[3] = Some(i + 1);
            }
            let vals = nb.iter().flatten().map(|&j| mask[j]);
            out[i] = if grow {
                mask[i] || vals.into_iter().any(|v| v)
            } else {
                mask[i] && vals.into_iter().all(|v| v)
            };
        }
    }
    out
}

fn morph(mask: Vec<bool>, h: usize, w: usize, iters: usize, grow: bool) -> Vec<bool> {
    (0..iters).fold(mask, |m, _| morph_step(&m, h, w, grow))
}

pub fn make_trimap(alpha_star: &AlphaMatte, lo: f64, hi: f64, iters: usize) -> Trimap {
    make_trimap_with(alpha_star, lo, hi, iters, TrimapMorphology::default())
}

pub fn make_trimap_with(alpha_star: &AlphaMatte, lo: f64, hi: f64, iters: usize, how: TrimapMorphology) -> Trimap {
    let (h, w) = (alpha_star.height(), alpha_star.width());
    let a = alpha_star.data();
    let labels = match how {
        TrimapMorphology::ErodeCertain => {
            let fg = morph(a.iter().map(|&v| v >= hi).collect(), h, w, iters, false);
            let bg = morph(a.iter().map(|&v| v <= lo).collect(), h, w, iters, false);
            fg.iter()
                .zip(&bg)
                .map(|(&f, &b)| match (f, b) {
                    (true, _) => Label::Foreground,
                    (false, true) => Label::Background,
                    _ => Label::Unknown,
                })
                .collect()
        }
        TrimapMorphology::CloseBand => {
            let band: Vec<bool> = a.iter().map(|&v| v > lo && v < hi).collect();
            let band = morph(morph(band, h, w, iters, true), h, w, iters, false);
            band.iter()
                .zip(a)
                .map(|(&u, &v)| {
                    if u {
                        Label::Unknown
                    } else if v >= hi {
                        Label::Foreground
                    } else {
                        Label::Background
                    }
                })
                .collect()
        }
    };
    Trimap { height: h, width: w, labels }
}

fn check(op: &'static str, a: &AlphaMatte, b: &AlphaMatte, t: &Trimap) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.height() != t.height || a.width() != t.width {
        return Err(shape_err(
            op,
            alloc::format!("{}x{}", b.height(), b.width()),
            alloc::format!("{}x{} (trimap {}x{})", a.height(), a.width(), t.height, t.width),
        ));
    }
    Ok(())
}

/// `(sad, mse)` over the unknown region. Both are zero when it is empty.
pub fn metric_sad_mse(alpha: &AlphaMatte, alpha_star: &AlphaMatte, trimap: &Trimap) -> Result<(f64, f64)> {
    check("metric_sad_mse", alpha, alpha_star, trimap)?;
    let (mut sad, mut sq, mut n) = (0.0, 0.0, 0usize);
    for (i, (p, t)) in alpha.data().iter().zip(alpha_star.data()).enumerate() {
        if trimap.is_unknown(i) {
            let d = p - t;
            sad += libm::fabs(d);
            sq += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((sad / 1000.0, sq / n as f64 * 1000.0))
}

/// Separable first-derivative-of-Gaussian filter, normalized to unit L2
/// norm. Returned as `(size, taps)` with `taps[i * size + j]` holding
/// `g(i - half) * g'(j - half)`.
pub fn gauss_derivative_kernel(sigma: f64) -> (usize, Vec<f64>) {
    let eps = 1e-2;
    let half = libm::ceil(sigma * libm::sqrt(-2.0 * libm::log(libm::sqrt(2.0 * core::f64::consts::PI) * sigma * eps))) as isize;
    let size = (2 * half + 1) as usize;
    let gauss = |x: f64| libm::exp(-x * x / (2.0 * sigma * sigma)) / (sigma * libm::sqrt(2.0 * core::f64::consts::PI));
    let dgauss = |x: f64| -x * gauss(x) / (sigma * sigma);
    let mut k = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            k[i * size + j] = gauss((i as isize - half) as f64) * dgauss((j as isize - half) as f64);
        }
    }
    let norm = libm::sqrt(k.iter().map(|v| v * v).sum::<f64>());
    k.iter_mut().for_each(|v| *v /= norm);
    (size, k)
}

/// Gradient magnitude by true 2-D convolution with replicate borders.
fn gradient_magnitude(a: &[f64], h: usize, w: usize, size: usize, kx: &[f64]) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    // convolution: kernel tap (i, j) meets source at (y + half - i, x + half - j)
                    let sy = (y as isize + half - i as isize).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize + half - j as isize).clamp(0, w as isize - 1) as usize;
                    let v = a[sy * w + sx];
                    gx += kx[i * size + j] * v;
                    gy += kx[j * size + i] * v;
                }
            }
            out[y * w + x] = libm::sqrt(gx * gx + gy * gy);
        }
    }
    out
}

pub fn metric_grad(alpha: &AlphaMatte, alpha_star: &AlphaMatte, trimap: &Trimap, sigma: f64, q: f64) -> Result<f64> {
    check("metric_grad", alpha, alpha_star, trimap)?;
    let (h, w) = (alpha.height(), alpha.width());
    let (size, k) = gauss_derivative_kernel(sigma);
    let mp = gradient_magnitude(alpha.data(), h, w, size, &k);
    let mt = gradient_magnitude(alpha_star.data(), h, w, size, &k);
    let sum: f64 = (0..h * w)
        .filter(|&i| trimap.is_unknown(i))
        .map(|i| libm::pow(libm::fabs(mp[i] - mt[i]), q))
        .sum();
    Ok(sum / 1000.0)
}

/// Largest 4-connected component of `mask`. Ties go to the component whose
/// first pixel comes earliest in column-major order.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    let mut queue = VecDeque::new();
    for x in 0..w {
        for y in 0..h {
            let start = y * w + x;
            if !mask[start] || label[start] != usize::MAX {
                continue;
            }
            let id = next;
            next += 1;
            let mut size = 0;
            label[start] = id;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                size += 1;
                let (cy, cx) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if mask[j] && label[j] == usize::MAX {
                        label[j] = id;
                        queue.push_back(j);
                    }
                };
                if cy > 0 {
                    visit(i - w);
                }
                if cy + 1 < h {
                    visit(i + w);
                }
                if cx > 0 {
                    visit(i - 1);
                }
                if cx + 1 < w {
                    visit(i + 1);
                }
            }
            if best.is_none_or(|(_, s)| size > s) {
                best = Some((id, size));
            }
        }
    }
    match best {
        Some((id, _)) => label.iter().map(|&l| l == id).collect(),
        None => vec![false; h * w],
    }
}

/// Connectivity error. Thresholds are `i * step` for `i = 0..=round(1/step)`.
pub fn metric_conn(alpha: &AlphaMatte, alpha_star: &AlphaMatte, trimap: &Trimap, step: f64, theta: f64) -> Result<f64> {
    check("metric_conn", alpha, alpha_star, trimap)?;
    let (h, w) = (alpha.height(), alpha.width());
    let (p, t) = (alpha.data(), alpha_star.data());
    let steps = libm::round(1.0 / step) as usize;
    let thresh = |i: usize| i as f64 / steps as f64;
    let mut level: Vec<Option<f64>> = vec![None; h * w];
    for i in 1..=steps {
        let th = thresh(i);
        let both: Vec<bool> = p.iter().zip(t).map(|(&a, &b)| a >= th && b >= th).collect();
        let omega = largest_component(&both, h, w);
        for (l, &o) in level.iter_mut().zip(&omega) {
            if l.is_none() && !o {
                *l = Some(thresh(i - 1));
            }
        }
    }
    let phi = |a: f64, l: f64| {
        let d = a - l;
        1.0 - if d >= theta { d } else { 0.0 }
    };
    let sum: f64 = (0..h * w)
        .filter(|&i| trimap.is_unknown(i))
        .map(|i| {
            let l = level[i].unwrap_or(1.0);
            libm::fabs(phi(p[i], l) - phi(t[i], l))
        })
        .sum();
    Ok(sum / 1000.0)
}

/// Mean squared foreground error over unknown pixels with `alpha_star > 0`,
/// scaled by 1000. Also returns the number of pixels in that mask.
pub fn metric_fg_mse(fg: &Image, fg_star: &Image, alpha_star: &AlphaMatte, trimap: &Trimap) -> Result<(f64, usize)> {
    check("metric_fg_mse", alpha_star, alpha_star, trimap)?;
    if fg.height() != fg_star.height()
        || fg.width() != fg_star.width()
        || fg.height() != trimap.height
        || fg.width() != trimap.width
    {
        return Err(shape_err(
            "metric_fg_mse",
            alloc::format!("{}x{}", trimap.height, trimap.width),
            alloc::format!("{}x{} / {}x{}", fg.height(), fg.width(), fg_star.height(), fg_star.width()),
        ));
    }
    let plane = trimap.height * trimap.width;
    let mask: Vec<usize> = (0..plane)
        .filter(|&i| trimap.is_unknown(i) && alpha_star.data()[i] > 0.0)
        .collect();
    if mask.is_empty() {
        return Ok((0.0, 0));
    }
    let mut sq = 0.0;
    for c in 0..3 {
        for &i in &mask {
            let d = fg.data()[c * plane + i] - fg_star.data()[c * plane + i];
            sq += d * d;
        }
    }
    Ok((sq / (3 * mask.len()) as f64 * 1000.0, mask.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricParams {
    pub grad_sigma: f64,
    pub grad_q: f64,
    pub conn_step: f64,
    pub conn_theta: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            grad_sigma: 1.4,
            grad_q: 2.0,
            conn_step: 0.1,
            conn_theta: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    pub fg_mse: f64,
    pub unknown_pixel_count: usize,
    /// Set when the unknown region is empty and the alpha metrics are zero by convention.
    pub empty_unknown: bool,
    /// Set when no unknown pixel has `alpha_star > 0`.
    pub empty_fg_mask: bool,
}

/// All metrics for one prediction. Foreground metrics are skipped (and
/// reported as zero) when either foreground is absent.
pub fn evaluate_matte(
    alpha: &AlphaMatte,
    alpha_star: &AlphaMatte,
    fg: Option<(&Image, &Image)>,
    trimap: &Trimap,
    params: &MetricParams,
) -> Result<MetricReport> {
    let (sad, mse) = metric_sad_mse(alpha, alpha_star, trimap)?;
    let unknown = trimap.unknown_count();
    let mut r = MetricReport {
        sad,
        mse,
        grad: metric_grad(alpha, alpha_star, trimap, params.grad_sigma, params.grad_q)?,
        conn: metric_conn(alpha, alpha_star, trimap, params.conn_step, params.conn_theta)?,
        unknown_pixel_count: unknown,
        empty_unknown: unknown == 0,
        empty_fg_mask: true,
        ..MetricReport::default()
    };
    if let Some((f, fs)) = fg {
        let (v, n) = metric_fg_mse(f, fs, alpha_star, trimap)?;
        r.fg_mse = v;
        r.empty_fg_mask = n == 0;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matte(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> AlphaMatte {
        AlphaMatte::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    fn all_unknown(h: usize, w: usize) -> Trimap {
        Trimap::new(h, w, vec![Label::Unknown; h * w]).unwrap()
    }

    #[test]
    fn trivial_trimaps() {
        let t = make_trimap(&AlphaMatte::filled(12, 9, 1.0), 0.06, 0.96, 10);
        assert!(t.labels().iter().all(|&l| l == Label::Foreground));
        let t = make_trimap(&AlphaMatte::filled(12, 9, 0.5), 0.06, 0.96, 10);
        assert_eq!(t.unknown_count(), 12 * 9);
        let t = make_trimap_with(&AlphaMatte::filled(12, 9, 0.5), 0.06, 0.96, 3, TrimapMorphology::CloseBand);
        assert_eq!(t.unknown_count(), 12 * 9);
    }

    #[test]
    fn sad_mse_plugged_formula() {
        // 2000 unknown pixels with |d| = 0.5
        let a = AlphaMatte::filled(40, 50, 0.75);
        let b = AlphaMatte::filled(40, 50, 0.25);
        let (sad, mse) = metric_sad_mse(&a, &b, &all_unknown(40, 50)).unwrap();
        assert!((sad - 1.0).abs() < 1e-12);
        assert!((mse - 250.0).abs() < 1e-9);
    }

    #[test]
    fn outside_unknown_is_ignored() {
        let a = matte(8, 8, |y, _| if y < 4 { 0.3 } else { 0.0 });
        let b = AlphaMatte::filled(8, 8, 0.0);
        let labels = (0..64).map(|i| if i < 32 { Label::Foreground } else { Label::Unknown }).collect();
        let t = Trimap::new(8, 8, labels).unwrap();
        let p = MetricParams::default();
        assert_eq!(metric_sad_mse(&a, &b, &t).unwrap(), (0.0, 0.0));
        assert_eq!(metric_conn(&a, &b, &t, p.conn_step, p.conn_theta).unwrap(), 0.0);
    }

    #[test]
    fn grad_of_constants_is_zero() {
        let t = all_unknown(10, 10);
        let g = metric_grad(&AlphaMatte::filled(10, 10, 0.2), &AlphaMatte::filled(10, 10, 0.9), &t, 1.4, 2.0).unwrap();
        assert!(g.abs() < 1e-20);
    }

    #[test]
    fn kernel_is_unit_norm_and_sized() {
        let (size, k) = gauss_derivative_kernel(1.4);
        // ceil(1.4 * sqrt(-2 ln(sqrt(2 pi) * 1.4 * 0.01))) = ceil(3.58...) = 4
        assert_eq!(size, 9);
        assert!((k.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fg_mse_values() {
        let a = AlphaMatte::filled(5, 5, 0.5);
        let f = Image::filled(5, 5, 0.5);
        let g = Image::filled(5, 5, 0.6);
        let t = all_unknown(5, 5);
        let (v, n) = metric_fg_mse(&f, &g, &a, &t).unwrap();
        assert_eq!(n, 25);
        assert!((v - 10.0).abs() < 1e-9);
        let zero = AlphaMatte::filled(5, 5, 0.0);
        assert_eq!(metric_fg_mse(&f, &g, &zero, &t).unwrap(), (0.0, 0));
    }

    #[test]
    fn identical_mattes_score_zero() {
        let a = matte(16, 16, |y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        let t = make_trimap(&a, 0.06, 0.96, 2);
        let f = Image::filled(16, 16, 0.3);
        let r = evaluate_matte(&a, &a, Some((&f, &f)), &t, &MetricParams::default()).unwrap();
        assert_eq!((r.sad, r.mse, r.grad, r.conn, r.fg_mse), (0.0, 0.0, 0.0, 0.0, 0.0));
    }
}
