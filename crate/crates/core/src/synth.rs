//! Deterministic synthetic foreground, alpha and background generator.
//!
//! Subjects are soft metaball blobs, feathered star polygons, or a small body
//! with a bundle of thin curved strands (hair-like, many fractional pixels).
//! Coverage is computed analytically per pixel so edges are antialiased.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagecore::{AlphaMatte, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectKind {
    Blob,
    Strands,
    Polygon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Texture,
    Checker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Inclusive height and width ranges in pixels.
    pub height: (usize, usize),
    pub width: (usize, usize),
    /// Weights for blob, strands, polygon.
    pub subject_weights: [f64; 3],
    pub stroke_count: (usize, usize),
    /// Strand width in pixels.
    pub stroke_width: (f64, f64),
    pub stroke_opacity: (f64, f64),
    /// Weights for flat, gradient, texture, checker.
    pub background_weights: [f64; 4],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: (256, 320),
            width: (256, 320),
            subject_weights: [1.0, 2.0, 1.0],
            stroke_count: (20, 60),
            stroke_width: (0.4, 2.0),
            stroke_opacity: (0.4, 1.0),
            background_weights: [1.0, 1.0, 1.0, 1.0],
        }
    }
}

fn check_weights(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidConfig(format!("{name}: weights must be nonnegative and not all zero")));
    }
    Ok(())
}

fn check_range<T: PartialOrd + core::fmt::Debug>(name: &str, r: (T, T)) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::InvalidConfig(format!("{name}: empty range {r:?}")));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        check_weights("subject_weights", &self.subject_weights)?;
        check_weights("background_weights", &self.background_weights)?;
        check_range("height", self.height)?;
        check_range("width", self.width)?;
        check_range("stroke_count", self.stroke_count)?;
        check_range("stroke_width", self.stroke_width)?;
        check_range("stroke_opacity", self.stroke_opacity)?;
        if self.height.0 < 8 || self.width.0 < 8 {
            return Err(Error::InvalidConfig("resolution must be at least 8".into()));
        }
        if self.stroke_width.0 <= 0.0 || self.stroke_opacity.0 < 0.0 || self.stroke_opacity.1 > 1.0 {
            return Err(Error::InvalidConfig("stroke width must be positive and opacity within [0,1]".into()));
        }
        Ok(())
    }

    /// Only flat backgrounds, otherwise default.
    pub fn flat_backgrounds() -> Self {
        Self {
            background_weights: [1.0, 0.0, 0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn with_size(mut self, h: usize, w: usize) -> Self {
        self.height = (h, h);
        self.width = (w, w);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub fg: Image,
    pub alpha: AlphaMatte,
    pub bg: Image,
}

fn pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn uniform(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 >= r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

fn color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Overlap of the unit pixel footprint `[d - 0.5, d + 0.5]` with a line of
/// width `w` centered at distance 0.
fn line_coverage(d: f64, w: f64) -> f64 {
    ((d + 0.5).min(w / 2.0) - (d - 0.5).max(-w / 2.0)).clamp(0.0, 1.0)
}

fn edge_coverage(signed_dist: f64, feather: f64) -> f64 {
    (0.5 + signed_dist / feather).clamp(0.0, 1.0)
}

fn union(a: &mut f64, b: f64) {
    *a = 1.0 - (1.0 - *a) * (1.0 - b);
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    libm::sqrt(qx * qx + qy * qy)
}

struct Canvas {
    h: usize,
    w: usize,
    alpha: Vec<f64>,
}

impl Canvas {
    /// Metaball field with an antialiased threshold contour. Returns the
    /// centers and radii so other shapes can attach to the body.
    fn blob(&mut self, rng: &mut impl Rng, scale: f64) -> Vec<((f64, f64), f64)> {
        let (h, w) = (self.h as f64, self.w as f64);
        let m = h.min(w);
        let center = (rng.random_range(0.35..0.65) * w, rng.random_range(0.35..0.65) * h);
        let balls: Vec<((f64, f64), f64)> = (0..rng.random_range(2..6))
            .map(|_| {
                let r = rng.random_range(0.08..0.16) * m * scale;
                let off = (rng.random_range(-0.15..0.15) * m * scale, rng.random_range(-0.15..0.15) * m * scale);
                ((center.0 + off.0, center.1 + off.1), r)
            })
            .collect();
        let feather = rng.random_range(1.0..3.0);
        let threshold = 0.5;
        for y in 0..self.h {
            for x in 0..self.w {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let (mut f, mut gx, mut gy) = (0.0, 0.0, 0.0);
                for &((cx, cy), r) in &balls {
                    let (dx, dy) = (p.0 - cx, p.1 - cy);
                    let e = libm::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
                    f += e;
                    gx -= e * dx / (r * r);
                    gy -= e * dy / (r * r);
                }
                let g = libm::sqrt(gx * gx + gy * gy).max(1e-9);
                let a = edge_coverage((f - threshold) / g, feather);
                union(&mut self.alpha[y * self.w + x], a);
            }
        }
        balls
    }

    fn polygon(&mut self, rng: &mut impl Rng) {
        let (h, w) = (self.h as f64, self.w as f64);
        let m = h.min(w);
        let c = (rng.random_range(0.35..0.65) * w, rng.random_range(0.35..0.65) * h);
        let n = rng.random_range(3..9);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..core::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let verts: Vec<(f64, f64)> = angles
            .iter()
            .map(|&t| {
                let r = rng.random_range(0.15..0.4) * m;
                (c.0 + r * libm::cos(t), c.1 + r * libm::sin(t))
            })
            .collect();
        let feather = rng.random_range(0.5..4.0);
        for y in 0..self.h {
            for x in 0..self.w {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let mut dist = f64::INFINITY;
                let mut inside = false;
                for i in 0..n {
                    let (a, b) = (verts[i], verts[(i + 1) % n]);
                    dist = dist.min(segment_distance(p, a, b));
                    if (a.1 > p.1) != (b.1 > p.1) && p.0 < a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1) {
                        inside = !inside;
                    }
                }
                let sd = if inside { dist } else { -dist };
                union(&mut self.alpha[y * self.w + x], edge_coverage(sd, feather));
            }
        }
    }

    /// Curved strands growing outward from the body. Returns the strand mask
    /// (coverage of strands alone) so they can be tinted.
    fn strands(&mut self, rng: &mut impl Rng, spec: &SynthSpec, body: &[((f64, f64), f64)]) -> Vec<f64> {
        let m = (self.h.min(self.w)) as f64;
        let mut mask = vec![0.0; self.h * self.w];
        let count = rng.random_range(spec.stroke_count.0..=spec.stroke_count.1);
        for _ in 0..count {
            let &((cx, cy), r) = &body[rng.random_range(0..body.len())];
            let theta = rng.random_range(0.0..core::f64::consts::TAU);
            let (dx, dy) = (libm::cos(theta), libm::sin(theta));
            let root = (cx + dx * r * 0.8, cy + dy * r * 0.8);
            let len = rng.random_range(0.15..0.45) * m;
            let bend = rng.random_range(-0.4..0.4) * len;
            let ctrl = (root.0 + dx * len * 0.5 - dy * bend, root.1 + dy * len * 0.5 + dx * bend);
            let tip = (root.0 + dx * len, root.1 + dy * len);
            let width = uniform(rng, spec.stroke_width);
            let opacity = uniform(rng, spec.stroke_opacity);
            let segs = 24;
            let pts: Vec<(f64, f64)> = (0..=segs)
                .map(|i| {
                    let t = i as f64 / segs as f64;
                    let u = 1.0 - t;
                    (
                        u * u * root.0 + 2.0 * u * t * ctrl.0 + t * t * tip.0,
                        u * u * root.1 + 2.0 * u * t * ctrl.1 + t * t * tip.1,
                    )
                })
                .collect();
            let mut cov = vec![0.0f64; 0];
            let pad = width / 2.0 + 1.0;
            let (lo_x, hi_x) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
            let (lo_y, hi_y) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
            let x0 = libm::floor(lo_x - pad).max(0.0) as usize;
            let x1 = (libm::ceil(hi_x + pad).max(0.0) as usize).min(self.w);
            let y0 = libm::floor(lo_y - pad).max(0.0) as usize;
            let y1 = (libm::ceil(hi_y + pad).max(0.0) as usize).min(self.h);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            cov.resize((x1 - x0) * (y1 - y0), 0.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = (x as f64 + 0.5, y as f64 + 0.5);
                    let d = pts.windows(2).map(|s| segment_distance(p, s[0], s[1])).fold(f64::INFINITY, f64::min);
                    if d < pad {
                        cov[(y - y0) * (x1 - x0) + x - x0] = opacity * line_coverage(d, width);
                    }
                }
            }
            for y in y0..y1 {
                for x in x0..x1 {
                    let c = cov[(y - y0) * (x1 - x0) + x - x0];
                    if c > 0.0 {
                        union(&mut self.alpha[y * self.w + x], c);
                        union(&mut mask[y * self.w + x], c);
                    }
                }
            }
        }
        mask
    }
}

/// Smoothly varying color field: linear ramp between two colors.
fn gradient_field(h: usize, w: usize, a: [f64; 3], b: [f64; 3], theta: f64) -> Vec<f64> {
    let (ux, uy) = (libm::cos(theta), libm::sin(theta));
    let span = libm::fabs(ux) * w as f64 + libm::fabs(uy) * h as f64;
    let off = ux.min(0.0) * w as f64 + uy.min(0.0) * h as f64;
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = ((ux * (x as f64 + 0.5) + uy * (y as f64 + 0.5) - off) / span).clamp(0.0, 1.0);
            for c in 0..3 {
                out[c * h * w + y * w + x] = a[c] + (b[c] - a[c]) * t;
            }
        }
    }
    out
}

/// Multi-octave value noise in [0, 1].
fn value_noise(h: usize, w: usize, cell: f64, octaves: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut cell = cell;
    for _ in 0..octaves {
        let gw = libm::ceil(w as f64 / cell) as usize + 2;
        let gh = libm::ceil(h as f64 / cell) as usize + 2;
        let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
        for y in 0..h {
            let fy = y as f64 / cell;
            let (iy, ty) = (fy as usize, fy - libm::floor(fy));
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..w {
                let fx = x as f64 / cell;
                let (ix, tx) = (fx as usize, fx - libm::floor(fx));
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let g = |j: usize, i: usize| grid[j * gw + i];
                let top = g(iy, ix) + (g(iy, ix + 1) - g(iy, ix)) * sx;
                let bot = g(iy + 1, ix) + (g(iy + 1, ix + 1) - g(iy + 1, ix)) * sx;
                out[y * w + x] += amp * (top + (bot - top) * sy);
            }
        }
        total += amp;
        amp *= 0.5;
        cell = (cell / 2.0).max(1.0);
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

pub fn generate_background(spec: &SynthSpec, h: usize, w: usize, rng: &mut impl Rng) -> Image {
    let kind = [BackgroundKind::Flat, BackgroundKind::Gradient, BackgroundKind::Texture, BackgroundKind::Checker]
        [pick(&spec.background_weights, rng)];
    let a = color(rng, 0.05, 0.95);
    let b = color(rng, 0.05, 0.95);
    let plane = h * w;
    let data = match kind {
        BackgroundKind::Flat => (0..3).flat_map(|c| core::iter::repeat_n(a[c], plane)).collect(),
        BackgroundKind::Gradient => gradient_field(h, w, a, b, rng.random_range(0.0..core::f64::consts::TAU)),
        BackgroundKind::Texture => {
            let cell = rng.random_range(8.0..48.0);
            let n = value_noise(h, w, cell, 4, rng);
            (0..3).flat_map(|c| n.iter().map(move |t| a[c] + (b[c] - a[c]) * t)).collect()
        }
        BackgroundKind::Checker => {
            let size = rng.random_range(6..33);
            (0..3)
                .flat_map(|c| {
                    (0..plane).map(move |i| if ((i / w) / size + (i % w) / size) % 2 == 0 { a[c] } else { b[c] })
                })
                .collect()
        }
    };
    Image::new(h, w, data).expect("background size")
}

pub fn generate_subject(spec: &SynthSpec, h: usize, w: usize, rng: &mut impl Rng) -> (Image, AlphaMatte) {
    let kind = [SubjectKind::Blob, SubjectKind::Strands, SubjectKind::Polygon][pick(&spec.subject_weights, rng)];
    let mut canvas = Canvas { h, w, alpha: vec![0.0; h * w] };
    let strand_mask = match kind {
        SubjectKind::Blob => {
            canvas.blob(rng, 1.0);
            None
        }
        SubjectKind::Polygon => {
            canvas.polygon(rng);
            None
        }
        SubjectKind::Strands => {
            let body = canvas.blob(rng, 0.7);
            Some(canvas.strands(rng, spec, &body))
        }
    };
    // subject color: gradient over the frame plus a tint on the strands
    let mut fg = gradient_field(h, w, color(rng, 0.1, 0.9), color(rng, 0.1, 0.9), rng.random_range(0.0..core::f64::consts::TAU));
    if let Some(mask) = strand_mask {
        let tint = color(rng, 0.1, 0.9);
        for c in 0..3 {
            for (i, m) in mask.iter().enumerate() {
                let v = &mut fg[c * h * w + i];
                *v += (tint[c] - *v) * m;
            }
        }
    }
    (
        Image::new(h, w, fg).expect("foreground size"),
        AlphaMatte::new(h, w, canvas.alpha).expect("alpha size"),
    )
}

/// One foreground/alpha/background triple, deterministic per seed.
pub fn generate_sample(spec: &SynthSpec, seed: u64) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(spec.height.0..=spec.height.1);
    let w = rng.random_range(spec.width.0..=spec.width.1);
    let (fg, alpha) = generate_subject(spec, h, w, &mut rng);
    let bg = generate_background(spec, h, w, &mut rng);
    Ok(SynthSample { fg, alpha, bg })
}
