//! Training-time composition and augmentation, and the test-time background
//! perturbation.
//!
//! The foreground/alpha pair and the background are transformed
//! independently, cropped to a common size and composited. The network's
//! copy of the background may then be slightly misaligned, and a soft shadow
//! may darken the composite behind the subject. The background used for
//! compositing and the per-pixel shadow gain are kept, so every sample can be
//! recomposed exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imagecore::{AlphaMatte, Image};
use crate::tensor::Tensor4;

/// Pairs each index `i < max(ns, nb)` as `(i mod ns, i mod nb)`.
pub fn zip_epoch(n_samples: usize, n_backgrounds: usize) -> Vec<(usize, usize)> {
    if n_samples == 0 || n_backgrounds == 0 {
        return Vec::new();
    }
    (0..n_samples.max(n_backgrounds))
        .map(|i| (i % n_samples, i % n_backgrounds))
        .collect()
}

/// Symmetric magnitude ranges are stored as the maximum absolute value.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    /// Fraction of the image size.
    pub translate: f64,
    pub shear_deg: f64,
    pub hflip_prob: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Fraction of a full hue turn.
    pub hue: f64,
    pub noise_prob: f64,
    pub noise_var_max: f64,
    pub blur_prob: f64,
    pub sharpen_prob: f64,
    pub sharpen_amount_max: f64,
    pub misalign_prob: f64,
    pub misalign_rotation_deg: f64,
    pub misalign_translate: f64,
    pub misalign_bcs: (f64, f64),
    pub misalign_hue: f64,
    pub shadow_prob: f64,
    pub shadow: ShadowParams,
    /// Inclusive crop side range in pixels.
    pub crop: (usize, usize),
    /// Crop sides are multiples of this.
    pub crop_multiple: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 5.0,
            scale: (0.3, 1.0),
            translate: 0.1,
            shear_deg: 5.0,
            hflip_prob: 0.5,
            brightness: (0.85, 1.15),
            contrast: (0.85, 1.15),
            saturation: (0.85, 1.15),
            hue: 0.05,
            noise_prob: 0.5,
            noise_var_max: 0.03,
            blur_prob: 0.2,
            sharpen_prob: 0.2,
            sharpen_amount_max: 0.5,
            misalign_prob: 0.3,
            misalign_rotation_deg: 1.0,
            misalign_translate: 0.01,
            misalign_bcs: (0.82, 1.18),
            misalign_hue: 0.1,
            shadow_prob: 0.3,
            shadow: ShadowParams::default(),
            crop: (128, 256),
            crop_multiple: 1,
        }
    }
}

impl AugmentConfig {
    /// No transforms and no perturbations: the composite of the cropped inputs.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            translate: 0.0,
            shear_deg: 0.0,
            hflip_prob: 0.0,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            hue: 0.0,
            noise_prob: 0.0,
            noise_var_max: 0.0,
            blur_prob: 0.0,
            sharpen_prob: 0.0,
            sharpen_amount_max: 0.0,
            misalign_prob: 0.0,
            misalign_rotation_deg: 0.0,
            misalign_translate: 0.0,
            misalign_bcs: (1.0, 1.0),
            misalign_hue: 0.0,
            shadow_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("hflip_prob", self.hflip_prob),
            ("noise_prob", self.noise_prob),
            ("blur_prob", self.blur_prob),
            ("sharpen_prob", self.sharpen_prob),
            ("misalign_prob", self.misalign_prob),
            ("shadow_prob", self.shadow_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} is not a probability")));
            }
        }
        let ranges = [
            ("scale", self.scale),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("misalign_bcs", self.misalign_bcs),
            ("shadow.strength", self.shadow.strength),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || lo < 0.0 {
                return Err(Error::InvalidConfig(format!("{name}: invalid range ({lo}, {hi})")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::InvalidConfig("scale must be positive".into()));
        }
        if self.crop.0 == 0 || self.crop.0 > self.crop.1 {
            return Err(Error::InvalidConfig(format!("crop range {:?} is empty", self.crop)));
        }
        if self.crop_multiple == 0 || self.crop.0.div_ceil(self.crop_multiple) > self.crop.1 / self.crop_multiple {
            return Err(Error::InvalidConfig(format!(
                "crop_multiple {} does not fit crop range {:?}",
                self.crop_multiple, self.crop
            )));
        }
        Ok(())
    }

    /// Samples one crop side uniformly among the multiples of `crop_multiple`
    /// inside the configured range.
    pub fn sample_crop_side(&self, rng: &mut impl Rng) -> usize {
        let m = self.crop_multiple;
        rng.random_range(self.crop.0.div_ceil(m)..=self.crop.1 / m) * m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowParams {
    /// Maximum offset as a fraction of each dimension.
    pub offset: f64,
    /// Box blur radius as a fraction of the smaller dimension.
    pub blur: f64,
    pub strength: (f64, f64),
}

impl Default for ShadowParams {
    fn default() -> Self {
        Self {
            offset: 0.05,
            blur: 0.01,
            strength: (0.3, 0.7),
        }
    }
}

fn sym(rng: &mut impl Rng, mag: f64) -> f64 {
    if mag > 0.0 {
        rng.random_range(-mag..=mag)
    } else {
        0.0
    }
}

fn range(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 < r.1 {
        rng.random_range(r.0..=r.1)
    } else {
        r.0
    }
}

fn coin(rng: &mut impl Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// A planar multi-channel raster used inside this module.
#[derive(Debug, Clone, PartialEq)]
struct Planes {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Planes {
    fn from_tensor(t: &Tensor4) -> Self {
        Self {
            c: t.c(),
            h: t.h(),
            w: t.w(),
            data: t.data().to_vec(),
        }
    }

    fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(self.c * h * w);
        for c in 0..self.c {
            let p = self.plane(c);
            for y in y0..y0 + h {
                data.extend_from_slice(&p[y * self.w + x0..y * self.w + x0 + w]);
            }
        }
        Self { c: self.c, h, w, data }
    }

    fn map(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Border {
    Zero,
    Replicate,
}

/// 2x2 linear part plus translation, mapping output pixel centers to source
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    m: [f64; 4],
    t: [f64; 2],
}

impl Affine {
    fn is_identity(&self) -> bool {
        self.m == [1.0, 0.0, 0.0, 1.0] && self.t == [0.0, 0.0]
    }

    /// Source-from-output map for a forward transform of rotation, uniform
    /// scale, horizontal shear, optional flip and translation (pixels),
    /// taken about the centers of a `src` and `out` canvas.
    fn inverse_of(
        rot: f64,
        scale: f64,
        shear: f64,
        flip: bool,
        shift: (f64, f64),
        src: (usize, usize),
        out: (usize, usize),
    ) -> Self {
        let (c, s) = (libm::cos(rot), libm::sin(rot));
        let f = if flip { -1.0 } else { 1.0 };
        let k = libm::tan(shear);
        // forward A = scale * R * Shear * Flip
        let a = [scale * c * f, scale * (c * k - s), scale * s * f, scale * (s * k + c)];
        let det = a[0] * a[3] - a[1] * a[2];
        let inv = [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det];
        let (sc, oc) = (
            (src.1 as f64 / 2.0, src.0 as f64 / 2.0),
            (out.1 as f64 / 2.0, out.0 as f64 / 2.0),
        );
        // src = inv * (p - oc - shift) + sc
        let (ox, oy) = (-oc.0 - shift.0, -oc.1 - shift.1);
        let t = [inv[0] * ox + inv[1] * oy + sc.0, inv[2] * ox + inv[3] * oy + sc.1];
        Self { m: inv, t }
    }

    fn warp(&self, src: &Planes, out_h: usize, out_w: usize, border: Border) -> Planes {
        if self.is_identity() && out_h == src.h && out_w == src.w {
            return src.clone();
        }
        let mut data = vec![0.0; src.c * out_h * out_w];
        let plane_out = out_h * out_w;
        for y in 0..out_h {
            for x in 0..out_w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let sx = self.m[0] * px + self.m[1] * py + self.t[0] - 0.5;
                let sy = self.m[2] * px + self.m[3] * py + self.t[1] - 0.5;
                for c in 0..src.c {
                    data[c * plane_out + y * out_w + x] = sample_bilinear(src.plane(c), src.h, src.w, sy, sx, border);
                }
            }
        }
        Planes { c: src.c, h: out_h, w: out_w, data }
    }
}

fn sample_bilinear(p: &[f64], h: usize, w: usize, sy: f64, sx: f64, border: Border) -> f64 {
    let (y0, x0) = (libm::floor(sy), libm::floor(sx));
    let (ty, tx) = (sy - y0, sx - x0);
    let fetch = |y: f64, x: f64| -> f64 {
        let (yi, xi) = (y as isize, x as isize);
        match border {
            Border::Replicate => {
                p[yi.clamp(0, h as isize - 1) as usize * w + xi.clamp(0, w as isize - 1) as usize]
            }
            Border::Zero => {
                if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
                    0.0
                } else {
                    p[yi as usize * w + xi as usize]
                }
            }
        }
    };
    let top = if tx == 0.0 { fetch(y0, x0) } else { fetch(y0, x0) * (1.0 - tx) + fetch(y0, x0 + 1.0) * tx };
    if ty == 0.0 {
        return top;
    }
    let bot = if tx == 0.0 {
        fetch(y0 + 1.0, x0)
    } else {
        fetch(y0 + 1.0, x0) * (1.0 - tx) + fetch(y0 + 1.0, x0 + 1.0) * tx
    };
    top * (1.0 - ty) + bot * ty
}

/// Box blur with replicate borders, separable.
fn box_blur(src: &Planes, r: usize) -> Planes {
    if r == 0 {
        return src.clone();
    }
    let (h, w) = (src.h, src.w);
    let n = (2 * r + 1) as f64;
    let mut out = src.clone();
    let mut tmp = vec![0.0; h * w];
    for c in 0..src.c {
        let p = src.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -(r as isize)..=(r as isize) {
                    acc += p[y * w + (x as isize + d).clamp(0, w as isize - 1) as usize];
                }
                tmp[y * w + x] = acc / n;
            }
        }
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -(r as isize)..=(r as isize) {
                    acc += tmp[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x];
                }
                dst[y * w + x] = acc / n;
            }
        }
    }
    out
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rem1(v: f64) -> f64 {
    v - libm::floor(v)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        rem1((g - b) / d / 6.0)
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = rem1(h) * 6.0;
    let i = libm::floor(h6);
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation, hue, in that order. Factors of 1 and
/// a zero hue shift are skipped so the identity is exact.
fn color_jitter(img: &mut Planes, b: f64, c: f64, s: f64, hue: f64) {
    let clamp01 = |v: f64| v.clamp(0.0, 1.0);
    let n = img.h * img.w;
    if b != 1.0 {
        img.map(|v| clamp01(v * b));
    }
    if c != 1.0 {
        let mean = (0..n)
            .map(|i| luma(img.data[i], img.data[n + i], img.data[2 * n + i]))
            .sum::<f64>()
            / n as f64;
        img.map(|v| clamp01((v - mean) * c + mean));
    }
    if s != 1.0 {
        for i in 0..n {
            let g = luma(img.data[i], img.data[n + i], img.data[2 * n + i]);
            for ch in 0..3 {
                let v = &mut img.data[ch * n + i];
                *v = clamp01(g + (*v - g) * s);
            }
        }
    }
    if hue != 0.0 {
        for i in 0..n {
            let (hh, ss, vv) = rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i]);
            let (r, g, bl) = hsv_to_rgb(hh + hue, ss, vv);
            img.data[i] = clamp01(r);
            img.data[n + i] = clamp01(g);
            img.data[2 * n + i] = clamp01(bl);
        }
    }
}

/// Blur, sharpen and noise as configured.
fn degrade(img: &mut Planes, cfg: &AugmentConfig, rng: &mut impl Rng) {
    if coin(rng, cfg.blur_prob) {
        *img = box_blur(img, rng.random_range(1..=2));
    }
    if coin(rng, cfg.sharpen_prob) {
        let amount = range(rng, (0.0, cfg.sharpen_amount_max));
        let blurred = box_blur(img, 1);
        for (v, b) in img.data.iter_mut().zip(&blurred.data) {
            *v = (*v + amount * (*v - b)).clamp(0.0, 1.0);
        }
    }
    if coin(rng, cfg.noise_prob) {
        let var = range(rng, (0.0, cfg.noise_var_max));
        if var > 0.0 {
            let normal = Normal::new(0.0, libm::sqrt(var)).expect("finite variance");
            for v in img.data.iter_mut() {
                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
}

/// Samples an affine transform and a crop window for a `src` canvas.
/// Retries up to ten times when the transformed canvas is smaller than the
/// crop, then falls back to an untransformed (upscaled if needed) center crop.
fn sample_geometry(
    src: (usize, usize),
    crop: (usize, usize),
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Affine, (usize, usize), (usize, usize)) {
    for _ in 0..10 {
        let scale = range(rng, cfg.scale);
        let out = (
            libm::round(src.0 as f64 * scale) as usize,
            libm::round(src.1 as f64 * scale) as usize,
        );
        let rot = sym(rng, cfg.rotation_deg).to_radians();
        let shear = sym(rng, cfg.shear_deg).to_radians();
        let flip = coin(rng, cfg.hflip_prob);
        let shift = (sym(rng, cfg.translate) * out.1 as f64, sym(rng, cfg.translate) * out.0 as f64);
        if out.0 < crop.0 || out.1 < crop.1 {
            continue;
        }
        let y0 = rng.random_range(0..=out.0 - crop.0);
        let x0 = rng.random_range(0..=out.1 - crop.1);
        let a = Affine::inverse_of(rot, out.0 as f64 / src.0 as f64, shear, flip, shift, src, out);
        let a = if rot == 0.0 && shear == 0.0 && !flip && shift == (0.0, 0.0) && out == src {
            Affine { m: [1.0, 0.0, 0.0, 1.0], t: [0.0, 0.0] }
        } else {
            a
        };
        return (a, out, (y0, x0));
    }
    let s = (crop.0 as f64 / src.0 as f64).max(crop.1 as f64 / src.1 as f64).max(1.0);
    let out = (
        (libm::ceil(src.0 as f64 * s) as usize).max(crop.0),
        (libm::ceil(src.1 as f64 * s) as usize).max(crop.1),
    );
    let a = if out == src {
        Affine { m: [1.0, 0.0, 0.0, 1.0], t: [0.0, 0.0] }
    } else {
        Affine::inverse_of(0.0, out.0 as f64 / src.0 as f64, 0.0, false, (0.0, 0.0), src, out)
    };
    (a, out, ((out.0 - crop.0) / 2, (out.1 - crop.1) / 2))
}

/// One augmented training example. `image` equals
/// `composite(alpha, fg, background_composite) * shadow_gain` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub image: Image,
    /// Background handed to the network (possibly misaligned).
    pub background: Image,
    /// Background used for compositing.
    pub background_composite: Image,
    pub alpha: AlphaMatte,
    pub fg: Image,
    /// Multiplicative gain per pixel applied by the shadow, all ones if none.
    pub shadow_gain: AlphaMatte,
    pub misaligned: bool,
    pub shadowed: bool,
}

impl AugmentedSample {
    /// Largest deviation between `image` and the recomposed inputs.
    pub fn recompose_error(&self) -> f64 {
        let n = self.alpha.data().len();
        let a = self.alpha.data();
        let g = self.shadow_gain.data();
        let mut worst: f64 = 0.0;
        for c in 0..3 {
            for i in 0..n {
                let f = self.fg.data()[c * n + i];
                let b = self.background_composite.data()[c * n + i];
                let v = (a[i] * f + (1.0 - a[i]) * b) * g[i];
                worst = worst.max(libm::fabs(v - self.image.data()[c * n + i]));
            }
        }
        worst
    }
}

fn to_image(p: Planes) -> Image {
    Image::new(p.h, p.w, p.data).expect("three-channel raster")
}

/// Augments one sample with a crop of `crop` = `(height, width)`.
pub fn augment_sample_sized(
    fg: &Image,
    alpha: &AlphaMatte,
    bg: &Image,
    crop: (usize, usize),
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedSample> {
    if fg.height() != alpha.height() || fg.width() != alpha.width() {
        return Err(crate::error::shape_err(
            "augment_sample",
            format!("{}x{}", fg.height(), fg.width()),
            format!("{}x{}", alpha.height(), alpha.width()),
        ));
    }
    // foreground and alpha share one transform
    let src = (fg.height(), fg.width());
    let (a_f, out_f, (fy, fx)) = sample_geometry(src, crop, cfg, rng);
    let fg_p = a_f.warp(&Planes::from_tensor(fg.as_tensor()), out_f.0, out_f.1, Border::Replicate);
    let al_p = a_f.warp(&Planes::from_tensor(alpha.as_tensor()), out_f.0, out_f.1, Border::Zero);
    let mut fg_c = fg_p.crop(fy, fx, crop.0, crop.1);
    let mut al_c = al_p.crop(fy, fx, crop.0, crop.1);
    al_c.map(|v| v.clamp(0.0, 1.0));

    let (a_b, out_b, (by, bx)) = sample_geometry((bg.height(), bg.width()), crop, cfg, rng);
    let mut bg_c = a_b
        .warp(&Planes::from_tensor(bg.as_tensor()), out_b.0, out_b.1, Border::Replicate)
        .crop(by, bx, crop.0, crop.1);

    for img in [&mut fg_c, &mut bg_c] {
        let (b, c, s) = (range(rng, cfg.brightness), range(rng, cfg.contrast), range(rng, cfg.saturation));
        let h = sym(rng, cfg.hue);
        color_jitter(img, b, c, s, h);
        degrade(img, cfg, rng);
    }

    let n = crop.0 * crop.1;
    let mut image = vec![0.0; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            let a = al_c.data[i];
            image[c * n + i] = a * fg_c.data[c * n + i] + (1.0 - a) * bg_c.data[c * n + i];
        }
    }
    let alpha_out = AlphaMatte::new(crop.0, crop.1, al_c.data).expect("alpha raster");

    let misaligned = coin(rng, cfg.misalign_prob);
    let background = if misaligned {
        let rot = sym(rng, cfg.misalign_rotation_deg).to_radians();
        let shift = (
            sym(rng, cfg.misalign_translate) * crop.1 as f64,
            sym(rng, cfg.misalign_translate) * crop.0 as f64,
        );
        let a = Affine::inverse_of(rot, 1.0, 0.0, false, shift, crop, crop);
        let mut p = a.warp(&bg_c, crop.0, crop.1, Border::Replicate);
        let (b, c, s) = (range(rng, cfg.misalign_bcs), range(rng, cfg.misalign_bcs), range(rng, cfg.misalign_bcs));
        color_jitter(&mut p, b, c, s, sym(rng, cfg.misalign_hue));
        to_image(p)
    } else {
        to_image(bg_c.clone())
    };

    let shadowed = coin(rng, cfg.shadow_prob);
    let mut image = Image::new(crop.0, crop.1, image).expect("image raster");
    let gain = if shadowed {
        let gain = shadow_gain(&alpha_out, &cfg.shadow, rng);
        image = apply_gain(&image, &gain);
        gain
    } else {
        AlphaMatte::filled(crop.0, crop.1, 1.0)
    };

    Ok(AugmentedSample {
        image,
        background,
        background_composite: to_image(bg_c),
        alpha: alpha_out,
        fg: to_image(fg_c),
        shadow_gain: gain,
        misaligned,
        shadowed,
    })
}

/// Augments one sample with a crop size drawn from the configured range.
pub fn augment_sample(
    fg: &Image,
    alpha: &AlphaMatte,
    bg: &Image,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedSample> {
    let crop = (cfg.sample_crop_side(rng), cfg.sample_crop_side(rng));
    augment_sample_sized(fg, alpha, bg, crop, cfg, rng)
}

/// Per-pixel multiplicative gain of a soft shadow cast behind the subject.
pub fn shadow_gain(alpha: &AlphaMatte, params: &ShadowParams, rng: &mut impl Rng) -> AlphaMatte {
    let (h, w) = (alpha.height(), alpha.width());
    let dx = sym(rng, params.offset) * w as f64;
    let dy = sym(rng, params.offset) * h as f64;
    let shift = Affine { m: [1.0, 0.0, 0.0, 1.0], t: [-dx, -dy] };
    let moved = shift.warp(&Planes::from_tensor(alpha.as_tensor()), h, w, Border::Zero);
    let r = libm::round(params.blur * h.min(w) as f64).max(1.0) as usize;
    let mask = box_blur(&moved, r);
    let strength = range(rng, params.strength);
    let gain = mask
        .data
        .iter()
        .zip(alpha.data())
        .map(|(&m, &a)| if a < 0.5 { 1.0 - strength * m.clamp(0.0, 1.0) } else { 1.0 })
        .collect();
    AlphaMatte::new(h, w, gain).expect("gain raster")
}

fn apply_gain(img: &Image, gain: &AlphaMatte) -> Image {
    let n = gain.data().len();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * gain.data()[i % n])
        .collect();
    Image::new(img.height(), img.width(), data).expect("same raster")
}

/// Darkens `image` with a shadow derived from `alpha`, only where `alpha < 0.5`.
pub fn shadow_augment(image: &Image, alpha: &AlphaMatte, rng: &mut impl Rng) -> Result<Image> {
    shadow_augment_with(image, alpha, &ShadowParams::default(), rng)
}

pub fn shadow_augment_with(image: &Image, alpha: &AlphaMatte, params: &ShadowParams, rng: &mut impl Rng) -> Result<Image> {
    if image.height() != alpha.height() || image.width() != alpha.width() {
        return Err(crate::error::shape_err(
            "shadow_augment",
            format!("{}x{}", image.height(), image.width()),
            format!("{}x{}", alpha.height(), alpha.width()),
        ));
    }
    Ok(apply_gain(image, &shadow_gain(alpha, params, rng)))
}

/// A batch of augmented samples sharing one crop size.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub image: Tensor4,
    pub background: Tensor4,
    pub background_composite: Tensor4,
    pub alpha: Tensor4,
    pub fg: Tensor4,
    pub seed: u64,
    pub samples: Vec<AugmentedSample>,
}

/// Augments `items` (foreground, alpha, background) with one shared crop size,
/// deterministically from `seed`.
pub fn augment_batch(items: &[(&Image, &AlphaMatte, &Image)], cfg: &AugmentConfig, seed: u64) -> Result<SampleBatch> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::EmptyBatch("augment_batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop = (cfg.sample_crop_side(&mut rng), cfg.sample_crop_side(&mut rng));
    let samples = items
        .iter()
        .map(|(f, a, b)| augment_sample_sized(f, a, b, crop, cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let stack = |f: fn(&AugmentedSample) -> &Tensor4| -> Result<Tensor4> {
        Tensor4::stack(&samples.iter().map(f).collect::<Vec<_>>())
    };
    Ok(SampleBatch {
        image: stack(|s| s.image.as_tensor())?,
        background: stack(|s| s.background.as_tensor())?,
        background_composite: stack(|s| s.background_composite.as_tensor())?,
        alpha: stack(|s| s.alpha.as_tensor())?,
        fg: stack(|s| s.fg.as_tensor())?,
        seed,
        samples,
    })
}

/// Ranges of the test-time background perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestPerturbation {
    /// Maximum subpixel shift per axis.
    pub shift: f64,
    pub gamma: (f64, f64),
    /// Noise mean is drawn from `[-noise_mean, noise_mean]`.
    pub noise_mean: f64,
    pub noise_var: (f64, f64),
}

impl Default for TestPerturbation {
    fn default() -> Self {
        Self {
            shift: 0.3,
            gamma: (0.85, 1.15),
            noise_mean: 0.02,
            noise_var: (0.08, 0.15),
        }
    }
}

impl TestPerturbation {
    pub fn none() -> Self {
        Self {
            shift: 0.0,
            gamma: (1.0, 1.0),
            noise_mean: 0.0,
            noise_var: (0.0, 0.0),
        }
    }
}

/// Shifts content by `(dy, dx)` pixels with bilinear sampling and replicate borders.
pub fn subpixel_shift(img: &Image, dy: f64, dx: f64) -> Image {
    let a = Affine { m: [1.0, 0.0, 0.0, 1.0], t: [-dx, -dy] };
    to_image(a.warp(&Planes::from_tensor(img.as_tensor()), img.height(), img.width(), Border::Replicate))
}

/// Per-channel gaussian noise field with a randomly drawn mean and variance.
/// Returns the field along with the drawn `(mean, variance)`.
pub fn test_noise_field(len: usize, p: &TestPerturbation, rng: &mut impl Rng) -> (Vec<f64>, f64, f64) {
    let mu = sym(rng, p.noise_mean);
    let var = range(rng, p.noise_var);
    if var <= 0.0 {
        return (vec![mu; len], mu, var);
    }
    let normal = Normal::new(mu, libm::sqrt(var)).expect("finite variance");
    ((0..len).map(|_| normal.sample(rng)).collect(), mu, var)
}

pub fn perturb_background_for_test(bg: &Image, rng: &mut impl Rng) -> Image {
    perturb_background_with(bg, &TestPerturbation::default(), rng)
}

/// Subpixel shift, then gamma, then additive noise.
pub fn perturb_background_with(bg: &Image, p: &TestPerturbation, rng: &mut impl Rng) -> Image {
    let (dy, dx) = (sym(rng, p.shift), sym(rng, p.shift));
    let shifted = if dy == 0.0 && dx == 0.0 { bg.clone() } else { subpixel_shift(bg, dy, dx) };
    let gamma = range(rng, p.gamma);
    let (noise, mu, var) = test_noise_field(shifted.data().len(), p, rng);
    let data = shifted
        .data()
        .iter()
        .zip(&noise)
        .map(|(&v, &n)| {
            let g = if gamma == 1.0 { v } else { libm::pow(v, gamma) };
            if mu == 0.0 && var == 0.0 {
                g
            } else {
                g + n
            }
        })
        .collect();
    Image::new(bg.height(), bg.width(), data).expect("same raster")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::composite;
    use crate::synth::{generate_sample, SynthSpec};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zip_epoch_pairs() {
        let p = zip_epoch(60, 100);
        assert_eq!(p.len(), 100);
        assert_eq!(p[59], (59, 59));
        assert_eq!(p[60], (0, 60));
        assert_eq!(p[99], (39, 99));
        assert_eq!(
            zip_epoch(3, 7),
            vec![(0, 0), (1, 1), (2, 2), (0, 3), (1, 4), (2, 5), (0, 6)]
        );
        assert_eq!(zip_epoch(4, 4), (0..4).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn identity_config_composites_exactly() {
        let s = generate_sample(&SynthSpec::default().with_size(64, 64), 1).unwrap();
        let cfg = AugmentConfig {
            crop: (64, 64),
            ..AugmentConfig::identity()
        };
        let out = augment_sample(&s.fg, &s.alpha, &s.bg, &cfg, &mut rng(3)).unwrap();
        assert_eq!(out.alpha, s.alpha);
        assert_eq!(out.fg, s.fg);
        assert_eq!(out.background, s.bg);
        assert_eq!(out.image, composite(&s.alpha, &s.fg, &s.bg).unwrap());
        assert!(!out.misaligned && !out.shadowed);
    }

    #[test]
    fn augmented_samples_recompose() {
        let s = generate_sample(&SynthSpec::default().with_size(96, 96), 5).unwrap();
        let cfg = AugmentConfig {
            crop: (48, 64),
            misalign_prob: 1.0,
            shadow_prob: 1.0,
            ..AugmentConfig::default()
        };
        for seed in 0..6 {
            let out = augment_sample(&s.fg, &s.alpha, &s.bg, &cfg, &mut rng(seed)).unwrap();
            assert!(out.recompose_error() < 1e-12);
            for img in [&out.image, &out.background, &out.fg] {
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn deterministic_batches() {
        let s = generate_sample(&SynthSpec::default().with_size(80, 80), 2).unwrap();
        let items = [(&s.fg, &s.alpha, &s.bg), (&s.fg, &s.alpha, &s.bg)];
        let cfg = AugmentConfig {
            crop: (32, 64),
            crop_multiple: 16,
            ..AugmentConfig::default()
        };
        let a = augment_batch(&items, &cfg, 11).unwrap();
        assert_eq!(a, augment_batch(&items, &cfg, 11).unwrap());
        assert_eq!(a.image.h() % 16, 0);
        assert_eq!(a.image.w() % 16, 0);
    }

    #[test]
    fn shadow_trivial_cases() {
        let img = Image::filled(20, 20, 0.6);
        let zero = AlphaMatte::filled(20, 20, 0.0);
        assert_eq!(shadow_augment(&img, &zero, &mut rng(0)).unwrap(), img);
        let a = AlphaMatte::new(20, 20, (0..400).map(|i| if i % 20 < 10 { 1.0 } else { 0.0 }).collect()).unwrap();
        let p = ShadowParams {
            strength: (0.0, 0.0),
            ..ShadowParams::default()
        };
        assert_eq!(shadow_augment_with(&img, &a, &p, &mut rng(0)).unwrap(), img);
    }

    #[test]
    fn crop_fallback_when_source_is_small() {
        let s = generate_sample(&SynthSpec::default().with_size(40, 40), 9).unwrap();
        let cfg = AugmentConfig {
            crop: (64, 64),
            ..AugmentConfig::default()
        };
        let out = augment_sample(&s.fg, &s.alpha, &s.bg, &cfg, &mut rng(1)).unwrap();
        assert_eq!((out.image.height(), out.image.width()), (64, 64));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            shadow_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            crop: (300, 200),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let s = generate_sample(&SynthSpec::default().with_size(32, 32), 4).unwrap();
        assert_eq!(perturb_background_with(&s.bg, &TestPerturbation::none(), &mut rng(2)), s.bg);
    }
}
