//! Raster value types, compositing arithmetic and resampling.
//!
//! All rasters are single items of a [`Tensor4`] (`n == 1`), channel-major,
//! holding normalized real values. Constructors clamp into each type's range
//! rather than rejecting, so values that went slightly out of range through
//! file-format rounding are tolerated.
//!
//! Resampling uses half-pixel centers without corner alignment: output pixel
//! `o` samples the source at `(o + 0.5) * in / out - 0.5`. Nearest sampling
//! takes the floor of `(o + 0.5) * in / out`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

macro_rules! raster_type {
    ($(#[$meta:meta])* $name:ident, channels = $ch:expr, range = ($lo:expr, $hi:expr)) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Tensor4);

        impl $name {
            pub const CHANNELS: usize = $ch;
            pub const MIN: f64 = $lo;
            pub const MAX: f64 = $hi;

            /// Builds from channel-major values, clamping into range. NaN maps to the lower bound.
            pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                if height == 0 || width == 0 {
                    return Err(shape_err(stringify!($name), "height, width >= 1", format!("{height}x{width}")));
                }
                let t = Tensor4::from_vec(1, $ch, height, width, data)?;
                Ok(Self::from_tensor_clamped(t))
            }

            pub fn filled(height: usize, width: usize, value: f64) -> Self {
                Self::from_tensor_clamped(Tensor4::filled(1, $ch, height, width, value))
            }

            /// Wraps a `[1, C, h, w]` tensor, clamping values into range.
            pub fn from_tensor(t: Tensor4) -> Result<Self> {
                if t.n() != 1 || t.c() != $ch || t.h() == 0 || t.w() == 0 {
                    return Err(shape_err(
                        stringify!($name),
                        format!("[1, {}, h>=1, w>=1]", $ch),
                        format!("{:?}", t.shape()),
                    ));
                }
                Ok(Self::from_tensor_clamped(t))
            }

            fn from_tensor_clamped(mut t: Tensor4) -> Self {
                t.map_inplace(|v| if v.is_nan() { $lo } else { v.clamp($lo, $hi) });
                Self(t)
            }

            /// Splits a batch tensor into per-item rasters.
            pub fn unbatch(t: &Tensor4) -> Result<Vec<Self>> {
                (0..t.n()).map(|b| Self::from_tensor(t.batch_item(b))).collect()
            }

            /// Stacks rasters of equal size into a batch tensor.
            pub fn batch(items: &[&Self]) -> Result<Tensor4> {
                let parts: Vec<&Tensor4> = items.iter().map(|r| &r.0).collect();
                Tensor4::stack(&parts)
            }

            #[inline]
            pub fn height(&self) -> usize {
                self.0.h()
            }
            #[inline]
            pub fn width(&self) -> usize {
                self.0.w()
            }
            #[inline]
            pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
                self.0.at(0, c, y, x)
            }
            #[inline]
            pub fn data(&self) -> &[f64] {
                self.0.data()
            }
            #[inline]
            pub fn as_tensor(&self) -> &Tensor4 {
                &self.0
            }
            pub fn into_tensor(self) -> Tensor4 {
                self.0
            }
        }
    };
}

raster_type!(
    /// RGB image with values in `[0, 1]`.
    Image, channels = 3, range = (0.0, 1.0)
);
raster_type!(
    /// Per-pixel opacity in `[0, 1]`.
    AlphaMatte, channels = 1, range = (0.0, 1.0)
);
raster_type!(
    /// Per-pixel error estimate in `[0, 1]`.
    ErrorMap, channels = 1, range = (0.0, 1.0)
);
raster_type!(
    /// Foreground minus input image, in `[-1, 1]`.
    ForegroundResidual, channels = 3, range = (-1.0, 1.0)
);

fn check_hw(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(shape_err(
            op,
            format!("{}x{}", a.h(), a.w()),
            format!("{}x{}", b.h(), b.w()),
        ));
    }
    Ok(())
}

/// `alpha * fg + (1 - alpha) * bg` per pixel.
pub fn composite(alpha: &AlphaMatte, fg: &Image, bg: &Image) -> Result<Image> {
    let t = composite_batch(alpha.as_tensor(), fg.as_tensor(), bg.as_tensor())?;
    Image::from_tensor(t)
}

/// Batched compositing on `[n,1,h,w]`, `[n,3,h,w]`, `[n,3,h,w]` tensors.
pub fn composite_batch(alpha: &Tensor4, fg: &Tensor4, bg: &Tensor4) -> Result<Tensor4> {
    fg.expect_same("composite", bg)?;
    alpha.expect_shape("composite", [fg.n(), 1, fg.h(), fg.w()])?;
    let mut out = Tensor4::zeros_like(fg);
    for b in 0..fg.n() {
        let a = alpha.plane(b, 0);
        for c in 0..fg.c() {
            let f = fg.plane(b, c);
            let g = bg.plane(b, c);
            let o = out.plane_mut(b, c);
            for i in 0..a.len() {
                o[i] = a[i] * f[i] + (1.0 - a[i]) * g[i];
            }
        }
    }
    Ok(out)
}

/// `clamp(residual + image, 0, 1)`.
pub fn recover_foreground(residual: &ForegroundResidual, image: &Image) -> Result<Image> {
    check_hw("recover_foreground", residual.as_tensor(), image.as_tensor())?;
    let t = residual
        .as_tensor()
        .zip_map(image.as_tensor(), |r, i| (r + i).clamp(0.0, 1.0))?;
    Image::from_tensor(t)
}

/// Batched foreground recovery. Also returns the pass-through mask used by the
/// backward pass (1 where the clamp was inactive).
pub fn recover_foreground_batch(residual: &Tensor4, image: &Tensor4) -> Result<(Tensor4, Tensor4)> {
    residual.expect_same("recover_foreground", image)?;
    let sum = residual.zip_map(image, |r, i| r + i)?;
    let mask = sum.map(|v| if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
    Ok((sum.map(|v| v.clamp(0.0, 1.0)), mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(s) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            Tap { i0, i1, frac }
        })
        .collect()
}

fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    // floor((o + 0.5) * src / dst) in exact integer arithmetic
    (0..dst)
        .map(|o| ((2 * o + 1) * src / (2 * dst)).min(src - 1))
        .collect()
}

/// Resamples every plane of `x` to `target_h` x `target_w`.
pub fn resize(x: &Tensor4, target_h: usize, target_w: usize, mode: ResizeMode) -> Tensor4 {
    assert!(target_h >= 1 && target_w >= 1, "resize target must be at least 1x1");
    if x.h() == target_h && x.w() == target_w {
        return x.clone();
    }
    let mut out = Tensor4::zeros(x.n(), x.c(), target_h, target_w);
    let (sw, ow) = (x.w(), target_w);
    match mode {
        ResizeMode::Bilinear => {
            let ty = bilinear_taps(x.h(), target_h);
            let tx = bilinear_taps(x.w(), target_w);
            for b in 0..x.n() {
                for c in 0..x.c() {
                    let src = x.plane(b, c);
                    let dst = out.plane_mut(b, c);
                    for (oy, ry) in ty.iter().enumerate() {
                        let r0 = &src[ry.i0 * sw..(ry.i0 + 1) * sw];
                        let r1 = &src[ry.i1 * sw..(ry.i1 + 1) * sw];
                        let row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, rx) in tx.iter().enumerate() {
                            let top = r0[rx.i0] + rx.frac * (r0[rx.i1] - r0[rx.i0]);
                            let bot = r1[rx.i0] + rx.frac * (r1[rx.i1] - r1[rx.i0]);
                            row[ox] = top + ry.frac * (bot - top);
                        }
                    }
                }
            }
        }
        ResizeMode::Nearest => {
            let ty = nearest_taps(x.h(), target_h);
            let tx = nearest_taps(x.w(), target_w);
            for b in 0..x.n() {
                for c in 0..x.c() {
                    let src = x.plane(b, c);
                    let dst = out.plane_mut(b, c);
                    for (oy, &sy) in ty.iter().enumerate() {
                        for (ox, &sx) in tx.iter().enumerate() {
                            dst[oy * ow + ox] = src[sy * sw + sx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize`]: maps a gradient at the target size back onto a
/// source of size `src_h` x `src_w`.
pub fn resize_backward(grad: &Tensor4, src_h: usize, src_w: usize, mode: ResizeMode) -> Tensor4 {
    if grad.h() == src_h && grad.w() == src_w {
        return grad.clone();
    }
    let mut out = Tensor4::zeros(grad.n(), grad.c(), src_h, src_w);
    let ow = grad.w();
    match mode {
        ResizeMode::Bilinear => {
            let ty = bilinear_taps(src_h, grad.h());
            let tx = bilinear_taps(src_w, grad.w());
            for b in 0..grad.n() {
                for c in 0..grad.c() {
                    let g = grad.plane(b, c);
                    let dst = out.plane_mut(b, c);
                    for (oy, ry) in ty.iter().enumerate() {
                        for (ox, rx) in tx.iter().enumerate() {
                            let v = g[oy * ow + ox];
                            let top = v * (1.0 - ry.frac);
                            let bot = v * ry.frac;
                            dst[ry.i0 * src_w + rx.i0] += top * (1.0 - rx.frac);
                            dst[ry.i0 * src_w + rx.i1] += top * rx.frac;
                            dst[ry.i1 * src_w + rx.i0] += bot * (1.0 - rx.frac);
                            dst[ry.i1 * src_w + rx.i1] += bot * rx.frac;
                        }
                    }
                }
            }
        }
        ResizeMode::Nearest => {
            let ty = nearest_taps(src_h, grad.h());
            let tx = nearest_taps(src_w, grad.w());
            for b in 0..grad.n() {
                for c in 0..grad.c() {
                    let g = grad.plane(b, c);
                    let dst = out.plane_mut(b, c);
                    for (oy, &sy) in ty.iter().enumerate() {
                        for (ox, &sx) in tx.iter().enumerate() {
                            dst[sy * src_w + sx] += g[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Resamples a raster of any type, keeping its type.
pub fn resize_image(img: &Image, h: usize, w: usize, mode: ResizeMode) -> Image {
    Image::from_tensor(resize(img.as_tensor(), h, w, mode)).expect("resize keeps raster shape")
}

pub fn resize_alpha(a: &AlphaMatte, h: usize, w: usize, mode: ResizeMode) -> AlphaMatte {
    AlphaMatte::from_tensor(resize(a.as_tensor(), h, w, mode)).expect("resize keeps raster shape")
}

/// Downsamples `x` by an integer factor with bilinear sampling.
pub fn downsample(x: &Tensor4, factor: usize) -> Result<Tensor4> {
    if x.h() % factor != 0 {
        return Err(Error::NotDivisible { op: "downsample", dim: "height", value: x.h(), multiple: factor });
    }
    if x.w() % factor != 0 {
        return Err(Error::NotDivisible { op: "downsample", dim: "width", value: x.w(), multiple: factor });
    }
    Ok(resize(x, x.h() / factor, x.w() / factor, ResizeMode::Bilinear))
}

/// Clamps every value to `[lo, hi]`.
pub fn clamp(x: &Tensor4, lo: f64, hi: f64) -> Tensor4 {
    x.map(|v| v.clamp(lo, hi))
}
