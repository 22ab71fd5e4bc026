//! PNG rasters and checkpoint files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bgmatte_core::checkpoint::Checkpoint;
use bgmatte_core::metrics::Trimap;
use bgmatte_core::model::ModelConfig;
use bgmatte_core::{AlphaMatte, Image};
use image::{DynamicImage, GrayImage, RgbImage};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).with_context(|| format!("reading {}", path.display()))
}

fn is_16bit(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    )
}

/// Reads an RGB image into `[0, 1]`. 8- and 16-bit PNGs are supported; an
/// alpha channel, if present, is ignored.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    if is_16bit(&img) {
        for (i, p) in img.to_rgb16().pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c] as f64 / 65535.0;
            }
        }
    } else {
        for (i, p) in img.to_rgb8().pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c] as f64 / 255.0;
            }
        }
    }
    Ok(Image::new(h, w, data)?)
}

/// Reads a single-channel matte. Color files are converted to luma.
pub fn read_alpha(path: &Path) -> Result<AlphaMatte> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_16bit(&img) {
        img.to_luma16().pixels().map(|p| p[0] as f64 / 65535.0).collect()
    } else {
        img.to_luma8().pixels().map(|p| p[0] as f64 / 255.0).collect()
    };
    Ok(AlphaMatte::new(h, w, data)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}

/// Writes an 8-bit RGB PNG.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[n + i]), quantize(d[2 * n + i])])
    });
    save(DynamicImage::ImageRgb8(out), path)
}

pub fn write_gray(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([quantize(values[y as usize * w + x as usize])]));
    save(DynamicImage::ImageLuma8(out), path)
}

/// Writes an 8-bit grayscale PNG.
pub fn write_alpha(path: &Path, a: &AlphaMatte) -> Result<()> {
    write_gray(path, a.height(), a.width(), a.data())
}

/// Background 0, unknown 128, foreground 255.
pub fn write_trimap(path: &Path, t: &Trimap) -> Result<()> {
    let (w, h) = (t.width(), t.height());
    let gray = t.to_gray();
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([gray[y as usize * w + x as usize]]));
    save(DynamicImage::ImageLuma8(out), path)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // write then rename so an interrupted run never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ck.encode()).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let ck = match expected {
        Some(cfg) => Checkpoint::decode_expecting(&bytes, cfg),
        None => Checkpoint::decode(&bytes),
    };
    ck.with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Fails unless both rasters have the same size.
pub fn same_size(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        bail!("{what}: size mismatch {}x{} vs {}x{}", a.0, a.1, b.0, b.1);
    }
    Ok(())
}
