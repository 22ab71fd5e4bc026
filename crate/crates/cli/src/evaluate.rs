//! Composite-and-score evaluation over an `fgr/`, `pha/`, `bgr/` directory.
//!
//! Every sample is composited onto [`BACKGROUNDS_PER_SAMPLE`] backgrounds.
//! The model sees a perturbed copy of the true background (subpixel shift,
//! gamma, noise). Metrics are computed over the unknown band of a trimap
//! derived from the ground-truth matte.

use std::path::Path;

use anyhow::{bail, Result};
use bgmatte_core::augment::perturb_background_for_test;
use bgmatte_core::imagecore::{composite, resize_image};
use bgmatte_core::metrics::{evaluate_matte, make_trimap, MetricParams, MetricReport};
use bgmatte_core::train::derive_seed;
use bgmatte_core::{AlphaMatte, Image, ResizeMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{load_backgrounds, load_sample, sample_files};

pub const BACKGROUNDS_PER_SAMPLE: usize = 5;
pub const TRIMAP_LO: f64 = 0.06;
pub const TRIMAP_HI: f64 = 0.96;
pub const TRIMAP_ITERS: usize = 10;

pub const EVAL_HEADER: [&str; 9] = [
    "sample",
    "background",
    "sad",
    "mse",
    "grad",
    "conn",
    "fg_mse",
    "unknown_pixels",
    "note",
];

/// One composite handed to a predictor.
pub struct EvalCase<'a> {
    pub sample: usize,
    pub image: &'a Image,
    /// Perturbed background given to the model.
    pub background: &'a Image,
    pub alpha_star: &'a AlphaMatte,
    pub fg_star: &'a Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample: String,
    pub background: String,
    /// `None` for skipped samples.
    pub report: Option<MetricReport>,
    pub note: String,
}

/// Scores `predict` on every sample/background composite under `root`.
pub fn evaluate_with(
    root: &Path,
    seed: u64,
    predict: &mut dyn FnMut(&EvalCase<'_>) -> Result<(AlphaMatte, Image)>,
) -> Result<Vec<EvalRow>> {
    let files = sample_files(root)?;
    let backgrounds = load_backgrounds(root)?;
    if files.is_empty() || backgrounds.is_empty() {
        bail!("{}: needs fgr/ samples and bgr/ backgrounds", root.display());
    }
    let params = MetricParams::default();
    let mut rows = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let Some((fg, alpha)) = load_sample(f)? else {
            eprintln!("warning: {}: no ground-truth matte, skipped", f.fgr.display());
            rows.push(EvalRow {
                sample: f.name.clone(),
                background: String::new(),
                report: None,
                note: "missing ground truth".into(),
            });
            continue;
        };
        let trimap = make_trimap(&alpha, TRIMAP_LO, TRIMAP_HI, TRIMAP_ITERS);
        let (h, w) = (alpha.height(), alpha.width());
        for j in 0..BACKGROUNDS_PER_SAMPLE {
            let b = (i * BACKGROUNDS_PER_SAMPLE + j) % backgrounds.len();
            let bg = &backgrounds[b];
            let bg = if (bg.height(), bg.width()) == (h, w) {
                bg.clone()
            } else {
                resize_image(bg, h, w, ResizeMode::Bilinear)
            };
            let image = composite(&alpha, &fg, &bg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64, j as u64]));
            let seen = perturb_background_for_test(&bg, &mut rng);
            let case = EvalCase {
                sample: i,
                image: &image,
                background: &seen,
                alpha_star: &alpha,
                fg_star: &fg,
            };
            let (pa, pf) = predict(&case)?;
            let report = evaluate_matte(&pa, &alpha, Some((&pf, &fg)), &trimap, &params)?;
            let mut note = Vec::new();
            if report.empty_unknown {
                note.push("empty unknown region");
            }
            if report.empty_fg_mask {
                note.push("empty foreground mask");
            }
            rows.push(EvalRow {
                sample: f.name.clone(),
                background: b.to_string(),
                report: Some(report),
                note: note.join("; "),
            });
        }
    }
    Ok(rows)
}

/// Mean of every scored row.
pub fn mean_report(rows: &[EvalRow]) -> Option<MetricReport> {
    let scored: Vec<&MetricReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
    if scored.is_empty() {
        return None;
    }
    let n = scored.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| scored.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(MetricReport {
        sad: mean(|r| r.sad),
        mse: mean(|r| r.mse),
        grad: mean(|r| r.grad),
        conn: mean(|r| r.conn),
        fg_mse: mean(|r| r.fg_mse),
        unknown_pixel_count: scored.iter().map(|r| r.unknown_pixel_count).sum::<usize>() / scored.len(),
        ..MetricReport::default()
    })
}

/// Writes the rows plus a trailing `mean` row.
pub fn write_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EVAL_HEADER)?;
    let mut put = |sample: &str, bg: &str, r: Option<&MetricReport>, note: &str| -> Result<()> {
        let m = |v: Option<String>| v.unwrap_or_default();
        w.write_record([
            sample.to_string(),
            bg.to_string(),
            m(r.map(|r| r.sad.to_string())),
            m(r.map(|r| r.mse.to_string())),
            m(r.map(|r| r.grad.to_string())),
            m(r.map(|r| r.conn.to_string())),
            m(r.map(|r| r.fg_mse.to_string())),
            m(r.map(|r| r.unknown_pixel_count.to_string())),
            note.to_string(),
        ])?;
        Ok(())
    };
    for r in rows {
        put(&r.sample, &r.background, r.report.as_ref(), &r.note)?;
    }
    let mean = mean_report(rows);
    put("mean", "", mean.as_ref(), if mean.is_some() { "" } else { "no scored samples" })?;
    w.flush()?;
    Ok(())
}
