//! Pass-through timing versus refinement budget.
//!
//! Inputs are synthesized in memory before timing starts, so the timed region
//! covers the model alone. The pipeline runs on the calling thread; `threads`
//! is recorded for reproducibility and only `1` is accepted.

use std::fs;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use bgmatte_core::model::Model;
use bgmatte_core::refiner::{RefineConfig, Selection, CELL};
use bgmatte_core::synth::{generate_sample, SynthSpec};

use crate::infer::KSpec;

pub const BENCH_HEADER: [&str; 11] = [
    "resolution",
    "c",
    "k",
    "cells",
    "batch",
    "median_ms",
    "mean_ms",
    "fps",
    "refined_fraction",
    "repeats",
    "threads",
];

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub resolutions: Vec<(usize, usize)>,
    pub ks: Vec<KSpec>,
    pub repeats: usize,
    pub warmup: usize,
    pub c: usize,
    pub threads: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub c: usize,
    pub k: KSpec,
    pub cells: usize,
    pub batch: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub fps: f64,
    pub refined_fraction: f64,
    pub repeats: usize,
    pub threads: usize,
}

/// `256x256,512x384` as `(height, width)` pairs (`WxH` order, like screen sizes).
pub fn parse_resolutions(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|r| {
            let (w, h) = r.trim().split_once(['x', 'X']).with_context(|| format!("resolution `{r}` is not WxH"))?;
            Ok((h.trim().parse()?, w.trim().parse()?))
        })
        .collect()
}

pub fn parse_ks(s: &str) -> Result<Vec<KSpec>> {
    s.split(',').map(str::parse).collect()
}

/// Number of open descriptors of this process, where the platform exposes them.
pub fn open_fds() -> Option<usize> {
    fs::read_dir("/proc/self/fd").ok().map(|d| d.count())
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn bench(model: &Model, a: &BenchArgs) -> Result<Vec<BenchRow>> {
    if a.threads != 1 {
        bail!("the pipeline is single-threaded; --threads must be 1");
    }
    ensure!(a.repeats > 0, "repeats must be positive");
    let m = Model::size_multiple(a.c);
    let mut rows = Vec::new();
    for &(h, w) in &a.resolutions {
        if h % m != 0 || w % m != 0 {
            bail!("resolution {w}x{h} must be a multiple of {m} for c = {}", a.c);
        }
        let s = generate_sample(&SynthSpec::default().with_size(h, w), a.seed)?;
        let image = bgmatte_core::imagecore::composite(&s.alpha, &s.fg, &s.bg)?;
        let (it, bt) = (image.as_tensor(), s.bg.as_tensor());
        let all = (h / CELL) * (w / CELL);
        for &k in &a.ks {
            let cells = k.cells(1, h, w);
            let rc = RefineConfig {
                c: a.c,
                selection: Selection::TopK(cells),
                kernel: model.config.kernel,
            };
            for _ in 0..a.warmup {
                model.predict(it, bt, &rc)?;
            }
            let mut times = Vec::with_capacity(a.repeats);
            let fds = open_fds();
            for _ in 0..a.repeats {
                let t = Instant::now();
                let p = model.predict(it, bt, &rc)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(p);
            }
            ensure!(open_fds() == fds, "file descriptors changed inside the timed region");
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let med = median(&mut times);
            rows.push(BenchRow {
                height: h,
                width: w,
                c: a.c,
                k,
                cells,
                batch: 1,
                median_ms: med,
                mean_ms: mean,
                fps: 1000.0 / med,
                refined_fraction: cells as f64 / all as f64,
                repeats: a.repeats,
                threads: a.threads,
            });
        }
    }
    rows.sort_by(|x, y| {
        (x.height * x.width, x.height, x.k.order_key(1, x.height, x.width))
            .cmp(&(y.height * y.width, y.height, y.k.order_key(1, y.height, y.width)))
    });
    Ok(rows)
}

pub fn write_csv<W: std::io::Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_HEADER)?;
    for r in rows {
        w.write_record([
            format!("{}x{}", r.width, r.height),
            r.c.to_string(),
            r.k.to_string(),
            r.cells.to_string(),
            r.batch.to_string(),
            format!("{:.4}", r.median_ms),
            format!("{:.4}", r.mean_ms),
            format!("{:.3}", r.fps),
            format!("{:.5}", r.refined_fraction),
            r.repeats.to_string(),
            r.threads.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
