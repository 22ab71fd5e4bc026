//! `fgr/`, `pha/`, `bgr/` PNG directories and the synthetic generator.
//!
//! A sample is a file in `fgr/` with a same-named matte in `pha/`.
//! Backgrounds in `bgr/` are an independent set.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bgmatte_core::synth::{generate_sample, SynthSpec};
use bgmatte_core::train::{derive_seed, Dataset};
use bgmatte_core::{AlphaMatte, Image};

use crate::config::DatasetSource;
use crate::io::{read_alpha, read_image, same_size, write_alpha, write_image};

/// Sorted PNG files of a directory.
pub fn list_png(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SampleFiles {
    pub name: String,
    pub fgr: PathBuf,
    /// `None` when the matte is missing.
    pub pha: Option<PathBuf>,
}

pub fn sample_files(root: &Path) -> Result<Vec<SampleFiles>> {
    let pha = root.join("pha");
    Ok(list_png(&root.join("fgr"))?
        .into_iter()
        .map(|fgr| {
            let name = fgr.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let p = pha.join(&name);
            SampleFiles {
                pha: p.is_file().then_some(p),
                name,
                fgr,
            }
        })
        .collect())
}

pub fn load_sample(s: &SampleFiles) -> Result<Option<(Image, AlphaMatte)>> {
    let Some(pha) = &s.pha else { return Ok(None) };
    let fg = read_image(&s.fgr)?;
    let alpha = read_alpha(pha)?;
    same_size(&s.name, (fg.height(), fg.width()), (alpha.height(), alpha.width()))?;
    Ok(Some((fg, alpha)))
}

pub fn load_backgrounds(root: &Path) -> Result<Vec<Image>> {
    list_png(&root.join("bgr"))?.iter().map(|p| read_image(p)).collect()
}

/// Loads a directory dataset. Samples without a matte are skipped with a
/// message on stderr.
pub fn load_dir(name: &str, root: &Path) -> Result<Dataset> {
    let mut samples = Vec::new();
    for s in sample_files(root)? {
        match load_sample(&s)? {
            Some(x) => samples.push(x),
            None => eprintln!("warning: {}: no matte in pha/, skipped", s.fgr.display()),
        }
    }
    let backgrounds = load_backgrounds(root)?;
    if samples.is_empty() || backgrounds.is_empty() {
        bail!("dataset {name} at {}: needs at least one fgr/pha pair and one bgr image", root.display());
    }
    Ok(Dataset {
        name: name.into(),
        samples,
        backgrounds,
    })
}

/// Seed of synthetic sample `i` in a set generated with `seed`.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    derive_seed(&[seed, i as u64])
}

pub fn synthesize(name: &str, spec: &SynthSpec, count: usize, seed: u64) -> Result<Dataset> {
    let mut d = Dataset {
        name: name.into(),
        samples: Vec::with_capacity(count),
        backgrounds: Vec::with_capacity(count),
    };
    for i in 0..count {
        let s = generate_sample(spec, sample_seed(seed, i))?;
        d.samples.push((s.fg, s.alpha));
        d.backgrounds.push(s.bg);
    }
    Ok(d)
}

pub fn materialize(name: &str, src: &DatasetSource) -> Result<Dataset> {
    match src {
        DatasetSource::Synthetic { count, spec, seed } => synthesize(name, spec, *count, *seed),
        DatasetSource::Directory(p) => load_dir(name, p),
    }
}

/// Writes `count` synthetic triples as `fgr/`, `pha/`, `bgr/` PNGs plus
/// `manifest.txt` (one `file seed` line per sample).
pub fn generate(out: &Path, spec: &SynthSpec, count: usize, seed: u64) -> Result<()> {
    spec.validate()?;
    for d in ["fgr", "pha", "bgr"] {
        fs::create_dir_all(out.join(d)).with_context(|| format!("creating {}", out.join(d).display()))?;
    }
    let mut manifest = String::from("# file seed\n");
    for i in 0..count {
        let s = sample_seed(seed, i);
        let sample = generate_sample(spec, s)?;
        let file = format!("{i:05}.png");
        write_image(&out.join("fgr").join(&file), &sample.fg)?;
        write_alpha(&out.join("pha").join(&file), &sample.alpha)?;
        write_image(&out.join("bgr").join(&file), &sample.bg)?;
        manifest.push_str(&format!("{file} {s}\n"));
    }
    fs::File::create(out.join("manifest.txt"))?.write_all(manifest.as_bytes())?;
    Ok(())
}
