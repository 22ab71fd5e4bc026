//! Single-image inference.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, Result};
use bgmatte_core::imagecore::composite;
use bgmatte_core::model::{k_for_area_fraction, Model, Prediction};
use bgmatte_core::refiner::{RefineConfig, Selection, CELL};
use bgmatte_core::{AlphaMatte, Image};

use crate::io::{read_checkpoint, read_image, same_size, write_alpha, write_image};

/// Refinement budget on the command line: a cell count, a percentage of the
/// image area (`4%`) or `full`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KSpec {
    Count(usize),
    Percent(f64),
    Full,
}

impl FromStr for KSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(Self::Full);
        }
        if let Some(p) = s.strip_suffix('%') {
            let p: f64 = p.trim().parse().map_err(|_| anyhow!("bad percentage `{s}`"))?;
            if !(0.0..=100.0).contains(&p) {
                return Err(anyhow!("percentage `{s}` outside 0..100"));
            }
            return Ok(Self::Percent(p));
        }
        s.parse().map(Self::Count).map_err(|_| anyhow!("k must be a count, a percentage or `full`, got `{s}`"))
    }
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Count(k) => write!(f, "{k}"),
            Self::Percent(p) => write!(f, "{p}%"),
            Self::Full => f.write_str("full"),
        }
    }
}

impl KSpec {
    /// Cells refined for `n` frames of `h x w` (sizes already padded).
    pub fn cells(&self, n: usize, h: usize, w: usize) -> usize {
        let all = n * (h / CELL) * (w / CELL);
        match *self {
            Self::Count(k) => k.min(all),
            Self::Percent(p) => k_for_area_fraction(n, h, w, p / 100.0),
            Self::Full => all,
        }
    }

    /// Sort key: counts in order, then `full`.
    pub fn order_key(&self, n: usize, h: usize, w: usize) -> (bool, usize) {
        (matches!(self, Self::Full), self.cells(n, h, w))
    }
}

pub fn refine_config(model: &Model, c: usize, k: KSpec, h: usize, w: usize) -> RefineConfig {
    let m = Model::size_multiple(c);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    RefineConfig {
        c,
        selection: Selection::TopK(k.cells(1, ph, pw)),
        kernel: model.config.kernel,
    }
}

/// Runs the full pipeline on one frame. Sizes that are not multiples of
/// `16 c` are padded by edge replication and cropped back.
pub fn run_model(model: &Model, image: &Image, background: &Image, c: usize, k: KSpec) -> Result<Prediction> {
    same_size(
        "image and background",
        (image.height(), image.width()),
        (background.height(), background.width()),
    )?;
    let rc = refine_config(model, c, k, image.height(), image.width());
    Ok(model.predict_padded(image.as_tensor(), background.as_tensor(), &rc)?)
}

#[derive(Debug, Clone)]
pub struct InferArgs {
    pub image: PathBuf,
    pub background: PathBuf,
    pub checkpoint: PathBuf,
    pub new_background: Option<PathBuf>,
    pub out: PathBuf,
    pub c: usize,
    pub k: KSpec,
    /// Run configuration whose architecture the checkpoint must match.
    pub config: Option<PathBuf>,
}

/// Writes `alpha.png`, `fg.png` and, with a new background, `composite.png`.
pub fn infer(a: &InferArgs) -> Result<()> {
    let expected = match &a.config {
        Some(p) => Some(crate::config::RunConfig::parse(&std::fs::read_to_string(p)?)?.model),
        None => None,
    };
    let model = read_checkpoint(&a.checkpoint, expected.as_ref())?.model;
    let image = read_image(&a.image)?;
    let bg = read_image(&a.background)?;
    let p = run_model(&model, &image, &bg, a.c, a.k)?;
    let alpha = AlphaMatte::from_tensor(p.alpha)?;
    let fg = Image::from_tensor(p.fg)?;
    write_alpha(&a.out.join("alpha.png"), &alpha)?;
    write_image(&a.out.join("fg.png"), &fg)?;
    if let Some(nb) = &a.new_background {
        let nb = read_image(nb)?;
        same_size("new background", (nb.height(), nb.width()), (image.height(), image.width()))?;
        write_image(&a.out.join("composite.png"), &composite(&alpha, &fg, &nb)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_k() {
        assert_eq!("full".parse::<KSpec>().unwrap(), KSpec::Full);
        assert_eq!("256".parse::<KSpec>().unwrap(), KSpec::Count(256));
        assert_eq!("4%".parse::<KSpec>().unwrap(), KSpec::Percent(4.0));
        assert!("-1".parse::<KSpec>().is_err());
        assert!("120%".parse::<KSpec>().is_err());
        assert_eq!(KSpec::Full.cells(1, 64, 64), 256);
        assert_eq!(KSpec::Count(1000).cells(1, 64, 64), 256);
        assert_eq!(KSpec::Percent(25.0).cells(1, 64, 64), 64);
        assert!(KSpec::Count(256).order_key(1, 64, 64) < KSpec::Full.order_key(1, 64, 64));
    }
}
