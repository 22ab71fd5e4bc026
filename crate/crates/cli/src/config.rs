//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! model = tiny                 # tiny | default
//! kernel = 3                   # refiner kernel, 3 | 1
//! checkpoint_every = 100       # steps between rolling checkpoints, 0 = stage ends only
//!
//! dataset.A = synth count=64 size=128 seed=0
//! dataset.B = dir data/photos  # fgr/, pha/, bgr/ PNG folders
//!
//! stage.0.name = base
//! stage.0.mode = base_only     # base_only | joint
//! stage.0.dataset = A
//! stage.0.epochs = 4
//! stage.0.steps = 300          # optional, overrides epochs
//! stage.0.batch = 8
//! stage.0.lr = 1e-4,5e-4,5e-4  # backbone, aspp, decoder[, refiner]
//! stage.0.c = 4
//! stage.0.refine_area = 0.0386 # or refine_count = 5000 / refine_threshold = 0.1
//! stage.0.crop = 128,256       # crop side range; sides are multiples of 16c
//! stage.0.augment = default    # default | identity
//! stage.0.plateau_every = 100  # optional plateau stop
//! stage.0.plateau_patience = 3
//! ```
//!
//! Stages run in index order and indices must be contiguous from 0. Unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use bgmatte_core::augment::AugmentConfig;
use bgmatte_core::basenet::BaseNetConfig;
use bgmatte_core::losses::LossMode;
use bgmatte_core::model::{Model, ModelConfig};
use bgmatte_core::nn::GroupRates;
use bgmatte_core::refiner::Kernel;
use bgmatte_core::synth::SynthSpec;
use bgmatte_core::train::{Plateau, RefineBudget, StageConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic { count: usize, spec: SynthSpec, seed: u64 },
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub checkpoint_every: u64,
    pub datasets: Vec<(String, DatasetSource)>,
    pub stages: Vec<StageConfig>,
}

/// Parses `key = value` lines. Later duplicates are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            bail!("line {}: duplicate key `{k}`", n + 1);
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn weights<const N: usize>(key: &str, v: &str) -> Result<[f64; N]> {
    let w: Vec<f64> = list(key, v)?;
    w.try_into().map_err(|_| anyhow!("`{key}` needs {N} comma-separated weights"))
}

/// `synth count=N size=S[,W] seed=K [subjects=a,b,c] [backgrounds=a,b,c,d]`
/// or `dir PATH`.
pub fn parse_dataset(key: &str, v: &str) -> Result<DatasetSource> {
    let mut parts = v.split_whitespace();
    match parts.next() {
        Some("dir") => {
            let path = parts.collect::<Vec<_>>().join(" ");
            if path.is_empty() {
                bail!("`{key}`: `dir` needs a path");
            }
            Ok(DatasetSource::Directory(path.into()))
        }
        Some("synth") => {
            let (mut count, mut seed, mut spec) = (None, 0, SynthSpec::default());
            for p in parts {
                let (k, val) = p.split_once('=').ok_or_else(|| anyhow!("`{key}`: expected name=value, got `{p}`"))?;
                match k {
                    "count" => count = Some(num(key, val)?),
                    "seed" => seed = num(key, val)?,
                    "size" => {
                        let s: Vec<usize> = list(key, val)?;
                        spec = match s[..] {
                            [a] => spec.with_size(a, a),
                            [h, w] => spec.with_size(h, w),
                            _ => bail!("`{key}`: size is S or H,W"),
                        };
                    }
                    "subjects" => spec.subject_weights = weights(key, val)?,
                    "backgrounds" => spec.background_weights = weights(key, val)?,
                    _ => bail!("`{key}`: unknown synthetic option `{k}`"),
                }
            }
            spec.validate()?;
            let count = count.ok_or_else(|| anyhow!("`{key}`: synthetic dataset needs count="))?;
            Ok(DatasetSource::Synthetic { count, spec, seed })
        }
        _ => bail!("`{key}`: dataset must start with `synth` or `dir`"),
    }
}

fn parse_stage(i: usize, kv: &BTreeMap<&str, &str>) -> Result<StageConfig> {
    let key = |k: &str| format!("stage.{i}.{k}");
    let get = |k: &str| kv.get(k).copied();
    let mode = match get("mode").unwrap_or("joint") {
        "base_only" => LossMode::BaseOnly,
        "joint" => LossMode::Joint,
        m => bail!("`{}`: unknown mode `{m}`", key("mode")),
    };
    let name = get("name").map(str::to_string).unwrap_or_else(|| format!("stage{i}"));
    let dataset = get("dataset").ok_or_else(|| anyhow!("`{}` is required", key("dataset")))?;
    let epochs = get("epochs").map(|v| num(&key("epochs"), v)).transpose()?.unwrap_or(1);
    let mut s = match mode {
        LossMode::BaseOnly => StageConfig::base_only(&name, dataset, epochs),
        LossMode::Joint => StageConfig::joint(&name, dataset, epochs),
    };
    if let Some(v) = get("steps") {
        s.steps = Some(num(&key("steps"), v)?);
    }
    if let Some(v) = get("batch") {
        s.batch_size = num(&key("batch"), v)?;
    }
    if let Some(v) = get("c") {
        s.c = num(&key("c"), v)?;
    }
    if let Some(v) = get("lr") {
        let r: Vec<f64> = list(&key("lr"), v)?;
        s.rates = match r[..] {
            [a, b, c] => GroupRates([a, b, c, 0.0]),
            [a, b, c, d] => GroupRates([a, b, c, d]),
            _ => bail!("`{}` takes 3 or 4 rates", key("lr")),
        };
    }
    let budgets = ["refine_area", "refine_count", "refine_threshold"];
    match budgets.iter().filter(|b| get(b).is_some()).count() {
        0 => {}
        1 => {
            s.budget = if let Some(v) = get("refine_area") {
                RefineBudget::AreaFraction(num(&key("refine_area"), v)?)
            } else if let Some(v) = get("refine_count") {
                RefineBudget::Count(num(&key("refine_count"), v)?)
            } else {
                RefineBudget::Threshold(num(&key("refine_threshold"), get("refine_threshold").unwrap_or_default())?)
            }
        }
        _ => bail!("stage {i}: give only one of {}", budgets.join(", ")),
    }
    s.augment = match get("augment").unwrap_or("default") {
        "default" => AugmentConfig::default(),
        "identity" => AugmentConfig::identity(),
        a => bail!("`{}`: unknown augmentation `{a}`", key("augment")),
    };
    s.augment.crop_multiple = Model::size_multiple(s.c);
    if let Some(v) = get("crop") {
        let c: Vec<usize> = list(&key("crop"), v)?;
        s.augment.crop = match c[..] {
            [a] => (a, a),
            [a, b] => (a, b),
            _ => bail!("`{}` is S or LO,HI", key("crop")),
        };
    }
    if let Some(v) = get("plateau_every") {
        s.plateau = Some(Plateau {
            every: num(&key("plateau_every"), v)?,
            patience: get("plateau_patience")
                .map(|p| num(&key("plateau_patience"), p))
                .transpose()?
                .unwrap_or(Plateau::default().patience),
            ..Plateau::default()
        });
    }
    const KNOWN: [&str; 15] = [
        "name",
        "mode",
        "dataset",
        "epochs",
        "steps",
        "batch",
        "lr",
        "c",
        "refine_area",
        "refine_count",
        "refine_threshold",
        "crop",
        "augment",
        "plateau_every",
        "plateau_patience",
    ];
    if let Some(k) = kv.keys().find(|k| !KNOWN.contains(k)) {
        bail!("unknown key `{}`", key(k));
    }
    s.validate().with_context(|| format!("stage {i}"))?;
    Ok(s)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut seed = 0;
        let mut base = BaseNetConfig::tiny();
        let mut kernel = Kernel::K3;
        let mut checkpoint_every = 0;
        let mut datasets = Vec::new();
        let mut stages: BTreeMap<usize, BTreeMap<&str, &str>> = BTreeMap::new();
        for (k, v) in &pairs {
            match k.as_str() {
                "seed" => seed = num(k, v)?,
                "checkpoint_every" => checkpoint_every = num(k, v)?,
                "model" => {
                    base = match v.as_str() {
                        "tiny" => BaseNetConfig::tiny(),
                        "default" => BaseNetConfig::default(),
                        _ => bail!("`model`: expected tiny or default, got `{v}`"),
                    }
                }
                "kernel" => {
                    kernel = match v.as_str() {
                        "3" => Kernel::K3,
                        "1" => Kernel::K1,
                        _ => bail!("`kernel`: expected 3 or 1, got `{v}`"),
                    }
                }
                _ => {
                    if let Some(name) = k.strip_prefix("dataset.") {
                        datasets.push((name.to_string(), parse_dataset(k, v)?));
                    } else if let Some(rest) = k.strip_prefix("stage.") {
                        let (idx, field) = rest.split_once('.').ok_or_else(|| anyhow!("malformed key `{k}`"))?;
                        let idx: usize = num(k, idx)?;
                        stages.entry(idx).or_default().insert(field, v.as_str());
                    } else {
                        bail!("unknown key `{k}`");
                    }
                }
            }
        }
        if stages.is_empty() {
            bail!("configuration defines no stages");
        }
        let stages = stages
            .iter()
            .enumerate()
            .map(|(want, (&idx, kv))| {
                if want != idx {
                    bail!("stage indices must be contiguous from 0 (missing stage {want})");
                }
                parse_stage(idx, kv)
            })
            .collect::<Result<Vec<_>>>()?;
        for s in &stages {
            if !datasets.iter().any(|(n, _)| *n == s.dataset) {
                bail!("stage {} refers to undefined dataset `{}`", s.name, s.dataset);
            }
        }
        Ok(Self {
            seed,
            model: ModelConfig { base, kernel, seed },
            checkpoint_every,
            datasets,
            stages,
        })
    }
}
