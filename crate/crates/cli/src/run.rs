//! Training runs on disk.
//!
//! ```text
//! <out>/config.txt             copy of the configuration
//! <out>/losses.csv             one row per optimizer step
//! <out>/checkpoints/latest.ckpt
//! <out>/checkpoints/stage<i>.ckpt  written when stage i ends
//! ```
//!
//! Checkpoints carry `global_step`, `stage_index`, `stage_step` and `seed`
//! metadata; resuming replays the remaining steps exactly as an uninterrupted
//! run would.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bgmatte_core::checkpoint::Checkpoint;
use bgmatte_core::model::Model;
use bgmatte_core::train::{run_schedule, StepLog, TrainEvent, TrainState};

use crate::config::RunConfig;
use crate::dataset::materialize;
use crate::io::{read_checkpoint, write_checkpoint};

pub const LOSS_HEADER: [&str; 11] = [
    "global_step",
    "stage",
    "stage_step",
    "total",
    "base",
    "refine",
    "alpha_c",
    "fgr_c",
    "err_c",
    "alpha",
    "fgr",
];

pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.0.join("config.txt")
    }
    pub fn losses(&self) -> PathBuf {
        self.0.join("losses.csv")
    }
    pub fn latest(&self) -> PathBuf {
        self.0.join("checkpoints").join("latest.ckpt")
    }
    pub fn stage(&self, i: usize) -> PathBuf {
        self.0.join("checkpoints").join(format!("stage{i}.ckpt"))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Print a progress line every this many steps (0 = never).
    pub log_every: u64,
    /// Checkpoint and stop once this many total steps have run.
    pub stop_after: Option<u64>,
}

fn snapshot(state: &TrainState) -> Checkpoint {
    let mut ck = Checkpoint::new(state.model.clone());
    ck.set_meta("global_step", state.global_step.to_string());
    ck.set_meta("stage_index", state.stage_index.to_string());
    ck.set_meta("stage_step", state.stage_step.to_string());
    ck.set_meta("seed", state.seed.to_string());
    ck
}

fn meta_u64(ck: &Checkpoint, key: &str) -> Result<u64> {
    ck.meta(key)
        .ok_or_else(|| anyhow!("checkpoint has no `{key}` entry"))?
        .parse()
        .with_context(|| format!("checkpoint entry `{key}`"))
}

/// Restores training progress from a checkpoint written by a run.
pub fn state_from_checkpoint(ck: Checkpoint) -> Result<TrainState> {
    let mut state = TrainState::new(ck.model.clone(), meta_u64(&ck, "seed")?);
    state.global_step = meta_u64(&ck, "global_step")?;
    state.stage_index = meta_u64(&ck, "stage_index")? as usize;
    state.stage_step = meta_u64(&ck, "stage_step")?;
    Ok(state)
}

fn loss_row(log: &StepLog) -> [String; 11] {
    let v = log.values;
    [
        log.global_step.to_string(),
        log.stage.to_string(),
        log.stage_step.to_string(),
        v.total.to_string(),
        v.base.to_string(),
        v.refine.to_string(),
        v.alpha_c.to_string(),
        v.fgr_c.to_string(),
        v.err_c.to_string(),
        v.alpha.to_string(),
        v.fgr.to_string(),
    ]
}

/// Drops log rows at or after `global_step` so a resumed run appends cleanly.
fn truncate_log(path: &Path, global_step: u64) -> Result<()> {
    let mut keep = Vec::new();
    if path.exists() {
        let mut r = csv::Reader::from_path(path)?;
        for rec in r.records() {
            let rec = rec?;
            let step: u64 = rec.get(0).unwrap_or_default().parse().context("malformed losses.csv")?;
            if step < global_step {
                keep.push(rec);
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOSS_HEADER)?;
    for rec in keep {
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a loss log back as `(global_step, total)` pairs.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok((rec[0].parse()?, rec[3].parse()?))
        })
        .collect()
}

/// Starts a fresh run in `out`, which must not already hold a checkpoint.
pub fn train(config_text: &str, out: &Path, opts: TrainOptions) -> Result<TrainState> {
    let cfg = RunConfig::parse(config_text)?;
    let dir = RunDir(out.into());
    if dir.latest().exists() {
        bail!("{} already holds a run; use --resume to continue it", out.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(dir.config(), config_text)?;
    truncate_log(&dir.losses(), 0)?;
    let state = TrainState::new(Model::new(cfg.model)?, cfg.seed);
    drive(&cfg, &dir, state, opts)
}

/// Continues the run in `out` from its latest checkpoint.
pub fn resume(out: &Path, opts: TrainOptions) -> Result<TrainState> {
    let dir = RunDir(out.into());
    let text = fs::read_to_string(dir.config()).with_context(|| format!("reading {}", dir.config().display()))?;
    let cfg = RunConfig::parse(&text)?;
    let state = state_from_checkpoint(read_checkpoint(&dir.latest(), Some(&cfg.model))?)?;
    if state.seed != cfg.seed {
        bail!("checkpoint seed {} differs from configured seed {}", state.seed, cfg.seed);
    }
    truncate_log(&dir.losses(), state.global_step)?;
    drive(&cfg, &dir, state, opts)
}

fn drive(cfg: &RunConfig, dir: &RunDir, mut state: TrainState, opts: TrainOptions) -> Result<TrainState> {
    let datasets = cfg
        .datasets
        .iter()
        .map(|(name, src)| materialize(name, src).with_context(|| format!("dataset {name}")))
        .collect::<Result<Vec<_>>>()?;
    let file = OpenOptions::new().append(true).open(dir.losses())?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let every = cfg.checkpoint_every;
    let mut observer = |s: &TrainState, ev: &TrainEvent| -> bgmatte_core::Result<()> {
        let io = |e: &dyn std::fmt::Display| bgmatte_core::Error::Checkpoint(e.to_string());
        match ev {
            TrainEvent::Step(l) => {
                log.write_record(loss_row(l)).map_err(|e| io(&e))?;
                log.flush().map_err(|e| io(&e))?;
                if opts.log_every > 0 && s.global_step % opts.log_every == 0 {
                    eprintln!("step {:>6}  stage {}  loss {:.5}", l.global_step, l.stage, l.values.total);
                }
                let stop = opts.stop_after.is_some_and(|n| s.global_step >= n);
                if stop || (every > 0 && s.global_step % every == 0) {
                    write_checkpoint(&dir.latest(), &snapshot(s)).map_err(|e| io(&e))?;
                }
                if stop {
                    return Err(bgmatte_core::Error::Interrupted(s.global_step));
                }
            }
            TrainEvent::Validation { stage, stage_step, loss } => {
                eprintln!("stage {stage} step {stage_step}: validation loss {loss:.5}");
            }
            TrainEvent::PlateauStop { stage, stage_step } => {
                eprintln!("stage {stage}: plateau after {stage_step} steps");
            }
            TrainEvent::StageEnd { stage } => {
                let ck = snapshot(s);
                write_checkpoint(&dir.stage(*stage), &ck).map_err(|e| io(&e))?;
                write_checkpoint(&dir.latest(), &ck).map_err(|e| io(&e))?;
            }
        }
        Ok(())
    };
    let result = run_schedule(&mut state, &cfg.stages, &datasets, &mut observer);
    if let Err(e) = result {
        if let bgmatte_core::Error::Interrupted(step) = e {
            eprintln!("stopped after step {step}; continue with --resume");
            return Ok(state);
        }
        if matches!(e, bgmatte_core::Error::NonFiniteLoss { .. } | bgmatte_core::Error::NonFiniteGradient(_)) {
            // the model still holds the last good step
            write_checkpoint(&dir.latest(), &snapshot(&state))?;
        }
        return Err(e).context("training stopped");
    }
    Ok(state)
}

