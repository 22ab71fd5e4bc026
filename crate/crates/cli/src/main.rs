use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use bgmatte::bench::{bench, parse_ks, parse_resolutions, BenchArgs};
use bgmatte::config::{parse_dataset, DatasetSource};
use bgmatte::evaluate::{evaluate_with, mean_report, write_csv};
use bgmatte::infer::{infer, run_model, InferArgs, KSpec};
use bgmatte::io::{read_alpha, read_checkpoint, write_trimap};
use bgmatte::run::{resume, train, TrainOptions};
use bgmatte_core::metrics::make_trimap;
use bgmatte_core::model::{Model, ModelConfig};
use bgmatte_core::{AlphaMatte, Image};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bgmatte", version, about = "Background matting with coarse-to-fine patch refinement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a configuration file, or resume a run directory.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
        out: Option<PathBuf>,
        /// Continue the run stored in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        log_every: u64,
        /// Checkpoint and stop after this many total steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Matte one frame given the captured background.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        background: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also composite the result over this background.
        #[arg(long)]
        new_background: Option<PathBuf>,
        /// Cells to refine: a count, a percentage such as `4%`, or `full`.
        #[arg(long, default_value = "5000")]
        k: KSpec,
        #[arg(long, default_value_t = 4)]
        c: usize,
        /// Directory receiving alpha.png, fg.png and composite.png.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Run configuration the checkpoint architecture must match.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a checkpoint on an fgr/pha/bgr directory.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "5000")]
        k: KSpec,
        #[arg(long, default_value_t = 4)]
        c: usize,
        /// Seed of the background perturbations.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time model pass-through for several resolutions and budgets.
    Bench {
        /// Omit to time a freshly initialized tiny model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated WxH sizes.
        #[arg(long, default_value = "256x256,512x512")]
        resolutions: String,
        #[arg(long, default_value = "0,256,1024,full")]
        k: String,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 4)]
        c: usize,
        /// Worker threads; the pipeline runs single-threaded, so only 1 is valid.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// CSV destination; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trimap from a ground-truth matte (0 background, 128 unknown, 255 foreground).
    MakeTrimap {
        #[arg(long)]
        alpha: PathBuf,
        #[arg(long, default_value_t = 0.06)]
        lo: f64,
        #[arg(long, default_value_t = 0.96)]
        hi: f64,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic fgr/pha/bgr triples and a seed manifest.
    Generate {
        /// Synthetic options (`size=128 subjects=1,2,1 ...`) or a file holding them.
        #[arg(long, default_value = "size=256")]
        spec: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            out,
            resume: dir,
            log_every,
            stop_after,
        } => {
            let opts = TrainOptions { log_every, stop_after };
            let state = match (dir, config, out) {
                (Some(dir), _, _) => resume(&dir, opts)?,
                (None, Some(cfg), Some(out)) => {
                    let text = fs::read_to_string(&cfg).with_context(|| format!("reading {}", cfg.display()))?;
                    train(&text, &out, opts)?
                }
                _ => bail!("train needs --config and --out, or --resume"),
            };
            eprintln!("run at global step {}", state.global_step);
        }
        Cmd::Infer {
            image,
            background,
            checkpoint,
            new_background,
            k,
            c,
            out,
            config,
        } => infer(&InferArgs {
            image,
            background,
            checkpoint,
            new_background,
            out,
            c,
            k,
            config,
        })?,
        Cmd::Evaluate {
            data,
            checkpoint,
            out,
            k,
            c,
            seed,
        } => {
            let model = read_checkpoint(&checkpoint, None)?.model;
            let rows = evaluate_with(&data, seed, &mut |case| {
                let p = run_model(&model, case.image, case.background, c, k)?;
                Ok((AlphaMatte::from_tensor(p.alpha)?, Image::from_tensor(p.fg)?))
            })?;
            write_csv(&out, &rows)?;
            if let Some(m) = mean_report(&rows) {
                eprintln!(
                    "mean over {} composites: SAD {:.4}  MSE {:.4}  Grad {:.4}  Conn {:.4}  FG MSE {:.4}",
                    rows.iter().filter(|r| r.report.is_some()).count(),
                    m.sad,
                    m.mse,
                    m.grad,
                    m.conn,
                    m.fg_mse
                );
            }
        }
        Cmd::Bench {
            checkpoint,
            resolutions,
            k,
            repeats,
            warmup,
            c,
            threads,
            out,
        } => {
            let model = match checkpoint {
                Some(p) => read_checkpoint(&p, None)?.model,
                None => Model::new(ModelConfig::tiny(0))?,
            };
            let args = BenchArgs {
                resolutions: parse_resolutions(&resolutions)?,
                ks: parse_ks(&k)?,
                repeats,
                warmup,
                c,
                threads,
                seed: 0,
            };
            let rows = bench(&model, &args)?;
            match out {
                Some(p) => bgmatte::bench::write_csv(fs::File::create(&p)?, &rows)?,
                None => bgmatte::bench::write_csv(std::io::stdout().lock(), &rows)?,
            }
        }
        Cmd::MakeTrimap {
            alpha,
            lo,
            hi,
            iters,
            out,
        } => {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                bail!("need 0 <= lo <= hi <= 1");
            }
            write_trimap(&out, &make_trimap(&read_alpha(&alpha)?, lo, hi, iters))?;
        }
        Cmd::Generate { spec, count, seed, out } => {
            let text = match fs::read_to_string(&spec) {
                Ok(t) => t
                    .lines()
                    .map(|l| l.split('#').next().unwrap_or(""))
                    .collect::<Vec<_>>()
                    .join(" "),
                Err(_) => spec,
            };
            let DatasetSource::Synthetic { spec, .. } = parse_dataset("--spec", &format!("synth count={count} {text}"))? else {
                unreachable!("synthetic source")
            };
            bgmatte::dataset::generate(&out, &spec, count, seed)?;
        }
    }
    Ok(())
}

