use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use bgmatte::config::RunConfig;
use bgmatte::dataset::{generate, load_dir};
use bgmatte::evaluate::{evaluate_with, write_csv, BACKGROUNDS_PER_SAMPLE};
use bgmatte::io::{read_alpha, read_checkpoint, read_image, write_alpha, write_checkpoint, write_image};
use bgmatte::run::{read_loss_log, resume, train, RunDir, TrainOptions};
use bgmatte_core::checkpoint::Checkpoint;
use bgmatte_core::imagecore::{composite, resize, ResizeMode};
use bgmatte_core::model::{Model, ModelConfig};
use bgmatte_core::nn::Ctx;
use bgmatte_core::synth::{generate_sample, SynthSpec};
use bgmatte_core::{AlphaMatte, Image};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bgmatte"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn bgmatte");
    assert!(
        out.status.success(),
        "bgmatte failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn ramp(h: usize, w: usize) -> Image {
    Image::new(h, w, (0..3 * h * w).map(|i| (i % 251) as f64 / 250.0).collect()).unwrap()
}

#[test]
fn png_round_trip_is_within_quantization() {
    let dir = TempDir::new().unwrap();
    let img = ramp(9, 13);
    let p = dir.path().join("nested/img.png");
    write_image(&p, &img).unwrap();
    let back = read_image(&p).unwrap();
    assert_eq!((back.height(), back.width()), (9, 13));
    assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));

    let a = AlphaMatte::new(5, 7, (0..35).map(|i| i as f64 / 34.0).collect()).unwrap();
    write_alpha(&dir.path().join("a.png"), &a).unwrap();
    let b = read_alpha(&dir.path().join("a.png")).unwrap();
    assert!(b.data().iter().zip(a.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));

    let deep = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(4, 3, |x, y| image::Luma([(x * 1000 + y * 7) as u16]));
    deep.save(dir.path().join("d.png")).unwrap();
    let d = read_alpha(&dir.path().join("d.png")).unwrap();
    assert_eq!(d.get(0, 2, 3), (3000.0 + 14.0) / 65535.0);
}

#[test]
fn checkpoint_file_round_trip_and_hash_check() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("m.ckpt");
    let mut ck = Checkpoint::new(Model::new(ModelConfig::tiny(3)).unwrap());
    ck.set_meta("note", "x");
    write_checkpoint(&p, &ck).unwrap();
    let back = read_checkpoint(&p, Some(&ModelConfig::tiny(99))).unwrap();
    assert_eq!(back.model.store, ck.model.store);
    assert_eq!(back.meta("note"), Some("x"));
    assert!(read_checkpoint(&p, Some(&ModelConfig::default())).is_err());
    fs::write(&p, b"garbage").unwrap();
    assert!(read_checkpoint(&p, None).is_err());
}

#[test]
fn generate_is_deterministic_and_loadable() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let spec = SynthSpec::default().with_size(40, 48);
    generate(a.path(), &spec, 3, 5).unwrap();
    run_ok(bin().args(["generate", "--spec", "size=40,48", "--count", "3", "--seed", "5", "--out"]).arg(b.path()));
    for sub in ["fgr/00000.png", "pha/00002.png", "bgr/00001.png", "manifest.txt"] {
        assert_eq!(fs::read(a.path().join(sub)).unwrap(), fs::read(b.path().join(sub)).unwrap(), "{sub}");
    }
    let manifest = fs::read_to_string(a.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 3);
    let d = load_dir("g", a.path()).unwrap();
    assert_eq!((d.samples.len(), d.backgrounds.len()), (3, 3));
    assert_eq!(d.samples[0].0.height(), 40);
}

const RUN: &str = "
seed = 5
checkpoint_every = 0
dataset.S = synth count=3 size=64 seed=2
stage.0.mode = base_only
stage.0.dataset = S
stage.0.steps = 3
stage.0.batch = 2
stage.0.crop = 64
stage.1.dataset = S
stage.1.steps = 3
stage.1.batch = 2
stage.1.crop = 64
stage.1.refine_area = 0.1
";

fn log_text(dir: &Path) -> String {
    fs::read_to_string(RunDir(dir.into()).losses()).unwrap()
}

#[test]
fn interrupted_run_resumes_to_identical_log_and_weights() {
    let (full, part) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    train(RUN, full.path(), TrainOptions::default()).unwrap();
    let trace = read_loss_log(&RunDir(full.path().into()).losses()).unwrap();
    assert_eq!(trace.len(), 6);
    assert!(trace.iter().all(|(_, l)| l.is_finite()));
    assert!(RunDir(full.path().into()).stage(0).exists());

    let stopped = train(
        RUN,
        part.path(),
        TrainOptions {
            stop_after: Some(4),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!((stopped.global_step, stopped.stage_index, stopped.stage_step), (4, 1, 1));
    assert!(train(RUN, part.path(), TrainOptions::default()).is_err());
    // a stale row past the checkpoint must be dropped on resume
    fs::write(
        RunDir(part.path().into()).losses(),
        log_text(part.path()) + "4,1,1,9,9,9,9,9,9,9,9\n",
    )
    .unwrap();
    resume(part.path(), TrainOptions::default()).unwrap();
    assert_eq!(log_text(part.path()), log_text(full.path()));
    let a = read_checkpoint(&RunDir(full.path().into()).latest(), None).unwrap();
    let b = read_checkpoint(&RunDir(part.path().into()).latest(), None).unwrap();
    assert_eq!(a.model.store, b.model.store);
    assert_eq!(a.meta, b.meta);
}

#[test]
fn run_config_file_is_snapshotted() {
    let out = TempDir::new().unwrap();
    let text = RUN.replace("stage.1.steps = 3", "stage.1.steps = 1").replace("stage.0.steps = 3", "stage.0.steps = 1");
    let cfg = out.path().join("cfg.txt");
    fs::write(&cfg, &text).unwrap();
    let run = out.path().join("run");
    run_ok(bin().args(["train", "--log-every", "0", "--config"]).arg(&cfg).arg("--out").arg(&run));
    assert_eq!(fs::read_to_string(run.join("config.txt")).unwrap(), text);
    assert_eq!(RunConfig::parse(&text).unwrap().stages.len(), 2);
    assert!(run.join("checkpoints/stage1.ckpt").exists());
}

struct Scene {
    dir: TempDir,
    image: PathBuf,
    background: PathBuf,
    new_background: PathBuf,
    checkpoint: PathBuf,
}

fn scene(h: usize, w: usize) -> Scene {
    let dir = TempDir::new().unwrap();
    let s = generate_sample(&SynthSpec::default().with_size(h, w), 1).unwrap();
    let (image, background, new_background, checkpoint) = (
        dir.path().join("i.png"),
        dir.path().join("b.png"),
        dir.path().join("nb.png"),
        dir.path().join("m.ckpt"),
    );
    write_image(&image, &composite(&s.alpha, &s.fg, &s.bg).unwrap()).unwrap();
    write_image(&background, &s.bg).unwrap();
    write_image(&new_background, &ramp(h, w)).unwrap();
    write_checkpoint(&checkpoint, &Checkpoint::new(Model::new(ModelConfig::tiny(4)).unwrap())).unwrap();
    Scene {
        dir,
        image,
        background,
        new_background,
        checkpoint,
    }
}

fn infer_cmd(s: &Scene, out: &Path, k: &str) -> Command {
    let mut c = bin();
    c.arg("infer")
        .arg("--image")
        .arg(&s.image)
        .arg("--background")
        .arg(&s.background)
        .arg("--checkpoint")
        .arg(&s.checkpoint)
        .args(["--k", k, "--out"])
        .arg(out);
    c
}

#[test]
fn infer_is_deterministic_and_optional_composite() {
    let s = scene(64, 64);
    let (a, b) = (s.dir.path().join("a"), s.dir.path().join("b"));
    run_ok(infer_cmd(&s, &a, "10%").arg("--new-background").arg(&s.new_background));
    run_ok(infer_cmd(&s, &b, "10%").arg("--new-background").arg(&s.new_background));
    for f in ["alpha.png", "fg.png", "composite.png"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = s.dir.path().join("c");
    run_ok(&mut infer_cmd(&s, &c, "full"));
    assert!(c.join("alpha.png").exists() && c.join("fg.png").exists());
    assert!(!c.join("composite.png").exists());
}

#[test]
fn infer_k0_writes_upsampled_coarse_alpha() {
    let s = scene(64, 128);
    let out = s.dir.path().join("o");
    run_ok(&mut infer_cmd(&s, &out, "0"));
    let model = read_checkpoint(&s.checkpoint, None).unwrap().model;
    let (i, b) = (read_image(&s.image).unwrap(), read_image(&s.background).unwrap());
    let coarse = model.coarse(i.as_tensor(), b.as_tensor(), 4, &mut Ctx::eval()).unwrap();
    let up = resize(&coarse.alpha, 64, 128, ResizeMode::Bilinear);
    let want: Vec<u8> = up.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let got = image::open(out.join("alpha.png")).unwrap().to_luma8().into_raw();
    assert_eq!(got, want);
}

#[test]
fn infer_pads_odd_sizes_and_rejects_bad_inputs() {
    let s = scene(50, 70);
    let out = s.dir.path().join("o");
    run_ok(&mut infer_cmd(&s, &out, "4%"));
    let a = read_alpha(&out.join("alpha.png")).unwrap();
    assert_eq!((a.height(), a.width()), (50, 70));

    write_image(&s.background, &ramp(50, 72)).unwrap();
    assert!(!infer_cmd(&s, &out, "0").status().unwrap().success());

    let s = scene(64, 64);
    let cfg = s.dir.path().join("cfg.txt");
    fs::write(&cfg, RUN.replace("seed = 5", "seed = 5\nmodel = default")).unwrap();
    assert!(!infer_cmd(&s, &out, "0").arg("--config").arg(&cfg).status().unwrap().success());
    fs::write(&cfg, RUN).unwrap();
    run_ok(infer_cmd(&s, &out, "0").arg("--config").arg(&cfg));
    fs::write(&s.checkpoint, b"not a checkpoint").unwrap();
    assert!(!infer_cmd(&s, &out, "0").status().unwrap().success());
}

#[test]
fn oracle_evaluation_scores_zero_with_five_backgrounds_each() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), &SynthSpec::default().with_size(48, 48), 11, 3).unwrap();
    let rows = evaluate_with(dir.path(), 0, &mut |c| Ok((c.alpha_star.clone(), c.fg_star.clone()))).unwrap();
    assert_eq!(rows.len(), 11 * BACKGROUNDS_PER_SAMPLE);
    for r in &rows {
        let m = r.report.unwrap();
        assert_eq!((m.sad, m.mse, m.grad, m.conn, m.fg_mse), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    fs::remove_file(dir.path().join("pha/00004.png")).unwrap();
    let rows = evaluate_with(dir.path(), 0, &mut |c| Ok((c.alpha_star.clone(), c.fg_star.clone()))).unwrap();
    assert_eq!(rows.len(), 10 * BACKGROUNDS_PER_SAMPLE + 1);
    assert!(rows.iter().any(|r| r.report.is_none() && r.sample == "00004.png"));
    let csv_path = dir.path().join("out/eval.csv");
    write_csv(&csv_path, &rows).unwrap();
    let text = fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("sample,background,sad,mse,grad,conn,fg_mse,unknown_pixels,note\n"));
    assert!(text.lines().last().unwrap().starts_with("mean,,0,0,0,0,0,"));
}

#[test]
fn evaluate_bench_and_trimap_commands() {
    let s = scene(64, 64);
    let data = s.dir.path().join("data");
    generate(&data, &SynthSpec::default().with_size(64, 64), 2, 1).unwrap();
    let csv_path = s.dir.path().join("eval.csv");
    run_ok(
        bin()
            .args(["evaluate", "--k", "4%", "--data"])
            .arg(&data)
            .arg("--checkpoint")
            .arg(&s.checkpoint)
            .arg("--out")
            .arg(&csv_path),
    );
    assert_eq!(fs::read_to_string(&csv_path).unwrap().lines().count(), 1 + 2 * BACKGROUNDS_PER_SAMPLE + 1);

    let out = run_ok(bin().args([
        "bench",
        "--resolutions",
        "64x64",
        "--k",
        "full,0,16",
        "--repeats",
        "2",
        "--warmup",
        "1",
    ]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "resolution,c,k,cells,batch,median_ms,mean_ms,fps,refined_fraction,repeats,threads");
    let ks: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(ks, ["0", "16", "full"]);

    let tri = s.dir.path().join("t.png");
    run_ok(
        bin()
            .args(["make-trimap", "--alpha"])
            .arg(data.join("pha/00000.png"))
            .arg("--out")
            .arg(&tri),
    );
    let t = image::open(&tri).unwrap().to_luma8();
    assert!(t.pixels().all(|p| [0, 128, 255].contains(&p[0])));
    assert!(t.pixels().any(|p| p[0] == 128));
}
