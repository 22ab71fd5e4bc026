//! Finite-difference checks shared by the gradient tests and the acceptance
//! suite. Each primitive check appends `(name, worst relative error)` pairs.

use bgmatte_core::basenet::BaseOutputs;
use bgmatte_core::imagecore::{downsample, recover_foreground_batch, resize, resize_backward};
use bgmatte_core::losses::{compute_losses, loss_alpha, loss_error, loss_foreground, sobel_backward, sobel_gradient, LossMode, Targets};
use bgmatte_core::model::{Model, ModelConfig, TrainInputs};
use bgmatte_core::nn::act::{broadcast_hw, broadcast_hw_backward, clamp_backward, global_avg_pool, global_avg_pool_backward, relu, relu_backward};
use bgmatte_core::nn::conv::{conv2d, conv2d_backward};
use bgmatte_core::nn::gradcheck::{central_difference, rel_error};
use bgmatte_core::nn::norm::{batchnorm2d, batchnorm2d_backward, Mode};
use bgmatte_core::nn::{ConvSpec, Ctx, Group, Padding, ParamKind};
use bgmatte_core::refiner::{crop_patches, crop_patches_backward, replace_patches, resample_error, select_patches, replace_patches_backward, Kernel, PatchIndex, PatchIndexSet, RefineConfig, Selection, Window};
use bgmatte_core::{ResizeMode, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;
const FLOOR: f64 = 1e-5;
// smaller step for the network so fewer ReLU and L1 kinks fall inside it
const NETWORK_EPS: f64 = 1e-7;
const NETWORK_FLOOR: f64 = 1e-4;

pub fn random(shape: [usize; 4], lo: f64, hi: f64, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, c, h, w] = shape;
    Tensor4::from_fn(n, c, h, w, |_, _, _, _| rng.random_range(lo..hi))
}

pub fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `analytic` with central differences of `f` at up to `max_checks`
/// evenly spread coordinates of `x`. Returns the worst relative error.
pub fn check_tensor(x: &Tensor4, analytic: &[f64], max_checks: usize, f: impl Fn(&Tensor4) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let step = (x.len() / max_checks).max(1);
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in (0..x.len()).step_by(step) {
        let num = central_difference(probe.data_mut(), i, EPS, |d| {
            f(&Tensor4::from_vec(x.n(), x.c(), x.h(), x.w(), d.to_vec()).unwrap())
        });
        worst = worst.max(rel_error(analytic[i], num, FLOOR));
    }
    worst
}

pub fn check_slice(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| rel_error(analytic[i], central_difference(&mut probe, i, EPS, &f), FLOOR))
        .fold(0.0, f64::max)
}

pub fn conv2d_checks(out: &mut Vec<(String, f64)>) {
    let specs = [
        ConvSpec::new(3, 4, 3, Padding::Same),
        ConvSpec::new(3, 4, 3, Padding::Same).stride(2).with_bias(),
        ConvSpec::new(2, 3, 3, Padding::Same).dilation(2),
        ConvSpec::new(3, 2, 3, Padding::Valid).with_bias(),
        ConvSpec::new(4, 3, 1, Padding::Same).with_bias(),
    ];
    for (k, spec) in specs.iter().enumerate() {
        let x = random([2, spec.in_ch, 7, 8], -1.0, 1.0, k as u64);
        let w = random([1, 1, 1, spec.weight_len()], -0.5, 0.5, 10 + k as u64).into_vec();
        let b = spec.bias.then(|| random([1, 1, 1, spec.out_ch], -0.5, 0.5, 20 + k as u64).into_vec());
        let (y, cache) = conv2d(&x, spec, &w, b.as_deref(), true).unwrap();
        let r = random(y.shape(), -1.0, 1.0, 30 + k as u64);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; spec.out_ch];
        let dx = conv2d_backward(&r, &cache.unwrap(), spec, &w, &mut gw, b.as_ref().map(|_| gb.as_mut_slice()), true)
            .unwrap()
            .unwrap();
        let loss = |x: &Tensor4, w: &[f64], b: Option<&[f64]>| dot(&conv2d(x, spec, w, b, false).unwrap().0, &r);
        out.push(("conv dx".into(), check_tensor(&x, dx.data(), 200, |x| loss(x, &w, b.as_deref()))));
        out.push(("conv dw".into(), check_slice(&w, &gw, |w| loss(&x, w, b.as_deref()))));
        if let Some(b) = &b {
            out.push(("conv db".into(), check_slice(b, &gb, |b| loss(&x, &w, Some(b)))));
        }
    }
}

pub fn batchnorm_checks(out: &mut Vec<(String, f64)>) {
    for mode in [Mode::Train, Mode::Eval] {
        let x = random([3, 2, 4, 5], -2.0, 2.0, 1);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.1, -0.2];
        let (rm, rv) = (vec![0.2, -0.1], vec![0.9, 1.4]);
        let f = |x: &Tensor4, g: &[f64], b: &[f64]| batchnorm2d(x, g, b, &rm, &rv, mode, 1e-5).unwrap();
        let (y, cache, _) = f(&x, &gamma, &beta);
        // squared projection so the train-mode gradient is not trivially zero
        let r = random(y.shape(), -1.0, 1.0, 2);
        let loss = |y: &Tensor4| y.data().iter().zip(r.data()).map(|(a, b)| a * b + 0.5 * a * a).sum::<f64>();
        let dy = y.zip_map(&r, |a, b| b + a).unwrap();
        let (mut gg, mut gb) = (vec![0.0; 2], vec![0.0; 2]);
        let dx = batchnorm2d_backward(&dy, &cache, &gamma, &mut gg, &mut gb).unwrap();
        out.push(("bn dx".into(), check_tensor(&x, dx.data(), 200, |x| loss(&f(x, &gamma, &beta).0))));
        out.push(("bn dgamma".into(), check_slice(&gamma, &gg, |g| loss(&f(&x, g, &beta).0))));
        out.push(("bn dbeta".into(), check_slice(&beta, &gb, |b| loss(&f(&x, &gamma, b).0))));
    }
}

/// Values kept away from the kinks at 0 and 1.
pub fn away_from_kinks(shape: [usize; 4], seed: u64) -> Tensor4 {
    random(shape, 0.05, 0.45, seed).map(|v| if (v * 1000.0) as i64 % 3 == 0 { -v } else if (v * 1000.0) as i64 % 3 == 1 { v + 0.55 } else { v + 1.1 })
}

pub fn activations_checks(out: &mut Vec<(String, f64)>) {
    let x = away_from_kinks([2, 3, 4, 4], 3);
    let r = random(x.shape(), -1.0, 1.0, 4);
    let d = relu_backward(&r, &relu(&x));
    out.push(("relu".into(), check_tensor(&x, d.data(), 100, |x| dot(&relu(x), &r))));
    let d = clamp_backward(&r, &x, 0.0, 1.0);
    let cl = |x: &Tensor4| dot(&bgmatte_core::imagecore::clamp(x, 0.0, 1.0), &r);
    out.push(("clamp".into(), check_tensor(&x, d.data(), 100, cl)));

    let rp = random([2, 3, 1, 1], -1.0, 1.0, 5);
    let d = global_avg_pool_backward(&rp, 4, 4);
    out.push(("pool".into(), check_tensor(&x, d.data(), 100, |x| dot(&global_avg_pool(x), &rp))));
    let p = random([2, 3, 1, 1], -1.0, 1.0, 6);
    let d = broadcast_hw_backward(&r);
    out.push(("broadcast".into(), check_tensor(&p, d.data(), 10, |p| dot(&broadcast_hw(p, 4, 4), &r))));
}

pub fn resize_checks(out: &mut Vec<(String, f64)>) {
    let cases = [
        (ResizeMode::Bilinear, 5, 6, 10, 12),
        (ResizeMode::Bilinear, 8, 8, 4, 4),
        (ResizeMode::Bilinear, 4, 6, 7, 5),
        (ResizeMode::Nearest, 4, 5, 8, 10),
    ];
    for (k, &(mode, h, w, th, tw)) in cases.iter().enumerate() {
        let x = random([1, 2, h, w], -1.0, 1.0, k as u64);
        let r = random([1, 2, th, tw], -1.0, 1.0, 10 + k as u64);
        let d = resize_backward(&r, h, w, mode);
        let err = check_tensor(&x, d.data(), 200, |x| dot(&resize(x, th, tw, mode), &r));
        out.push(("resize".into(), err));
    }
}

pub fn sobel_and_losses_checks(out: &mut Vec<(String, f64)>) {
    let a = random([2, 1, 6, 7], 0.0, 1.0, 1);
    let t = random([2, 1, 6, 7], 0.0, 1.0, 2);
    let r = random([2, 2, 6, 7], -1.0, 1.0, 3);
    let d = sobel_backward(&r);
    out.push(("sobel".into(), check_tensor(&a, d.data(), 100, |a| dot(&sobel_gradient(a), &r))));

    let (_, d) = loss_alpha(&a, &t).unwrap();
    out.push(("loss_alpha".into(), check_tensor(&a, d.data(), 100, |a| loss_alpha(a, &t).unwrap().0)));

    let f = random([2, 3, 6, 7], 0.0, 1.0, 4);
    let fs = random([2, 3, 6, 7], 0.0, 1.0, 5);
    let mask = t.map(|v| if v > 0.4 { v } else { 0.0 });
    let (_, d) = loss_foreground(&f, &fs, &mask).unwrap();
    let err = check_tensor(&f, d.data(), 100, |f| loss_foreground(f, &fs, &mask).unwrap().0);
    out.push(("loss_foreground".into(), err));

    let e = random([2, 1, 6, 7], 0.0, 1.0, 6);
    let (_, d) = loss_error(&e, &a, &t).unwrap();
    out.push(("loss_error".into(), check_tensor(&e, d.data(), 100, |e| loss_error(e, &a, &t).unwrap().0)));
}

pub fn composed_loss_checks(out: &mut Vec<(String, f64)>) {
    let (n, h, w, c) = (1, 8, 8, 4);
    let image = random([n, 3, h, w], 0.1, 0.9, 1);
    let alpha_star = random([n, 1, h, w], 0.0, 1.0, 2).map(|v| if v < 0.3 { 0.0 } else { v });
    let fg = random([n, 3, h, w], 0.0, 1.0, 3);
    let targets = Targets {
        image: &image,
        alpha: &alpha_star,
        fg: &fg,
    };
    let base = BaseOutputs {
        alpha: random([n, 1, h / c, w / c], 0.0, 1.0, 4),
        fgr: random([n, 3, h / c, w / c], -0.05, 0.05, 5),
        err: random([n, 1, h / c, w / c], 0.0, 1.0, 6),
        hid: Tensor4::zeros(n, 32, h / c, w / c),
    };
    let ra = random([n, 1, h, w], 0.0, 1.0, 7);
    let rf = random([n, 3, h, w], -0.05, 0.05, 8);
    let total = |b: &BaseOutputs, ra: &Tensor4, rf: &Tensor4| {
        compute_losses(b, Some((ra, rf)), &targets, LossMode::Joint, c).unwrap().0.total
    };
    let (_, g) = compute_losses(&base, Some((&ra, &rf)), &targets, LossMode::Joint, c).unwrap();
    let with = |f: &dyn Fn(&mut BaseOutputs)| {
        let mut b = base.clone();
        f(&mut b);
        b
    };
    // the error-map target is detached, so alpha_c is checked without it
    let no_err = |b: &BaseOutputs| {
        let v = compute_losses(b, Some((&ra, &rf)), &targets, LossMode::Joint, c).unwrap().0;
        v.total - v.err_c
    };
    let e = check_tensor(&base.alpha, g.base.alpha.as_ref().unwrap().data(), 50, |x| {
        no_err(&with(&|b| b.alpha = x.clone()))
    });
    out.push(("composed d alpha_c".into(), e));
    let e = check_tensor(&base.fgr, g.base.fgr.as_ref().unwrap().data(), 50, |x| {
        total(&with(&|b| b.fgr = x.clone()), &ra, &rf)
    });
    out.push(("composed d fgr_c".into(), e));
    let e = check_tensor(&base.err, g.base.err.as_ref().unwrap().data(), 50, |x| {
        total(&with(&|b| b.err = x.clone()), &ra, &rf)
    });
    out.push(("composed d err_c".into(), e));
    let e = check_tensor(&ra, g.refined_alpha.as_ref().unwrap().data(), 100, |x| total(&base, x, &rf));
    out.push(("composed d alpha".into(), e));
    let e = check_tensor(&rf, g.refined_fgr.as_ref().unwrap().data(), 100, |x| total(&base, &ra, x));
    out.push(("composed d fgr".into(), e));
}

pub fn foreground_recovery_checks(out: &mut Vec<(String, f64)>) {
    let r = random([1, 3, 4, 4], -0.3, 0.3, 1);
    let i = random([1, 3, 4, 4], 0.35, 0.65, 2);
    let p = random([1, 3, 4, 4], -1.0, 1.0, 3);
    let (_, mask) = recover_foreground_batch(&r, &i).unwrap();
    let d = p.zip_map(&mask, |a, b| a * b).unwrap();
    let err = check_tensor(&r, d.data(), 48, |r| dot(&recover_foreground_batch(r, &i).unwrap().0, &p));
    out.push(("recover_foreground".into(), err));
}

pub fn patch_gather_scatter_checks(out: &mut Vec<(String, f64)>) {
    let idx = PatchIndexSet::new(vec![
        PatchIndex { batch: 0, row: 0, col: 1 },
        PatchIndex { batch: 1, row: 1, col: 1 },
        PatchIndex { batch: 0, row: 1, col: 0 },
    ]);
    let x = random([2, 2, 4, 4], -1.0, 1.0, 1);
    for win in [Window::HALF_K3, Window::HALF_K1] {
        let r = random([3, 2, win.size, win.size], -1.0, 1.0, 2);
        let d = crop_patches_backward(&r, &idx, win, x.shape());
        let err = check_tensor(&x, d.data(), 64, |x| dot(&crop_patches(x, &idx, win), &r));
        out.push(("crop_patches".into(), err));
    }
    let coarse = random([2, 1, 8, 8], -1.0, 1.0, 3);
    let patches = random([3, 1, 4, 4], -1.0, 1.0, 4);
    let r = random([2, 1, 8, 8], -1.0, 1.0, 5);
    let (dc, dp) = replace_patches_backward(&r, &idx);
    let err = check_tensor(&coarse, dc.data(), 128, |c| dot(&replace_patches(c, &patches, &idx).unwrap(), &r));
    out.push(("replace_patches coarse".into(), err));
    let err = check_tensor(&patches, dp.data(), 48, |p| dot(&replace_patches(&coarse, p, &idx).unwrap(), &r));
    out.push(("replace_patches patches".into(), err));
}

pub struct Probe {
    pub image: Tensor4,
    pub background: Tensor4,
    pub alpha: Tensor4,
    pub fg: Tensor4,
}

pub fn probe_batch() -> Probe {
    let (n, h, w) = (2, 64, 64);
    let background = random([n, 3, h, w], 0.1, 0.9, 1);
    let alpha = Tensor4::from_fn(n, 1, h, w, |b, _, y, x| {
        let d = ((y as f64 - 30.0 - b as f64 * 4.0).powi(2) + (x as f64 - 34.0).powi(2)).sqrt();
        (1.0 - (d - 14.0) / 4.0).clamp(0.0, 1.0)
    });
    let fg = random([n, 3, h, w], 0.2, 0.8, 2);
    let image = bgmatte_core::imagecore::composite_batch(&alpha, &fg, &background).unwrap();
    Probe {
        image,
        background,
        alpha,
        fg,
    }
}

/// Training loss with the error-map target frozen at `frozen`, matching the
/// detached target used by the analytic gradient.
pub fn detached_loss(model: &Model, p: &Probe, mode: LossMode, rc: &RefineConfig, frozen: &Tensor4) -> f64 {
    let c = rc.c;
    let mut ctx = Ctx::train();
    let coarse = model.coarse(&p.image, &p.background, c, &mut ctx).unwrap();
    let refined = match mode {
        LossMode::BaseOnly => None,
        LossMode::Joint => {
            let e4 = resample_error(&coarse.err, p.image.h(), p.image.w(), c).unwrap();
            let idx = select_patches(&e4, rc.selection);
            let (out, _) = model
                .refiner
                .forward(&model.store, &coarse, &p.image, &p.background, &idx, c, &mut ctx)
                .unwrap();
            Some(out)
        }
    };
    let targets = Targets {
        image: &p.image,
        alpha: &p.alpha,
        fg: &p.fg,
    };
    let (v, _) = compute_losses(&coarse, refined.as_ref().map(|o| (&o.alpha, &o.fgr)), &targets, mode, c).unwrap();
    let frozen_err = coarse.err.zip_map(frozen, |e, t| (e - t) * (e - t)).unwrap();
    v.total - v.err_c + frozen_err.data().iter().sum::<f64>() / frozen_err.len() as f64
}

/// Checks two coordinates of every trainable parameter of the model against
/// central differences of the training loss.
pub fn network_check(kernel: Kernel, mode: LossMode) -> (f64, Vec<String>) {
    let p = probe_batch();
    let inputs = TrainInputs {
        image: &p.image,
        background: &p.background,
        alpha: &p.alpha,
        fg: &p.fg,
    };
    let rc = RefineConfig {
        c: 4,
        selection: Selection::TopK(usize::MAX),
        kernel,
    };
    let mut model = Model::new(ModelConfig {
        kernel,
        ..ModelConfig::tiny(7)
    })
    .unwrap();
    model.forward_backward(&inputs, mode, &rc).unwrap();
    let analytic: Vec<Vec<f64>> = model.store.entries().iter().map(|p| p.grad.clone()).collect();
    let coarse = model.coarse(&p.image, &p.background, rc.c, &mut Ctx::train()).unwrap();
    let alpha_star_c = downsample(&p.alpha, rc.c).unwrap();
    let frozen = coarse.alpha.zip_map(&alpha_star_c, |a, t| (a - t).abs()).unwrap();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for pi in 0..model.store.len() {
        let param = &model.store.entries()[pi];
        if param.kind != ParamKind::Trainable || (mode == LossMode::BaseOnly && param.group == Group::Refiner) {
            continue;
        }
        let len = param.value.len();
        for i in [0, len / 2 + 1] {
            let i = i.min(len - 1);
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.store.entries_mut()[pi].value[i] += delta;
                detached_loss(&m, &p, mode, &rc, &frozen)
            };
            let num = (eval(NETWORK_EPS) - eval(-NETWORK_EPS)) / (2.0 * NETWORK_EPS);
            let e = rel_error(analytic[pi][i], num, NETWORK_FLOOR);
            if e >= NETWORK_TOL {
                failures.push(format!("{}[{i}]: analytic {:e} numeric {num:e}", param.name, analytic[pi][i]));
            }
            worst = worst.max(e);
        }
    }
    (worst, failures)
}


/// Every primitive, loss and patch operation.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    conv2d_checks(&mut out);
    batchnorm_checks(&mut out);
    activations_checks(&mut out);
    resize_checks(&mut out);
    sobel_and_losses_checks(&mut out);
    composed_loss_checks(&mut out);
    foreground_recovery_checks(&mut out);
    patch_gather_scatter_checks(&mut out);
    out
}
