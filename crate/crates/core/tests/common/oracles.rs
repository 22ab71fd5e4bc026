//! Reference implementations shared by the oracle tests and the acceptance
//! suite.

use bgmatte_core::metrics::{Label, Trimap};
use bgmatte_core::refiner::{PatchIndex, Selection};
use bgmatte_core::{AlphaMatte, Tensor4};

pub fn brute_select(e: &Tensor4, sel: Selection) -> Vec<PatchIndex> {
    let mut all = Vec::new();
    for b in 0..e.n() {
        for r in 0..e.h() {
            for c in 0..e.w() {
                all.push((e.at(b, 0, r, c), PatchIndex { batch: b, row: r, col: c }));
            }
        }
    }
    // stable sort keeps (batch, row, col) order among equal errors
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    match sel {
        Selection::TopK(k) => all.into_iter().take(k).map(|p| p.1).collect(),
        Selection::Threshold(t) => all.into_iter().filter(|p| p.0 > t).map(|p| p.1).collect(),
    }
}

pub fn matte(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> AlphaMatte {
    AlphaMatte::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
}

pub fn pseudo(seed: u64, i: usize) -> f64 {
    let mut z = seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64
}

/// Soft disk prediction and target with a band of unknown pixels.
pub fn instance(h: usize, w: usize, seed: u64) -> (AlphaMatte, AlphaMatte, Trimap) {
    let (cy, cx, r) = (h as f64 / 2.0, w as f64 / 2.0, h.min(w) as f64 / 3.0);
    let target = matte(h, w, |y, x| {
        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        ((r - d) / 3.0 + 0.5).clamp(0.0, 1.0)
    });
    let pred = matte(h, w, |y, x| {
        let t = target.get(0, y, x);
        (t + 0.3 * (pseudo(seed, y * w + x) - 0.5)).clamp(0.0, 1.0)
    });
    let labels = (0..h * w)
        .map(|i| {
            let t = target.data()[i];
            if t >= 1.0 {
                Label::Foreground
            } else if t <= 0.0 && pseudo(seed + 7, i) < 0.7 {
                Label::Background
            } else {
                Label::Unknown
            }
        })
        .collect();
    (pred, target, Trimap::new(h, w, labels).unwrap())
}

pub const SHAPES: [(usize, usize); 4] = [(32, 32), (17, 29), (24, 9), (8, 8)];

/// SAD and MSE over the unknown band by direct summation.
pub fn oracle_sad_mse(p: &AlphaMatte, t: &AlphaMatte, tri: &Trimap) -> (f64, f64) {
    let (h, w) = (p.height(), p.width());
    let (mut sad, mut sq, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if tri.get(y, x) == Label::Unknown {
                let d = p.get(0, y, x) - t.get(0, y, x);
                sad += d.abs();
                sq += d * d;
                n += 1;
            }
        }
    }
    (sad / 1000.0, sq / n as f64 * 1000.0)
}

/// Gradient magnitude through an explicitly padded image and a flipped
/// (correlation-form) kernel.
pub fn oracle_grad(p: &AlphaMatte, t: &AlphaMatte, tri: &Trimap, sigma: f64, q: f64) -> f64 {
    let eps: f64 = 0.01;
    let half = (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * eps).ln()).sqrt()).ceil() as i64;
    let size = (2 * half + 1) as usize;
    let g = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let dg = |x: f64| -x * g(x) / (sigma * sigma);
    // hx[i][j] = g(i - half) * dg(j - half); hy is its transpose
    let mut hx = vec![vec![0.0; size]; size];
    for (i, row) in hx.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = g(i as f64 - half as f64) * dg(j as f64 - half as f64);
        }
    }
    let norm: f64 = hx.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mag = |a: &AlphaMatte| {
        let (h, w) = (a.height() as i64, a.width() as i64);
        let padded = |y: i64, x: i64| a.get(0, y.clamp(0, h - 1) as usize, x.clamp(0, w - 1) as usize);
        let mut out = vec![0.0; (h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                // convolution == correlation with the kernel rotated by 180 degrees
                for u in -half..=half {
                    for v in -half..=half {
                        let kx = hx[(half - u) as usize][(half - v) as usize] / norm;
                        let ky = hx[(half - v) as usize][(half - u) as usize] / norm;
                        let s = padded(y + u, x + v);
                        gx += kx * s;
                        gy += ky * s;
                    }
                }
                out[(y * w + x) as usize] = (gx * gx + gy * gy).sqrt();
            }
        }
        out
    };
    let (mp, mt) = (mag(p), mag(t));
    let mut sum = 0.0;
    for i in 0..mp.len() {
        if tri.labels()[i] == Label::Unknown {
            sum += (mp[i] - mt[i]).abs().powf(q);
        }
    }
    sum / 1000.0
}

/// Connectivity with a recursive flood fill and component selection by size,
/// then by first pixel in column-major order.
pub fn oracle_conn(p: &AlphaMatte, t: &AlphaMatte, tri: &Trimap, step: f64, theta: f64) -> f64 {
    let (h, w) = (p.height(), p.width());
    let steps = (1.0 / step).round() as usize;
    let mut level = vec![f64::NAN; h * w];
    fn fill(mask: &[bool], comp: &mut [i64], h: usize, w: usize, y: usize, x: usize, id: i64) -> usize {
        let i = y * w + x;
        if !mask[i] || comp[i] >= 0 {
            return 0;
        }
        comp[i] = id;
        let mut n = 1;
        if y > 0 {
            n += fill(mask, comp, h, w, y - 1, x, id);
        }
        if y + 1 < h {
            n += fill(mask, comp, h, w, y + 1, x, id);
        }
        if x > 0 {
            n += fill(mask, comp, h, w, y, x - 1, id);
        }
        if x + 1 < w {
            n += fill(mask, comp, h, w, y, x + 1, id);
        }
        n
    }
    for i in 1..=steps {
        let th = i as f64 / steps as f64;
        let mask: Vec<bool> = (0..h * w).map(|j| p.data()[j] >= th && t.data()[j] >= th).collect();
        let mut comp = vec![-1i64; h * w];
        let mut sizes: Vec<(usize, usize)> = Vec::new(); // (size, column-major rank of first pixel)
        for x in 0..w {
            for y in 0..h {
                if mask[y * w + x] && comp[y * w + x] < 0 {
                    let id = sizes.len() as i64;
                    let n = fill(&mask, &mut comp, h, w, y, x, id);
                    sizes.push((n, x * h + y));
                }
            }
        }
        let best = sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
            .map(|(id, _)| id as i64);
        for j in 0..h * w {
            if level[j].is_nan() && Some(comp[j]) != best.filter(|_| comp[j] >= 0) {
                level[j] = (i - 1) as f64 / steps as f64;
            }
        }
    }
    let mut sum = 0.0;
    for j in 0..h * w {
        if tri.labels()[j] != Label::Unknown {
            continue;
        }
        let l = if level[j].is_nan() { 1.0 } else { level[j] };
        let phi = |a: f64| {
            let d = a - l;
            1.0 - if d >= theta { d } else { 0.0 }
        };
        sum += (phi(p.data()[j]) - phi(t.data()[j])).abs();
    }
    sum / 1000.0
}

/// Erosion by the cross iterated `k` times keeps a pixel when every in-raster
/// pixel within city-block distance `k` is set.
pub fn diamond_erode(mask: &[bool], h: usize, w: usize, k: usize) -> Vec<bool> {
    let k = k as i64;
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            (-k..=k).all(|dy| {
                (-(k - dy.abs())..=(k - dy.abs())).all(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 || mask[(yy * w as i64 + xx) as usize]
                })
            })
        })
        .collect()
}

/// Binary disk of radius `r` centred in an `h x w` raster.
pub fn disk(h: usize, w: usize, r: f64) -> AlphaMatte {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    matte(h, w, |y, x| if ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= r { 1.0 } else { 0.0 })
}

/// Labels expected from `iters` diamond erosions of both sides of a binary matte.
pub fn reference_trimap(a: &AlphaMatte, iters: usize) -> Vec<Label> {
    let (h, w) = (a.height(), a.width());
    let fg = diamond_erode(&a.data().iter().map(|&v| v >= 1.0).collect::<Vec<_>>(), h, w, iters);
    let bg = diamond_erode(&a.data().iter().map(|&v| v <= 0.0).collect::<Vec<_>>(), h, w, iters);
    (0..h * w)
        .map(|i| if fg[i] { Label::Foreground } else if bg[i] { Label::Background } else { Label::Unknown })
        .collect()
}

/// Lengths of the unknown runs along row `y` and column `x`.
pub fn unknown_runs(tri: &Trimap, y: usize, x: usize) -> [Vec<usize>; 2] {
    let row: Vec<Label> = (0..tri.width()).map(|xx| tri.get(y, xx)).collect();
    let col: Vec<Label> = (0..tri.height()).map(|yy| tri.get(yy, x)).collect();
    [row, col].map(|line| {
        line.chunk_by(|a, b| a == b)
            .filter(|c| c[0] == Label::Unknown)
            .map(|c| c.len())
            .collect()
    })
}
