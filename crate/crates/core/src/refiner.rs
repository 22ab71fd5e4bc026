//! Error-guided patch refinement.
//!
//! The coarse error map is brought to 1/4 resolution; each cell `(i, j)` of
//! that grid owns the full-resolution block `[4i, 4i+4) x [4j, 4j+4)`. For
//! the 3x3 kernel the crop windows are placed so that two valid convolutions
//! shrink exactly onto that block:
//!
//! * half resolution: rows `[2i-3, 2i+5)`; after 8 -> 6 -> 4 the features
//!   cover half rows `[2i-1, 2i+3)`, which nearest upsampling maps onto full
//!   rows `[4i-2, 4i+6)`.
//! * full resolution: rows `[4i-2, 4i+6)`; after 8 -> 6 -> 4 this is
//!   `[4i, 4i+4)`.
//!
//! Reads outside the raster replicate the border. With 1x1 kernels nothing
//! shrinks, so the half crop is the 2x2 block `[2i, 2i+2)` that nearest
//! upsampling maps onto the cell, and the full crop is the cell itself.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::basenet::{BaseOutputGrads, BaseOutputs, OUTPUT_GAIN};
use crate::error::{shape_err, Error, Result};
use crate::imagecore::{resize, resize_backward, ResizeMode};
use crate::nn::act::clamp_backward;
use crate::nn::conv::ConvCache;
use crate::nn::layers::CbrCache;
use crate::nn::{Cbr, Conv, ConvSpec, Ctx, Group, Padding, ParameterStore};
use crate::tensor::Tensor4;

/// Channels of the half-resolution feature stack: alpha, residual, hidden, image, background.
pub const HALF_FEATURE_SPLIT: [usize; 5] = [1, 3, 32, 3, 3];
pub const HALF_FEATURE_CHANNELS: usize = 42;
pub const STAGE1_CHANNELS: [usize; 2] = [24, 16];
pub const STAGE2_CHANNELS: [usize; 2] = [12, 4];
/// Side of the full-resolution block each grid cell owns.
pub const CELL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    K3,
    K1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// The `k` cells with the highest error across the whole batch.
    TopK(usize),
    /// Every cell with error strictly above the threshold.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Downsampling factor of the base network input, 4 or 8.
    pub c: usize,
    pub selection: Selection,
    pub kernel: Kernel,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            c: 4,
            selection: Selection::TopK(5_000),
            kernel: Kernel::K3,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c != 4 && self.c != 8 {
            return Err(Error::InvalidConfig(format!("downsample factor c = {} must be 4 or 8", self.c)));
        }
        if let Selection::Threshold(t) = self.selection {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One selected cell of the 1/4-resolution grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchIndex {
    pub batch: usize,
    pub row: usize,
    pub col: usize,
}

/// Selected cells, ordered by descending error then `(batch, row, col)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatchIndexSet {
    pub entries: Vec<PatchIndex>,
}

impl PatchIndexSet {
    pub fn new(entries: Vec<PatchIndex>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every cell of an `n x rows x cols` grid in row-major order.
    pub fn all(n: usize, rows: usize, cols: usize) -> Self {
        let mut entries = Vec::with_capacity(n * rows * cols);
        for batch in 0..n {
            for row in 0..rows {
                for col in 0..cols {
                    entries.push(PatchIndex { batch, row, col });
                }
            }
        }
        Self { entries }
    }

    pub fn validate(&self, n: usize, rows: usize, cols: usize) -> Result<()> {
        for p in &self.entries {
            if p.batch >= n || p.row >= rows || p.col >= cols {
                return Err(Error::IndexOutOfGrid {
                    batch: p.batch,
                    row: p.row,
                    col: p.col,
                    batches: n,
                    rows,
                    cols,
                });
            }
        }
        Ok(())
    }
}

/// Brings the coarse error map (at `1/c`) to the 1/4 grid of an `h x w` image.
pub fn resample_error(err_c: &Tensor4, h: usize, w: usize, c: usize) -> Result<Tensor4> {
    for (dim, v) in [("height", h), ("width", w)] {
        if v % CELL != 0 {
            return Err(Error::NotDivisible {
                op: "resample_error",
                dim,
                value: v,
                multiple: CELL,
            });
        }
    }
    match c {
        4 => {
            err_c.expect_shape("resample_error", [err_c.n(), 1, h / 4, w / 4])?;
            Ok(err_c.clone())
        }
        8 => {
            err_c.expect_shape("resample_error", [err_c.n(), 1, h / 8, w / 8])?;
            Ok(resize(err_c, h / 4, w / 4, ResizeMode::Bilinear))
        }
        _ => Err(Error::InvalidConfig(format!("downsample factor c = {c} must be 4 or 8"))),
    }
}

fn by_error_then_position(a: &(f64, PatchIndex), b: &(f64, PatchIndex)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Selects cells of the `[n, 1, rows, cols]` error grid jointly over the batch.
pub fn select_patches(e4: &Tensor4, selection: Selection) -> PatchIndexSet {
    let (rows, cols) = (e4.h(), e4.w());
    let mut cells: Vec<(f64, PatchIndex)> = Vec::with_capacity(e4.len());
    for batch in 0..e4.n() {
        let plane = e4.plane(batch, 0);
        for row in 0..rows {
            for col in 0..cols {
                let e = plane[row * cols + col];
                if let Selection::Threshold(t) = selection {
                    if e <= t {
                        continue;
                    }
                }
                cells.push((e, PatchIndex { batch, row, col }));
            }
        }
    }
    if let Selection::TopK(k) = selection {
        if k == 0 {
            return PatchIndexSet::default();
        }
        if k < cells.len() {
            cells.select_nth_unstable_by(k - 1, by_error_then_position);
            cells.truncate(k);
        }
    }
    cells.sort_unstable_by(by_error_then_position);
    PatchIndexSet::new(cells.into_iter().map(|(_, p)| p).collect())
}

/// Window placement for a crop: the window of cell `i` starts at
/// `stride * i + offset` and is `size` wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub stride: usize,
    pub offset: isize,
    pub size: usize,
}

impl Window {
    pub const HALF_K3: Window = Window { stride: 2, offset: -3, size: 8 };
    pub const FULL_K3: Window = Window { stride: 4, offset: -2, size: 8 };
    pub const HALF_K1: Window = Window { stride: 2, offset: 0, size: 2 };
    pub const FULL_K1: Window = Window { stride: 4, offset: 0, size: 4 };

    #[inline]
    fn source(&self, cell: usize, t: usize, len: usize) -> usize {
        let p = (self.stride * cell) as isize + self.offset + t as isize;
        p.clamp(0, len as isize - 1) as usize
    }
}

/// Gathers one window per selected cell into `[k, c, size, size]`.
pub fn crop_patches(x: &Tensor4, idx: &PatchIndexSet, win: Window) -> Tensor4 {
    let s = win.size;
    let mut out = Tensor4::zeros(idx.len(), x.c(), s, s);
    let (h, w) = (x.h(), x.w());
    for (p, cell) in idx.entries.iter().enumerate() {
        let ys: Vec<usize> = (0..s).map(|t| win.source(cell.row, t, h)).collect();
        let xs: Vec<usize> = (0..s).map(|t| win.source(cell.col, t, w)).collect();
        for ch in 0..x.c() {
            let src = x.plane(cell.batch, ch);
            let dst = out.plane_mut(p, ch);
            for (ty, &sy) in ys.iter().enumerate() {
                let row = &src[sy * w..(sy + 1) * w];
                for (tx, &sx) in xs.iter().enumerate() {
                    dst[ty * s + tx] = row[sx];
                }
            }
        }
    }
    out
}

/// Adjoint of [`crop_patches`]: scatter-adds patch gradients into a tensor of `shape`.
pub fn crop_patches_backward(dp: &Tensor4, idx: &PatchIndexSet, win: Window, shape: [usize; 4]) -> Tensor4 {
    let [n, c, h, w] = shape;
    let s = win.size;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for (p, cell) in idx.entries.iter().enumerate() {
        let ys: Vec<usize> = (0..s).map(|t| win.source(cell.row, t, h)).collect();
        let xs: Vec<usize> = (0..s).map(|t| win.source(cell.col, t, w)).collect();
        for ch in 0..c {
            let src = dp.plane(p, ch);
            let dst = dx.plane_mut(cell.batch, ch);
            for (ty, &sy) in ys.iter().enumerate() {
                for (tx, &sx) in xs.iter().enumerate() {
                    dst[sy * w + sx] += src[ty * s + tx];
                }
            }
        }
    }
    dx
}

/// Overwrites the 4x4 block of every selected cell with its refined patch.
pub fn replace_patches(coarse_up: &Tensor4, refined: &Tensor4, idx: &PatchIndexSet) -> Result<Tensor4> {
    if refined.n() != idx.len() {
        return Err(shape_err(
            "replace_patches",
            format!("{} patches", idx.len()),
            format!("{}", refined.n()),
        ));
    }
    if idx.is_empty() {
        return Ok(coarse_up.clone());
    }
    refined.expect_shape("replace_patches", [idx.len(), coarse_up.c(), CELL, CELL])?;
    idx.validate(coarse_up.n(), coarse_up.h() / CELL, coarse_up.w() / CELL)?;
    let mut out = coarse_up.clone();
    let w = out.w();
    for (p, cell) in idx.entries.iter().enumerate() {
        for ch in 0..out.c() {
            let src = refined.plane(p, ch);
            let dst = out.plane_mut(cell.batch, ch);
            for ty in 0..CELL {
                let y = cell.row * CELL + ty;
                dst[y * w + cell.col * CELL..y * w + cell.col * CELL + CELL]
                    .copy_from_slice(&src[ty * CELL..(ty + 1) * CELL]);
            }
        }
    }
    Ok(out)
}

/// Splits the gradient of [`replace_patches`] into the coarse part (selected
/// cells zeroed) and the per-patch part.
pub fn replace_patches_backward(dy: &Tensor4, idx: &PatchIndexSet) -> (Tensor4, Tensor4) {
    let mut d_coarse = dy.clone();
    let mut d_patches = Tensor4::zeros(idx.len(), dy.c(), CELL, CELL);
    let w = dy.w();
    for (p, cell) in idx.entries.iter().enumerate() {
        for ch in 0..dy.c() {
            for ty in 0..CELL {
                let y = cell.row * CELL + ty;
                let x0 = cell.col * CELL;
                let row = &mut d_coarse.plane_mut(cell.batch, ch)[y * w + x0..y * w + x0 + CELL];
                d_patches.plane_mut(p, ch)[ty * CELL..(ty + 1) * CELL].copy_from_slice(row);
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    (d_coarse, d_patches)
}

/// Full-resolution refined predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutputs {
    /// `[n, 1, h, w]` in `[0, 1]`.
    pub alpha: Tensor4,
    /// `[n, 3, h, w]` in `[-1, 1]`.
    pub fgr: Tensor4,
}

#[derive(Debug)]
struct PatchCache {
    half_shape: [usize; 4],
    s1: [CbrCache; 2],
    s2a: CbrCache,
    s2b: ConvCache,
    s1_out_hw: (usize, usize),
}

/// State saved by [`Refiner::forward`] in train mode.
#[derive(Debug)]
pub struct RefineCache {
    idx: PatchIndexSet,
    coarse_hw: (usize, usize),
    patches: Option<PatchCache>,
    pre_clamp_alpha: Tensor4,
    pre_clamp_fgr: Tensor4,
}

/// Intermediate patch tensors, exposed for shape and geometry tests.
#[derive(Debug, Clone)]
pub struct PatchTrace {
    pub half_crop: Tensor4,
    pub stage1: Tensor4,
    pub concat: Tensor4,
    pub stage2: Tensor4,
}

#[derive(Debug, Clone)]
pub struct Refiner {
    pub kernel: Kernel,
    s1a: Cbr,
    s1b: Cbr,
    s2a: Cbr,
    s2b: Conv,
}

impl Refiner {
    pub fn new(kernel: Kernel, store: &mut ParameterStore, rng: &mut impl Rng) -> Self {
        let k = match kernel {
            Kernel::K3 => 3,
            Kernel::K1 => 1,
        };
        let spec = |i, o| ConvSpec::new(i, o, k, Padding::Valid);
        let g = Group::Refiner;
        let [a, b] = STAGE1_CHANNELS;
        let [c, d] = STAGE2_CHANNELS;
        let s2b = Conv::new(store, "refiner.stage2.conv1", spec(c, d).with_bias(), g, rng);
        // start inside the alpha clamp; a clamped output passes no gradient
        let mut bias = vec![0.0; d];
        bias[0] = 0.5;
        s2b.init_output(store, OUTPUT_GAIN, &bias);
        Self {
            kernel,
            s1a: Cbr::new(store, "refiner.stage1.conv0", spec(HALF_FEATURE_CHANNELS, a), g, rng),
            s1b: Cbr::new(store, "refiner.stage1.conv1", spec(a, b), g, rng),
            s2a: Cbr::new(store, "refiner.stage2.conv0", spec(b + 6, c), g, rng),
            s2b,
        }
    }

    pub fn windows(&self) -> (Window, Window) {
        match self.kernel {
            Kernel::K3 => (Window::HALF_K3, Window::FULL_K3),
            Kernel::K1 => (Window::HALF_K1, Window::FULL_K1),
        }
    }

    /// Builds the 42-channel half-resolution feature stack.
    pub fn half_features(base: &BaseOutputs, image: &Tensor4, background: &Tensor4) -> Result<Tensor4> {
        let (hh, hw) = (image.h() / 2, image.w() / 2);
        let r = |t: &Tensor4| resize(t, hh, hw, ResizeMode::Bilinear);
        Tensor4::concat_channels(&[
            &r(&base.alpha),
            &r(&base.fgr),
            &r(&base.hid),
            &r(image),
            &r(background),
        ])
    }

    fn run_patches(
        &self,
        store: &ParameterStore,
        half: &Tensor4,
        full_in: &Tensor4,
        idx: &PatchIndexSet,
        ctx: &mut Ctx,
    ) -> Result<(PatchTrace, Option<PatchCache>)> {
        let (hwin, fwin) = self.windows();
        let half_crop = crop_patches(half, idx, hwin);
        let (a, ca) = self.s1a.forward(store, &half_crop, ctx)?;
        let (stage1, cb) = self.s1b.forward(store, &a, ctx)?;
        let s1_out_hw = (stage1.h(), stage1.w());
        let up = resize(&stage1, stage1.h() * 2, stage1.w() * 2, ResizeMode::Nearest);
        let full_crop = crop_patches(full_in, idx, fwin);
        let concat = Tensor4::concat_channels(&[&up, &full_crop])?;
        let (c, cc) = self.s2a.forward(store, &concat, ctx)?;
        let (stage2, cd) = self.s2b.forward(store, &c, ctx)?;
        let cache = match (ca, cb, cc, cd) {
            (Some(ca), Some(cb), Some(cc), Some(cd)) => Some(PatchCache {
                half_shape: half.shape(),
                s1: [ca, cb],
                s2a: cc,
                s2b: cd,
                s1_out_hw,
            }),
            _ => None,
        };
        Ok((
            PatchTrace {
                half_crop,
                stage1,
                concat,
                stage2,
            },
            cache,
        ))
    }

    /// Patch-level forward for the selected cells only.
    pub fn trace(
        &self,
        store: &ParameterStore,
        base: &BaseOutputs,
        image: &Tensor4,
        background: &Tensor4,
        idx: &PatchIndexSet,
    ) -> Result<PatchTrace> {
        let half = Self::half_features(base, image, background)?;
        let full_in = Tensor4::concat_channels(&[image, background])?;
        Ok(self.run_patches(store, &half, &full_in, idx, &mut Ctx::eval())?.0)
    }

    /// Refines the selected cells and upsamples everything else from the
    /// coarse outputs by `c`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        store: &ParameterStore,
        base: &BaseOutputs,
        image: &Tensor4,
        background: &Tensor4,
        idx: &PatchIndexSet,
        c: usize,
        ctx: &mut Ctx,
    ) -> Result<(RefineOutputs, Option<RefineCache>)> {
        image.expect_same("refine_forward", background)?;
        let (n, h, w) = (image.n(), image.h(), image.w());
        for (dim, v) in [("height", h), ("width", w)] {
            if v % CELL != 0 {
                return Err(Error::NotDivisible {
                    op: "refine_forward",
                    dim,
                    value: v,
                    multiple: CELL,
                });
            }
        }
        base.alpha.expect_shape("refine_forward", [n, 1, h / c, w / c])?;
        idx.validate(n, h / CELL, w / CELL)?;

        let alpha_up = resize(&base.alpha, h, w, ResizeMode::Bilinear);
        let fgr_up = resize(&base.fgr, h, w, ResizeMode::Bilinear);
        let (pre_alpha, pre_fgr, patches) = if idx.is_empty() {
            (alpha_up, fgr_up, None)
        } else {
            let half = Self::half_features(base, image, background)?;
            let full_in = Tensor4::concat_channels(&[image, background])?;
            let (trace, cache) = self.run_patches(store, &half, &full_in, idx, ctx)?;
            let parts = trace.stage2.split_channels(&[1, 3])?;
            (
                replace_patches(&alpha_up, &parts[0], idx)?,
                replace_patches(&fgr_up, &parts[1], idx)?,
                cache,
            )
        };
        let out = RefineOutputs {
            alpha: pre_alpha.map(|v| v.clamp(0.0, 1.0)),
            fgr: pre_fgr.map(|v| v.clamp(-1.0, 1.0)),
        };
        let cache = ctx.is_train().then(|| RefineCache {
            idx: idx.clone(),
            coarse_hw: (base.alpha.h(), base.alpha.w()),
            patches,
            pre_clamp_alpha: pre_alpha,
            pre_clamp_fgr: pre_fgr,
        });
        Ok((out, cache))
    }

    /// Accumulates refiner parameter gradients and returns gradients with
    /// respect to the coarse outputs.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        cache: &RefineCache,
        d_alpha: &Tensor4,
        d_fgr: &Tensor4,
    ) -> Result<BaseOutputGrads> {
        let d_alpha = clamp_backward(d_alpha, &cache.pre_clamp_alpha, 0.0, 1.0);
        let d_fgr = clamp_backward(d_fgr, &cache.pre_clamp_fgr, -1.0, 1.0);
        let (ch, cw) = cache.coarse_hw;
        let (da_up, da_patch) = replace_patches_backward(&d_alpha, &cache.idx);
        let (df_up, df_patch) = replace_patches_backward(&d_fgr, &cache.idx);
        let mut g_alpha = resize_backward(&da_up, ch, cw, ResizeMode::Bilinear);
        let mut g_fgr = resize_backward(&df_up, ch, cw, ResizeMode::Bilinear);

        let Some(pc) = &cache.patches else {
            return Ok(BaseOutputGrads {
                alpha: Some(g_alpha),
                fgr: Some(g_fgr),
                err: None,
                hid: None,
            });
        };
        let d_out = Tensor4::concat_channels(&[&da_patch, &df_patch])?;
        let d = self.s2b.backward(store, &d_out, &pc.s2b, true)?.expect("input grad");
        let d = self.s2a.backward(store, &d, &pc.s2a, true)?.expect("input grad");
        let parts = d.split_channels(&[STAGE1_CHANNELS[1], 6])?;
        let d = resize_backward(&parts[0], pc.s1_out_hw.0, pc.s1_out_hw.1, ResizeMode::Nearest);
        let d = self.s1b.backward(store, &d, &pc.s1[1], true)?.expect("input grad");
        let d = self.s1a.backward(store, &d, &pc.s1[0], true)?.expect("input grad");
        let (hwin, _) = self.windows();
        let d_half = crop_patches_backward(&d, &cache.idx, hwin, pc.half_shape);
        let parts = d_half.split_channels(&HALF_FEATURE_SPLIT)?;
        g_alpha.add_assign(&resize_backward(&parts[0], ch, cw, ResizeMode::Bilinear));
        g_fgr.add_assign(&resize_backward(&parts[1], ch, cw, ResizeMode::Bilinear));
        let g_hid = resize_backward(&parts[2], ch, cw, ResizeMode::Bilinear);
        Ok(BaseOutputGrads {
            alpha: Some(g_alpha),
            fgr: Some(g_fgr),
            err: None,
            hid: Some(g_hid),
        })
    }
}
