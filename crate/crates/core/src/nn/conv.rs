//! 2-D cross-correlation via im2col and a single GEMM per call.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `dilation * (kernel - 1) / 2` on every side.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, padding: Padding) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            dilation: 1,
            padding,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::InvalidConfig(format!("kernel {} must be odd", self.kernel)));
        }
        if self.dilation == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("stride and dilation must be >= 1".into()));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.dilation * (self.kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }

    fn extent(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output spatial size for an `h` x `w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let pad = self.pad();
        let ext = self.extent();
        if h + 2 * pad < ext || w + 2 * pad < ext {
            return Err(Error::ValidUnderflow {
                op: "conv2d",
                h,
                w,
                extent: ext,
            });
        }
        Ok((
            (h + 2 * pad - ext) / self.stride + 1,
            (w + 2 * pad - ext) / self.stride + 1,
        ))
    }
}

/// Saved state for [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvCache {
    input_shape: [usize; 4],
    cols: Vec<f64>,
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad: isize,
}

fn geometry(x_shape: [usize; 4], spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let [n, c, h, w] = x_shape;
    if c != spec.in_ch {
        return Err(shape_err(
            "conv2d",
            format!("{} input channels", spec.in_ch),
            format!("{c}"),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyBatch("conv2d"));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok(Geometry {
        n,
        h,
        w,
        oh,
        ow,
        pad: spec.pad() as isize,
    })
}

/// Fills `cols` (`[in_ch * k * k, n_items * oh * ow]`) for batch items `b0..b0 + n_items`.
fn im2col(x: &Tensor4, spec: &ConvSpec, g: &Geometry, b0: usize, n_items: usize, cols: &mut [f64]) {
    let k = spec.kernel;
    let ohw = g.oh * g.ow;
    let ncols = n_items * ohw;
    let (s, d) = (spec.stride as isize, spec.dilation as isize);
    for ci in 0..spec.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for bi in 0..n_items {
                    let src = x.plane(b0 + bi, ci);
                    let dst = &mut dst[bi * ohw..(bi + 1) * ohw];
                    for oy in 0..g.oh {
                        let iy = oy as isize * s - g.pad + ky as isize * d;
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            drow.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let x0 = kx as isize * d - g.pad;
                        if s == 1 && x0 >= 0 && x0 as usize + g.ow <= g.w {
                            drow.copy_from_slice(&srow[x0 as usize..x0 as usize + g.ow]);
                            continue;
                        }
                        for (ox, v) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s + x0;
                            *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(dcols: &[f64], spec: &ConvSpec, g: &Geometry, dx: &mut Tensor4) {
    let k = spec.kernel;
    let ohw = g.oh * g.ow;
    let ncols = g.n * ohw;
    let (s, d) = (spec.stride as isize, spec.dilation as isize);
    for ci in 0..spec.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &dcols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let dst = dx.plane_mut(b, ci);
                    let src = &src[b * ohw..(b + 1) * ohw];
                    for oy in 0..g.oh {
                        let iy = oy as isize * s - g.pad + ky as isize * d;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, v) in srow.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize * d - g.pad;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n] (+ c if accumulate)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slices are sized by the callers for the given dims and strides
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Number of im2col elements processed at once when no cache is kept.
const EVAL_CHUNK_ELEMS: usize = 1 << 22;

/// Forward convolution. When `keep_cache` is false the im2col buffer is
/// processed in bounded chunks and no cache is returned.
pub fn conv2d(
    x: &Tensor4,
    spec: &ConvSpec,
    weight: &[f64],
    bias: Option<&[f64]>,
    keep_cache: bool,
) -> Result<(Tensor4, Option<ConvCache>)> {
    let g = geometry(x.shape(), spec)?;
    if weight.len() != spec.weight_len() {
        return Err(shape_err(
            "conv2d weight",
            format!("{}", spec.weight_len()),
            format!("{}", weight.len()),
        ));
    }
    let kdim = spec.in_ch * spec.kernel * spec.kernel;
    let ohw = g.oh * g.ow;
    let mut y = Tensor4::zeros(g.n, spec.out_ch, g.oh, g.ow);

    let chunk = if keep_cache {
        g.n
    } else {
        (EVAL_CHUNK_ELEMS / (kdim * ohw).max(1)).clamp(1, g.n)
    };
    let mut cols = vec![0.0; kdim * chunk * ohw];
    let mut out = vec![0.0; spec.out_ch * chunk * ohw];
    let mut b0 = 0;
    while b0 < g.n {
        let items = chunk.min(g.n - b0);
        let ncols = items * ohw;
        im2col(x, spec, &g, b0, items, &mut cols[..kdim * ncols]);
        gemm(
            spec.out_ch,
            kdim,
            ncols,
            weight,
            (kdim as isize, 1),
            &cols[..kdim * ncols],
            (ncols as isize, 1),
            &mut out[..spec.out_ch * ncols],
            false,
        );
        for co in 0..spec.out_ch {
            let b_val = bias.map_or(0.0, |b| b[co]);
            for bi in 0..items {
                let src = &out[co * ncols + bi * ohw..co * ncols + (bi + 1) * ohw];
                let dst = y.plane_mut(b0 + bi, co);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b_val;
                }
            }
        }
        b0 += items;
    }
    let cache = keep_cache.then(|| ConvCache {
        input_shape: x.shape(),
        cols,
    });
    Ok((y, cache))
}

/// Backward convolution. Accumulates into `grad_weight` and `grad_bias`, and
/// returns the input gradient when `need_input_grad` is set.
pub fn conv2d_backward(
    dy: &Tensor4,
    cache: &ConvCache,
    spec: &ConvSpec,
    weight: &[f64],
    grad_weight: &mut [f64],
    grad_bias: Option<&mut [f64]>,
    need_input_grad: bool,
) -> Result<Option<Tensor4>> {
    let g = geometry(cache.input_shape, spec)?;
    dy.expect_shape("conv2d_backward", [g.n, spec.out_ch, g.oh, g.ow])?;
    let kdim = spec.in_ch * spec.kernel * spec.kernel;
    let ohw = g.oh * g.ow;
    let ncols = g.n * ohw;

    // dy laid out as [out_ch, n * ohw]
    let mut dy2 = vec![0.0; spec.out_ch * ncols];
    for co in 0..spec.out_ch {
        for b in 0..g.n {
            dy2[co * ncols + b * ohw..co * ncols + (b + 1) * ohw].copy_from_slice(dy.plane(b, co));
        }
    }
    if let Some(gb) = grad_bias {
        for co in 0..spec.out_ch {
            gb[co] += dy2[co * ncols..(co + 1) * ncols].iter().sum::<f64>();
        }
    }
    // dW += dy2 * cols^T
    gemm(
        spec.out_ch,
        ncols,
        kdim,
        &dy2,
        (ncols as isize, 1),
        &cache.cols,
        (1, ncols as isize),
        grad_weight,
        true,
    );
    if !need_input_grad {
        return Ok(None);
    }
    // dcols = W^T * dy2
    let mut dcols = vec![0.0; kdim * ncols];
    gemm(
        kdim,
        spec.out_ch,
        ncols,
        weight,
        (1, kdim as isize),
        &dy2,
        (ncols as isize, 1),
        &mut dcols,
        false,
    );
    let [n, c, h, w] = cache.input_shape;
    let mut dx = Tensor4::zeros(n, c, h, w);
    col2im(&dcols, spec, &g, &mut dx);
    Ok(Some(dx))
}
