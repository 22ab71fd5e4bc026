//! Dense NCHW tensors used for every activation, gradient and raster batch.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// A dense `[n, c, h, w]` array of `f64`, row-major with width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::filled(n, c, h, w, 0.0)
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(shape_err(
                "Tensor4::from_vec",
                format!("{} elements", n * c * h * w),
                format!("{}", data.len()),
            ));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every element.
    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self { n, c, h, w, data }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.n, other.c, other.h, other.w)
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }
    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// One `h*w` plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &self.data[start..start + hw]
    }
    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// All channels of one batch item.
    pub fn item(&self, n: usize) -> &[f64] {
        let chw = self.c * self.h * self.w;
        &self.data[n * chw..(n + 1) * chw]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: [usize; 4]) -> Result<()> {
        if self.shape() != shape {
            return Err(shape_err(op, format!("{shape:?}"), format!("{:?}", self.shape())));
        }
        Ok(())
    }

    pub(crate) fn expect_same(&self, op: &'static str, other: &Self) -> Result<()> {
        other.expect_shape(op, self.shape())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same("Tensor4::zip_map", other)?;
        Ok(Self {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Concatenates along the channel axis. All parts must share n, h and w.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
        let first = parts.first().ok_or(Error::EmptyBatch("concat_channels"))?;
        let (n, h, w) = (first.n, first.h, first.w);
        for p in parts {
            if p.n != n || p.h != h || p.w != w {
                return Err(shape_err(
                    "concat_channels",
                    format!("[{n}, _, {h}, {w}]"),
                    format!("{:?}", p.shape()),
                ));
            }
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.item(b));
            }
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    /// Splits along the channel axis into consecutive groups of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<alloc::vec::Vec<Tensor4>> {
        let total: usize = sizes.iter().sum();
        if total != self.c {
            return Err(shape_err(
                "split_channels",
                format!("{total} channels"),
                format!("{}", self.c),
            ));
        }
        let hw = self.h * self.w;
        let mut out: Vec<Tensor4> = sizes
            .iter()
            .map(|&c| Tensor4::zeros(self.n, c, self.h, self.w))
            .collect();
        for b in 0..self.n {
            let mut offset = 0;
            for (part, &c) in out.iter_mut().zip(sizes) {
                let src = &self.item(b)[offset * hw..(offset + c) * hw];
                let chw = c * hw;
                part.data[b * chw..(b + 1) * chw].copy_from_slice(src);
                offset += c;
            }
        }
        Ok(out)
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[&Tensor4]) -> Result<Tensor4> {
        let first = items.first().ok_or(Error::EmptyBatch("stack"))?;
        let (c, h, w) = (first.c, first.h, first.w);
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for t in items {
            if t.c != c || t.h != h || t.w != w {
                return Err(shape_err(
                    "stack",
                    format!("[_, {c}, {h}, {w}]"),
                    format!("{:?}", t.shape()),
                ));
            }
            data.extend_from_slice(&t.data);
            n += t.n;
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    /// Copies batch item `b` into a standalone `[1, c, h, w]` tensor.
    pub fn batch_item(&self, b: usize) -> Tensor4 {
        Tensor4 {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.item(b).to_vec(),
        }
    }
}
