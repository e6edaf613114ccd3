use super::{Precision, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Matrix product of `a` (m×k) and `b` (k×n).
///
/// Each output entry is accumulated in `f64` in ascending `k` order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim(format!(
            "matmul operands {:?} and {:?} do not agree",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += ad[i * k + l] * bd[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor::from_raw(
        vec![m, n],
        out,
        a.precision().max(b.precision()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

/// Resolved geometry of a 2-D cross-correlation on channels-first data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(
    len: usize,
    k: usize,
    s: usize,
    padding: Padding,
    axis: &str,
) -> Result<(usize, usize)> {
    if s == 0 {
        return Err(Error::dim(format!("stride along {axis} must be positive")));
    }
    match padding {
        Padding::Valid => {
            if k > len {
                return Err(Error::dim(format!(
                    "kernel extent {k} exceeds input {axis} {len}"
                )));
            }
            Ok(((len - k) / s + 1, 0))
        }
        Padding::Same => {
            let out = len.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(len);
            Ok((out, total / 2))
        }
    }
}

impl ConvGeometry {
    /// `input` is `[C, H, W]`, `kernel` is `[C_out, C, kH, kW]`.
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects a [C,H,W] input and [O,C,kH,kW] kernel, got {input:?} and {kernel:?}"
            )));
        }
        if input[0] != kernel[1] {
            return Err(Error::dim(format!(
                "conv2d input has {} channels but kernel {kernel:?} expects {}",
                input[0], kernel[1]
            )));
        }
        let (out_h, pad_top) = out_extent(input[1], kernel[2], stride.0, padding, "height")?;
        let (out_w, pad_left) = out_extent(input[2], kernel[3], stride.1, padding, "width")?;
        Ok(ConvGeometry {
            in_c: input[0],
            in_h: input[1],
            in_w: input[2],
            out_c: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            sh: stride.0,
            sw: stride.1,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_c, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_c, self.out_h, self.out_w]
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    /// Output columns `ox` whose input column `ox*sw + kx - pad_left` is in range.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad_left > kx {
            (self.pad_left - kx).div_ceil(self.sw)
        } else {
            0
        };
        // largest ox with ox*sw + kx - pad_left <= in_w - 1
        let limit = self.in_w + self.pad_left;
        let hi = if kx >= limit {
            0
        } else {
            ((limit - 1 - kx) / self.sw + 1).min(self.out_w)
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        let v = (oy * self.sh + ky).checked_sub(self.pad_top)?;
        (v < self.in_h).then_some(v)
    }
}

/// Splits a possibly batched tensor into (batch, per-instance shape).
fn split_batch<'a>(t: &'a Tensor, inner_rank: usize, what: &str) -> Result<(usize, &'a [usize])> {
    match t.rank() {
        r if r == inner_rank => Ok((1, t.shape())),
        r if r == inner_rank + 1 => Ok((t.shape()[0], &t.shape()[1..])),
        _ => Err(Error::dim(format!(
            "{what} expects rank {inner_rank} (or batched rank {}) but got {:?}",
            inner_rank + 1,
            t.shape()
        ))),
    }
}

fn batched_shape(batched: bool, batch: usize, inner: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(inner.len() + 1);
    if batched {
        s.push(batch);
    }
    s.extend_from_slice(inner);
    s
}

fn conv_instance(
    g: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let plane = g.out_h * g.out_w;
    for o in 0..g.out_c {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias.map_or(0.0, |b| b[o]));
        for c in 0..g.in_c {
            let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let w = kernel[((o * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = g.ox_range(kx);
                    for oy in 0..g.out_h {
                        let Some(iy) = g.iy(oy, ky) else { continue };
                        let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.sw == 1 {
                            let src = &row[lo + kx - g.pad_left..hi + kx - g.pad_left];
                            for (d, &v) in drow[lo..hi].iter_mut().zip(src) {
                                *d += w * v;
                            }
                        } else {
                            for ox in lo..hi {
                                drow[ox] += w * row[ox * g.sw + kx - g.pad_left];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_adjoint_instance(g: &ConvGeometry, u: &[f64], kernel: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let plane = g.out_h * g.out_w;
    for o in 0..g.out_c {
        let up = &u[o * plane..(o + 1) * plane];
        for c in 0..g.in_c {
            let dst = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let w = kernel[((o * g.in_c + c) * g.kh + ky) * g.kw + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.ox_range(kx);
                    for oy in 0..g.out_h {
                        let Some(iy) = g.iy(oy, ky) else { continue };
                        let urow = &up[oy * g.out_w..(oy + 1) * g.out_w];
                        let drow = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.sw == 1 {
                            let dst = &mut drow[lo + kx - g.pad_left..hi + kx - g.pad_left];
                            for (d, &v) in dst.iter_mut().zip(&urow[lo..hi]) {
                                *d += w * v;
                            }
                        } else {
                            for ox in lo..hi {
                                drow[ox * g.sw + kx - g.pad_left] += w * urow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) of `[C,H,W]` or `[B,C,H,W]` input.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor> {
    let (_, inner) = split_batch(input, 3, "conv2d")?;
    let g = ConvGeometry::new(inner, kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_c] {
            return Err(Error::dim(format!(
                "conv2d bias has shape {:?}, expected [{}]",
                b.shape(),
                g.out_c
            )));
        }
    }
    conv2d_with_geometry(
        input,
        kernel.data(),
        bias.map(Tensor::data),
        &g,
        kernel.precision(),
    )
}

pub(crate) fn conv2d_with_geometry(
    input: &Tensor,
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
    kernel_precision: Precision,
) -> Result<Tensor> {
    let (batch, inner) = split_batch(input, 3, "conv2d")?;
    if inner != g.input_shape() {
        return Err(Error::dim(format!(
            "conv2d input {inner:?} does not match geometry {:?}",
            g.input_shape()
        )));
    }
    let (il, ol) = (g.in_len(), g.out_len());
    let mut out = vec![0.0; batch * ol];
    out.par_chunks_mut(ol)
        .zip(input.data().par_chunks(il))
        .for_each(|(dst, x)| conv_instance(g, x, kernel, bias, dst));
    let shape = batched_shape(input.rank() == 4, batch, &g.output_shape());
    Ok(Tensor::from_raw(
        shape,
        out,
        input.precision().max(kernel_precision),
    ))
}

/// Adjoint of [`conv2d`] with respect to its input (a transposed convolution).
///
/// `input_shape` is the per-instance `[C,H,W]` the forward pass saw; it is needed
/// because several input sizes can map to the same output size.
pub fn conv2d_input_adjoint(
    upstream: &Tensor,
    kernel: &Tensor,
    input_shape: &[usize],
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input_shape, kernel.shape(), stride, padding)?;
    conv2d_adjoint_with_geometry(upstream, kernel.data(), &g, kernel.precision())
}

pub(crate) fn conv2d_adjoint_with_geometry(
    upstream: &Tensor,
    kernel: &[f64],
    g: &ConvGeometry,
    kernel_precision: Precision,
) -> Result<Tensor> {
    let (batch, inner) = split_batch(upstream, 3, "conv2d adjoint")?;
    if inner != g.output_shape() {
        return Err(Error::dim(format!(
            "conv2d adjoint upstream {inner:?} does not match output geometry {:?}",
            g.output_shape()
        )));
    }
    let (il, ol) = (g.in_len(), g.out_len());
    let mut out = vec![0.0; batch * il];
    out.par_chunks_mut(il)
        .zip(upstream.data().par_chunks(ol))
        .for_each(|(dst, u)| conv_adjoint_instance(g, u, kernel, dst));
    let shape = batched_shape(upstream.rank() == 4, batch, &g.input_shape());
    Ok(Tensor::from_raw(
        shape,
        out,
        upstream.precision().max(kernel_precision),
    ))
}

/// Window geometry shared by average and max pooling (valid padding only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], kernel: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if input.len() != 3 {
            return Err(Error::dim(format!(
                "pooling expects a [C,H,W] input, got {input:?}"
            )));
        }
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::dim("pooling window must be non-empty"));
        }
        let (out_h, _) = out_extent(input[1], kernel.0, stride.0, Padding::Valid, "height")?;
        let (out_w, _) = out_extent(input[2], kernel.1, stride.1, Padding::Valid, "width")?;
        Ok(PoolGeometry {
            c: input[0],
            in_h: input[1],
            in_w: input[2],
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            out_h,
            out_w,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.c, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.c, self.out_h, self.out_w]
    }

    fn in_len(&self) -> usize {
        self.c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.c * self.out_h * self.out_w
    }

    /// Calls `f(out_index, in_index)` for every window cell, in row-major
    /// window order.
    #[inline]
    fn for_each_cell(&self, mut f: impl FnMut(usize, usize)) {
        for c in 0..self.c {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let o = (c * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..self.kh {
                        let iy = oy * self.sh + ky;
                        for kx in 0..self.kw {
                            let ix = ox * self.sw + kx;
                            f(o, (c * self.in_h + iy) * self.in_w + ix);
                        }
                    }
                }
            }
        }
    }
}

pub fn avgpool2d(input: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let (_, inner) = split_batch(input, 3, "avgpool2d")?;
    let g = PoolGeometry::new(inner, kernel, stride)?;
    avgpool2d_with_geometry(input, &g)
}

pub(crate) fn avgpool2d_with_geometry(input: &Tensor, g: &PoolGeometry) -> Result<Tensor> {
    let (batch, inner) = split_batch(input, 3, "avgpool2d")?;
    if inner != g.input_shape() {
        return Err(Error::dim(format!(
            "avgpool2d input {inner:?} does not match {:?}",
            g.input_shape()
        )));
    }
    let area = (g.kh * g.kw) as f64;
    let (il, ol) = (g.in_len(), g.out_len());
    let mut out = vec![0.0; batch * ol];
    for (dst, x) in out.chunks_mut(ol).zip(input.data().chunks(il)) {
        g.for_each_cell(|o, i| dst[o] += x[i]);
        for v in dst.iter_mut() {
            *v /= area;
        }
    }
    let shape = batched_shape(input.rank() == 4, batch, &g.output_shape());
    Ok(Tensor::from_raw(shape, out, input.precision()))
}

/// Spreads `upstream / (kH*kW)` back over each window.
pub fn avgpool2d_adjoint(
    upstream: &Tensor,
    input_shape: &[usize],
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor> {
    let g = PoolGeometry::new(input_shape, kernel, stride)?;
    avgpool2d_adjoint_with_geometry(upstream, &g)
}

pub(crate) fn avgpool2d_adjoint_with_geometry(
    upstream: &Tensor,
    g: &PoolGeometry,
) -> Result<Tensor> {
    let (batch, inner) = split_batch(upstream, 3, "avgpool2d adjoint")?;
    if inner != g.output_shape() {
        return Err(Error::dim(format!(
            "avgpool2d adjoint upstream {inner:?} does not match {:?}",
            g.output_shape()
        )));
    }
    let area = (g.kh * g.kw) as f64;
    let (il, ol) = (g.in_len(), g.out_len());
    let mut out = vec![0.0; batch * il];
    for (dst, u) in out.chunks_mut(il).zip(upstream.data().chunks(ol)) {
        g.for_each_cell(|o, i| dst[i] += u[o] / area);
    }
    let shape = batched_shape(upstream.rank() == 4, batch, &g.input_shape());
    Ok(Tensor::from_raw(shape, out, upstream.precision()))
}

/// Max pooling. Returns the pooled tensor and, per output entry, the
/// per-instance flat input index of the window maximum. Ties go to the lowest
/// row-major index.
pub fn maxpool2d(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let (_, inner) = split_batch(input, 3, "maxpool2d")?;
    let g = PoolGeometry::new(inner, kernel, stride)?;
    maxpool2d_with_geometry(input, &g)
}

pub(crate) fn maxpool2d_with_geometry(
    input: &Tensor,
    g: &PoolGeometry,
) -> Result<(Tensor, Vec<usize>)> {
    let (batch, inner) = split_batch(input, 3, "maxpool2d")?;
    if inner != g.input_shape() {
        return Err(Error::dim(format!(
            "maxpool2d input {inner:?} does not match {:?}",
            g.input_shape()
        )));
    }
    let (il, ol) = (g.in_len(), g.out_len());
    let mut out = vec![f64::NEG_INFINITY; batch * ol];
    let mut arg = vec![usize::MAX; batch * ol];
    for ((dst, idx), x) in out
        .chunks_mut(ol)
        .zip(arg.chunks_mut(ol))
        .zip(input.data().chunks(il))
    {
        g.for_each_cell(|o, i| {
            // strict comparison keeps the first maximizer in window order
            if idx[o] == usize::MAX || x[i] > dst[o] {
                dst[o] = x[i];
                idx[o] = i;
            }
        });
    }
    let shape = batched_shape(input.rank() == 4, batch, &g.output_shape());
    Ok((Tensor::from_raw(shape, out, input.precision()), arg))
}

/// Routes each upstream value to its recorded argmax; zero elsewhere.
pub fn maxpool2d_adjoint(
    upstream: &Tensor,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor> {
    let (batch, _) = split_batch(upstream, 3, "maxpool2d adjoint")?;
    if input_shape.len() != 3 {
        return Err(Error::dim(format!(
            "maxpool2d adjoint expects a [C,H,W] input shape, got {input_shape:?}"
        )));
    }
    if argmax.len() != upstream.len() {
        return Err(Error::dim(format!(
            "argmax map has {} entries but upstream has {}",
            argmax.len(),
            upstream.len()
        )));
    }
    let il: usize = input_shape.iter().product();
    let ol = upstream.len() / batch;
    let mut out = vec![0.0; batch * il];
    for b in 0..batch {
        for o in 0..ol {
            let i = argmax[b * ol + o];
            if i >= il {
                return Err(Error::dim(format!(
                    "argmax index {i} outside input of size {il}"
                )));
            }
            out[b * il + i] += upstream.data()[b * ol + o];
        }
    }
    let shape = batched_shape(upstream.rank() == 4, batch, input_shape);
    Ok(Tensor::from_raw(shape, out, upstream.precision()))
}

/// `[B,H,W,C]` → `[B,C,H,W]`.
pub fn permute_channels_first(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::dim(format!(
            "channel permutation expects rank 4, got {:?}",
            x.shape()
        )));
    }
    let [b, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for n in 0..b {
        for y in 0..h {
            for z in 0..w {
                for k in 0..c {
                    out[((n * c + k) * h + y) * w + z] = src[((n * h + y) * w + z) * c + k];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, c, h, w], out, x.precision()))
}

/// `[B,C,H,W]` → `[B,H,W,C]`.
pub fn permute_channels_last(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::dim(format!(
            "channel permutation expects rank 4, got {:?}",
            x.shape()
        )));
    }
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for n in 0..b {
        for k in 0..c {
            for y in 0..h {
                for z in 0..w {
                    out[((n * h + y) * w + z) * c + k] = src[((n * c + k) * h + y) * w + z];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, h, w, c], out, x.precision()))
}
