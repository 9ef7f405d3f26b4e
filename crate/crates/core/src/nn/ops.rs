//! Forward and backward kernels for the layer primitives.
//!
//! Kernels work on flat row-major slices. The tensor-level wrappers at the
//! bottom of this file run a single forward pass without recording; the
//! [`Tape`](super::Tape) calls the same kernels and keeps what backward needs.

use rayon::prelude::*;

use super::{NnError, Tensor};

/// Geometry of a (possibly one-dimensional) cross-correlation.
///
/// A 1D convolution is the 2D case with unit height, unit kernel height and
/// no vertical padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output extent of a convolution along one axis, or `None` if the kernel
/// does not fit.
pub fn conv_output_len(len: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    if stride == 0 || len + 2 * pad < kernel {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn conv2d(
        x: &[usize],
        weight: &[usize],
        bias: &[usize],
        pad: usize,
        stride: usize,
    ) -> Result<(Self, bool), NnError> {
        let (batch, c_in, h, w, batched) = match *x {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => {
                return Err(NnError::ShapeMismatch(format!(
                    "conv2d input must be (C,H,W) or (N,C,H,W), got {x:?}"
                )))
            }
        };
        let [c_out, wc_in, kh, kw] = *weight else {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d weight must be (C_out,C_in,k,k), got {weight:?}"
            )));
        };
        if wc_in != c_in || kh != kw || bias != [c_out] {
            return Err(NnError::ShapeMismatch(format!(
                "conv2d input {x:?}, weight {weight:?}, bias {bias:?}"
            )));
        }
        if stride == 0 {
            return Err(NnError::ShapeMismatch("stride must be >= 1".into()));
        }
        let (Some(h_out), Some(w_out)) = (
            conv_output_len(h, kh, pad, stride),
            conv_output_len(w, kw, pad, stride),
        ) else {
            return Err(NnError::ShapeMismatch(format!(
                "kernel {kh} does not fit input {h}x{w} with padding {pad}"
            )));
        };
        Ok((
            Self {
                batch,
                c_in,
                h,
                w,
                c_out,
                kh,
                kw,
                ph: pad,
                pw: pad,
                stride,
                h_out,
                w_out,
            },
            batched,
        ))
    }

    pub fn conv1d(
        x: &[usize],
        weight: &[usize],
        bias: &[usize],
        pad: usize,
        stride: usize,
    ) -> Result<(Self, bool), NnError> {
        let (batch, c_in, len, batched) = match *x {
            [c, l] => (1, c, l, false),
            [n, c, l] => (n, c, l, true),
            _ => {
                return Err(NnError::ShapeMismatch(format!(
                    "conv1d input must be (C,L) or (N,C,L), got {x:?}"
                )))
            }
        };
        let [c_out, wc_in, k] = *weight else {
            return Err(NnError::ShapeMismatch(format!(
                "conv1d weight must be (C_out,C_in,k), got {weight:?}"
            )));
        };
        if wc_in != c_in || bias != [c_out] {
            return Err(NnError::ShapeMismatch(format!(
                "conv1d input {x:?}, weight {weight:?}, bias {bias:?}"
            )));
        }
        if stride == 0 {
            return Err(NnError::ShapeMismatch("stride must be >= 1".into()));
        }
        let w_out = conv_output_len(len, k, pad, stride).ok_or(NnError::KernelTooLarge {
            kernel: k,
            len,
            pad,
        })?;
        Ok((
            Self {
                batch,
                c_in,
                h: 1,
                w: len,
                c_out,
                kh: 1,
                kw: k,
                ph: 0,
                pw: pad,
                stride,
                h_out: 1,
                w_out,
            },
            batched,
        ))
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds one sample into a (C_in·kh·kw, positions) column matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut col = vec![0.0; self.patch() * p];
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oi in 0..self.h_out {
                        let ii = (oi * self.stride + ki) as isize - self.ph as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.w_out {
                            let jj = (oj * self.stride + kj) as isize - self.pw as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[oi * self.w_out + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Folds a column-matrix gradient back onto the input layout.
    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oi in 0..self.h_out {
                        let ii = (oi * self.stride + ki) as isize - self.ph as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.w_out {
                            let jj = (oj * self.stride + kj) as isize - self.pw as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[jj as usize] += src[oi * self.w_out + oj];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn output_shape(&self, batched: bool, one_d: bool) -> Vec<usize> {
        let mut s = Vec::with_capacity(4);
        if batched {
            s.push(self.batch);
        }
        s.push(self.c_out);
        if !one_d {
            s.push(self.h_out);
        }
        s.push(self.w_out);
        s
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = g.positions();
    let r = g.patch();
    let mut out = vec![0.0; g.batch * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(y, xs)| {
            let col = g.im2col(xs);
            for co in 0..g.c_out {
                let yrow = &mut y[co * p..(co + 1) * p];
                yrow.fill(bias[co]);
                let wrow = &weight[co * r..(co + 1) * r];
                for (ri, &wv) in wrow.iter().enumerate() {
                    let crow = &col[ri * p..(ri + 1) * p];
                    for (yv, cv) in yrow.iter_mut().zip(crow) {
                        *yv += wv * cv;
                    }
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_params: bool,
) -> ConvGrads {
    let p = g.positions();
    let r = g.patch();
    // Per-sample partial gradients, reduced afterwards in sample order.
    let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> = x
        .par_chunks(g.in_len())
        .zip(dout.par_chunks(g.out_len()))
        .map(|(xs, dy)| {
            let mut dx = None;
            let mut dw = None;
            let mut db = None;
            if need_params {
                let col = g.im2col(xs);
                let mut w_acc = vec![0.0; g.c_out * r];
                let mut b_acc = vec![0.0; g.c_out];
                for co in 0..g.c_out {
                    let dyrow = &dy[co * p..(co + 1) * p];
                    b_acc[co] = dyrow.iter().sum();
                    for ri in 0..r {
                        let crow = &col[ri * p..(ri + 1) * p];
                        w_acc[co * r + ri] = dyrow.iter().zip(crow).map(|(a, b)| a * b).sum();
                    }
                }
                dw = Some(w_acc);
                db = Some(b_acc);
            }
            if need_dx {
                let mut dcol = vec![0.0; r * p];
                for co in 0..g.c_out {
                    let dyrow = &dy[co * p..(co + 1) * p];
                    for ri in 0..r {
                        let wv = weight[co * r + ri];
                        let drow = &mut dcol[ri * p..(ri + 1) * p];
                        for (d, v) in drow.iter_mut().zip(dyrow) {
                            *d += wv * v;
                        }
                    }
                }
                let mut d = vec![0.0; g.in_len()];
                g.col2im(&dcol, &mut d);
                dx = Some(d);
            }
            (dx, dw, db)
        })
        .collect();

    let mut grads = ConvGrads {
        dx: need_dx.then(|| Vec::with_capacity(x.len())),
        dw: need_params.then(|| vec![0.0; weight.len()]),
        db: need_params.then(|| vec![0.0; g.c_out]),
    };
    for (dx, dw, db) in per_sample {
        if let (Some(acc), Some(v)) = (grads.dx.as_mut(), dx) {
            acc.extend_from_slice(&v);
        }
        if let (Some(acc), Some(v)) = (grads.dw.as_mut(), dw) {
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        if let (Some(acc), Some(v)) = (grads.db.as_mut(), db) {
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
    }
    grads
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub(crate) fn relu_backward(x: &[f64], dout: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dout)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

/// Geometry of a non-overlapping 2×2 average downsample over the last two
/// axes. Odd trailing rows/columns are dropped (floor).
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolGeom {
    pub fn new(shape: &[usize]) -> Result<(Self, Vec<usize>), NnError> {
        if shape.len() < 3 {
            return Err(NnError::ShapeMismatch(format!(
                "avg_pool2 needs (..., C, H, W), got {shape:?}"
            )));
        }
        let (lead, hw) = shape.split_at(shape.len() - 2);
        let (h, w) = (hw[0], hw[1]);
        if h < 2 || w < 2 {
            return Err(NnError::ShapeMismatch(format!(
                "avg_pool2 input {h}x{w} smaller than the window"
            )));
        }
        let g = Self {
            planes: lead.iter().product(),
            h,
            w,
            h_out: h / 2,
            w_out: w / 2,
        };
        let mut out = lead.to_vec();
        out.extend([g.h_out, g.w_out]);
        Ok((g, out))
    }
}

pub(crate) fn avg_pool2_forward(g: &PoolGeom, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.planes * g.h_out * g.w_out];
    for pl in 0..g.planes {
        let src = &x[pl * g.h * g.w..];
        let dst = &mut out[pl * g.h_out * g.w_out..];
        for i in 0..g.h_out {
            for j in 0..g.w_out {
                let a = src[2 * i * g.w + 2 * j];
                let b = src[2 * i * g.w + 2 * j + 1];
                let c = src[(2 * i + 1) * g.w + 2 * j];
                let d = src[(2 * i + 1) * g.w + 2 * j + 1];
                dst[i * g.w_out + j] = 0.25 * (a + b + c + d);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(g: &PoolGeom, dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for pl in 0..g.planes {
        let src = &dout[pl * g.h_out * g.w_out..];
        let dst = &mut dx[pl * g.h * g.w..];
        for i in 0..g.h_out {
            for j in 0..g.w_out {
                let v = 0.25 * src[i * g.w_out + j];
                dst[2 * i * g.w + 2 * j] = v;
                dst[2 * i * g.w + 2 * j + 1] = v;
                dst[(2 * i + 1) * g.w + 2 * j] = v;
                dst[(2 * i + 1) * g.w + 2 * j + 1] = v;
            }
        }
    }
    dx
}

/// Mean of each of `groups` equal contiguous chunks.
pub(crate) fn gap_forward(x: &[f64], groups: usize) -> Vec<f64> {
    let span = x.len() / groups;
    x.chunks(span)
        .map(|c| c.iter().sum::<f64>() / span as f64)
        .collect()
}

pub(crate) fn gap_backward(dout: &[f64], span: usize) -> Vec<f64> {
    dout.iter()
        .flat_map(|&d| std::iter::repeat_n(d / span as f64, span))
        .collect()
}

/// Shape bookkeeping for `linear`: returns (rows, in_dim, out_dim, batched).
pub(crate) fn linear_geom(
    x: &[usize],
    weight: &[usize],
    bias: &[usize],
) -> Result<(usize, usize, usize, bool), NnError> {
    let (rows, d, batched) = match *x {
        [d] => (1, d, false),
        [n, d] => (n, d, true),
        _ => {
            return Err(NnError::ShapeMismatch(format!(
                "linear input must be (D) or (N,D), got {x:?}"
            )))
        }
    };
    match *weight {
        [k, wd] if wd == d && bias == [k] => Ok((rows, d, k, batched)),
        _ => Err(NnError::ShapeMismatch(format!(
            "linear input {x:?}, weight {weight:?}, bias {bias:?}"
        ))),
    }
}

pub(crate) fn linear_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    d: usize,
    k: usize,
) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            (0..k).map(move |o| {
                bias[o]
                    + weight[o * d..(o + 1) * d]
                        .iter()
                        .zip(row)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
        })
        .collect()
}

pub(crate) fn linear_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    d: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; k];
    for n in 0..rows {
        let xr = &x[n * d..(n + 1) * d];
        let dxr = &mut dx[n * d..(n + 1) * d];
        for o in 0..k {
            let g = dout[n * k + o];
            db[o] += g;
            let wr = &weight[o * d..(o + 1) * d];
            let dwr = &mut dw[o * d..(o + 1) * d];
            for i in 0..d {
                dxr[i] += g * wr[i];
                dwr[i] += g * xr[i];
            }
        }
    }
    (dx, dw, db)
}

/// Cross-correlation with zero padding over (C,H,W) or (N,C,H,W) input.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    pad: usize,
    stride: usize,
) -> Result<Tensor, NnError> {
    let (g, batched) = ConvGeom::conv2d(x.shape(), weight.shape(), bias.shape(), pad, stride)?;
    let out = conv_forward(&g, x.data(), weight.data(), bias.data());
    Tensor::new(g.output_shape(batched, false), out)
}

/// Cross-correlation with zero padding over (C,L) or (N,C,L) input.
pub fn conv1d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    pad: usize,
    stride: usize,
) -> Result<Tensor, NnError> {
    let (g, batched) = ConvGeom::conv1d(x.shape(), weight.shape(), bias.shape(), pad, stride)?;
    let out = conv_forward(&g, x.data(), weight.data(), bias.data());
    Tensor::new(g.output_shape(batched, true), out)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), relu_forward(x.data())).expect("same shape")
}

/// 2×2 average downsample with stride 2 (floor on odd extents).
pub fn avg_pool2(x: &Tensor) -> Result<Tensor, NnError> {
    let (g, shape) = PoolGeom::new(x.shape())?;
    Tensor::new(shape, avg_pool2_forward(&g, x.data()))
}

/// Per-channel mean over all trailing positions: (C, ...) -> (C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, NnError> {
    global_avg_pool_keep(x, 1)
}

/// Mean over every axis after the first `keep` axes, e.g. (N,C,H,W) with
/// `keep = 2` gives (N,C).
pub fn global_avg_pool_keep(x: &Tensor, keep: usize) -> Result<Tensor, NnError> {
    if keep == 0 || x.rank() <= keep {
        return Err(NnError::ShapeMismatch(format!(
            "global_avg_pool keeping {keep} axes of {:?}",
            x.shape()
        )));
    }
    let lead = x.shape()[..keep].to_vec();
    let groups = lead.iter().product();
    Tensor::new(lead, gap_forward(x.data(), groups))
}

/// `weight · x + bias` for (D) or row-wise for (N,D).
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let (rows, d, k, batched) = linear_geom(x.shape(), weight.shape(), bias.shape())?;
    let out = linear_forward(x.data(), weight.data(), bias.data(), d, k);
    let shape = if batched { vec![rows, k] } else { vec![k] };
    Tensor::new(shape, out)
}
