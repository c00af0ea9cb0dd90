//! Differentiable layers: 2-D convolution, leaky-ReLU, sigmoid and the
//! per-pixel channel softmax.
//!
//! Convolution lowers to im2col followed by a GEMM; the autodiff graph in
//! [`crate::tensor`] calls the kernels below for both passes.

use crate::error::{shape_err, usage_err, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Output geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn infer(
        x: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if x.len() != 3 {
            return Err(shape_err!("conv2d input must be [C,H,W], got {x:?}"));
        }
        if weight.len() != 4 || weight[2] != weight[3] {
            return Err(shape_err!("conv2d weight must be [C_out,C_in,k,k], got {weight:?}"));
        }
        if weight[1] != x[0] {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {} channels, weight expects {}",
                x[0],
                weight[1]
            ));
        }
        if bias != [weight[0]] {
            return Err(shape_err!("conv2d bias must be [{}], got {bias:?}", weight[0]));
        }
        if stride == 0 {
            return Err(usage_err!("conv2d stride must be positive"));
        }
        let k = weight[2];
        let (h, w) = (x[1], x[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(shape_err!(
                "conv2d input {h}x{w} with padding {padding} is smaller than kernel {k}"
            ));
        }
        Ok(ConvGeometry {
            c_in: x[0],
            h,
            w,
            c_out: weight[0],
            k,
            stride,
            padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Lays out input patches as a [C_in·k·k, H_out·W_out] row-major matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.out_pixels();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix operand, optionally transposed.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl Mat<'_> {
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// c ← a·b + beta·c with c row-major [m, n].
fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every index reached through the
    // given dimensions and strides lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(cols: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.out_pixels();
    let mut out = vec![0.0; g.c_out * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[o]);
    }
    gemm(
        Mat {
            data: weight,
            rows: g.c_out,
            cols: g.patch_len(),
            transposed: false,
        },
        Mat {
            data: cols,
            rows: g.patch_len(),
            cols: p,
            transposed: false,
        },
        1.0,
        &mut out,
    );
    out
}

pub(crate) fn conv_backward_bias(dy: &[f64], g: &ConvGeometry, db: &mut [f64]) {
    let p = g.out_pixels();
    for (o, row) in dy.chunks(p).enumerate() {
        db[o] += row.iter().sum::<f64>();
    }
}

pub(crate) fn conv_backward_weight(dy: &[f64], cols: &[f64], g: &ConvGeometry, dw: &mut [f64]) {
    let p = g.out_pixels();
    gemm(
        Mat {
            data: dy,
            rows: g.c_out,
            cols: p,
            transposed: false,
        },
        Mat {
            data: cols,
            rows: g.patch_len(),
            cols: p,
            transposed: true,
        },
        1.0,
        dw,
    );
}

pub(crate) fn conv_backward_input(dy: &[f64], weight: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let p = g.out_pixels();
    let mut dcols = vec![0.0; g.patch_len() * p];
    gemm(
        Mat {
            data: weight,
            rows: g.c_out,
            cols: g.patch_len(),
            transposed: true,
        },
        Mat {
            data: dy,
            rows: g.c_out,
            cols: p,
            transposed: false,
        },
        0.0,
        &mut dcols,
    );
    col2im_add(&dcols, g, dx);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the leading axis of a [C, N] buffer, column by column.
pub(crate) fn softmax_columns(z: &[f64], c: usize) -> Vec<f64> {
    let n = z.len() / c;
    let mut out = vec![0.0; z.len()];
    for j in 0..n {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(z[k * n + j]);
        }
        let mut sum = 0.0;
        for k in 0..c {
            let e = (z[k * n + j] - m).exp();
            out[k * n + j] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for k in 0..c {
            out[k * n + j] *= inv;
        }
    }
    out
}

pub(crate) fn softmax_columns_backward(p: &[f64], g: &[f64], c: usize, dz: &mut [f64]) {
    let n = p.len() / c;
    for j in 0..n {
        let mut dot = 0.0;
        for k in 0..c {
            dot += g[k * n + j] * p[k * n + j];
        }
        for k in 0..c {
            let i = k * n + j;
            dz[i] += p[i] * (g[i] - dot);
        }
    }
}

/// Weight/bias pair of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(shape_err!("weight must be [C_out,C_in,k,k], got {s:?}"));
        }
        // stride-1 layers keep their spatial size, which needs an odd kernel
        if s[2].is_multiple_of(2) && stride == 1 {
            return Err(shape_err!("stride-1 kernel size {} must be odd", s[2]));
        }
        if bias.shape() != [s[0]] {
            return Err(shape_err!("bias must be [{}], got {:?}", s[0], bias.shape()));
        }
        if stride == 0 {
            return Err(usage_err!("stride must be positive"));
        }
        Ok(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Conv2dParams::new(
            Tensor::zeros(&[c_out, c_in, k, k])?,
            Tensor::zeros(&[c_out])?,
            stride,
            padding,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Graph-level convolution with bound parameter nodes.
pub fn conv2d_var(g: &mut Graph, x: Var, weight: Var, bias: Var, p: &Conv2dParams) -> Result<Var> {
    g.conv2d(x, weight, bias, p.stride, p.padding)
}

/// Value-only convolution of a [C_in,H,W] tensor.
pub fn conv2d(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.detach());
    let w = g.constant(p.weight.detach());
    let b = g.constant(p.bias.detach());
    let y = g.conv2d(xv, w, b, p.stride, p.padding)?;
    Ok(g.take_value(y))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.detach());
    let y = g.leaky_relu(xv, slope)?;
    Ok(g.take_value(y))
}

pub fn softmax_channel(z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.constant(z.detach());
    let y = g.softmax_channel(zv)?;
    Ok(g.take_value(y))
}

#[cfg(test)]
pub(crate) mod reference {
    use super::*;

    /// Direct nested-loop cross-correlation used as an oracle.
    pub fn conv2d_nested(x: &Tensor, p: &Conv2dParams) -> Vec<f64> {
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, k) = (p.out_channels(), p.kernel());
        let (s, pad) = (p.stride, p.padding);
        let h_out = (h + 2 * pad - k) / s + 1;
        let w_out = (w + 2 * pad - k) / s + 1;
        let xd = x.data();
        let wd = p.weight.data();
        let mut out = vec![0.0; c_out * h_out * w_out];
        for o in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = p.bias.data()[o];
                    for c in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - pad as isize;
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wd[((o * c_in + c) * k + ky) * k + kx]
                                    * xd[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
        out
    }
}
