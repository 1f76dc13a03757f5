//! Convolution kernels: im2col + GEMM for dense conv, direct loops for the
//! depthwise case. Same (zero) padding of k/2 throughout; strides 1 and 2.

use super::{accumulate, Op, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Row-major GEMM: `c = alpha * a @ b + beta * c` with `a: (m,k)`, `b: (k,n)`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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

fn out_len(size: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (size + 2 * pad - k) / stride + 1
}

/// Unfold `x (C,H,W)` into a `(C*k*k, ho*wo)` matrix.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize) -> Vec<f32> {
    let pad = k / 2;
    let ho = out_len(h, k, stride);
    let wo = out_len(w, k, stride);
    let n = ho * wo;
    let mut cols = vec![0.0f32; c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = iy as usize * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a `(C*k*k, ho*wo)` gradient matrix back onto the input layout.
fn col2im(
    g_cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    g_x: &mut [f32],
) {
    let pad = k / 2;
    let ho = out_len(h, k, stride);
    let wo = out_len(w, k, stride);
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut g_x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = iy as usize * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[dst + ix as usize] += g_cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution with same padding. `x: (C,H,W)`, `w: (O,C,k,k)`,
    /// stride 1 or 2, `k` odd.
    pub fn conv2d(&self, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor> {
        let (c, h, wd) = self.dims3()?;
        let ws = w.shape();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::dim(format!(
                "conv weight must be (O,{c},k,k), got {ws:?}"
            )));
        }
        let (o, k) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(Error::param(format!("conv kernel size {k} must be odd")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::param(format!("unsupported conv stride {stride}")));
        }
        if let Some(b) = b {
            if b.shape() != [o] {
                return Err(Error::dim(format!(
                    "conv bias must be [{o}], got {:?}",
                    b.shape()
                )));
            }
        }
        let ho = out_len(h, k, stride);
        let wo = out_len(wd, k, stride);
        let n = ho * wo;
        let r = c * k * k;
        let cols = im2col(self.data(), c, h, wd, k, stride);
        let mut out = vec![0.0f32; o * n];
        gemm(
            o,
            r,
            n,
            1.0,
            w.data(),
            r as isize,
            1,
            &cols,
            n as isize,
            1,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            for (oi, &bv) in b.data().iter().enumerate() {
                for v in &mut out[oi * n..(oi + 1) * n] {
                    *v += bv;
                }
            }
        }
        let grad = self.requires_grad() || w.requires_grad() || b.map_or(false, |b| b.requires_grad());
        let shape = vec![o, ho, wo];
        if grad {
            Ok(Tensor::from_op(
                shape,
                out,
                Op::Conv2d {
                    x: self.clone(),
                    w: w.clone(),
                    b: b.cloned(),
                    stride,
                },
            ))
        } else {
            Tensor::new(&shape, out)
        }
    }

    /// Per-channel 3x3 convolution with externally supplied kernels
    /// `k: (C,3,3)`, same padding, stride 1.
    pub fn depthwise_conv3x3(&self, k: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if k.shape() != [c, 3, 3] {
            return Err(Error::dim(format!(
                "depthwise kernels must be ({c},3,3), got {:?}",
                k.shape()
            )));
        }
        let out = depthwise_forward(self.data(), k.data(), c, h, w);
        if self.requires_grad() || k.requires_grad() {
            Ok(Tensor::from_op(
                vec![c, h, w],
                out,
                Op::DepthwiseConv3x3 {
                    x: self.clone(),
                    k: k.clone(),
                },
            ))
        } else {
            Tensor::new(&[c, h, w], out)
        }
    }
}

fn depthwise_forward(x: &[f32], k: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        let ker = &k[ci * 9..ci * 9 + 9];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let mut acc = 0.0f32;
                for ki in 0..3 {
                    let iy = y as isize + ki as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..3 {
                        let ix = x_ as isize + kj as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            acc += ker[ki * 3 + kj] * plane[iy as usize * w + ix as usize];
                        }
                    }
                }
                dst[y * w + x_] = acc;
            }
        }
    }
    out
}

pub(super) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    grad_out: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (c, h, wd) = x.dims3().expect("validated in forward");
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = out_len(h, k, stride);
    let wo = out_len(wd, k, stride);
    let n = ho * wo;
    let r = c * k * k;

    if let Some(b) = b {
        accumulate(grads, b, |g| {
            for oi in 0..o {
                let mut acc = 0.0f64;
                for v in &grad_out[oi * n..(oi + 1) * n] {
                    acc += *v as f64;
                }
                g[oi] += acc as f32;
            }
        });
    }
    if w.requires_grad() {
        // gW (o,r) = g_out (o,n) @ cols^T (n,r)
        let cols = im2col(x.data(), c, h, wd, k, stride);
        let mut gw = vec![0.0f32; o * r];
        gemm(
            o,
            n,
            r,
            1.0,
            grad_out,
            n as isize,
            1,
            &cols,
            1,
            n as isize,
            0.0,
            &mut gw,
        );
        accumulate(grads, w, |g| super::add_assign(g, &gw));
    }
    if x.requires_grad() {
        // g_cols (r,n) = W^T (r,o) @ g_out (o,n)
        let mut g_cols = vec![0.0f32; r * n];
        gemm(
            r,
            o,
            n,
            1.0,
            w.data(),
            1,
            r as isize,
            grad_out,
            n as isize,
            1,
            0.0,
            &mut g_cols,
        );
        let mut gx = vec![0.0f32; c * h * wd];
        col2im(&g_cols, c, h, wd, k, stride, &mut gx);
        accumulate(grads, x, |g| super::add_assign(g, &gx));
    }
}

pub(super) fn depthwise_backward(
    x: &Tensor,
    k: &Tensor,
    grad_out: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (c, h, w) = x.dims3().expect("validated in forward");
    if k.requires_grad() {
        let mut gk = vec![0.0f32; c * 9];
        for ci in 0..c {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            let go = &grad_out[ci * h * w..(ci + 1) * h * w];
            for ki in 0..3 {
                for kj in 0..3 {
                    let mut acc = 0.0f64;
                    for y in 0..h {
                        let iy = y as isize + ki as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for x_ in 0..w {
                            let ix = x_ as isize + kj as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                acc += go[y * w + x_] as f64
                                    * plane[iy as usize * w + ix as usize] as f64;
                            }
                        }
                    }
                    gk[ci * 9 + ki * 3 + kj] += acc as f32;
                }
            }
        }
        accumulate(grads, k, |g| super::add_assign(g, &gk));
    }
    if x.requires_grad() {
        // Correlation adjoint: flip the kernel.
        let mut gx = vec![0.0f32; c * h * w];
        for ci in 0..c {
            let ker = &k.data()[ci * 9..ci * 9 + 9];
            let go = &grad_out[ci * h * w..(ci + 1) * h * w];
            let dst = &mut gx[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for x_ in 0..w {
                    let mut acc = 0.0f32;
                    for ki in 0..3 {
                        let oy = y as isize - (ki as isize - 1);
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        for kj in 0..3 {
                            let ox = x_ as isize - (kj as isize - 1);
                            if ox >= 0 && ox < w as isize {
                                acc += ker[ki * 3 + kj] * go[oy as usize * w + ox as usize];
                            }
                        }
                    }
                    dst[y * w + x_] = acc;
                }
            }
        }
        accumulate(grads, x, |g| super::add_assign(g, &gx));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        // 3x3 delta kernel reproduces the input under same padding.
        let mut kd = vec![0.0f32; 9];
        kd[4] = 1.0;
        let w = Tensor::new(&[1, 1, 3, 3], kd).unwrap();
        let y = x.conv2d(&w, None, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_stride2_halves_spatial_dims() {
        let x = Tensor::new(&[2, 8, 6], vec![1.0; 96]).unwrap();
        let w = Tensor::new(&[3, 2, 3, 3], vec![0.1; 54]).unwrap();
        let y = x.conv2d(&w, None, 2).unwrap();
        assert_eq!(y.shape(), &[3, 4, 3]);
    }

    #[test]
    fn conv2d_one_by_one_mixes_channels() {
        let x = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
        let w = Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.5]).unwrap();
        let y = x.conv2d(&w, None, 1).unwrap();
        assert_eq!(y.data(), &[6.0, 12.0, 18.0, 24.0]);
    }

    #[test]
    fn depthwise_delta_is_identity() {
        let x = Tensor::new(&[2, 4, 4], (0..32).map(|v| v as f32).collect()).unwrap();
        let mut kd = vec![0.0f32; 18];
        kd[4] = 1.0;
        kd[13] = 1.0;
        let k = Tensor::new(&[2, 3, 3], kd).unwrap();
        let y = x.depthwise_conv3x3(&k).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::new(&[2, 4, 4], vec![0.0; 32]).unwrap();
        let w = Tensor::new(&[1, 3, 3, 3], vec![0.0; 27]).unwrap();
        assert!(x.conv2d(&w, None, 1).is_err());
        let k = Tensor::new(&[1, 3, 3], vec![0.0; 9]).unwrap();
        assert!(x.depthwise_conv3x3(&k).is_err());
    }
}
