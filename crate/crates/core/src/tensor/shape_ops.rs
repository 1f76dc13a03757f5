//! Lossless rearrangements and spatial resampling.

use super::{accumulate, Op, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

impl Tensor {
    /// Space-to-channel by factor 2: `(C,H,W) -> (4C,H/2,W/2)`. The 2x2
    /// block offset `(r,c)` of input channel `k` lands on output channel
    /// `4k + 2r + c`.
    pub fn pixel_fold(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "pixel_fold needs even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut out = vec![0.0f32; c * h * w];
        for k in 0..c {
            for r in 0..2 {
                for cc in 0..2 {
                    let oc = 4 * k + 2 * r + cc;
                    for y in 0..ho {
                        let src = k * h * w + (2 * y + r) * w + cc;
                        let dst = oc * ho * wo + y * wo;
                        for xo in 0..wo {
                            out[dst + xo] = x[src + 2 * xo];
                        }
                    }
                }
            }
        }
        let shape = vec![4 * c, ho, wo];
        if self.requires_grad() {
            Ok(Tensor::from_op(shape, out, Op::PixelFold(self.clone())))
        } else {
            Tensor::new(&shape, out)
        }
    }

    /// Channel-to-space by factor 2: `(4C,h,w) -> (C,2h,2w)`; exact inverse
    /// of [`Tensor::pixel_fold`].
    pub fn pixel_shuffle(&self) -> Result<Tensor> {
        let (c4, h, w) = self.dims3()?;
        if c4 % 4 != 0 {
            return Err(Error::dim(format!(
                "pixel_shuffle needs channels divisible by 4, got {c4}"
            )));
        }
        let c = c4 / 4;
        let x = self.data();
        let mut out = vec![0.0f32; c4 * h * w];
        let (ho, wo) = (2 * h, 2 * w);
        for k in 0..c {
            for r in 0..2 {
                for cc in 0..2 {
                    let ic = 4 * k + 2 * r + cc;
                    for y in 0..h {
                        let src = ic * h * w + y * w;
                        let dst = k * ho * wo + (2 * y + r) * wo + cc;
                        for xo in 0..w {
                            out[dst + 2 * xo] = x[src + xo];
                        }
                    }
                }
            }
        }
        let shape = vec![c, ho, wo];
        if self.requires_grad() {
            Ok(Tensor::from_op(shape, out, Op::PixelShuffle(self.clone())))
        } else {
            Tensor::new(&shape, out)
        }
    }

    /// Nearest-neighbor resample to `(C, out_h, out_w)`.
    pub fn nearest_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("nearest_resize to zero size"));
        }
        let x = self.data();
        let mut out = vec![0.0f32; c * out_h * out_w];
        for ci in 0..c {
            for y in 0..out_h {
                let sy = y * h / out_h;
                let src = ci * h * w + sy * w;
                let dst = ci * out_h * out_w + y * out_w;
                for xo in 0..out_w {
                    out[dst + xo] = x[src + xo * w / out_w];
                }
            }
        }
        let shape = vec![c, out_h, out_w];
        if self.requires_grad() {
            Ok(Tensor::from_op(shape, out, Op::NearestResize(self.clone())))
        } else {
            Tensor::new(&shape, out)
        }
    }

    /// Global average pooling: `(C,H,W) -> (C)`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let x = self.data();
        let mut out = vec![0.0f32; c];
        for ci in 0..c {
            let mut acc = 0.0f64;
            for v in &x[ci * h * w..(ci + 1) * h * w] {
                acc += *v as f64;
            }
            out[ci] = (acc / (h * w) as f64) as f32;
        }
        if self.requires_grad() {
            Ok(Tensor::from_op(vec![c], out, Op::Gap(self.clone())))
        } else {
            Tensor::new(&[c], out)
        }
    }

    /// Concatenate along the leading dimension; trailing dims must agree.
    pub fn concat_dim0(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let tail = &parts[0].shape()[1..];
        let mut dim0 = 0;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::dim(format!(
                    "concat trailing dims differ: {:?} vs {:?}",
                    tail,
                    &p.shape()[1..]
                )));
            }
            dim0 += p.shape()[0];
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        if parts.iter().any(|p| p.requires_grad()) {
            Ok(Tensor::from_op(
                shape,
                data,
                Op::ConcatDim0(parts.iter().map(|p| (*p).clone()).collect()),
            ))
        } else {
            Tensor::new(&shape, data)
        }
    }

    /// Broadcast-add a per-channel vector `(C)` over `(C,H,W)`.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if bias.shape() != [c] {
            return Err(Error::dim(format!(
                "channel bias must be [{c}], got {:?}",
                bias.shape()
            )));
        }
        let x = self.data();
        let b = bias.data();
        let mut out = vec![0.0f32; x.len()];
        for ci in 0..c {
            let bv = b[ci];
            let src = &x[ci * h * w..(ci + 1) * h * w];
            let dst = &mut out[ci * h * w..(ci + 1) * h * w];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
        if self.requires_grad() || bias.requires_grad() {
            Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                Op::AddChannelBias {
                    x: self.clone(),
                    bias: bias.clone(),
                },
            ))
        } else {
            Tensor::new(self.shape(), out)
        }
    }
}

pub(super) fn pixel_fold_backward(
    x: &Tensor,
    grad_out: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (c, h, w) = x.dims3().expect("validated in forward");
    let (ho, wo) = (h / 2, w / 2);
    accumulate(grads, x, |g| {
        for k in 0..c {
            for r in 0..2 {
                for cc in 0..2 {
                    let oc = 4 * k + 2 * r + cc;
                    for y in 0..ho {
                        let dst = k * h * w + (2 * y + r) * w + cc;
                        let src = oc * ho * wo + y * wo;
                        for xo in 0..wo {
                            g[dst + 2 * xo] += grad_out[src + xo];
                        }
                    }
                }
            }
        }
    });
}

pub(super) fn pixel_shuffle_backward(
    x: &Tensor,
    grad_out: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (c4, h, w) = x.dims3().expect("validated in forward");
    let c = c4 / 4;
    let (ho, wo) = (2 * h, 2 * w);
    accumulate(grads, x, |g| {
        for k in 0..c {
            for r in 0..2 {
                for cc in 0..2 {
                    let ic = 4 * k + 2 * r + cc;
                    for y in 0..h {
                        let dst = ic * h * w + y * w;
                        let src = k * ho * wo + (2 * y + r) * wo + cc;
                        for xo in 0..w {
                            g[dst + xo] += grad_out[src + 2 * xo];
                        }
                    }
                }
            }
        }
    });
}

pub(super) fn nearest_resize_backward(
    x: &Tensor,
    out_shape: &[usize],
    grad_out: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (c, h, w) = x.dims3().expect("validated in forward");
    let (out_h, out_w) = (out_shape[1], out_shape[2]);
    accumulate(grads, x, |g| {
        for ci in 0..c {
            for y in 0..out_h {
                let sy = y * h / out_h;
                let dst = ci * h * w + sy * w;
                let src = ci * out_h * out_w + y * out_w;
                for xo in 0..out_w {
                    g[dst + xo * w / out_w] += grad_out[src + xo];
                }
            }
        }
    });
}

pub(super) fn gap_backward(x: &Tensor, grad_out: &[f32], grads: &mut HashMap<u64, Vec<f32>>) {
    let (c, h, w) = x.dims3().expect("validated in forward");
    let inv = 1.0 / (h * w) as f32;
    accumulate(grads, x, |g| {
        for ci in 0..c {
            let gv = grad_out[ci] * inv;
            for gg in &mut g[ci * h * w..(ci + 1) * h * w] {
                *gg += gv;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fold_orders_block_row_major() {
        // [[a,b],[c,d]] folds to channels [a,b,c,d].
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.pixel_fold().unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shuffle_inverts_fold_layout() {
        let y = Tensor::new(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = y.pixel_shuffle().unwrap();
        assert_eq!(x.shape(), &[1, 2, 2]);
        assert_eq!(x.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fold_rejects_odd_dims() {
        let x = Tensor::new(&[3, 7, 8], vec![0.0; 168]).unwrap();
        assert!(x.pixel_fold().is_err());
    }

    #[test]
    fn shuffle_rejects_non_multiple_of_four() {
        let x = Tensor::new(&[6, 4, 4], vec![0.0; 96]).unwrap();
        assert!(x.pixel_shuffle().is_err());
    }

    #[test]
    fn nearest_resize_doubles() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.nearest_resize(4, 4).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn gap_averages_channels() {
        let x = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]).unwrap();
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.data(), &[2.5, 10.0]);
    }

    proptest! {
        #[test]
        fn fold_shuffle_round_trip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let (h, w) = (2 * h, 2 * w);
            let mut rng = crate::rng::SeededRng::new(seed);
            let x = Tensor::randn(&[c, h, w], &mut rng);
            let rt = x.pixel_fold().unwrap().pixel_shuffle().unwrap();
            prop_assert_eq!(rt.data(), x.data());
            let y = Tensor::randn(&[4 * c, h, w], &mut rng);
            let rt2 = y.pixel_shuffle().unwrap().pixel_fold().unwrap();
            prop_assert_eq!(rt2.data(), y.data());
        }
    }
}
