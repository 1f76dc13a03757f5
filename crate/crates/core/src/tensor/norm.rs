//! Normalization primitives: group normalization (training statistics) and
//! the frozen per-channel affine used by batch norm in inference mode.

use super::{accumulate, Op, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

impl Tensor {
    /// Group normalization over `(C,H,W)` with per-channel affine.
    /// `groups == C` gives per-channel normalization (batch-norm statistics
    /// at batch granularity one).
    pub fn group_norm(&self, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f32) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::param(format!(
                "groups {groups} must divide channel count {c}"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(format!(
                "affine params must be [{c}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let group_ch = c / groups;
        let n = group_ch * h * w;
        let x = self.data();
        let mut mean = vec![0.0f32; groups];
        let mut rstd = vec![0.0f32; groups];
        let mut out = vec![0.0f32; x.len()];
        for g in 0..groups {
            let span = &x[g * n..(g + 1) * n];
            let mut acc = 0.0f64;
            for &v in span {
                acc += v as f64;
            }
            let mu = acc / n as f64;
            let mut var = 0.0f64;
            for &v in span {
                let d = v as f64 - mu;
                var += d * d;
            }
            var /= n as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            mean[g] = mu as f32;
            rstd[g] = rs as f32;
            for ci in 0..group_ch {
                let ch = g * group_ch + ci;
                let ga = gamma.data()[ch];
                let be = beta.data()[ch];
                let src = &x[ch * h * w..(ch + 1) * h * w];
                let dst = &mut out[ch * h * w..(ch + 1) * h * w];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = ((v as f64 - mu) * rs) as f32 * ga + be;
                }
            }
        }
        if self.requires_grad() || gamma.requires_grad() || beta.requires_grad() {
            Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                Op::GroupNorm {
                    x: self.clone(),
                    gamma: gamma.clone(),
                    beta: beta.clone(),
                    groups,
                    mean,
                    rstd,
                },
            ))
        } else {
            Tensor::new(self.shape(), out)
        }
    }

    /// Per-channel `y = (x - shift) * scale * gamma + beta` with constant
    /// `shift`/`scale` (batch-norm inference with frozen running statistics).
    pub fn channel_affine(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        shift: &[f32],
        scale: &[f32],
    ) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if gamma.shape() != [c] || beta.shape() != [c] || shift.len() != c || scale.len() != c {
            return Err(Error::dim(format!("channel_affine expects {c} channels")));
        }
        let x = self.data();
        let mut out = vec![0.0f32; x.len()];
        for ch in 0..c {
            let (m, s) = (shift[ch], scale[ch]);
            let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
            let src = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - m) * s * ga + be;
            }
        }
        if self.requires_grad() || gamma.requires_grad() || beta.requires_grad() {
            Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                Op::ChannelAffine {
                    x: self.clone(),
                    gamma: gamma.clone(),
                    beta: beta.clone(),
                    shift: shift.to_vec(),
                    scale: scale.to_vec(),
                },
            ))
        } else {
            Tensor::new(self.shape(), out)
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    mean: &[f32],
    rstd: &[f32],
    grad_out: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (c, h, w) = x.dims3().expect("validated in forward");
    let group_ch = c / groups;
    let n = group_ch * h * w;
    let plane = h * w;
    let xd = x.data();

    if gamma.requires_grad() {
        accumulate(grads, gamma, |g| {
            for ch in 0..c {
                let grp = ch / group_ch;
                let (mu, rs) = (mean[grp], rstd[grp]);
                let mut acc = 0.0f64;
                for i in 0..plane {
                    let idx = ch * plane + i;
                    let xhat = (xd[idx] - mu) * rs;
                    acc += grad_out[idx] as f64 * xhat as f64;
                }
                g[ch] += acc as f32;
            }
        });
    }
    if beta.requires_grad() {
        accumulate(grads, beta, |g| {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for i in 0..plane {
                    acc += grad_out[ch * plane + i] as f64;
                }
                g[ch] += acc as f32;
            }
        });
    }
    if x.requires_grad() {
        let gd = gamma.data();
        let mut gx = vec![0.0f32; xd.len()];
        for grp in 0..groups {
            let (mu, rs) = (mean[grp] as f64, rstd[grp] as f64);
            // Two passes: group statistics of the incoming gradient, then the
            // normalized-input correction.
            let mut sum_gh = 0.0f64;
            let mut sum_gh_xhat = 0.0f64;
            for ci in 0..group_ch {
                let ch = grp * group_ch + ci;
                let ga = gd[ch] as f64;
                for i in 0..plane {
                    let idx = ch * plane + i;
                    let gh = grad_out[idx] as f64 * ga;
                    let xhat = (xd[idx] as f64 - mu) * rs;
                    sum_gh += gh;
                    sum_gh_xhat += gh * xhat;
                }
            }
            let m_gh = sum_gh / n as f64;
            let m_gh_xhat = sum_gh_xhat / n as f64;
            for ci in 0..group_ch {
                let ch = grp * group_ch + ci;
                let ga = gd[ch] as f64;
                for i in 0..plane {
                    let idx = ch * plane + i;
                    let gh = grad_out[idx] as f64 * ga;
                    let xhat = (xd[idx] as f64 - mu) * rs;
                    gx[idx] = (rs * (gh - m_gh - xhat * m_gh_xhat)) as f32;
                }
            }
        }
        accumulate(grads, x, |g| super::add_assign(g, &gx));
    }
}

pub(super) fn channel_affine_backward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    shift: &[f32],
    scale: &[f32],
    grad_out: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (c, h, w) = x.dims3().expect("validated in forward");
    let plane = h * w;
    if x.requires_grad() {
        let gd = gamma.data();
        accumulate(grads, x, |g| {
            for ch in 0..c {
                let f = scale[ch] * gd[ch];
                for i in 0..plane {
                    let idx = ch * plane + i;
                    g[idx] += grad_out[idx] * f;
                }
            }
        });
    }
    if gamma.requires_grad() {
        let xd = x.data();
        accumulate(grads, gamma, |g| {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for i in 0..plane {
                    let idx = ch * plane + i;
                    acc += grad_out[idx] as f64 * ((xd[idx] - shift[ch]) * scale[ch]) as f64;
                }
                g[ch] += acc as f32;
            }
        });
    }
    if beta.requires_grad() {
        accumulate(grads, beta, |g| {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for i in 0..plane {
                    acc += grad_out[ch * plane + i] as f64;
                }
                g[ch] += acc as f32;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_norm_zero_mean_unit_var() {
        let x = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]).unwrap();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let y = x.group_norm(&gamma, &beta, 2, 1e-5).unwrap();
        for ch in 0..2 {
            let span = &y.data()[ch * 4..(ch + 1) * 4];
            let mean: f32 = span.iter().sum::<f32>() / 4.0;
            let var: f32 = span.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let x = Tensor::new(&[3, 2, 2], vec![0.0; 12]).unwrap();
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        assert!(x.group_norm(&gamma, &beta, 2, 1e-5).is_err());
    }

    #[test]
    fn channel_affine_applies_frozen_stats() {
        let x = Tensor::new(&[1, 1, 2], vec![3.0, 5.0]).unwrap();
        let gamma = Tensor::full(&[1], 2.0);
        let beta = Tensor::full(&[1], 1.0);
        let y = x.channel_affine(&gamma, &beta, &[3.0], &[0.5]).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
    }
}
