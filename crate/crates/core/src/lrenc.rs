//! LR content encoder: a chain of residual-in-residual dense blocks with a
//! global residual producing the conditioning feature map `u`, plus a
//! sub-pixel upsampling head supervised by an L1 loss against the HR image.

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ParamMut, ParamRef};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const LEAKY_SLOPE: f32 = 0.2;

/// Structural configuration of the encoder.
#[derive(Debug, Clone)]
pub struct RrdbConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub dense_blocks_per_rrdb: usize,
    pub convs_per_dense_block: usize,
    pub growth_channels: usize,
    pub residual_scale: f32,
}

impl Default for RrdbConfig {
    fn default() -> Self {
        Self {
            num_blocks: 23,
            channels: 64,
            dense_blocks_per_rrdb: 3,
            convs_per_dense_block: 5,
            growth_channels: 32,
            residual_scale: 0.2,
        }
    }
}

impl RrdbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0
            || self.channels == 0
            || self.dense_blocks_per_rrdb == 0
            || self.convs_per_dense_block < 2
            || self.growth_channels == 0
        {
            return Err(Error::param("rrdb config fields must be positive"));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return Err(Error::param(format!(
                "residual_scale {} outside (0, 1]",
                self.residual_scale
            )));
        }
        Ok(())
    }
}

/// Densely connected conv stack; the last conv projects back to `channels`.
struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn new(cfg: &RrdbConfig, rng: &mut SeededRng) -> Self {
        let n = cfg.convs_per_dense_block;
        let mut convs = Vec::with_capacity(n);
        for i in 0..n {
            let in_ch = cfg.channels + i * cfg.growth_channels;
            let out_ch = if i + 1 == n {
                cfg.channels
            } else {
                cfg.growth_channels
            };
            convs.push(Conv2d::new(in_ch, out_ch, 3, 1, rng));
        }
        Self { convs }
    }

    fn forward(&self, x: &Tensor, scale: f32) -> Result<Tensor> {
        let mut feats: Vec<Tensor> = vec![x.clone()];
        for (i, conv) in self.convs.iter().enumerate() {
            let refs: Vec<&Tensor> = feats.iter().collect();
            let cat = Tensor::concat_dim0(&refs)?;
            let y = conv.forward(&cat)?;
            if i + 1 == self.convs.len() {
                return y.scale(scale).add(x);
            }
            feats.push(y.leaky_relu(LEAKY_SLOPE));
        }
        unreachable!("dense block has at least two convs")
    }

    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.params(&join(prefix, &format!("conv{i}"))))
            .collect()
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| c.params_mut(&join(prefix, &format!("conv{i}"))))
            .collect()
    }
}

struct Rrdb {
    dense: Vec<DenseBlock>,
}

impl Rrdb {
    fn new(cfg: &RrdbConfig, rng: &mut SeededRng) -> Self {
        Self {
            dense: (0..cfg.dense_blocks_per_rrdb)
                .map(|_| DenseBlock::new(cfg, rng))
                .collect(),
        }
    }

    fn forward(&self, x: &Tensor, scale: f32) -> Result<Tensor> {
        let mut f = x.clone();
        for d in &self.dense {
            f = d.forward(&f, scale)?;
        }
        f.scale(scale).add(x)
    }

    fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        self.dense
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.params(&join(prefix, &format!("dense{i}"))))
            .collect()
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        self.dense
            .iter_mut()
            .enumerate()
            .flat_map(|(i, d)| d.params_mut(&join(prefix, &format!("dense{i}"))))
            .collect()
    }
}

/// The content encoder: `u = first_conv(x) + body(first_conv(x))`, where the
/// body is the RRDB chain closed by a trunk convolution.
pub struct LrEncoder {
    pub cfg: RrdbConfig,
    first: Conv2d,
    blocks: Vec<Rrdb>,
    trunk: Conv2d,
}

impl LrEncoder {
    pub fn new(cfg: RrdbConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let first = Conv2d::new(3, cfg.channels, 3, 1, rng);
        let blocks = (0..cfg.num_blocks).map(|_| Rrdb::new(&cfg, rng)).collect();
        let trunk = Conv2d::new(cfg.channels, cfg.channels, 3, 1, rng);
        Ok(Self {
            cfg,
            first,
            blocks,
            trunk,
        })
    }

    /// Encodes an LR image tensor `(3,h,w)` into `u: (channels,h,w)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        if c != 3 {
            return Err(Error::dim(format!("encoder expects 3 channels, got {c}")));
        }
        if h < 8 || w < 8 {
            return Err(Error::dim(format!("LR input {h}x{w} smaller than 8x8")));
        }
        let fea = self.first.forward(x)?;
        let mut body = fea.clone();
        for b in &self.blocks {
            body = b.forward(&body, self.cfg.residual_scale)?;
        }
        let body = self.trunk.forward(&body)?;
        fea.add(&body)
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = self.first.params(&join(prefix, "first"));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.params(&join(prefix, &format!("rrdb{i}"))));
        }
        out.extend(self.trunk.params(&join(prefix, "trunk")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = self.first.params_mut(&join(prefix, "first"));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.params_mut(&join(prefix, &format!("rrdb{i}"))));
        }
        out.extend(self.trunk.params_mut(&join(prefix, "trunk")));
        out
    }
}

/// Sub-pixel upsampling head: per doubling stage a conv to `4*channels`
/// followed by pixel shuffle, closed by a 3-channel projection.
pub struct UpsampleHead {
    pub scale: usize,
    stages: Vec<Conv2d>,
    out_conv: Conv2d,
}

impl UpsampleHead {
    pub fn new(channels: usize, scale: usize, rng: &mut SeededRng) -> Result<Self> {
        if scale == 0 || !scale.is_power_of_two() {
            return Err(Error::param(format!(
                "sub-pixel upsampling needs a power-of-two scale, got {scale}"
            )));
        }
        let n_stages = scale.trailing_zeros() as usize;
        let stages = (0..n_stages)
            .map(|_| Conv2d::new(channels, 4 * channels, 3, 1, rng))
            .collect();
        let out_conv = Conv2d::new(channels, 3, 3, 1, rng);
        Ok(Self {
            scale,
            stages,
            out_conv,
        })
    }

    /// Maps `u: (channels,h,w)` to an image tensor `(3, scale*h, scale*w)`.
    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        let mut f = u.clone();
        for s in &self.stages {
            f = s.forward(&f)?.pixel_shuffle()?.leaky_relu(LEAKY_SLOPE);
        }
        self.out_conv.forward(&f)
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.extend(s.params(&join(prefix, &format!("stage{i}"))));
        }
        out.extend(self.out_conv.params(&join(prefix, "out")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.extend(s.params_mut(&join(prefix, &format!("stage{i}"))));
        }
        out.extend(self.out_conv.params_mut(&join(prefix, "out")));
        out
    }
}

/// Encoder plus its supervision head.
pub struct LrEncoderWithHead {
    pub encoder: LrEncoder,
    pub head: UpsampleHead,
}

impl LrEncoderWithHead {
    pub fn new(cfg: RrdbConfig, scale: usize, rng: &mut SeededRng) -> Result<Self> {
        let channels = cfg.channels;
        Ok(Self {
            encoder: LrEncoder::new(cfg, rng)?,
            head: UpsampleHead::new(channels, scale, rng)?,
        })
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = self.encoder.params(&join(prefix, "encoder"));
        out.extend(self.head.params(&join(prefix, "head")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = self.encoder.params_mut(&join(prefix, "encoder"));
        out.extend(self.head.params_mut(&join(prefix, "head")));
        out
    }
}

/// Mean absolute difference between the upsampled result and the HR target.
pub fn encoder_loss(up: &Tensor, x_hr: &Tensor) -> Result<Tensor> {
    if up.shape() != x_hr.shape() {
        return Err(Error::dim(format!(
            "encoder loss shape mismatch: {:?} vs {:?}",
            up.shape(),
            x_hr.shape()
        )));
    }
    up.l1_distance(x_hr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small_cfg() -> RrdbConfig {
        RrdbConfig {
            num_blocks: 1,
            channels: 16,
            growth_channels: 8,
            ..RrdbConfig::default()
        }
    }

    #[test]
    fn encode_shape_matches_channel_config() {
        let mut rng = SeededRng::new(0);
        let enc = LrEncoder::new(
            RrdbConfig {
                num_blocks: 1,
                channels: 64,
                growth_channels: 32,
                ..RrdbConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::randn(&[3, 16, 16], &mut rng);
        let u = enc.encode(&x).unwrap();
        assert_eq!(u.shape(), &[64, 16, 16]);
    }

    #[test]
    fn undersized_input_rejected() {
        let mut rng = SeededRng::new(0);
        let enc = LrEncoder::new(small_cfg(), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 4, 8], &mut rng);
        assert!(enc.encode(&x).is_err());
    }

    #[test]
    fn zeroed_body_reduces_to_first_conv() {
        let mut rng = SeededRng::new(1);
        let mut enc = LrEncoder::new(small_cfg(), &mut rng).unwrap();
        for p in enc.params_mut("") {
            if !p.name.starts_with("first") {
                *p.tensor = Tensor::param(p.tensor.shape(), vec![0.0; p.tensor.len()]).unwrap();
            }
        }
        let x = Tensor::randn(&[3, 8, 8], &mut rng);
        let u = enc.encode(&x).unwrap();
        let fea = enc.first.forward(&x).unwrap();
        assert_eq!(u.data(), fea.data());
    }

    #[test]
    fn encode_is_deterministic() {
        let mut rng = SeededRng::new(2);
        let enc = LrEncoder::new(small_cfg(), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 8, 8], &mut rng);
        assert_eq!(enc.encode(&x).unwrap().data(), enc.encode(&x).unwrap().data());
    }

    #[test]
    fn upsample_head_scales_by_four() {
        let mut rng = SeededRng::new(3);
        let head = UpsampleHead::new(16, 4, &mut rng).unwrap();
        let u = Tensor::randn(&[16, 16, 16], &mut rng);
        let up = head.forward(&u).unwrap();
        assert_eq!(up.shape(), &[3, 64, 64]);
        assert!(UpsampleHead::new(16, 3, &mut rng).is_err());
    }

    #[test]
    fn upsample_head_grad_check() {
        let mut rng = SeededRng::new(4);
        let head = UpsampleHead::new(8, 2, &mut rng).unwrap();
        let weights = Tensor::new(
            &[3, 8, 8],
            (0..192)
                .map(|_| {
                    let v = rng.uniform(0.5, 1.5);
                    if rng.uniform(0.0, 1.0) < 0.5 {
                        -v
                    } else {
                        v
                    }
                })
                .collect(),
        )
        .unwrap();
        let u = Tensor::new(&[8, 4, 4], (0..128).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let err = grad_check(|u| Ok(head.forward(u)?.mul(&weights)?.sum()), &u, 1e-2).unwrap();
        assert!(err < 1e-2, "upsample head grad error {err}");
    }

    #[test]
    fn encoder_loss_closed_forms() {
        let mut rng = SeededRng::new(5);
        let a = Tensor::randn(&[3, 6, 6], &mut rng);
        assert_eq!(encoder_loss(&a, &a).unwrap().item().unwrap(), 0.0);
        let b = a.add_scalar(-0.25);
        let v = encoder_loss(&b, &a).unwrap().item().unwrap();
        assert!((v - 0.25).abs() < 1e-6);
        let c = Tensor::randn(&[3, 6, 6], &mut rng);
        let expect: f64 = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / a.len() as f64;
        let got = encoder_loss(&a, &c).unwrap().item().unwrap();
        assert!((got as f64 - expect).abs() < 1e-6);
        let d = Tensor::randn(&[3, 5, 6], &mut rng);
        assert!(encoder_loss(&a, &d).is_err());
    }

    #[test]
    fn encoder_loss_is_one_lipschitz() {
        let mut rng = SeededRng::new(6);
        let target = Tensor::randn(&[3, 4, 4], &mut rng);
        let a = Tensor::randn(&[3, 4, 4], &mut rng);
        let b = Tensor::randn(&[3, 4, 4], &mut rng);
        let la = encoder_loss(&a, &target).unwrap().item().unwrap();
        let lb = encoder_loss(&b, &target).unwrap().item().unwrap();
        let dist = a.l1_distance(&b).unwrap().item().unwrap();
        assert!((la - lb).abs() <= dist + 1e-6);
    }

    #[test]
    fn translation_consistent_in_the_interior() {
        // Encoding a crop equals the crop of the encoding away from the
        // receptive-field boundary margin.
        let mut rng = SeededRng::new(7);
        let enc = LrEncoder::new(small_cfg(), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 64, 64], &mut rng);
        let full = enc.encode(&x).unwrap();
        // Crop offset by (8, 8), size 48x48.
        let mut crop = vec![0.0f32; 3 * 48 * 48];
        for c in 0..3 {
            for y in 0..48 {
                for xx in 0..48 {
                    crop[c * 2304 + y * 48 + xx] = x.data()[c * 4096 + (y + 8) * 64 + (xx + 8)];
                }
            }
        }
        let crop = Tensor::new(&[3, 48, 48], crop).unwrap();
        let enc_crop = enc.encode(&crop).unwrap();
        // Receptive field of 1 RRDB (15 convs) + first + trunk is 17 convs
        // of 3x3: half-width 17. Compare the interior beyond that margin.
        let margin = 18usize;
        let ch = enc.cfg.channels;
        let mut max_diff = 0.0f32;
        for c in 0..ch {
            for y in margin..48 - margin {
                for xx in margin..48 - margin {
                    let a = enc_crop.data()[c * 2304 + y * 48 + xx];
                    let b = full.data()[c * 4096 + (y + 8) * 64 + (xx + 8)];
                    max_diff = max_diff.max((a - b).abs());
                }
            }
        }
        assert!(max_diff < 1e-4, "interior mismatch {max_diff}");
    }
}
