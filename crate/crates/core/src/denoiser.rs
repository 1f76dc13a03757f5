//! Conditional denoising U-Net over pixel-folded latents.
//!
//! The network consumes a noisy latent `x_t`, the diffusion step `t`, the LR
//! feature map `u` and the degradation vector `v`, and predicts the clean
//! image directly. Residual blocks carry the time embedding by addition and
//! the degradation vector through a kernel-predicting depthwise convolution.

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, GroupNorm, Linear, ParamMut, ParamRef};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::sync::atomic::{AtomicUsize, Ordering};

pub const V_DIM: usize = 256;

/// Structural configuration of the denoiser.
#[derive(Debug, Clone)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Per-level channel multipliers; the length sets the number of
    /// compression groups.
    pub channel_mults: Vec<usize>,
    pub blocks_per_group: usize,
    pub groupnorm_groups: usize,
    /// Channels of the conditioning feature map `u`.
    pub cond_channels: usize,
    /// When off, residual blocks use an ordinary learned conv instead of
    /// the kernel-predicting one and ignore `v`.
    pub degradation_aware: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            channel_mults: vec![1, 2, 2, 4],
            blocks_per_group: 2,
            groupnorm_groups: 8,
            cond_channels: 64,
            degradation_aware: true,
        }
    }
}

impl UNetConfig {
    pub fn depth(&self) -> usize {
        self.channel_mults.len()
    }

    /// Input spatial dims must divide by this (one fold plus `depth`
    /// downsamplings).
    pub fn spatial_divisor(&self) -> usize {
        2usize << self.depth()
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.channel_mults.iter().any(|&m| m == 0) {
            return Err(Error::param("channel multipliers must be positive"));
        }
        if self.blocks_per_group == 0 {
            return Err(Error::param("blocks_per_group must be positive"));
        }
        let g = self.groupnorm_groups;
        if g == 0 || self.base_channels % g != 0 || self.cond_channels % g != 0 {
            return Err(Error::param(format!(
                "base ({}) and conditioning ({}) channels must divide by groupnorm groups ({g})",
                self.base_channels, self.cond_channels
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features of the diffusion step mapped through a three-layer
/// perceptron with a smooth-gated hidden nonlinearity.
pub struct TimeEmbedding {
    pub freq_count: usize,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl TimeEmbedding {
    pub fn new(freq_count: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            freq_count,
            fc1: Linear::new(2 * freq_count, out_dim, rng),
            fc2: Linear::new(out_dim, out_dim, rng),
            fc3: Linear::new(out_dim, out_dim, rng),
        }
    }

    /// Raw interleaved sin/cos features with geometric frequencies
    /// `w_k = 10000^(-(k-1)/K)`.
    pub fn phi(&self, t: usize) -> Tensor {
        let k = self.freq_count;
        let mut data = Vec::with_capacity(2 * k);
        for i in 0..k {
            let omega = 10000f64.powf(-(i as f64) / k as f64);
            let arg = omega * t as f64;
            data.push(arg.sin() as f32);
            data.push(arg.cos() as f32);
        }
        Tensor::new(&[2 * k], data).expect("consistent")
    }

    pub fn forward(&self, t: usize) -> Result<Tensor> {
        self.forward_features(&self.phi(t))
    }

    /// The perceptron alone, for checking gradients against its input.
    pub fn forward_features(&self, phi: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(phi)?.silu();
        let h = self.fc2.forward(&h)?.silu();
        self.fc3.forward(&h)
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = self.fc1.params(&join(prefix, "fc1"));
        out.extend(self.fc2.params(&join(prefix, "fc2")));
        out.extend(self.fc3.params(&join(prefix, "fc3")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = self.fc1.params_mut(&join(prefix, "fc1"));
        out.extend(self.fc2.params_mut(&join(prefix, "fc2")));
        out.extend(self.fc3.params_mut(&join(prefix, "fc3")));
        out
    }
}

/// Degradation-aware convolution: a three-layer perceptron maps `v` to
/// per-channel 3x3 depthwise kernels, followed by a learned 1x1 mix.
pub struct DaConv {
    channels: usize,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    mix: Conv2d,
}

const DACONV_HIDDEN: usize = 128;

impl DaConv {
    pub fn new(channels: usize, out_channels: usize, rng: &mut SeededRng) -> Self {
        let fc1 = Linear::new(V_DIM, DACONV_HIDDEN, rng);
        let fc2 = Linear::new(DACONV_HIDDEN, DACONV_HIDDEN, rng);
        let mut fc3 = Linear::new(DACONV_HIDDEN, 9 * channels, rng);
        // Bias the predicted kernels toward the identity so the depthwise
        // stage starts as a near-delta filter.
        let mut bias = vec![0.0f32; 9 * channels];
        for c in 0..channels {
            bias[c * 9 + 4] = 1.0;
        }
        fc3.bias = Tensor::param(&[9 * channels], bias).expect("consistent");
        let mix = Conv2d::new(channels, out_channels, 1, 1, rng);
        Self {
            channels,
            fc1,
            fc2,
            fc3,
            mix,
        }
    }

    /// Kernels predicted from `v`, shaped `(C, 3, 3)`.
    pub fn predict_kernels(&self, v: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(v)?.silu();
        let h = self.fc2.forward(&h)?.silu();
        self.fc3.forward(&h)?.reshape(&[self.channels, 3, 3])
    }

    pub fn forward(&self, f: &Tensor, v: &Tensor) -> Result<Tensor> {
        let kernels = self.predict_kernels(v)?;
        self.forward_with_kernels(f, &kernels)
    }

    /// Applies externally chosen depthwise kernels (test hook) followed by
    /// the learned 1x1 mix.
    pub fn forward_with_kernels(&self, f: &Tensor, kernels: &Tensor) -> Result<Tensor> {
        let depthwise = f.depthwise_conv3x3(kernels)?;
        self.mix.forward(&depthwise)
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = self.fc1.params(&join(prefix, "fc1"));
        out.extend(self.fc2.params(&join(prefix, "fc2")));
        out.extend(self.fc3.params(&join(prefix, "fc3")));
        out.extend(self.mix.params(&join(prefix, "mix")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = self.fc1.params_mut(&join(prefix, "fc1"));
        out.extend(self.fc2.params_mut(&join(prefix, "fc2")));
        out.extend(self.fc3.params_mut(&join(prefix, "fc3")));
        out.extend(self.mix.params_mut(&join(prefix, "mix")));
        out
    }
}

enum SecondConv {
    Aware(DaConv),
    Plain(Conv2d),
}

/// Residual block: conv on normalized features, time embedding added
/// per channel, then the degradation-aware stage, closed by the skip.
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    norm2: GroupNorm,
    second: SecondConv,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        time_dim: usize,
        gn_groups: usize,
        aware: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let second = if aware {
            SecondConv::Aware(DaConv::new(out_ch, out_ch, rng))
        } else {
            SecondConv::Plain(Conv2d::new(out_ch, out_ch, 3, 1, rng))
        };
        Self {
            norm1: GroupNorm::new(in_ch, gn_groups),
            conv1: Conv2d::new(in_ch, out_ch, 3, 1, rng),
            temb_proj: Linear::new(time_dim, out_ch, rng),
            norm2: GroupNorm::new(out_ch, gn_groups),
            second,
            shortcut: if in_ch == out_ch {
                None
            } else {
                Some(Conv2d::new(in_ch, out_ch, 1, 1, rng))
            },
        }
    }

    pub fn forward(&self, f_in: &Tensor, t_e: &Tensor, v: Option<&Tensor>) -> Result<Tensor> {
        let f1 = self.conv1.forward(&self.norm1.forward(f_in)?.silu())?;
        let f2 = f1.add_channel_bias(&self.temb_proj.forward(t_e)?)?;
        let h = self.norm2.forward(&f2)?.silu();
        let h = match (&self.second, v) {
            (SecondConv::Aware(da), Some(v)) => da.forward(&h, v)?,
            (SecondConv::Aware(_), None) => {
                return Err(Error::State(
                    "degradation-aware block called without v".into(),
                ))
            }
            (SecondConv::Plain(conv), _) => conv.forward(&h)?,
        };
        match &self.shortcut {
            Some(sc) => h.add(&sc.forward(f_in)?),
            None => h.add(f_in),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = self.norm1.params(&join(prefix, "norm1"));
        out.extend(self.conv1.params(&join(prefix, "conv1")));
        out.extend(self.temb_proj.params(&join(prefix, "temb")));
        out.extend(self.norm2.params(&join(prefix, "norm2")));
        match &self.second {
            SecondConv::Aware(da) => out.extend(da.params(&join(prefix, "daconv"))),
            SecondConv::Plain(c) => out.extend(c.params(&join(prefix, "conv2"))),
        }
        if let Some(sc) = &self.shortcut {
            out.extend(sc.params(&join(prefix, "shortcut")));
        }
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = self.norm1.params_mut(&join(prefix, "norm1"));
        out.extend(self.conv1.params_mut(&join(prefix, "conv1")));
        out.extend(self.temb_proj.params_mut(&join(prefix, "temb")));
        out.extend(self.norm2.params_mut(&join(prefix, "norm2")));
        match &mut self.second {
            SecondConv::Aware(da) => out.extend(da.params_mut(&join(prefix, "daconv"))),
            SecondConv::Plain(c) => out.extend(c.params_mut(&join(prefix, "conv2"))),
        }
        if let Some(sc) = &mut self.shortcut {
            out.extend(sc.params_mut(&join(prefix, "shortcut")));
        }
        out
    }
}

struct DownGroup {
    blocks: Vec<ResBlock>,
    downsample: Conv2d,
}

struct UpGroup {
    upsample: Conv2d,
    blocks: Vec<ResBlock>,
}

/// The conditional denoiser `h`: predicts the clean image from
/// `(x_t, t, u, v)`.
pub struct Denoiser {
    pub cfg: UNetConfig,
    time: TimeEmbedding,
    stem: Conv2d,
    down: Vec<DownGroup>,
    mid: Vec<ResBlock>,
    up: Vec<UpGroup>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    invocations: AtomicUsize,
}

impl Denoiser {
    pub fn new(cfg: UNetConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let time_dim = cfg.time_dim();
        let gn = cfg.groupnorm_groups;
        let aware = cfg.degradation_aware;
        let ch: Vec<usize> = cfg.channel_mults.iter().map(|m| c * m).collect();

        let time = TimeEmbedding::new(c, time_dim, rng);
        let stem = Conv2d::new(12, c, 3, 1, rng);

        let mut down = Vec::new();
        let mut in_ch = c + cfg.cond_channels;
        for &out_ch in &ch {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_group {
                let i = if b == 0 { in_ch } else { out_ch };
                blocks.push(ResBlock::new(i, out_ch, time_dim, gn, aware, rng));
            }
            down.push(DownGroup {
                blocks,
                downsample: Conv2d::new(out_ch, out_ch, 3, 2, rng),
            });
            in_ch = out_ch;
        }

        let last = *ch.last().expect("validated non-empty");
        let mid = vec![
            ResBlock::new(last, last, time_dim, gn, aware, rng),
            ResBlock::new(last, last, time_dim, gn, aware, rng),
        ];

        let mut up = Vec::new();
        let mut prev = last;
        for &out_ch in ch.iter().rev() {
            let upsample = Conv2d::new(prev, out_ch, 3, 1, rng);
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_group {
                let i = if b == 0 { 2 * out_ch } else { out_ch };
                blocks.push(ResBlock::new(i, out_ch, time_dim, gn, aware, rng));
            }
            up.push(UpGroup { upsample, blocks });
            prev = out_ch;
        }

        let out_norm = GroupNorm::new(ch[0], gn);
        let out_conv = Conv2d::new(ch[0], 12, 3, 1, rng);
        Ok(Self {
            cfg,
            time,
            stem,
            down,
            mid,
            up,
            out_norm,
            out_conv,
            invocations: AtomicUsize::new(0),
        })
    }

    /// Number of forward passes performed since construction.
    pub fn invocation_count(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    /// Predicts the clean image for latent `x_t` at step `t`, conditioned on
    /// the LR encoding `u` and degradation vector `v`.
    pub fn forward(&self, x_t: &Tensor, t: usize, u: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let (c, h, w) = x_t.dims3()?;
        if c != 3 {
            return Err(Error::dim(format!("latent must be 3-channel, got {c}")));
        }
        let div = self.cfg.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::dim(format!(
                "spatial dims {h}x{w} must divide by {div}"
            )));
        }
        let (uc, _, _) = u.dims3()?;
        if uc != self.cfg.cond_channels {
            return Err(Error::dim(format!(
                "conditioning map has {uc} channels, expected {}",
                self.cfg.cond_channels
            )));
        }
        let v_opt = if self.cfg.degradation_aware {
            if v.shape() != [V_DIM] {
                return Err(Error::dim(format!(
                    "degradation vector must be [{V_DIM}], got {:?}",
                    v.shape()
                )));
            }
            Some(v)
        } else {
            None
        };

        let t_e = self.time.forward(t)?;
        let folded = x_t.pixel_fold()?;
        let stem = self.stem.forward(&folded)?;
        let u_resized = u.nearest_resize(h / 2, w / 2)?;
        let mut f = Tensor::concat_dim0(&[&stem, &u_resized])?;

        let mut skips = Vec::with_capacity(self.down.len());
        for group in &self.down {
            for block in &group.blocks {
                f = block.forward(&f, &t_e, v_opt)?;
            }
            skips.push(f.clone());
            f = group.downsample.forward(&f)?;
        }
        for block in &self.mid {
            f = block.forward(&f, &t_e, v_opt)?;
        }
        for group in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let (_, sh, sw) = skip.dims3()?;
            f = group.upsample.forward(&f.nearest_resize(sh, sw)?)?;
            f = Tensor::concat_dim0(&[&f, &skip])?;
            for block in &group.blocks {
                f = block.forward(&f, &t_e, v_opt)?;
            }
        }
        let out = self.out_conv.forward(&self.out_norm.forward(&f)?.silu())?;
        out.pixel_shuffle()
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = self.time.params(&join(prefix, "time"));
        out.extend(self.stem.params(&join(prefix, "stem")));
        for (i, g) in self.down.iter().enumerate() {
            for (b, blk) in g.blocks.iter().enumerate() {
                out.extend(blk.params(&join(prefix, &format!("down{i}.block{b}"))));
            }
            out.extend(g.downsample.params(&join(prefix, &format!("down{i}.downsample"))));
        }
        for (b, blk) in self.mid.iter().enumerate() {
            out.extend(blk.params(&join(prefix, &format!("mid.block{b}"))));
        }
        for (i, g) in self.up.iter().enumerate() {
            out.extend(g.upsample.params(&join(prefix, &format!("up{i}.upsample"))));
            for (b, blk) in g.blocks.iter().enumerate() {
                out.extend(blk.params(&join(prefix, &format!("up{i}.block{b}"))));
            }
        }
        out.extend(self.out_norm.params(&join(prefix, "out_norm")));
        out.extend(self.out_conv.params(&join(prefix, "out_conv")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = self.time.params_mut(&join(prefix, "time"));
        out.extend(self.stem.params_mut(&join(prefix, "stem")));
        for (i, g) in self.down.iter_mut().enumerate() {
            for (b, blk) in g.blocks.iter_mut().enumerate() {
                out.extend(blk.params_mut(&join(prefix, &format!("down{i}.block{b}"))));
            }
            out.extend(
                g.downsample
                    .params_mut(&join(prefix, &format!("down{i}.downsample"))),
            );
        }
        for (b, blk) in self.mid.iter_mut().enumerate() {
            out.extend(blk.params_mut(&join(prefix, &format!("mid.block{b}"))));
        }
        for (i, g) in self.up.iter_mut().enumerate() {
            out.extend(g.upsample.params_mut(&join(prefix, &format!("up{i}.upsample"))));
            for (b, blk) in g.blocks.iter_mut().enumerate() {
                out.extend(blk.params_mut(&join(prefix, &format!("up{i}.block{b}"))));
            }
        }
        out.extend(self.out_norm.params_mut(&join(prefix, "out_norm")));
        out.extend(self.out_conv.params_mut(&join(prefix, "out_conv")));
        out
    }
}
