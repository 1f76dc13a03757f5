//! Unsupervised degradation representation: a small convolutional encoder
//! pooled to a 256-vector, a projection head for the contrastive space, and
//! an InfoNCE-style loss against a FIFO queue of past projections.

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Linear, ParamMut, ParamRef};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use std::collections::VecDeque;

pub const REPR_DIM: usize = 256;
const LEAKY_SLOPE: f32 = 0.1;

/// Six 3x3 convolutions (64,64,128,128,256,256; layers 3 and 5 stride 2),
/// each followed by batch norm and LeakyReLU, pooled globally to `v`.
pub struct DegradationEncoder {
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
}

impl DegradationEncoder {
    pub fn new(rng: &mut SeededRng) -> Self {
        let plan: [(usize, usize, usize); 6] = [
            (3, 64, 1),
            (64, 64, 1),
            (64, 128, 2),
            (128, 128, 1),
            (128, 256, 2),
            (256, 256, 1),
        ];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (ic, oc, stride) in plan {
            convs.push(Conv2d::new(ic, oc, 3, stride, rng));
            norms.push(BatchNorm2d::new(oc));
        }
        Self { convs, norms }
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let (c, h, w) = x.dims3()?;
        if c != 3 {
            return Err(Error::dim(format!("encoder expects 3 channels, got {c}")));
        }
        if h < 4 || w < 4 {
            return Err(Error::dim(format!("patch {h}x{w} smaller than 4x4")));
        }
        Ok(())
    }

    /// Training-mode encoding (updates running statistics).
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let mut f = x.clone();
        for (conv, norm) in self.convs.iter().zip(self.norms.iter_mut()) {
            f = norm.forward_train(&conv.forward(&f)?)?.leaky_relu(LEAKY_SLOPE);
        }
        f.global_avg_pool()
    }

    /// Inference-mode encoding (frozen statistics, deterministic).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let mut f = x.clone();
        for (conv, norm) in self.convs.iter().zip(self.norms.iter()) {
            f = norm.forward_eval(&conv.forward(&f)?)?.leaky_relu(LEAKY_SLOPE);
        }
        f.global_avg_pool()
    }

    /// Feature map right before pooling (inference mode).
    pub fn feature_map(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let mut f = x.clone();
        for (conv, norm) in self.convs.iter().zip(self.norms.iter()) {
            f = norm.forward_eval(&conv.forward(&f)?)?.leaky_relu(LEAKY_SLOPE);
        }
        Ok(f)
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.extend(c.params(&join(prefix, &format!("conv{i}"))));
            out.extend(n.params(&join(prefix, &format!("norm{i}"))));
        }
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, (c, n)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            out.extend(c.params_mut(&join(prefix, &format!("conv{i}"))));
            out.extend(n.params_mut(&join(prefix, &format!("norm{i}"))));
        }
        out
    }
}

/// Three affine layers with LeakyReLU between, mapping `v` to the
/// contrastive space.
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl ProjectionHead {
    pub fn new(proj_dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            fc1: Linear::new(REPR_DIM, REPR_DIM, rng),
            fc2: Linear::new(REPR_DIM, REPR_DIM, rng),
            fc3: Linear::new(REPR_DIM, proj_dim, rng),
        }
    }

    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(v)?.leaky_relu(LEAKY_SLOPE);
        let h = self.fc2.forward(&h)?.leaky_relu(LEAKY_SLOPE);
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

/// Encoder plus projection head; `v` conditions the denoiser, `w` feeds the
/// contrastive loss.
pub struct DegradationModel {
    pub encoder: DegradationEncoder,
    pub head: ProjectionHead,
}

impl DegradationModel {
    pub fn new(proj_dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            encoder: DegradationEncoder::new(rng),
            head: ProjectionHead::new(proj_dim, rng),
        }
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

/// FIFO store of detached projections serving as contrastive negatives.
pub struct NegativeQueue {
    pub capacity: usize,
    pub temperature: f32,
    entries: VecDeque<Vec<f32>>,
    dim: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, temperature: f32, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("queue capacity must be positive"));
        }
        if temperature <= 0.0 {
            return Err(Error::param(format!(
                "temperature {temperature} must be positive"
            )));
        }
        Ok(Self {
            capacity,
            temperature,
            entries: VecDeque::new(),
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends detached copies; evicts the oldest entries past capacity.
    pub fn push(&mut self, batch: &[&Tensor]) -> Result<()> {
        for w in batch {
            if w.shape() != [self.dim] {
                return Err(Error::dim(format!(
                    "queue holds [{}] vectors, got {:?}",
                    self.dim,
                    w.shape()
                )));
            }
            self.entries.push_back(w.to_vec());
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// Snapshot of the queue as an `(n, dim)` constant matrix.
    pub fn as_matrix(&self) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Err(Error::State("negative queue is empty".into()));
        }
        let n = self.entries.len();
        let mut data = Vec::with_capacity(n * self.dim);
        for e in &self.entries {
            data.extend_from_slice(e);
        }
        Tensor::new(&[n, self.dim], data)
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f32]> {
        self.entries.iter().map(|v| v.as_slice())
    }

    pub fn restore(&mut self, entries: Vec<Vec<f32>>) {
        self.entries = entries.into();
    }
}

/// Options for the contrastive objective.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveOpts {
    /// L2-normalize projections before the inner products.
    pub normalize: bool,
    /// Also count the positive pair in the denominator (classic InfoNCE);
    /// off by default, where negatives come from the queue alone.
    pub include_positive: bool,
}

impl Default for ContrastiveOpts {
    fn default() -> Self {
        Self {
            normalize: true,
            include_positive: false,
        }
    }
}

fn maybe_normalize(w: &Tensor, on: bool) -> Result<Tensor> {
    if !on {
        return Ok(w.clone());
    }
    let norm = w.dot(w)?.add_scalar(1e-12).sqrt().recip();
    w.mul_scalar_tensor(&norm)
}

/// `-log( exp(w.w+ / tau) / sum_i exp(w.q_i / tau) )` over the queue
/// entries, optionally adding the positive term to the denominator.
pub fn contrastive_loss(
    w: &Tensor,
    w_pos: &Tensor,
    queue: &NegativeQueue,
    opts: ContrastiveOpts,
) -> Result<Tensor> {
    if queue.is_empty() {
        return Err(Error::State("negative queue is empty".into()));
    }
    let inv_tau = 1.0 / queue.temperature;
    let wn = maybe_normalize(w, opts.normalize)?;
    let pn = maybe_normalize(w_pos, opts.normalize)?;
    let pos = wn.dot(&pn)?.scale(inv_tau);

    let q = queue.as_matrix()?;
    let q = if opts.normalize {
        let n = q.shape()[0];
        let dim = q.shape()[1];
        let mut data = q.to_vec();
        for row in data.chunks_mut(dim) {
            let norm = (row.iter().map(|&v| v as f64 * v as f64).sum::<f64>()).sqrt() + 1e-12;
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Tensor::new(&[n, dim], data)?
    } else {
        q
    };
    let mut logits = wn.linear(&q, None)?.scale(inv_tau);
    if opts.include_positive {
        logits = Tensor::concat_dim0(&[&logits, &pos])?;
    }
    // Stable log-sum-exp with a detached shift.
    let shift = logits.max_value();
    let lse = logits.add_scalar(-shift).exp().sum().ln().add_scalar(shift);
    lse.sub(&pos)
}
