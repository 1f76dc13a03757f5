//! Layer building blocks, parameter registration and the Adam optimizer.
//!
//! Layers own their tensors directly; anything that trains or checkpoints
//! walks them through `params` / `params_mut`, which report every tensor
//! with a stable hierarchical name. `Weight` entries receive optimizer
//! updates, `Buffer` entries (running statistics) are checkpointed only.

use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::{Gradients, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub kind: ParamKind,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub tensor: &'a mut Tensor,
    pub kind: ParamKind,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform_init(shape: &[usize], bound: f32, rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::param(shape, data).expect("consistent init shape")
}

/// 2-D convolution layer with same padding.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, rng: &mut SeededRng) -> Self {
        let fan_in = (in_ch * k * k) as f32;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            weight: uniform_init(&[out_ch, in_ch, k, k], bound, rng),
            bias: uniform_init(&[out_ch], bound, rng),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride)
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: join(prefix, "weight"),
                tensor: &self.weight,
                kind: ParamKind::Weight,
            },
            ParamRef {
                name: join(prefix, "bias"),
                tensor: &self.bias,
                kind: ParamKind::Weight,
            },
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: join(prefix, "weight"),
                tensor: &mut self.weight,
                kind: ParamKind::Weight,
            },
            ParamMut {
                name: join(prefix, "bias"),
                tensor: &mut self.bias,
                kind: ParamKind::Weight,
            },
        ]
    }
}

/// Fully connected layer on vectors.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        Self {
            weight: uniform_init(&[out_dim, in_dim], bound, rng),
            bias: uniform_init(&[out_dim], bound, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, Some(&self.bias))
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: join(prefix, "weight"),
                tensor: &self.weight,
                kind: ParamKind::Weight,
            },
            ParamRef {
                name: join(prefix, "bias"),
                tensor: &self.bias,
                kind: ParamKind::Weight,
            },
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: join(prefix, "weight"),
                tensor: &mut self.weight,
                kind: ParamKind::Weight,
            },
            ParamMut {
                name: join(prefix, "bias"),
                tensor: &mut self.bias,
                kind: ParamKind::Weight,
            },
        ]
    }
}

/// Group normalization with learned per-channel affine.
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f32,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        Self {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("consistent"),
            beta: Tensor::param(&[channels], vec![0.0; channels]).expect("consistent"),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.group_norm(&self.gamma, &self.beta, self.groups, self.eps)
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: join(prefix, "gamma"),
                tensor: &self.gamma,
                kind: ParamKind::Weight,
            },
            ParamRef {
                name: join(prefix, "beta"),
                tensor: &self.beta,
                kind: ParamKind::Weight,
            },
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: join(prefix, "gamma"),
                tensor: &mut self.gamma,
                kind: ParamKind::Weight,
            },
            ParamMut {
                name: join(prefix, "beta"),
                tensor: &mut self.beta,
                kind: ParamKind::Weight,
            },
        ]
    }
}

/// Batch normalization over `(C,H,W)` at batch granularity one: training
/// mode normalizes with the statistics of the sample at hand and updates
/// running estimates; eval mode applies the frozen running statistics.
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("consistent"),
            beta: Tensor::param(&[channels], vec![0.0; channels]).expect("consistent"),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = {
            let s = x.shape();
            (s[0], s[1], s[2])
        };
        let n = (h * w) as f64;
        let mut new_mean = self.running_mean.to_vec();
        let mut new_var = self.running_var.to_vec();
        let d = x.data();
        for ch in 0..c {
            let span = &d[ch * h * w..(ch + 1) * h * w];
            let mu: f64 = span.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var: f64 = span.iter().map(|&v| (v as f64 - mu) * (v as f64 - mu)).sum::<f64>() / n;
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            new_mean[ch] =
                (1.0 - self.momentum) * new_mean[ch] + self.momentum * mu as f32;
            new_var[ch] =
                (1.0 - self.momentum) * new_var[ch] + self.momentum * unbiased as f32;
        }
        self.running_mean = Tensor::new(&[c], new_mean)?;
        self.running_var = Tensor::new(&[c], new_var)?;
        // Per-channel groups reproduce batch-norm statistics for one sample.
        x.group_norm(&self.gamma, &self.beta, c, self.eps)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let scale: Vec<f32> = self
            .running_var
            .data()
            .iter()
            .map(|&v| 1.0 / (v + self.eps).sqrt())
            .collect();
        x.channel_affine(&self.gamma, &self.beta, self.running_mean.data(), &scale)
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: join(prefix, "gamma"),
                tensor: &self.gamma,
                kind: ParamKind::Weight,
            },
            ParamRef {
                name: join(prefix, "beta"),
                tensor: &self.beta,
                kind: ParamKind::Weight,
            },
            ParamRef {
                name: join(prefix, "running_mean"),
                tensor: &self.running_mean,
                kind: ParamKind::Buffer,
            },
            ParamRef {
                name: join(prefix, "running_var"),
                tensor: &self.running_var,
                kind: ParamKind::Buffer,
            },
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<ParamMut<'_>> {
        vec![
            ParamMut {
                name: join(prefix, "gamma"),
                tensor: &mut self.gamma,
                kind: ParamKind::Weight,
            },
            ParamMut {
                name: join(prefix, "beta"),
                tensor: &mut self.beta,
                kind: ParamKind::Weight,
            },
            ParamMut {
                name: join(prefix, "running_mean"),
                tensor: &mut self.running_mean,
                kind: ParamKind::Buffer,
            },
            ParamMut {
                name: join(prefix, "running_var"),
                tensor: &mut self.running_var,
                kind: ParamKind::Buffer,
            },
        ]
    }
}

/// Adam with decoupled per-parameter state keyed by parameter name.
/// Parameters absent from the gradient map are left untouched.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `Weight` entry that has a gradient.
    pub fn step(&mut self, params: Vec<ParamMut<'_>>, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in params {
            if p.kind != ParamKind::Weight {
                continue;
            }
            let Some(g) = grads.wrt(p.tensor) else {
                continue;
            };
            let n = g.len();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = p.tensor.to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            *p.tensor = Tensor::param(p.tensor.shape(), data).expect("shape preserved");
        }
    }

    /// Moment buffers for checkpointing, sorted by parameter name.
    pub fn state(&self) -> Vec<(String, &[f32], &[f32])> {
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| (n.clone(), self.m[n].as_slice(), self.v[n].as_slice()))
            .collect()
    }

    pub fn restore(&mut self, step: u64, entries: Vec<(String, Vec<f32>, Vec<f32>)>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, m, v) in entries {
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_layer_shapes() {
        let mut rng = SeededRng::new(0);
        let conv = Conv2d::new(3, 8, 3, 1, &mut rng);
        let x = Tensor::randn(&[3, 6, 6], &mut rng);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[8, 6, 6]);
        let down = Conv2d::new(8, 8, 3, 2, &mut rng);
        assert_eq!(down.forward(&y).unwrap().shape(), &[8, 3, 3]);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize |x - 3|^2 elementwise
        let mut p = Tensor::param(&[4], vec![0.0; 4]).unwrap();
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..200 {
            let target = Tensor::full(&[4], 3.0);
            let diff = p.sub(&target).unwrap();
            let loss = diff.mul(&diff).unwrap().sum();
            let grads = loss.backward().unwrap();
            let params = vec![ParamMut {
                name: "p".into(),
                tensor: &mut p,
                kind: ParamKind::Weight,
            }];
            opt.step(params, &grads);
        }
        for &v in p.data() {
            assert!((v - 3.0).abs() < 0.05, "got {v}");
        }
    }

    #[test]
    fn adam_skips_parameters_without_gradients() {
        let mut a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let mut b = Tensor::param(&[2], vec![5.0, 6.0]).unwrap();
        let loss = a.sum();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        opt.step(
            vec![
                ParamMut {
                    name: "a".into(),
                    tensor: &mut a,
                    kind: ParamKind::Weight,
                },
                ParamMut {
                    name: "b".into(),
                    tensor: &mut b,
                    kind: ParamKind::Weight,
                },
            ],
            &grads,
        );
        assert_ne!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[5.0, 6.0]);
    }

    #[test]
    fn batch_norm_train_normalizes_and_tracks() {
        let mut bn = BatchNorm2d::new(2);
        let x = Tensor::new(&[2, 2, 2], vec![1.0, 3.0, 5.0, 7.0, -2.0, -2.0, -2.0, -2.0]).unwrap();
        let y = bn.forward_train(&x).unwrap();
        let s0 = &y.data()[0..4];
        assert!(s0.iter().sum::<f32>().abs() < 1e-5);
        assert!(bn.running_mean.data()[0] > 0.0);
        // Eval mode with frozen stats is deterministic and affine.
        let e1 = bn.forward_eval(&x).unwrap();
        let e2 = bn.forward_eval(&x).unwrap();
        assert_eq!(e1.data(), e2.data());
    }

    #[test]
    fn param_names_compose() {
        let mut rng = SeededRng::new(1);
        let lin = Linear::new(4, 2, &mut rng);
        let names: Vec<String> = lin.params("head.fc1").into_iter().map(|p| p.name).collect();
        assert_eq!(names, vec!["head.fc1.weight", "head.fc1.bias"]);
    }
}
