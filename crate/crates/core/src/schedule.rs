//! Diffusion-schedule arithmetic: the beta/alpha ladder, exact forward
//! marginals, stepwise transitions and subsampled reverse paths.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Noise schedule over `T` steps. Index convention matches the math:
/// `beta(t)` and `alpha_bar(t)` take `t` in `1..=T`, and `alpha_bar(0) = 1`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

impl DiffusionSchedule {
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) = 1` (empty product).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(Error::param(format!(
                "step {t} outside schedule range 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }
}

/// Linear beta schedule from `beta_start` to `beta_end` over `t_max` steps.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_max < 1 {
        return Err(Error::param("schedule needs at least one step"));
    }
    for (name, v) in [("beta_start", beta_start), ("beta_end", beta_end)] {
        if !(0.0 < v && v < 1.0) {
            return Err(Error::param(format!("{name} = {v} outside (0, 1)")));
        }
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0f64;
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

pub fn default_schedule() -> DiffusionSchedule {
    make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
}

/// One stepwise forward transition:
/// `x_t = sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * eps`.
pub fn forward_step(
    x_prev: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let b = sched.beta(t);
    x_prev
        .scale((1.0 - b).sqrt() as f32)
        .add(&eps.scale(b.sqrt() as f32))
}

/// The exact forward marginal:
/// `x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_marginal(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    x0.scale(ab.sqrt() as f32)
        .add(&eps.scale((1.0 - ab).sqrt() as f32))
}

/// Reverse-process subsampling: timesteps `{0, gamma, 2*gamma, ..., T}` and
/// the per-step noise scales `sigma_tau`.
#[derive(Debug, Clone)]
pub struct SamplingPath {
    pub gamma: usize,
    pub eta: f64,
    /// `tau[0] = 0`, `tau[m] = T`; strictly increasing with uniform gap.
    pub tau: Vec<usize>,
    /// `sigma[i]` pairs with `tau[i]`; `sigma[0]` is unused (kept 0).
    pub sigma: Vec<f64>,
}

impl SamplingPath {
    /// Number of denoiser applications a full reverse pass performs.
    pub fn steps(&self) -> usize {
        self.tau.len() - 1
    }
}

/// Builds the subsampled path for the given interval and temperature.
/// `gamma` must divide `T`; `eta = 0` makes every step deterministic.
pub fn make_path(sched: &DiffusionSchedule, gamma: usize, eta: f64) -> Result<SamplingPath> {
    let t_max = sched.t_max();
    if gamma == 0 || t_max % gamma != 0 {
        return Err(Error::param(format!(
            "sampling interval {gamma} does not divide T = {t_max}"
        )));
    }
    if eta < 0.0 {
        return Err(Error::param(format!("eta {eta} must be non-negative")));
    }
    let m = t_max / gamma;
    let tau: Vec<usize> = (0..=m).map(|i| i * gamma).collect();
    let mut sigma = vec![0.0f64; m + 1];
    for i in 1..=m {
        let t = tau[i];
        let prev = tau[i - 1];
        let ratio = (1.0 - sched.alpha_bar(prev)) / (1.0 - sched.alpha_bar(t));
        sigma[i] = eta * (ratio * sched.beta(t)).sqrt();
    }
    Ok(SamplingPath {
        gamma,
        eta,
        tau,
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn hand_computed_alpha_bars() {
        let s = make_schedule(3, 0.1, 0.3).unwrap();
        assert!((s.beta(1) - 0.1).abs() < 1e-12);
        assert!((s.beta(2) - 0.2).abs() < 1e-12);
        assert!((s.beta(3) - 0.3).abs() < 1e-12);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12);
        assert!((s.alpha_bar(3) - 0.504).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn schedule_invariants_hold() {
        let s = default_schedule();
        assert_eq!(s.t_max(), 1000);
        for t in 1..=s.t_max() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-7);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn tiny_beta_keeps_alpha_bar_near_one() {
        let s = make_schedule(100, 1e-9, 1e-9).unwrap();
        assert!((s.alpha_bar(100) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_step_closed_form() {
        // beta = 0.19, x_prev = 1, eps = 1 -> sqrt(0.81) + sqrt(0.19)
        let s = make_schedule(1, 0.19, 0.19).unwrap();
        let x = Tensor::scalar(1.0);
        let e = Tensor::scalar(1.0);
        let y = forward_step(&x, 1, &e, &s).unwrap();
        assert!((y.item().unwrap() - 1.3358899).abs() < 1e-4);
        assert!(forward_step(&x, 2, &e, &s).is_err());
        assert!(forward_step(&x, 0, &e, &s).is_err());
    }

    #[test]
    fn forward_step_limits() {
        let near_one = make_schedule(1, 0.999999, 0.999999).unwrap();
        let x = Tensor::scalar(5.0);
        let e = Tensor::scalar(-2.0);
        let y = forward_step(&x, 1, &e, &near_one).unwrap();
        assert!((y.item().unwrap() - -2.0).abs() < 1e-2);
        let near_zero = make_schedule(1, 1e-9, 1e-9).unwrap();
        let y = forward_step(&x, 1, &e, &near_zero).unwrap();
        assert!((y.item().unwrap() - 5.0).abs() < 1e-4);
    }

    #[test]
    fn forward_marginal_identity_limits() {
        let s = make_schedule(1, 1e-9, 1e-9).unwrap();
        let x = Tensor::scalar(0.7);
        let e = Tensor::scalar(3.0);
        let y = forward_marginal(&x, 1, &e, &s).unwrap();
        assert!((y.item().unwrap() - 0.7).abs() < 1e-4);
        let s = make_schedule(400, 0.05, 0.05).unwrap();
        // alpha_bar(400) = 0.95^400 ~ 1.2e-9: output is essentially eps.
        let y = forward_marginal(&x, 400, &e, &s).unwrap();
        assert!((y.item().unwrap() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn path_shape_and_sigma_formula() {
        let s = default_schedule();
        let p = make_path(&s, 50, 1.0).unwrap();
        assert_eq!(p.steps(), 20);
        assert_eq!(p.tau.first(), Some(&0));
        assert_eq!(p.tau.last(), Some(&1000));
        for i in 2..p.tau.len() {
            assert_eq!(p.tau[i] - p.tau[i - 1], 50);
        }
        for i in 1..=p.steps() {
            let t = p.tau[i];
            let expect = ((1.0 - s.alpha_bar(p.tau[i - 1])) / (1.0 - s.alpha_bar(t)) * s.beta(t))
                .sqrt();
            assert!((p.sigma[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_and_deterministic_paths() {
        let s = make_schedule(100, 1e-4, 2e-2).unwrap();
        let two_point = make_path(&s, 100, 1.0).unwrap();
        assert_eq!(two_point.steps(), 1);
        assert_eq!(two_point.tau, vec![0, 100]);
        let det = make_path(&s, 10, 0.0).unwrap();
        assert!(det.sigma.iter().all(|&v| v == 0.0));
        assert!(make_path(&s, 7, 1.0).is_err());
    }

    #[test]
    fn ddpm_posterior_variance_identity() {
        // gamma = 1, eta = 1: sigma_t^2 equals the stepwise posterior
        // variance (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t.
        let s = default_schedule();
        let p = make_path(&s, 1, 1.0).unwrap();
        for t in 1..=s.t_max() {
            let posterior = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
            assert!((p.sigma[t] * p.sigma[t] - posterior).abs() < 1e-7);
        }
    }

    #[test]
    fn composed_chain_matches_marginal_moments() {
        // Light version of the acceptance check: T = 5, 20k samples.
        let mut rng = SeededRng::new(123);
        let s = make_schedule(5, 0.05, 0.3).unwrap();
        let n = 20_000;
        let x0 = 0.8f32;
        let mut x = Tensor::full(&[n], x0);
        for t in 1..=5 {
            let eps = Tensor::randn(&[n], &mut rng);
            x = forward_step(&x, t, &eps, &s).unwrap();
        }
        let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = x
            .data()
            .iter()
            .map(|&v| (v as f64 - mean) * (v as f64 - mean))
            .sum::<f64>()
            / n as f64;
        let expect_mean = s.alpha_bar(5).sqrt() * x0 as f64;
        let expect_var = 1.0 - s.alpha_bar(5);
        assert!((mean - expect_mean).abs() / expect_mean.abs() < 0.05);
        assert!((var - expect_var).abs() / expect_var < 0.05);
    }
}
