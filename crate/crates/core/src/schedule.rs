//! Closed-form diffusion mathematics.
//!
//! Steps are 1-based: `t ∈ [1, T]`, with the convention `ᾱ_0 = 1`. All
//! coefficients are computed in `f64` and only cast to the tensor element
//! type at the point of use.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{axpby_per_item, mix_kernel, Real, Tensor};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to every cosine-schedule β.
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// β, α and ᾱ for `T` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// The unnormalized cosine curve `f(t) = cos²(((t/T + s)/(1 + s)) · π/2)`.
pub fn cosine_curve(t: f64, steps: usize) -> f64 {
    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

impl NoiseSchedule {
    /// Builds a schedule of `steps` (= `T`) steps.
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        ensure!(steps >= 2, "schedule needs T >= 2, got {steps}");
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f0 = cosine_curve(0.0, steps);
                (1..=steps)
                    .map(|t| {
                        let prev = cosine_curve((t - 1) as f64, steps) / f0;
                        let cur = cosine_curve(t as f64, steps) / f0;
                        (1.0 - cur / prev).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Linear => {
                // Endpoints 1e-4 and 0.02 at T = 1000, rescaled for other T and
                // clipped like the cosine schedule.
                let scale = 1000.0 / steps as f64;
                let (start, end) = (scale * 1e-4, scale * 0.02);
                (0..steps)
                    .map(|i| {
                        let f = i as f64 / (steps - 1) as f64;
                        (start * (1.0 - f) + end * f).min(MAX_BETA)
                    })
                    .collect()
            }
        };
        ensure!(
            betas.iter().all(|&b| b > 0.0 && b <= 1.0),
            "schedule produced a beta outside (0, 1]"
        );
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps()).contains(&t),
            "step {t} outside [1, {}]",
            self.steps()
        );
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`: coefficients on `x0` and `ε` in `x_t`.
    pub fn q_sample_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Coefficients on `x_t` and `ε′` recovering `x0`.
    pub fn x0_from_eps_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (1.0 / ab.sqrt(), -(1.0 - ab).sqrt() / ab.sqrt())
    }

    /// Coefficients on `x0` and `x_t` of the posterior mean of `x_{t-1}`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let denom = 1.0 - ab;
        (
            ab_prev.sqrt() * self.beta(t) / denom,
            self.alpha(t).sqrt() * (1.0 - ab_prev) / denom,
        )
    }

    /// Coefficients on `x_t` and `ε′` of the noise-parameterized mean.
    pub fn mu_from_eps_coefs(&self, t: usize) -> (f64, f64) {
        let a = self.alpha(t);
        let ab = self.alpha_bar(t);
        (1.0 / a.sqrt(), -(1.0 - a) / ((1.0 - ab).sqrt() * a.sqrt()))
    }

    /// Fixed reverse variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// One coefficient pair per batch item, cast to `T`.
pub fn per_item_coefs<T: Real>(
    steps: &[usize],
    f: impl Fn(usize) -> (f64, f64),
) -> (Vec<T>, Vec<T>) {
    steps.iter().map(|&t| f(t)).map(|(a, b)| (T::of(a), T::of(b))).unzip()
}

fn combine<T: Real>(x: &Tensor<T>, y: &Tensor<T>, (a, b): (f64, f64)) -> Result<Tensor<T>> {
    ensure!(
        x.shape() == y.shape(),
        "shape mismatch: {:?} vs {:?}",
        x.shape(),
        y.shape()
    );
    let n = x.batch();
    let a = vec![T::of(a); n];
    let b = vec![T::of(b); n];
    let mut out = Tensor::zeros(x.shape());
    axpby_per_item(&a, x.data(), &b, y.data(), out.data_mut());
    Ok(out)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`
pub fn q_sample<T: Real>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    combine(x0, eps, sched.q_sample_coefs(t))
}

/// `x0⋆ = (x_t − √(1−ᾱ_t)·ε′)/√ᾱ_t`
pub fn x0_from_eps<T: Real>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    combine(x_t, eps_pred, sched.x0_from_eps_coefs(t))
}

/// Mean of `q(x_{t−1} | x_t, x0)`.
pub fn posterior_mean<T: Real>(
    x0: &Tensor<T>,
    x_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    combine(x0, x_t, sched.posterior_coefs(t))
}

/// `μ_ε′ = x_t/√α_t − (1−α_t)/(√(1−ᾱ_t)·√α_t)·ε′`
pub fn mu_from_eps<T: Real>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    combine(x_t, eps_pred, sched.mu_from_eps_coefs(t))
}

/// `r·μ_x0 + (1−r)·μ_ε`, with `r` of shape `[.., 1]` broadcast over
/// channels.
pub fn mix_mu<T: Real>(mu_x0: &Tensor<T>, mu_eps: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(mu_x0.shape() == mu_eps.shape(), "mix_mu: μ shapes differ");
    let (s, sr) = (mu_x0.shape(), r.shape());
    ensure!(
        sr.len() == s.len() && sr.last() == Some(&1) && sr[..sr.len() - 1] == s[..s.len() - 1],
        "mix_mu: r shape {sr:?} does not broadcast over {s:?}"
    );
    ensure!(
        r.data().iter().all(|&v| v >= T::zero() && v <= T::one()),
        "mix_mu: r outside [0, 1]"
    );
    let mut out = Tensor::zeros(s);
    mix_kernel(mu_x0.data(), mu_eps.data(), r.data(), mu_x0.channels(), out.data_mut());
    Ok(out)
}

/// The four mean estimates of one reverse step.
#[derive(Clone, Debug)]
pub struct PosteriorMeans<T = f32> {
    pub mu_tilde: Tensor<T>,
    pub mu_from_eps: Tensor<T>,
    pub mu_from_x0: Tensor<T>,
    pub mu_mixed: Tensor<T>,
}

impl<T: Real> PosteriorMeans<T> {
    /// Evaluates μ̃ from the true `x0`, both model-based estimates, and
    /// their `r`-weighted mix.
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        x0: &Tensor<T>,
        x_t: &Tensor<T>,
        eps_pred: &Tensor<T>,
        x0_pred: &Tensor<T>,
        r: &Tensor<T>,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        let mu_tilde = posterior_mean(x0, x_t, t, sched)?;
        let mu_from_eps = mu_from_eps(x_t, eps_pred, t, sched)?;
        let mu_from_x0 = posterior_mean(x0_pred, x_t, t, sched)?;
        let mu_mixed = mix_mu(&mu_from_x0, &mu_from_eps, r)?;
        Ok(Self {
            mu_tilde,
            mu_from_eps,
            mu_from_x0,
            mu_mixed,
        })
    }
}

/// A uniform-stride subsequence of a base schedule's steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RespacedSchedule {
    base: NoiseSchedule,
    timesteps: Vec<usize>,
    alpha_bars: Vec<f64>,
}

/// Keeps `n_steps` steps of `sched` with stride `⌊T/n⌋`, ending at `T`.
pub fn respace(sched: &NoiseSchedule, n_steps: usize) -> Result<RespacedSchedule> {
    let total = sched.steps();
    ensure!(
        (1..=total).contains(&n_steps),
        "cannot respace {total} steps to {n_steps}"
    );
    let stride = total / n_steps;
    let timesteps: Vec<usize> = (1..=n_steps).map(|i| total - (n_steps - i) * stride).collect();
    let alpha_bars = timesteps.iter().map(|&t| sched.alpha_bar(t)).collect();
    Ok(RespacedSchedule {
        base: sched.clone(),
        timesteps,
        alpha_bars,
    })
}

impl RespacedSchedule {
    pub fn base(&self) -> &NoiseSchedule {
        &self.base
    }

    /// Kept steps, strictly increasing.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// ᾱ at each kept step, taken unchanged from the base schedule.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// `(t, t_prev)` pairs from the last kept step down to the first, where
    /// the first kept step's predecessor is the virtual step 0 (`ᾱ = 1`).
    pub fn reverse_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.timesteps.len())
            .rev()
            .map(|i| (self.timesteps[i], if i == 0 { 0 } else { self.timesteps[i - 1] }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4], k: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64) * k).sin())
    }

    #[test]
    fn cosine_first_alpha_bar_matches_curve() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 4000).unwrap();
        let direct = cosine_curve(1.0, 4000) / cosine_curve(0.0, 4000);
        assert!((s.alpha_bar(1) - direct).abs() < 1e-6);
    }

    #[test]
    fn alpha_bars_strictly_decrease() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for steps in [2, 10, 1000] {
                let s = NoiseSchedule::new(kind, steps).unwrap();
                let ab = s.alpha_bars();
                assert!(ab.windows(2).all(|w| w[1] < w[0]), "{kind:?} {steps}");
                assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
                assert!(s.alpha_bar(steps) < s.alpha_bar(1));
            }
        }
    }

    #[test]
    fn linear_endpoints() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
    }

    #[test]
    fn too_few_steps_rejected() {
        assert!(NoiseSchedule::new(ScheduleKind::Cosine, 1).is_err());
    }

    #[test]
    fn q_sample_degenerate_cases() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let x0 = ramp([1, 2, 2, 1], 0.7);
        let zero = Tensor::zeros([1, 2, 2, 1]);
        let (ca, cb) = s.q_sample_coefs(37);
        let out = q_sample(&x0, 37, &zero, &s).unwrap();
        assert_eq!(out, x0.map(|v| ca * v));
        let out = q_sample(&zero, 37, &x0, &s).unwrap();
        assert_eq!(out, x0.map(|v| cb * v));
        assert!(q_sample(&x0, 37, &Tensor::zeros([1, 4]), &s).is_err());
        assert!(q_sample(&x0, 101, &zero, &s).is_err());
    }

    #[test]
    fn x0_from_eps_forced_cancellation() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let xt = ramp([1, 2, 2, 3], 0.3);
        let t = 50;
        let eps = xt.map(|v| v / (1.0 - s.alpha_bar(t)).sqrt());
        let out = x0_from_eps(&xt, &eps, t, &s).unwrap();
        assert!(out.max_abs() < 1e-12);
    }

    #[test]
    fn posterior_mean_at_first_step_is_x0() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let (cx0, cxt) = s.posterior_coefs(1);
        assert!((cx0 - 1.0).abs() < 1e-12);
        assert_eq!(cxt, 0.0);
        let x0 = ramp([1, 2, 2, 1], 0.9);
        let xt = ramp([1, 2, 2, 1], 0.2);
        let out = posterior_mean(&x0, &xt, 1, &s).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = Tensor::<f64>::zeros([1, 2, 2, 1]);
        assert_eq!(posterior_mean(&zero, &zero, 5, &s).unwrap().max_abs(), 0.0);
        assert!(posterior_mean(&zero, &zero, 0, &s).is_err());
    }

    #[test]
    fn mu_from_eps_zero_noise_and_last_step() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let xt = ramp([1, 2, 2, 1], 0.4);
        let zero = Tensor::zeros([1, 2, 2, 1]);
        let out = mu_from_eps(&xt, &zero, 10, &s).unwrap();
        let expect = xt.map(|v| v / s.alpha(10).sqrt());
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let big = mu_from_eps(&xt, &xt, 1000, &s).unwrap();
        assert!(big.is_finite());
    }

    #[test]
    fn mix_mu_endpoints_and_midpoint() {
        let a = Tensor::<f64>::full([1, 2, 2, 3], 2.0);
        let b = Tensor::<f64>::full([1, 2, 2, 3], 4.0);
        let r0 = Tensor::zeros([1, 2, 2, 1]);
        let r1 = Tensor::full([1, 2, 2, 1], 1.0);
        let rh = Tensor::full([1, 2, 2, 1], 0.5);
        assert_eq!(mix_mu(&a, &b, &r0).unwrap(), b);
        assert_eq!(mix_mu(&a, &b, &r1).unwrap(), a);
        assert_eq!(mix_mu(&a, &b, &rh).unwrap(), Tensor::full([1, 2, 2, 3], 3.0));
        let bad = Tensor::full([1, 2, 2, 1], 1.5);
        assert!(mix_mu(&a, &b, &bad).is_err());
    }

    #[test]
    fn respace_examples() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 4000).unwrap();
        let r = respace(&s, 100).unwrap();
        let expected: Vec<usize> = (1..=100).map(|i| 40 * i).collect();
        assert_eq!(r.timesteps(), expected.as_slice());
        assert_eq!(r.alpha_bars()[99], s.alpha_bar(4000));

        let s = NoiseSchedule::new(ScheduleKind::Linear, 50).unwrap();
        let full = respace(&s, 50).unwrap();
        assert_eq!(full.timesteps(), (1..=50).collect::<Vec<_>>().as_slice());
        assert_eq!(respace(&s, 1).unwrap().timesteps(), &[50]);
        assert!(respace(&s, 51).is_err());
        assert!(respace(&s, 0).is_err());
        assert_eq!(full.reverse_pairs()[49], (1, 0));
    }
}
