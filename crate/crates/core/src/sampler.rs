//! Reverse-process samplers.
//!
//! The DDIM step forms two mean estimates, one from the clean-image
//! prediction and one from the noise prediction, and mixes them per pixel
//! with `r`. Outputs are clipped to `[-1, 1]` only when emitted.
//!
//! Every sample draws its initial noise and per-step noise from its own
//! seeded stream, so results do not depend on batch size or thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::casdm::{BoundParams, CasDm, ModelParams, Variant};
use crate::error::{ensure, Result};
use crate::netcore::Graph;
use crate::rng::{self, StreamRng};
use crate::schedule::{per_item_coefs, respace, NoiseSchedule, RespacedSchedule};
use crate::tensor::{axpby_per_item, mix_kernel, Real, Tensor};

/// How the per-step `α` in the noise-based DDIM mean is obtained.
///
/// The mean is `(x_t − √(1−ᾱ_t)·ε′)/√α + √(1−ᾱ_prev−σ²)·ε′`. The two forms
/// agree whenever `t_prev = t − 1` and differ once steps are skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsForm {
    /// `α = ᾱ_t / ᾱ_prev`, the effective single-step `α` of the respaced
    /// chain. Consistent with the clean-image form for any spacing.
    #[default]
    AlphaBarRatio,
    /// `α = α_t` of the base schedule, regardless of spacing.
    StepAlpha,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddim,
    /// Full-length ancestral sampling with the fixed posterior variance.
    Ancestral,
}

/// The `[sample]` block of an experiment config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default)]
    pub kind: SamplerKind,
    /// Respaced step count for DDIM.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eps_form: EpsForm,
    /// Items per model call.
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Clamp both clean-image predictions to `[-1, 1]` before each step.
    /// The state itself is only clipped at emission.
    #[serde(default)]
    pub clip_x0: bool,
}

fn default_steps() -> usize {
    100
}

fn default_batch() -> usize {
    64
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 100,
            eta: 0.0,
            seed: 0,
            eps_form: EpsForm::AlphaBarRatio,
            batch: 64,
            clip_x0: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "sample steps must be >= 1");
        ensure!(self.eta.is_finite() && self.eta >= 0.0, "eta must be finite and >= 0");
        ensure!(self.batch >= 1, "sample batch must be >= 1");
        Ok(())
    }
}

/// One model evaluation: `ε′`, `x0′` (both `[N, H, W, C]`) and `r`
/// (`[N, H, W, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T = f32> {
    pub eps: Tensor<T>,
    pub x0: Tensor<T>,
    pub r: Tensor<T>,
}

/// Anything that predicts noise, clean image and mixing weight from `x_t`.
pub trait Denoiser<T: Real>: Sync {
    /// `[H, W, C]`.
    fn image_shape(&self) -> [usize; 3];

    fn predict(&self, x_t: &Tensor<T>, t: usize) -> Result<Prediction<T>>;
}

fn per_item(n: usize, (a, b): (f64, f64)) -> (Vec<f64>, Vec<f64>) {
    (vec![a; n], vec![b; n])
}

fn lincomb<T: Real>(x: &Tensor<T>, y: &Tensor<T>, (a, b): (f64, f64)) -> Result<Tensor<T>> {
    ensure!(x.shape() == y.shape(), "shape mismatch {:?} vs {:?}", x.shape(), y.shape());
    let (a, b) = per_item(x.batch(), (a, b));
    let a: Vec<T> = a.into_iter().map(T::of).collect();
    let b: Vec<T> = b.into_iter().map(T::of).collect();
    let mut out = Tensor::zeros(x.shape());
    axpby_per_item(&a, x.data(), &b, y.data(), out.data_mut());
    Ok(out)
}

/// `σ = η·√((1−ᾱ_prev)/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_prev)`.
pub fn ddim_sigma(sched: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
}

fn direction(sched: &NoiseSchedule, t: usize, t_prev: usize, sigma: f64) -> Result<f64> {
    sched.check_step(t)?;
    ensure!(t_prev < t, "t_prev = {t_prev} must precede t = {t}");
    let rest = 1.0 - sched.alpha_bar(t_prev) - sigma * sigma;
    ensure!(
        sigma >= 0.0 && rest >= -1e-12,
        "sigma {sigma} exceeds sqrt(1 - alpha_bar[{t_prev}])"
    );
    Ok(rest.max(0.0).sqrt())
}

/// Coefficients on `x_t` and `x0′` of the clean-image DDIM mean.
pub fn ddim_x0_coefs(sched: &NoiseSchedule, t: usize, t_prev: usize, sigma: f64) -> Result<(f64, f64)> {
    let dir = direction(sched, t, t_prev, sigma)?;
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let s = (1.0 - ab).sqrt();
    Ok((dir / s, ab_prev.sqrt() - dir * ab.sqrt() / s))
}

/// Coefficients on `x_t` and `ε′` of the noise-based DDIM mean.
pub fn ddim_eps_coefs(
    sched: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    sigma: f64,
    form: EpsForm,
) -> Result<(f64, f64)> {
    let dir = direction(sched, t, t_prev, sigma)?;
    let ab = sched.alpha_bar(t);
    let alpha = match form {
        EpsForm::AlphaBarRatio => ab / sched.alpha_bar(t_prev),
        EpsForm::StepAlpha => sched.alpha(t),
    };
    Ok((1.0 / alpha.sqrt(), dir - (1.0 - ab).sqrt() / alpha.sqrt()))
}

/// `√ᾱ_prev·x0′ + √(1−ᾱ_prev−σ²)·(x_t − √ᾱ_t·x0′)/√(1−ᾱ_t)`.
pub fn ddim_mu_from_x0<T: Real>(
    x_t: &Tensor<T>,
    x0_pred: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sigma: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    lincomb(x_t, x0_pred, ddim_x0_coefs(sched, t, t_prev, sigma)?)
}

/// `(x_t − √(1−ᾱ_t)·ε′)/√α + √(1−ᾱ_prev−σ²)·ε′`, `α` chosen by `form`.
pub fn ddim_mu_from_eps<T: Real>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sigma: f64,
    sched: &NoiseSchedule,
    form: EpsForm,
) -> Result<Tensor<T>> {
    lincomb(x_t, eps_pred, ddim_eps_coefs(sched, t, t_prev, sigma, form)?)
}

fn add_noise<T: Real>(mu: &mut Tensor<T>, sigma: f64, noise: Option<&Tensor<T>>) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let noise = noise.ok_or_else(|| crate::Error::invalid("stochastic step needs noise"))?;
    ensure!(noise.shape() == mu.shape(), "noise shape mismatch");
    let s = T::of(sigma);
    for (m, &z) in mu.data_mut().iter_mut().zip(noise.data()) {
        *m += s * z;
    }
    Ok(())
}

/// Parameters of one DDIM transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSpec {
    pub t: usize,
    pub t_prev: usize,
    pub sigma: f64,
    pub form: EpsForm,
}

/// Clamps `x0′` and the clean image implied by `ε′` to `[-1, 1]`, then
/// re-derives `ε′` from the clamped image. Predictions already in range
/// pass through up to rounding.
pub fn clip_prediction<T: Real>(
    x_t: &Tensor<T>,
    pred: Prediction<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Prediction<T>> {
    let (lo, hi) = (-T::one(), T::one());
    let implied = crate::schedule::x0_from_eps(x_t, &pred.eps, t, sched)?.map(|v| v.max(lo).min(hi));
    let ab = sched.alpha_bar(t);
    let s = (1.0 - ab).sqrt();
    Ok(Prediction {
        eps: lincomb(x_t, &implied, (1.0 / s, -ab.sqrt() / s))?,
        x0: pred.x0.map(|v| v.max(lo).min(hi)),
        r: pred.r,
    })
}

/// `r·μ_x0 + (1−r)·μ_ε + σ·noise`. `noise` is ignored when `σ = 0`.
pub fn ddim_step<T: Real>(
    x_t: &Tensor<T>,
    pred: &Prediction<T>,
    s: StepSpec,
    sched: &NoiseSchedule,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mu_x0 = ddim_mu_from_x0(x_t, &pred.x0, s.t, s.t_prev, s.sigma, sched)?;
    let mu_eps = ddim_mu_from_eps(x_t, &pred.eps, s.t, s.t_prev, s.sigma, sched, s.form)?;
    let mut out = Tensor::zeros(x_t.shape());
    ensure!(
        pred.r.numel() * x_t.channels() == x_t.numel(),
        "r shape {:?} does not broadcast over {:?}",
        pred.r.shape(),
        x_t.shape()
    );
    mix_kernel(mu_x0.data(), mu_eps.data(), pred.r.data(), x_t.channels(), out.data_mut());
    add_noise(&mut out, s.sigma, noise)?;
    Ok(out)
}

/// DDIM step driven by `ε′` alone.
pub fn ddim_step_eps<T: Real>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    s: StepSpec,
    sched: &NoiseSchedule,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut out = ddim_mu_from_eps(x_t, eps_pred, s.t, s.t_prev, s.sigma, sched, s.form)?;
    add_noise(&mut out, s.sigma, noise)?;
    Ok(out)
}

/// DDIM step driven by `x0′` alone.
pub fn ddim_step_x0<T: Real>(
    x_t: &Tensor<T>,
    x0_pred: &Tensor<T>,
    s: StepSpec,
    sched: &NoiseSchedule,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut out = ddim_mu_from_x0(x_t, x0_pred, s.t, s.t_prev, s.sigma, sched)?;
    add_noise(&mut out, s.sigma, noise)?;
    Ok(out)
}

/// `r`-mixed posterior mean plus `√β̃_t·noise`; deterministic at `t = 1`.
pub fn ancestral_step<T: Real>(
    x_t: &Tensor<T>,
    pred: &Prediction<T>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    let means = crate::schedule::mix_mu(
        &crate::schedule::posterior_mean(&pred.x0, x_t, t, sched)?,
        &crate::schedule::mu_from_eps(x_t, &pred.eps, t, sched)?,
        &pred.r,
    )?;
    let mut out = means;
    add_noise(&mut out, sched.posterior_variance(t).sqrt(), Some(noise))?;
    Ok(out)
}

/// Per-step summary of a sampling run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    /// Step of the state this point describes; 0 for the emitted sample.
    pub t: usize,
    /// Mean `r` used to leave this state; `None` for the final state.
    pub mean_r: Option<f64>,
    pub mean_abs_x: f64,
}

/// States visited by a sampling run, from `t = T` down to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T = f32> {
    pub points: Vec<TracePoint>,
    /// Full state at each point, parallel to `points`.
    pub states: Vec<Tensor<T>>,
}

impl<T: Real> Trajectory<T> {
    /// `t,mean_r,mean_abs_x` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mean_r,mean_abs_x\n");
        for p in &self.points {
            let r = p.mean_r.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", p.t, r, p.mean_abs_x));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput<T = f32> {
    /// `[n, H, W, C]`, clipped to `[-1, 1]`.
    pub images: Tensor<T>,
    pub trajectory: Option<Trajectory<T>>,
}

/// Reverse-chain schedule of one run: `(t, t_prev)` pairs.
pub fn step_pairs(sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Vec<(usize, usize)>> {
    Ok(match cfg.kind {
        SamplerKind::Ddim => respace(sched, cfg.steps)?.reverse_pairs(),
        SamplerKind::Ancestral => (1..=sched.steps()).rev().map(|t| (t, t - 1)).collect(),
    })
}

struct ChunkRun<T> {
    images: Tensor<T>,
    states: Vec<Tensor<T>>,
    r_sums: Vec<f64>,
}

fn run_chunk<T: Real, D: Denoiser<T>>(
    den: &D,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    pairs: &[(usize, usize)],
    items: std::ops::Range<usize>,
    keep_states: bool,
) -> Result<ChunkRun<T>> {
    let shape = den.image_shape();
    let per: usize = shape.iter().product();
    let mut rngs: Vec<StreamRng> = items.clone().map(|i| rng::stream(cfg.seed, "sample", i as u64)).collect();
    let draw = |rngs: &mut [StreamRng]| -> Tensor<T> {
        let parts: Vec<Tensor<T>> = rngs.iter_mut().map(|r| rng::normal_tensor(r, &[1, shape[0], shape[1], shape[2]])).collect();
        Tensor::concat_batch(&parts).expect("uniform shapes")
    };
    let mut x = draw(&mut rngs);
    let mut states = Vec::new();
    let mut r_sums = Vec::with_capacity(pairs.len());
    for &(t, t_prev) in pairs {
        if keep_states {
            states.push(x.clone());
        }
        let mut pred = den.predict(&x, t)?;
        if cfg.clip_x0 {
            pred = clip_prediction(&x, pred, t, sched)?;
        }
        r_sums.push(pred.r.data().iter().map(|v| v.to_f64_lossless()).sum());
        x = match cfg.kind {
            SamplerKind::Ddim => {
                let sigma = ddim_sigma(sched, t, t_prev, cfg.eta);
                let noise = (sigma > 0.0).then(|| draw(&mut rngs));
                let spec = StepSpec {
                    t,
                    t_prev,
                    sigma,
                    form: cfg.eps_form,
                };
                ddim_step(&x, &pred, spec, sched, noise.as_ref())?
            }
            SamplerKind::Ancestral => {
                let noise = draw(&mut rngs);
                ancestral_step(&x, &pred, t, sched, &noise)?
            }
        };
        if !x.is_finite() {
            return Err(crate::Error::Numerical(format!("non-finite state after step {t}")));
        }
    }
    if keep_states {
        states.push(x.clone());
    }
    debug_assert_eq!(x.numel(), items.len() * per);
    Ok(ChunkRun {
        images: x,
        states,
        r_sums,
    })
}

/// Draws `n` samples. With `trace`, the full trajectory is recorded.
pub fn sample<T: Real, D: Denoiser<T>>(
    den: &D,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    n: usize,
    trace: bool,
) -> Result<SampleOutput<T>> {
    cfg.validate()?;
    ensure!(n >= 1, "need at least one sample");
    let pairs = step_pairs(sched, cfg)?;
    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(cfg.batch)
        .map(|s| s..(s + cfg.batch).min(n))
        .collect();
    let runs: Vec<ChunkRun<T>> = chunks
        .into_par_iter()
        .map(|items| run_chunk(den, sched, cfg, &pairs, items, trace))
        .collect::<Result<_>>()?;
    let finals: Vec<Tensor<T>> = runs.iter().map(|r| r.images.clone()).collect();
    let raw = Tensor::concat_batch(&finals)?;
    let (lo, hi) = (-T::one(), T::one());
    let images = raw.map(|v| v.max(lo).min(hi));
    let trajectory = trace
        .then(|| -> Result<Trajectory<T>> {
            let [h, w, _] = den.image_shape();
            let pixels = (n * h * w) as f64;
            let mut points = Vec::with_capacity(pairs.len() + 1);
            let mut states = Vec::with_capacity(pairs.len() + 1);
            for k in 0..=pairs.len() {
                let parts: Vec<Tensor<T>> = runs.iter().map(|r| r.states[k].clone()).collect();
                let state = Tensor::concat_batch(&parts)?;
                let mean_abs_x =
                    state.data().iter().map(|v| v.to_f64_lossless().abs()).sum::<f64>() / state.numel() as f64;
                let (t, mean_r) = match pairs.get(k) {
                    Some(&(t, _)) => (t, Some(runs.iter().map(|r| r.r_sums[k]).sum::<f64>() / pixels)),
                    None => (0, None),
                };
                points.push(TracePoint { t, mean_r, mean_abs_x });
                states.push(state);
            }
            Ok(Trajectory { points, states })
        })
        .transpose()?;
    Ok(SampleOutput { images, trajectory })
}

/// Bayes-optimal denoiser for data `x0 ~ N(m, s²·I)`:
/// `ε̂ = √(1−ᾱ_t)·(x_t − √ᾱ_t·m)/(ᾱ_t·s² + 1−ᾱ_t)`.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    var: f64,
    shape: [usize; 3],
    sched: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(mean: Vec<f64>, var: f64, shape: [usize; 3], sched: NoiseSchedule) -> Result<Self> {
        ensure!(var > 0.0, "oracle variance must be positive");
        ensure!(mean.len() == shape.iter().product::<usize>(), "mean length must match the image shape");
        Ok(Self {
            mean,
            var,
            shape,
            sched,
        })
    }

    pub fn eps_hat<T: Real>(&self, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.sched.check_step(t)?;
        let ab = self.sched.alpha_bar(t);
        let scale = (1.0 - ab).sqrt() / (ab * self.var + 1.0 - ab);
        let d = self.mean.len();
        ensure!(x_t.numel() % d == 0, "oracle input has the wrong item size");
        let data = x_t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| T::of(scale * (x.to_f64_lossless() - ab.sqrt() * self.mean[i % d])))
            .collect();
        Tensor::new(x_t.shape(), data)
    }
}

impl<T: Real> Denoiser<T> for GaussianOracle {
    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn predict(&self, x_t: &Tensor<T>, t: usize) -> Result<Prediction<T>> {
        let eps = self.eps_hat(x_t, t)?;
        let x0 = crate::schedule::x0_from_eps(x_t, &eps, t, &self.sched)?;
        let mut rs = x_t.shape().to_vec();
        *rs.last_mut().expect("rank 4") = 1;
        Ok(Prediction {
            eps,
            x0,
            r: Tensor::zeros(rs),
        })
    }
}

/// A trained model used for sampling.
pub struct ModelDenoiser<'a> {
    pub model: &'a CasDm,
    pub params: &'a ModelParams<f32>,
    pub sched: &'a NoiseSchedule,
}

impl Denoiser<f32> for ModelDenoiser<'_> {
    fn image_shape(&self) -> [usize; 3] {
        self.model.config().image_shape()
    }

    fn predict(&self, x_t: &Tensor<f32>, t: usize) -> Result<Prediction<f32>> {
        let n = x_t.batch();
        let steps = vec![t; n];
        let mut g = Graph::<f32>::new();
        let bound = BoundParams::frozen(&mut g, self.params);
        let x = g.input(x_t.clone());
        let fv = self.model.forward(&mut g, &bound, x, &steps, self.sched)?;
        let val = |v: Option<crate::netcore::Var>| v.map(|v| g.value(v).clone());
        let mut rs = x_t.shape().to_vec();
        *rs.last_mut().expect("rank 4") = 1;
        let (eps, x0, r) = match self.model.variant() {
            Variant::DdpmEps => {
                let eps = val(fv.eps_pred).expect("ε head");
                let x0 = crate::schedule::x0_from_eps(x_t, &eps, t, self.sched)?;
                (eps, x0, Tensor::zeros(rs))
            }
            Variant::DdpmX0 => {
                let x0 = val(fv.x0_pred).expect("x0 head");
                let ab = self.sched.alpha_bar(t);
                let s = (1.0 - ab).sqrt();
                let (a, b) = per_item_coefs::<f32>(&steps, |_| (1.0 / s, -ab.sqrt() / s));
                let mut eps = Tensor::zeros(x_t.shape());
                axpby_per_item(&a, x_t.data(), &b, x0.data(), eps.data_mut());
                (eps, x0, Tensor::full(rs, 1.0))
            }
            Variant::Dual | Variant::Casdm => (
                val(fv.eps_pred).expect("ε head"),
                val(fv.x0_pred).expect("x0 head"),
                val(fv.r).expect("r head"),
            ),
        };
        Ok(Prediction { eps, x0, r })
    }
}

/// Outcome of checking that both DDIM means agree on consistent inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub form: EpsForm,
    /// Largest `|μ_x0 − μ_ε|` over all transitions.
    pub max_gap: f64,
    /// Transition `(t, t_prev)` where it occurs.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl ConsistencyReport {
    pub fn consistent(&self) -> bool {
        self.max_gap <= self.tolerance
    }
}

/// Feeds each transition of `resp` a pair `(x0, ε)` tied to `x_t` by the
/// forward process and measures how far the two DDIM means disagree.
pub fn check_eps_form(resp: &RespacedSchedule, form: EpsForm, eta: f64, tolerance: f64) -> Result<ConsistencyReport> {
    let sched = resp.base();
    let mut rng = rng::stream(0, "eps-form-probe", 0);
    let x0 = rng::normal_tensor::<f64>(&mut rng, &[1, 4, 4, 1]).map(f64::tanh);
    let eps: Tensor<f64> = rng::normal_tensor(&mut rng, &[1, 4, 4, 1]);
    let mut report = ConsistencyReport {
        form,
        max_gap: 0.0,
        worst: (0, 0),
        tolerance,
    };
    for (t, t_prev) in resp.reverse_pairs() {
        let x_t = crate::schedule::q_sample(&x0, t, &eps, sched)?;
        let sigma = ddim_sigma(sched, t, t_prev, eta);
        let a = ddim_mu_from_x0(&x_t, &x0, t, t_prev, sigma, sched)?;
        let b = ddim_mu_from_eps(&x_t, &eps, t, t_prev, sigma, sched, form)?;
        let gap = a.zip_map(&b, |p, q| (p - q).abs())?.max_abs();
        if gap > report.max_gap {
            report.max_gap = gap;
            report.worst = (t, t_prev);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn cosine(t: usize) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Cosine, t).unwrap()
    }

    #[test]
    fn final_step_emits_x0() {
        let s = cosine(100);
        let (a, b) = ddim_x0_coefs(&s, 3, 0, 0.0).unwrap();
        assert_eq!((a, b), (0.0, 1.0));
    }

    #[test]
    fn zero_eps_scales_x_t() {
        let s = cosine(100);
        let (a, _) = ddim_eps_coefs(&s, 10, 9, 0.0, EpsForm::StepAlpha).unwrap();
        assert!((a - 1.0 / s.alpha(10).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sigma_too_large_rejected() {
        let s = cosine(100);
        assert!(ddim_x0_coefs(&s, 10, 9, 2.0).is_err());
        assert!(ddim_sigma(&s, 10, 0, 1.0) == 0.0);
    }

    #[test]
    fn eps_forms_agree_without_skips() {
        let s = cosine(50);
        let full = respace(&s, 50).unwrap();
        for form in [EpsForm::AlphaBarRatio, EpsForm::StepAlpha] {
            assert!(check_eps_form(&full, form, 0.0, 1e-5).unwrap().consistent());
        }
        let skip = respace(&s, 10).unwrap();
        assert!(check_eps_form(&skip, EpsForm::AlphaBarRatio, 0.5, 1e-5).unwrap().consistent());
        assert!(!check_eps_form(&skip, EpsForm::StepAlpha, 0.0, 1e-5).unwrap().consistent());
    }

    #[test]
    fn oracle_closed_forms() {
        let s = cosine(100);
        let o = GaussianOracle::new(vec![0.0; 4], 1.0, [2, 2, 1], s.clone()).unwrap();
        let x = Tensor::<f64>::from_fn([1, 2, 2, 1], |i| i as f64 - 1.5);
        let e = o.eps_hat(&x, 40).unwrap();
        let k = (1.0 - s.alpha_bar(40)).sqrt();
        for (ev, xv) in e.data().iter().zip(x.data()) {
            assert!((ev - k * xv).abs() < 1e-12);
        }
        let m = vec![0.2; 4];
        let o = GaussianOracle::new(m, 0.09, [2, 2, 1], s.clone()).unwrap();
        let at_mean = Tensor::<f64>::full([1, 2, 2, 1], s.alpha_bar(40).sqrt() * 0.2);
        assert!(o.eps_hat(&at_mean, 40).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn sampling_is_batch_invariant() {
        let s = cosine(100);
        let o = GaussianOracle::new(vec![0.1; 4], 0.5, [2, 2, 1], s.clone()).unwrap();
        let mut cfg = SamplerConfig {
            steps: 10,
            eta: 0.5,
            seed: 3,
            batch: 5,
            ..Default::default()
        };
        let a: SampleOutput<f64> = sample(&o, &s, &cfg, 12, false).unwrap();
        cfg.batch = 2;
        let b: SampleOutput<f64> = sample(&o, &s, &cfg, 12, false).unwrap();
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn trace_has_decreasing_steps() {
        let s = cosine(100);
        let o = GaussianOracle::new(vec![0.0; 4], 1.0, [2, 2, 1], s.clone()).unwrap();
        let cfg = SamplerConfig {
            steps: 5,
            ..Default::default()
        };
        let out: SampleOutput<f32> = sample(&o, &s, &cfg, 3, true).unwrap();
        let tr = out.trajectory.unwrap();
        let ts: Vec<usize> = tr.points.iter().map(|p| p.t).collect();
        assert_eq!(ts, [100, 80, 60, 40, 20, 0]);
        assert!(tr.points.last().unwrap().mean_r.is_none());
        assert!(tr.to_csv().starts_with("t,mean_r,mean_abs_x\n100,0,"));
    }

    fn prediction(x0: f64, eps: f64, t: usize, s: &NoiseSchedule) -> (Tensor<f64>, Prediction<f64>) {
        let x0 = Tensor::full([1, 2, 2, 1], x0);
        let eps = Tensor::full([1, 2, 2, 1], eps);
        let x_t = crate::schedule::q_sample(&x0, t, &eps, s).unwrap();
        let r = Tensor::full([1, 2, 2, 1], 0.3);
        (x_t, Prediction { eps, x0, r })
    }

    #[test]
    fn clipping_passes_in_range_predictions() {
        let s = cosine(1000);
        let (x_t, p) = prediction(0.4, -0.7, 600, &s);
        let c = clip_prediction(&x_t, p.clone(), 600, &s).unwrap();
        assert!(c.eps.zip_map(&p.eps, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-9);
        assert_eq!(c.x0, p.x0);
        assert_eq!(c.r, p.r);
    }

    #[test]
    fn clipping_rederives_eps_from_the_clamped_image() {
        let s = cosine(1000);
        let (x_t, mut p) = prediction(3.0, 0.2, 1000, &s);
        p.x0 = Tensor::full([1, 2, 2, 1], -2.5);
        let c = clip_prediction(&x_t, p, 1000, &s).unwrap();
        let implied = crate::schedule::x0_from_eps(&x_t, &c.eps, 1000, &s).unwrap();
        assert!(implied.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(c.x0.data().iter().all(|&v| v == -1.0));
    }
}
