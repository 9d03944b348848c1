//! Training objectives and where their gradients are allowed to flow.
//!
//! All squared errors are averaged over every element. For the cascade,
//! `l_theta` depends on θ only and `l_phi` on φ only; the μ loss detaches
//! both mean estimates so its gradient reaches φ solely through `r`.

use serde::{Deserialize, Serialize};

use crate::casdm::{CasDm, ForwardVars, Variant};
use crate::error::{ensure, Result};
use crate::metricfn::{FeatureExtractor, MetricTransform};
use crate::netcore::{Graph, Var};
use crate::schedule::{per_item_coefs, NoiseSchedule};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub lambda_eps: f64,
    #[serde(default = "one")]
    pub lambda_x0: f64,
    #[serde(default = "one")]
    pub lambda_mu: f64,
    #[serde(default = "tenth")]
    pub lambda_lpips: f64,
}

fn one() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_eps: 1.0,
            lambda_x0: 1.0,
            lambda_mu: 1.0,
            lambda_lpips: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_eps", self.lambda_eps),
            ("lambda_x0", self.lambda_x0),
            ("lambda_mu", self.lambda_mu),
            ("lambda_lpips", self.lambda_lpips),
        ] {
            ensure!(v.is_finite() && v >= 0.0, "{name} must be finite and >= 0, got {v}");
        }
        Ok(())
    }
}

/// Scalar values of one training step's losses. Terms a variant does not
/// use are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Mean sampled step over the batch.
    pub t: f64,
    pub l_eps: f64,
    pub l_x0: f64,
    pub l_mu: f64,
    pub l_lpips: f64,
    pub l_theta: f64,
    pub l_phi: f64,
}

/// `(l_theta, l_phi)` for the cascade from its four terms
/// `[l_eps, l_x0, l_mu, l_lpips]`.
pub fn compose_losses(terms: [f64; 4], w: &LossWeights) -> (f64, f64) {
    let [e, x0, mu, lp] = terms;
    let l_theta = w.lambda_eps * e;
    let l_phi = w.lambda_x0 * x0 + w.lambda_mu * mu + w.lambda_lpips * lp;
    (l_theta, l_phi)
}

pub fn loss_eps<T: Real>(g: &mut Graph<T>, eps_true: Var, eps_pred: Var) -> Result<Var> {
    g.mse(eps_true, eps_pred)
}

pub fn loss_x0<T: Real>(g: &mut Graph<T>, x0_true: Var, x0_pred: Var) -> Result<Var> {
    g.mse(x0_true, x0_pred)
}

/// `‖μ̃ − (r·sg(μ_x0′) + (1−r)·sg(μ_ε′))‖²`; only `r` carries gradient.
pub fn loss_mu<T: Real>(g: &mut Graph<T>, mu_tilde: Var, mu_x0: Var, mu_eps: Var, r: Var) -> Result<Var> {
    let a = g.stop_gradient(mu_x0);
    let b = g.stop_gradient(mu_eps);
    let mixed = g.mix(a, b, r)?;
    g.mse(mu_tilde, mixed)
}

/// Feature distance between transformed images, averaged over the batch.
pub fn metric_loss<T: Real>(
    g: &mut Graph<T>,
    extractor: &FeatureExtractor,
    transform: MetricTransform,
    x0_true: Var,
    x0_pred: Var,
) -> Result<Var> {
    ensure!(g.shape(x0_true) == g.shape(x0_pred), "metric_loss: shape mismatch");
    let a = transform.apply(g, x0_true)?;
    let b = transform.apply(g, x0_pred)?;
    let fa = extractor.taps(g, a)?;
    let fb = extractor.taps(g, b)?;
    extractor.distance(g, &fa, &fb)
}

/// Tensor-level mean squared error, accumulated in `f64`.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ensure!(a.shape() == b.shape(), "mse: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossless() - y.to_f64_lossless();
            d * d
        })
        .sum();
    Ok(s / a.numel().max(1) as f64)
}

/// Metric side of the objective.
pub struct MetricLoss<'a> {
    pub extractor: &'a FeatureExtractor,
    pub transform: MetricTransform,
}

/// The graph nodes of one step's objective.
#[derive(Clone, Copy, Debug)]
pub struct Objectives {
    pub l_eps: Option<Var>,
    pub l_x0: Option<Var>,
    pub l_mu: Option<Var>,
    pub l_lpips: Option<Var>,
    /// Objective minimized by θ's optimizer (the whole network for
    /// single-network variants).
    pub l_theta: Var,
    /// Objective minimized by φ's optimizer; cascade only.
    pub l_phi: Option<Var>,
}

/// Inputs of one training step already placed on the graph.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'a> {
    pub x0: Var,
    pub eps: Var,
    pub x_t: Var,
    pub steps: &'a [usize],
}

fn weighted_sum<T: Real>(g: &mut Graph<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let s = g.scale(v, T::of(w));
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| crate::Error::invalid("empty objective"))
}

/// Builds every loss term the variant uses and composes the per-network
/// objectives.
pub fn build_objectives<T: Real>(
    g: &mut Graph<T>,
    model: &CasDm,
    fv: &ForwardVars,
    inp: StepInputs<'_>,
    sched: &NoiseSchedule,
    w: &LossWeights,
    metric: &MetricLoss<'_>,
) -> Result<Objectives> {
    let need = |v: Option<Var>, what: &str| v.ok_or_else(|| crate::Error::invalid(format!("forward pass lacks {what}")));
    let l_eps = match fv.eps_pred {
        Some(e) => Some(loss_eps(g, inp.eps, e)?),
        None => None,
    };
    let (l_x0, l_lpips) = match fv.x0_pred {
        Some(x0p) => (
            Some(loss_x0(g, inp.x0, x0p)?),
            Some(metric_loss(g, metric.extractor, metric.transform, inp.x0, x0p)?),
        ),
        None => (None, None),
    };
    let l_mu = match (fv.eps_pred, fv.x0_pred, fv.r) {
        (Some(e), Some(x0p), Some(r)) => {
            let (pa, pb) = per_item_coefs::<T>(inp.steps, |t| sched.posterior_coefs(t));
            let mu_tilde = g.axpby_per_item(pa.clone(), inp.x0, pb.clone(), inp.x_t)?;
            let mu_x0 = g.axpby_per_item(pa, x0p, pb, inp.x_t)?;
            let (ea, eb) = per_item_coefs::<T>(inp.steps, |t| sched.mu_from_eps_coefs(t));
            let mu_eps = g.axpby_per_item(ea, inp.x_t, eb, e)?;
            Some(loss_mu(g, mu_tilde, mu_x0, mu_eps, r)?)
        }
        _ => None,
    };
    let (l_theta, l_phi) = match model.variant() {
        Variant::Casdm => {
            let l_theta = weighted_sum(g, &[(w.lambda_eps, need(l_eps, "ε′")?)])?;
            let l_phi = weighted_sum(
                g,
                &[
                    (w.lambda_x0, need(l_x0, "x0′")?),
                    (w.lambda_mu, need(l_mu, "r")?),
                    (w.lambda_lpips, need(l_lpips, "x0′")?),
                ],
            )?;
            (l_theta, Some(l_phi))
        }
        Variant::DdpmEps => (weighted_sum(g, &[(w.lambda_eps, need(l_eps, "ε′")?)])?, None),
        Variant::DdpmX0 => (
            weighted_sum(
                g,
                &[(w.lambda_x0, need(l_x0, "x0′")?), (w.lambda_lpips, need(l_lpips, "x0′")?)],
            )?,
            None,
        ),
        Variant::Dual => (
            weighted_sum(
                g,
                &[
                    (w.lambda_eps, need(l_eps, "ε′")?),
                    (w.lambda_x0, need(l_x0, "x0′")?),
                    (w.lambda_mu, need(l_mu, "r")?),
                    (w.lambda_lpips, need(l_lpips, "x0′")?),
                ],
            )?,
            None,
        ),
    };
    Ok(Objectives {
        l_eps,
        l_x0,
        l_mu,
        l_lpips,
        l_theta,
        l_phi,
    })
}

impl Objectives {
    /// Reads the scalar values off the graph.
    pub fn report<T: Real>(&self, g: &Graph<T>, steps: &[usize]) -> LossReport {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().to_f64_lossless());
        LossReport {
            t: steps.iter().sum::<usize>() as f64 / steps.len().max(1) as f64,
            l_eps: val(self.l_eps),
            l_x0: val(self.l_x0),
            l_mu: val(self.l_mu),
            l_lpips: val(self.l_lpips),
            l_theta: val(Some(self.l_theta)),
            l_phi: val(self.l_phi),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_arithmetic() {
        let (t, p) = compose_losses([2.0, 3.0, 4.0, 5.0], &LossWeights::default());
        assert_eq!(t, 2.0);
        assert!((p - 7.5).abs() < 1e-12);
        let w = LossWeights {
            lambda_lpips: 0.0,
            ..Default::default()
        };
        assert_eq!(compose_losses([2.0, 3.0, 4.0, 5.0], &w).1, 7.0);
    }

    #[test]
    fn eps_loss_offset_is_squared() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn([2, 3], |i| i as f64 * 0.1));
        let b = g.input(Tensor::from_fn([2, 3], |i| i as f64 * 0.1 + 0.5));
        let l = loss_eps(&mut g, a, b).unwrap();
        assert!((g.value(l).item() - 0.25).abs() < 1e-15);
        let z = loss_x0(&mut g, a, a).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
    }

    #[test]
    fn mu_loss_with_equal_means_ignores_r() {
        let mut g = Graph::<f64>::new();
        let mt = g.input(Tensor::from_fn([1, 2, 2, 1], |i| i as f64));
        let mu = g.leaf(Tensor::from_fn([1, 2, 2, 1], |i| 0.3 * i as f64));
        let r = g.leaf(Tensor::full([1, 2, 2, 1], 0.4));
        let l = loss_mu(&mut g, mt, mu, mu, r).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(r).data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(mu).data().iter().all(|&v| v == 0.0));
        assert!(!grads.reached(mu));
    }

    #[test]
    fn weights_reject_negative() {
        let w = LossWeights {
            lambda_mu: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
