//! The cascaded model and its baselines.
//!
//! In the cascade, θ predicts the noise `ε′`, which is converted to a clean
//! image estimate `x0⋆` and *detached*; φ refines `x0⋆` into `x0′` and emits
//! a per-pixel mixing weight `r ∈ [0, 1]`. No gradient of anything computed
//! by φ can reach θ.
//!
//! The baselines share the same building blocks: `ddpm_eps` and `ddpm_x0`
//! are a single network predicting `ε′` or `x0′`, and `dual` is a single
//! network whose widened output carries `ε′`, `x0′` and `r` together.

pub mod net;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::netcore::{Graph, ParamStore, ParamVars, Var};
use crate::schedule::{per_item_coefs, NoiseSchedule};
use crate::tensor::{Real, Tensor};

pub use net::{sinusoidal_embedding, Architecture, Network, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DdpmEps,
    DdpmX0,
    Dual,
    Casdm,
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm_eps" => Ok(Self::DdpmEps),
            "ddpm_x0" => Ok(Self::DdpmX0),
            "dual" => Ok(Self::Dual),
            "casdm" => Ok(Self::Casdm),
            other => Err(crate::Error::invalid(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiInput {
    /// φ sees only the detached clean-image estimate.
    X0StarOnly,
    /// φ sees the detached estimate concatenated with the detached `ε′`.
    ConcatX0starEps,
}

/// The `[model]` block of an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "default_phi_arch")]
    pub phi_arch: Architecture,
    #[serde(default = "default_phi_input")]
    pub phi_input: PhiInput,
    pub channels: usize,
    pub blocks: usize,
    pub levels: usize,
    #[serde(default)]
    pub attention: Vec<bool>,
    #[serde(default = "default_groups")]
    pub norm_groups: usize,
    pub image_size: usize,
    pub image_channels: usize,
}

fn default_phi_arch() -> Architecture {
    Architecture::UnetLite
}

fn default_phi_input() -> PhiInput {
    PhiInput::X0StarOnly
}

fn default_groups() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Casdm,
            phi_arch: Architecture::UnetLite,
            phi_input: PhiInput::X0StarOnly,
            channels: 32,
            blocks: 2,
            levels: 2,
            attention: Vec::new(),
            norm_groups: 8,
            image_size: 8,
            image_channels: 1,
        }
    }
}

impl ModelConfig {
    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            channels: self.channels,
            blocks: self.blocks,
            levels: self.levels,
            attention: self.attention.clone(),
            time_embed: 0,
            norm_groups: self.norm_groups,
        }
    }

    /// Image shape `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.image_channels]
    }
}

/// Live (or shadow) weights of a model: θ always, φ for the cascade only.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub theta: ParamStore<T>,
    pub phi: Option<ParamStore<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            theta: self.theta.cast(),
            phi: self.phi.as_ref().map(ParamStore::cast),
        }
    }

    pub fn numel(&self) -> usize {
        self.theta.numel() + self.phi.as_ref().map_or(0, ParamStore::numel)
    }

    /// Flattens into one store with `theta.` / `phi.` prefixes.
    pub fn flatten(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        out.merge_prefixed("theta.", &self.theta).expect("distinct prefixes");
        if let Some(phi) = &self.phi {
            out.merge_prefixed("phi.", phi).expect("distinct prefixes");
        }
        out
    }

    pub fn unflatten(store: &ParamStore<T>, has_phi: bool) -> Self {
        Self {
            theta: store.extract_prefixed("theta."),
            phi: has_phi.then(|| store.extract_prefixed("phi.")),
        }
    }
}

/// Parameters bound on a graph.
pub struct BoundParams {
    pub theta: ParamVars,
    pub phi: Option<ParamVars>,
}

impl BoundParams {
    /// Binds as differentiable leaves named `theta.*` / `phi.*`.
    pub fn trainable<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>) -> Self {
        Self {
            theta: g.bind("theta.", &params.theta),
            phi: params.phi.as_ref().map(|p| g.bind("phi.", p)),
        }
    }

    /// Binds as constants, for inference.
    pub fn frozen<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>) -> Self {
        Self {
            theta: g.bind_frozen(&params.theta),
            phi: params.phi.as_ref().map(|p| g.bind_frozen(p)),
        }
    }
}

/// Graph handles produced by one forward pass. Which fields are present
/// depends on the variant.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardVars {
    pub eps_pred: Option<Var>,
    pub x0_star: Option<Var>,
    pub x0_pred: Option<Var>,
    pub r: Option<Var>,
}

/// One cascade forward pass, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct CasDmOutput<T = f32> {
    /// θ's noise prediction `ε′`, `[N, H, W, C]`.
    pub eps_pred: Tensor<T>,
    /// Clean image recovered from `ε′`, `[N, H, W, C]`.
    pub x0_star: Tensor<T>,
    /// φ's refined clean image `x0′`, `[N, H, W, C]`.
    pub x0_pred: Tensor<T>,
    /// Mixing weight, `[N, H, W, 1]`, in `[0, 1]`.
    pub r: Tensor<T>,
}

/// A model layout for one variant.
pub struct CasDm {
    config: ModelConfig,
    theta: Network,
    phi: Option<Network>,
}

impl CasDm {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let c = config.image_channels;
        ensure!(c >= 1, "image_channels must be >= 1");
        ensure!(config.image_size >= 1, "image_size must be >= 1");
        let spec = config.network_spec();
        let theta_out = match config.variant {
            Variant::Dual => 2 * c + 1,
            _ => c,
        };
        let theta = Network::new(Architecture::UnetLite, &spec, c, theta_out, false)?;
        let phi = match config.variant {
            Variant::Casdm => {
                let phi_in = match config.phi_input {
                    PhiInput::X0StarOnly => c,
                    PhiInput::ConcatX0starEps => 2 * c,
                };
                Some(Network::new(config.phi_arch, &spec, phi_in, c + 1, true)?)
            }
            _ => None,
        };
        Ok(Self { config, theta, phi })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn theta_net(&self) -> &Network {
        &self.theta
    }

    pub fn phi_net(&self) -> Option<&Network> {
        self.phi.as_ref()
    }

    /// Fresh parameters; θ and φ draw from independent seeds.
    pub fn init_params(&self, theta_seed: u64, phi_seed: u64) -> ModelParams<f32> {
        ModelParams {
            theta: self.theta.init_params(theta_seed),
            phi: self.phi.as_ref().map(|n| n.init_params(phi_seed)),
        }
    }

    pub fn check_params<T: Real>(&self, params: &ModelParams<T>) -> Result<()> {
        self.theta.check_params(&params.theta)?;
        match (&self.phi, &params.phi) {
            (Some(n), Some(p)) => n.check_params(p),
            (None, None) => Ok(()),
            (Some(_), None) => Err(crate::Error::invalid("missing φ parameters")),
            (None, Some(_)) => Err(crate::Error::invalid("unexpected φ parameters for this variant")),
        }
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x_t: Var, steps: &[usize]) -> Result<()> {
        let s = g.shape(x_t);
        let [h, w, c] = self.config.image_shape();
        ensure!(
            s.len() == 4 && s[1..] == [h, w, c],
            "input {s:?} does not match model image shape [N, {h}, {w}, {c}]"
        );
        ensure!(steps.len() == s[0], "need one step per batch item");
        Ok(())
    }

    /// θ: `x_t ↦ ε′`.
    pub fn forward_theta<T: Real>(
        &self,
        g: &mut Graph<T>,
        theta: &ParamVars,
        x_t: Var,
        steps: &[usize],
    ) -> Result<Var> {
        self.check_input(g, x_t, steps)?;
        ensure!(
            matches!(self.variant(), Variant::Casdm | Variant::DdpmEps),
            "forward_theta is only defined for ε-predicting θ"
        );
        self.theta.forward(g, theta, x_t, steps)
    }

    /// φ: detached `x0⋆` (plus detached `ε′` when configured) `↦ (x0′, r)`.
    pub fn forward_phi<T: Real>(
        &self,
        g: &mut Graph<T>,
        phi: &ParamVars,
        x0_star_detached: Var,
        eps_detached: Option<Var>,
        steps: &[usize],
    ) -> Result<(Var, Var)> {
        let net = self
            .phi
            .as_ref()
            .ok_or_else(|| crate::Error::invalid("variant has no φ network"))?;
        let input = match (self.config.phi_input, eps_detached) {
            (PhiInput::X0StarOnly, _) => x0_star_detached,
            (PhiInput::ConcatX0starEps, Some(e)) => g.concat_last(x0_star_detached, e)?,
            (PhiInput::ConcatX0starEps, None) => {
                return Err(crate::Error::invalid("φ input configured to include ε′ but none given"))
            }
        };
        let out = net.forward(g, phi, input, steps)?;
        let c = self.config.image_channels;
        let x0_pred = g.slice_last(out, 0, c)?;
        let r_raw = g.slice_last(out, c, 1)?;
        let r = g.sigmoid(r_raw);
        Ok((x0_pred, r))
    }

    /// θ then φ, with the stop-gradient between them.
    pub fn forward_cascade<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        x_t: Var,
        steps: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<ForwardVars> {
        ensure!(self.variant() == Variant::Casdm, "forward_cascade needs the casdm variant");
        for &t in steps {
            sched.check_step(t)?;
        }
        let phi = params
            .phi
            .as_ref()
            .ok_or_else(|| crate::Error::invalid("φ parameters not bound"))?;
        let eps_pred = self.forward_theta(g, &params.theta, x_t, steps)?;
        let (a, b) = per_item_coefs(steps, |t| sched.x0_from_eps_coefs(t));
        let x0_star = g.axpby_per_item(a, x_t, b, eps_pred)?;
        let x0_star_sg = g.stop_gradient(x0_star);
        let eps_sg = match self.config.phi_input {
            PhiInput::X0StarOnly => None,
            PhiInput::ConcatX0starEps => Some(g.stop_gradient(eps_pred)),
        };
        let (x0_pred, r) = self.forward_phi(g, phi, x0_star_sg, eps_sg, steps)?;
        Ok(ForwardVars {
            eps_pred: Some(eps_pred),
            x0_star: Some(x0_star),
            x0_pred: Some(x0_pred),
            r: Some(r),
        })
    }

    /// Forward pass appropriate to the configured variant.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        x_t: Var,
        steps: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<ForwardVars> {
        self.check_input(g, x_t, steps)?;
        let c = self.config.image_channels;
        match self.variant() {
            Variant::Casdm => self.forward_cascade(g, params, x_t, steps, sched),
            Variant::DdpmEps => Ok(ForwardVars {
                eps_pred: Some(self.forward_theta(g, &params.theta, x_t, steps)?),
                ..Default::default()
            }),
            Variant::DdpmX0 => Ok(ForwardVars {
                x0_pred: Some(self.theta.forward(g, &params.theta, x_t, steps)?),
                ..Default::default()
            }),
            Variant::Dual => {
                let out = self.theta.forward(g, &params.theta, x_t, steps)?;
                let eps_pred = g.slice_last(out, 0, c)?;
                let x0_pred = g.slice_last(out, c, c)?;
                let r_raw = g.slice_last(out, 2 * c, 1)?;
                let r = g.sigmoid(r_raw);
                Ok(ForwardVars {
                    eps_pred: Some(eps_pred),
                    x0_star: None,
                    x0_pred: Some(x0_pred),
                    r: Some(r),
                })
            }
        }
    }

    /// Cascade forward pass evaluated to values (no gradients kept).
    pub fn cascade_output(
        &self,
        params: &ModelParams<f32>,
        x_t: &Tensor<f32>,
        steps: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<CasDmOutput<f32>> {
        let mut g = Graph::new();
        let bound = BoundParams::frozen(&mut g, params);
        let x = g.input(x_t.clone());
        let v = self.forward_cascade(&mut g, &bound, x, steps, sched)?;
        Ok(CasDmOutput {
            eps_pred: g.value(v.eps_pred.unwrap()).clone(),
            x0_star: g.value(v.x0_star.unwrap()).clone(),
            x0_pred: g.value(v.x0_pred.unwrap()).clone(),
            r: g.value(v.r.unwrap()).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{x0_from_eps, ScheduleKind};

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            channels: 4,
            blocks: 1,
            levels: 2,
            norm_groups: 2,
            image_size: 4,
            image_channels: 1,
            ..Default::default()
        }
    }

    #[test]
    fn cascade_output_invariants() {
        let model = CasDm::new(small(Variant::Casdm)).unwrap();
        let params = model.init_params(1, 2);
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let x = Tensor::from_fn([2, 4, 4, 1], |i| ((i * 7) as f32).sin());
        let out = model.cascade_output(&params, &x, &[10, 90], &sched).unwrap();
        // zero-initialised φ head: x0′ = 0, r = ½
        assert_eq!(out.x0_pred.max_abs(), 0.0);
        assert!(out.r.data().iter().all(|&r| r == 0.5));
        assert_eq!(out.r.shape(), &[2, 4, 4, 1]);
        // x0⋆ recomputes bit-exactly per item
        for (i, &t) in [10usize, 90].iter().enumerate() {
            let xi = x.batch_slice(i, i + 1);
            let ei = out.eps_pred.batch_slice(i, i + 1);
            let expect = x0_from_eps(&xi, &ei, t, &sched).unwrap();
            assert_eq!(out.x0_star.batch_slice(i, i + 1), expect);
        }
    }

    #[test]
    fn dual_has_widened_output() {
        let model = CasDm::new(small(Variant::Dual)).unwrap();
        assert_eq!(model.theta_net().out_channels(), 3);
        assert!(model.phi_net().is_none());
        let model = CasDm::new(small(Variant::Casdm)).unwrap();
        assert_eq!(model.phi_net().unwrap().out_channels(), 2);
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!("ddpm_v".parse::<Variant>().is_err());
        assert_eq!("dual".parse::<Variant>().unwrap(), Variant::Dual);
    }
}
