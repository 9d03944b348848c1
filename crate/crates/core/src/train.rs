//! The training loop, checkpoints and resumption.
//!
//! Each step draws its batch, its steps `t` and its noise from streams keyed
//! by the step index, so a resumed run replays exactly the randomness of an
//! uninterrupted one. θ and φ are initialized from separate streams and
//! updated by separate optimizers from separate objectives.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::casdm::{BoundParams, CasDm, ModelParams};
use crate::config::ExperimentConfig;
use crate::data::{load_dataset, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::eval::{proxy_fd, EvalReport};
use crate::losses::{build_objectives, LossReport, MetricLoss, StepInputs};
use crate::metricfn::{load_extractor, FeatureExtractor};
use crate::netcore::params::{load_params, save_params};
use crate::netcore::{ema_update, Graph, OptimizerState, ParamStore};
use crate::rng;
use crate::sampler::{sample, ModelDenoiser, SampleOutput, SamplerConfig};
use crate::schedule::{per_item_coefs, NoiseSchedule};
use crate::tensor::{axpby_per_item, Tensor};

pub const LOSS_CSV: &str = "loss.csv";
pub const LOSS_CSV_HEADER: &str = "step,t,l_eps,l_x0,l_mu,l_lpips,l_theta,l_phi";
pub const EVAL_CSV: &str = "eval.csv";
pub const MODEL_FILE: &str = "model.cdm";
pub const OPTIM_FILE: &str = "optim.cdm";
pub const EMA_FILE: &str = "ema.cdm";
pub const STATE_FILE: &str = "state.json";

/// Directory name of the checkpoint taken after `step` steps.
pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:07}")
}

/// Contents of `state.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub step: u64,
    pub adam_steps_theta: u64,
    pub adam_steps_phi: Option<u64>,
    pub config_hash: String,
    /// Canonical TOML of the run's config.
    pub config: String,
}

/// Everything that evolves during training.
pub struct Trainer {
    cfg: ExperimentConfig,
    model: CasDm,
    sched: NoiseSchedule,
    data: Dataset,
    extractor: FeatureExtractor,
    batches: BatchSampler,
    params: ModelParams<f32>,
    opt_theta: OptimizerState,
    opt_phi: Option<OptimizerState>,
    ema: Option<ModelParams<f32>>,
    step: u64,
}

fn cfg_err(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

impl Trainer {
    /// Fresh run at step 0.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let model = CasDm::new(cfg.model.clone()).map_err(cfg_err)?;
        let sched = NoiseSchedule::new(cfg.schedule.kind, cfg.schedule.steps).map_err(cfg_err)?;
        let data = load_dataset(&cfg.data)?;
        let extractor = load_extractor(&cfg.loss.extractor_spec(cfg.model.image_channels))?;
        let batches = BatchSampler::new(data.len(), cfg.train.batch, cfg.train.seed)?;
        let seed = cfg.train.seed;
        let params = model.init_params(
            rng::derive_seed(seed, "theta-init", 0),
            rng::derive_seed(seed, "phi-init", 0),
        );
        let opt_theta = OptimizerState::new(&params.theta, cfg.train.lr);
        let opt_phi = params.phi.as_ref().map(|p| OptimizerState::new(p, cfg.train.lr));
        let ema = cfg.train.ema.then(|| params.clone());
        Ok(Self {
            cfg,
            model,
            sched,
            data,
            extractor,
            batches,
            params,
            opt_theta,
            opt_phi,
            ema,
            step: 0,
        })
    }

    /// Restores a run from a checkpoint directory. `cfg` must hash to the
    /// value recorded in the checkpoint.
    pub fn resume(cfg: ExperimentConfig, ckpt: &Path) -> Result<Self> {
        let state = read_state(ckpt)?;
        if state.config_hash != cfg.hash() {
            return Err(Error::Config(format!(
                "config hash {} differs from checkpoint {} ({}); refusing to resume",
                cfg.hash(),
                state.config_hash,
                ckpt.display()
            )));
        }
        let mut t = Self::new(cfg)?;
        let has_phi = t.params.phi.is_some();
        let model_path = ckpt.join(MODEL_FILE);
        let params = ModelParams::unflatten(&load_params(&model_path)?, has_phi);
        t.model.check_params(&params).map_err(|e| {
            Error::format(model_path.display().to_string(), e.to_string())
        })?;
        let optim_path = ckpt.join(OPTIM_FILE);
        if !optim_path.exists() {
            return Err(Error::io(
                &optim_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "optimizer state missing; cannot resume"),
            ));
        }
        let optim = load_params(&optim_path)?;
        let restore = |prefix: &str, p: &ParamStore<f32>, steps: u64| -> Result<OptimizerState> {
            let m = optim.extract_prefixed(&format!("{prefix}m."));
            let v = optim.extract_prefixed(&format!("{prefix}v."));
            if !m.same_layout(p) || !v.same_layout(p) {
                return Err(Error::format(optim_path.display().to_string(), format!("{prefix} moments do not match")));
            }
            Ok(OptimizerState {
                lr: t.cfg.train.lr,
                step: steps,
                first_moment: m,
                second_moment: v,
            })
        };
        t.opt_theta = restore("theta.", &params.theta, state.adam_steps_theta)?;
        t.opt_phi = match (&params.phi, state.adam_steps_phi) {
            (Some(p), Some(s)) => Some(restore("phi.", p, s)?),
            (None, None) => None,
            _ => return Err(Error::format(STATE_FILE, "φ optimizer state inconsistent with variant")),
        };
        if t.cfg.train.ema {
            let ema_path = ckpt.join(EMA_FILE);
            let ema = ModelParams::unflatten(&load_params(&ema_path)?, has_phi);
            t.model.check_params(&ema)?;
            t.ema = Some(ema);
        }
        t.params = params;
        t.step = state.step;
        Ok(t)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &CasDm {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    /// EMA weights when enabled, live weights otherwise.
    pub fn sampling_params(&self) -> &ModelParams<f32> {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Runs one optimization step and returns its losses.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let b = self.cfg.train.batch;
        let idx = self.batches.indices(self.step);
        let x0 = self.data.gather(&idx);
        let mut r = rng::stream(self.cfg.train.seed, "step-noise", self.step);
        let steps: Vec<usize> = (0..b).map(|_| r.random_range(1..=self.sched.steps())).collect();
        let eps: Tensor<f32> = rng::normal_tensor(&mut r, x0.shape());
        let (a, c) = per_item_coefs::<f32>(&steps, |t| self.sched.q_sample_coefs(t));
        let mut x_t = Tensor::zeros(x0.shape());
        axpby_per_item(&a, x0.data(), &c, eps.data(), x_t.data_mut());

        let mut g = Graph::<f32>::new();
        let bound = BoundParams::trainable(&mut g, &self.params);
        let x0v = g.input(x0);
        let epsv = g.input(eps);
        let xtv = g.input(x_t);
        let fv = self.model.forward(&mut g, &bound, xtv, &steps, &self.sched)?;
        let metric = MetricLoss {
            extractor: &self.extractor,
            transform: self.cfg.loss.transform(),
        };
        let inputs = StepInputs {
            x0: x0v,
            eps: epsv,
            x_t: xtv,
            steps: &steps,
        };
        let obj = build_objectives(&mut g, &self.model, &fv, inputs, &self.sched, &self.cfg.loss.weights(), &metric)?;
        let report = obj.report(&g, &steps);
        if !(report.l_theta.is_finite() && report.l_phi.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss at step {}", self.step + 1)));
        }
        let g_theta = g.backward(obj.l_theta)?.params_with_prefix("theta.");
        let g_phi = match obj.l_phi {
            Some(l) => Some(g.backward(l)?.params_with_prefix("phi.")),
            None => None,
        };
        drop(g);
        self.opt_theta.step(&mut self.params.theta, &g_theta)?;
        if let (Some(opt), Some(p), Some(gp)) = (self.opt_phi.as_mut(), self.params.phi.as_mut(), g_phi.as_ref()) {
            opt.step(p, gp)?;
        }
        if let Some(ema) = self.ema.as_mut() {
            let d = self.cfg.train.ema_decay;
            ema_update(&mut ema.theta, &self.params.theta, d)?;
            if let (Some(s), Some(l)) = (ema.phi.as_mut(), self.params.phi.as_ref()) {
                ema_update(s, l, d)?;
            }
        }
        self.step += 1;
        Ok(report)
    }

    /// Writes `dir/ckpt_{step}/` and returns its path.
    pub fn save_checkpoint(&self, out_dir: &Path) -> Result<PathBuf> {
        let dir = out_dir.join(checkpoint_name(self.step));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_params(&dir.join(MODEL_FILE), &self.params.flatten())?;
        let mut optim = ParamStore::new();
        optim.merge_prefixed("theta.m.", &self.opt_theta.first_moment)?;
        optim.merge_prefixed("theta.v.", &self.opt_theta.second_moment)?;
        if let Some(o) = &self.opt_phi {
            optim.merge_prefixed("phi.m.", &o.first_moment)?;
            optim.merge_prefixed("phi.v.", &o.second_moment)?;
        }
        save_params(&dir.join(OPTIM_FILE), &optim)?;
        if let Some(ema) = &self.ema {
            save_params(&dir.join(EMA_FILE), &ema.flatten())?;
        }
        let state = CheckpointState {
            step: self.step,
            adam_steps_theta: self.opt_theta.step,
            adam_steps_phi: self.opt_phi.as_ref().map(|o| o.step),
            config_hash: self.cfg.hash(),
            config: self.cfg.to_toml(),
        };
        let path = dir.join(STATE_FILE);
        let json = serde_json::to_string_pretty(&state).expect("state serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(dir)
    }

    /// Samples `n` images from the current sampling weights.
    pub fn sample(&self, n: usize) -> Result<SampleOutput<f32>> {
        self.sample_with(&self.cfg.sample, n)
    }

    /// Like [`Self::sample`] with a different sampler configuration.
    pub fn sample_with(&self, sampler: &SamplerConfig, n: usize) -> Result<SampleOutput<f32>> {
        let den = ModelDenoiser {
            model: &self.model,
            params: self.sampling_params(),
            sched: &self.sched,
        };
        sample(&den, &self.sched, sampler, n, false)
    }

    /// proxy-FD of `n` fresh samples against the training set.
    pub fn evaluate(&self, n: usize) -> Result<EvalReport> {
        self.evaluate_with(&self.cfg.sample, n)
    }

    pub fn evaluate_with(&self, sampler: &SamplerConfig, n: usize) -> Result<EvalReport> {
        let gen = self.sample_with(sampler, n)?;
        proxy_fd(self.data.images(), &gen.images, &self.extractor, self.cfg.loss.transform())
    }
}

/// Reads `state.json` of a checkpoint.
pub fn read_state(ckpt: &Path) -> Result<CheckpointState> {
    let path = ckpt.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Loads a checkpoint for inference: config, model and sampling weights
/// (EMA when present).
pub fn load_checkpoint(ckpt: &Path) -> Result<(ExperimentConfig, CasDm, ModelParams<f32>)> {
    let state = read_state(ckpt)?;
    let cfg = ExperimentConfig::from_toml(&state.config)?;
    if cfg.hash() != state.config_hash {
        return Err(Error::format(STATE_FILE, "embedded config does not match its hash"));
    }
    let model = CasDm::new(cfg.model.clone())?;
    let has_phi = model.phi_net().is_some();
    let ema = ckpt.join(EMA_FILE);
    let file = if ema.exists() { ema } else { ckpt.join(MODEL_FILE) };
    let params = ModelParams::unflatten(&load_params(&file)?, has_phi);
    model
        .check_params(&params)
        .map_err(|e| Error::format(file.display().to_string(), e.to_string()))?;
    Ok((cfg, model, params))
}

/// One CSV row of a loss report.
pub fn loss_row(step: u64, r: &LossReport) -> String {
    format!(
        "{step},{},{},{},{},{},{},{}",
        r.t, r.l_eps, r.l_x0, r.l_mu, r.l_lpips, r.l_theta, r.l_phi
    )
}

/// Per-checkpoint callbacks of [`run`].
pub trait TrainObserver {
    fn on_step(&mut self, _step: u64, _report: &LossReport) {}
    fn on_checkpoint(&mut self, _step: u64, _dir: &Path) {}
    fn on_eval(&mut self, _step: u64, _report: &EvalReport) {}
}

impl TrainObserver for () {}

/// Trains to `train.steps`, writing checkpoints, the loss CSV and (when
/// configured) the eval CSV under `out_dir`. A resumed trainer continues
/// the existing logs, dropping rows past its step.
pub fn run(trainer: &mut Trainer, out_dir: &Path, obs: &mut dyn TrainObserver) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let total = trainer.cfg.train.steps;
    let every = trainer.cfg.train.checkpoint_every;
    let eval_every = trainer.cfg.train.eval_every;
    let loss_path = out_dir.join(LOSS_CSV);
    let eval_path = out_dir.join(EVAL_CSV);
    let start = trainer.step;
    truncate_log(&loss_path, LOSS_CSV_HEADER, start)?;
    let mut log = open_append(&loss_path)?;
    let mut last = trainer.save_checkpoint(out_dir)?;
    obs.on_checkpoint(trainer.step, &last);
    if eval_every > 0 {
        truncate_log(&eval_path, "step,proxy_fd", start)?;
        if start == 0 {
            log_eval(trainer, &eval_path, obs)?;
        }
    }
    while trainer.step < total {
        let report = trainer.train_step()?;
        let step = trainer.step;
        writeln!(log, "{}", loss_row(step, &report)).map_err(|e| Error::io(&loss_path, e))?;
        obs.on_step(step, &report);
        if (every > 0 && step % every == 0) || step == total {
            log.flush().map_err(|e| Error::io(&loss_path, e))?;
            last = trainer.save_checkpoint(out_dir)?;
            obs.on_checkpoint(step, &last);
        }
        if eval_every > 0 && (step % eval_every == 0 || step == total) {
            log_eval(trainer, &eval_path, obs)?;
        }
    }
    log.flush().map_err(|e| Error::io(&loss_path, e))?;
    Ok(last)
}

fn log_eval(trainer: &Trainer, path: &Path, obs: &mut dyn TrainObserver) -> Result<()> {
    let rep = trainer.evaluate(trainer.cfg.train.eval_samples)?;
    let mut f = open_append(path)?;
    writeln!(f, "{},{}", trainer.step, rep.value).map_err(|e| Error::io(path, e))?;
    obs.on_eval(trainer.step, &rep);
    Ok(())
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Rewrites `path` keeping the header and rows whose leading step is at
/// most `keep_through`.
fn truncate_log(path: &Path, header: &str, keep_through: u64) -> Result<()> {
    let mut lines = vec![header.to_string()];
    if keep_through > 0 && path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if step.is_some_and(|s| s <= keep_through) {
                lines.push(line);
            }
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
