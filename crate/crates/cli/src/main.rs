//! `casdm`: train, sample, evaluate and inspect cascaded diffusion models.
//!
//! Exit codes: 0 success, 2 config or argument error, 3 I/O or file-format
//! error, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use casdm::config::ExperimentConfig;
use casdm::data::{load_folder, load_tensor, save_tensor};
use casdm::eval::{proxy_fd, render_grid, EvalReport};
use casdm::losses::LossReport;
use casdm::metricfn::{load_extractor, Backbone, ExtractorSpec, MetricTransform};
use casdm::sampler::{check_eps_form, sample, EpsForm, ModelDenoiser, SamplerKind};
use casdm::schedule::respace;
use casdm::train::{self, load_checkpoint, read_state, run, TrainObserver, Trainer};
use casdm::{Error, NoiseSchedule, Result, Tensor};

const SAMPLES_FILE: &str = "samples.cdt";
const GRID_FILE: &str = "grid.png";
const TRAJECTORY_FILE: &str = "trajectory.csv";
const SUMMARY_FILE: &str = "summary.json";

#[derive(Parser)]
#[command(name = "casdm", version, about = "Cascaded diffusion models at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, or resume from a checkpoint.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Run directory for checkpoints and logs.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a loss line every this many steps.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// DDIM step count (defaults to the checkpoint's config).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-step trajectory CSV.
        #[arg(long)]
        trace: bool,
        #[arg(long, value_parser = parse_eps_form)]
        eps_form: Option<EpsForm>,
        /// Clamp clean-image predictions inside each step (`true`/`false`).
        #[arg(long)]
        clip_x0: Option<bool>,
        /// Full-length ancestral sampling instead of DDIM.
        #[arg(long)]
        ancestral: bool,
    },
    /// proxy-FD between a reference set and generated samples.
    Eval {
        /// Tensor file or folder of PNGs.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Sample directory (`samples.cdt` or PNGs) or tensor file.
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, default_value = "proxy_fd")]
        metric: String,
        #[arg(long, default_value = "lpips_avgpool")]
        backbone: Backbone,
        #[arg(long, default_value_t = 0)]
        extractor_seed: u64,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        /// JSON report path (defaults next to the generated samples).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write β, α and ᾱ per step as CSV.
    InspectSchedule {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Summarize a checkpoint directory.
    InspectCkpt { ckpt: PathBuf },
    /// Tile a `[N, H, W, C]` tensor file into a PNG grid.
    Grid {
        tensor: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        cols: Option<usize>,
    },
}

fn parse_eps_form(s: &str) -> std::result::Result<EpsForm, String> {
    match s {
        "alpha_bar_ratio" => Ok(EpsForm::AlphaBarRatio),
        "step_alpha" => Ok(EpsForm::StepAlpha),
        _ => Err(format!("unknown eps form `{s}` (alpha_bar_ratio | step_alpha)")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numerical(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            out,
            resume,
            log_every,
        } => cmd_train(&config, out, resume.as_deref(), log_every),
        Command::Sample {
            ckpt,
            steps,
            eta,
            n,
            seed,
            out,
            trace,
            eps_form,
            clip_x0,
            ancestral,
        } => {
            let opts = SampleOpts {
                steps,
                eta,
                n,
                seed,
                trace,
                eps_form,
                clip_x0,
                ancestral,
            };
            cmd_sample(&ckpt, &out, opts)
        }
        Command::Eval {
            reference,
            gen,
            metric,
            backbone,
            extractor_seed,
            resolution,
            report,
        } => {
            if metric != "proxy_fd" {
                return Err(Error::InvalidArgument(format!("unknown metric `{metric}`; only proxy_fd is available")));
            }
            cmd_eval(&reference, &gen, backbone, extractor_seed, resolution, report)
        }
        Command::InspectSchedule { config, out } => cmd_inspect_schedule(&config, &out),
        Command::InspectCkpt { ckpt } => cmd_inspect_ckpt(&ckpt),
        Command::Grid { tensor, out, cols } => render_grid(&load_tensor(&tensor)?, cols, &out),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

struct Progress {
    log_every: u64,
    last: Option<(u64, LossReport)>,
    evals: Vec<(u64, f64)>,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, step: u64, r: &LossReport) {
        if self.log_every > 0 && step % self.log_every == 0 {
            eprintln!(
                "step {step:>7}  l_eps {:.5}  l_x0 {:.5}  l_mu {:.3e}  l_lpips {:.5}",
                r.l_eps, r.l_x0, r.l_mu, r.l_lpips
            );
        }
        self.last = Some((step, *r));
    }

    fn on_checkpoint(&mut self, _step: u64, dir: &Path) {
        eprintln!("checkpoint {}", dir.display());
    }

    fn on_eval(&mut self, step: u64, r: &EvalReport) {
        eprintln!("step {step:>7}  proxy-FD {:.6}", r.value);
        self.evals.push((step, r.value));
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>, resume: Option<&Path>, log_every: u64) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let out = out.unwrap_or_else(|| {
        let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        PathBuf::from("runs").join(stem)
    });
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(cfg, ckpt)?,
        None => Trainer::new(cfg)?,
    };
    let mut progress = Progress {
        log_every,
        last: None,
        evals: Vec::new(),
    };
    let last = run(&mut trainer, &out, &mut progress)?;
    let losses = progress.last.map(|(step, r)| {
        json!({
            "step": step, "t": r.t, "l_eps": r.l_eps, "l_x0": r.l_x0, "l_mu": r.l_mu,
            "l_lpips": r.l_lpips, "l_theta": r.l_theta, "l_phi": r.l_phi,
        })
    });
    let evals: Vec<_> = progress
        .evals
        .iter()
        .map(|&(step, v)| json!({ "step": step, "proxy_fd": v }))
        .collect();
    let summary = json!({
        "steps": trainer.step_count(),
        "config_hash": trainer.config().hash(),
        "final_checkpoint": last.display().to_string(),
        "final_losses": losses,
        "evals": evals,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&out.join(SUMMARY_FILE), &text)?;
    println!("{}", last.display());
    Ok(())
}

struct SampleOpts {
    steps: Option<usize>,
    eta: Option<f64>,
    n: usize,
    seed: Option<u64>,
    trace: bool,
    eps_form: Option<EpsForm>,
    clip_x0: Option<bool>,
    ancestral: bool,
}

fn cmd_sample(ckpt: &Path, out: &Path, o: SampleOpts) -> Result<()> {
    let (cfg, model, params) = load_checkpoint(ckpt)?;
    let sched = NoiseSchedule::new(cfg.schedule.kind, cfg.schedule.steps)?;
    let mut sc = cfg.sample;
    if let Some(s) = o.steps {
        sc.steps = s;
    }
    if let Some(e) = o.eta {
        sc.eta = e;
    }
    if let Some(s) = o.seed {
        sc.seed = s;
    }
    if let Some(f) = o.eps_form {
        sc.eps_form = f;
    }
    if let Some(c) = o.clip_x0 {
        sc.clip_x0 = c;
    }
    if o.ancestral {
        sc.kind = SamplerKind::Ancestral;
    }
    if sc.kind == SamplerKind::Ddim {
        let rep = check_eps_form(&respace(&sched, sc.steps)?, sc.eps_form, sc.eta, 1e-5)?;
        if !rep.consistent() {
            eprintln!(
                "warning: eps form {:?} disagrees with the x0-based mean by {:.3e} at t={}->{}; \
                 alpha_bar_ratio is consistent under respacing",
                rep.form, rep.max_gap, rep.worst.0, rep.worst.1
            );
        }
    }
    let den = ModelDenoiser {
        model: &model,
        params: &params,
        sched: &sched,
    };
    let res = sample(&den, &sched, &sc, o.n, o.trace)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    save_tensor(&out.join(SAMPLES_FILE), &res.images)?;
    render_grid(&res.images, None, &out.join(GRID_FILE))?;
    if let Some(tr) = &res.trajectory {
        write_text(&out.join(TRAJECTORY_FILE), &tr.to_csv())?;
    }
    println!("{}", out.display());
    Ok(())
}

/// A tensor file, a folder of PNGs, or a sample directory holding
/// `samples.cdt`.
fn load_images(path: &Path) -> Result<Tensor<f32>> {
    if path.is_dir() {
        let packed = path.join(SAMPLES_FILE);
        if packed.is_file() {
            return load_tensor(&packed);
        }
        return Ok(load_folder(path)?.images().clone());
    }
    load_tensor(path)
}

fn cmd_eval(
    reference: &Path,
    gen: &Path,
    backbone: Backbone,
    seed: u64,
    resolution: usize,
    report: Option<PathBuf>,
) -> Result<()> {
    let a = load_images(reference)?;
    let b = load_images(gen)?;
    let c = a.channels();
    if a.rank() != 4 || b.rank() != 4 || b.channels() != c {
        return Err(Error::InvalidArgument(format!(
            "image sets must be [N, H, W, C] with equal C, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ex = load_extractor(&ExtractorSpec {
        backbone,
        in_channels: c,
        seed,
    })?;
    let rep = proxy_fd(&a, &b, &ex, MetricTransform { resolution })?;
    let path = report.unwrap_or_else(|| {
        if gen.is_dir() {
            gen.join("eval.json")
        } else {
            gen.with_extension("eval.json")
        }
    });
    let text = serde_json::to_string_pretty(&rep).expect("report serializes");
    write_text(&path, &text)?;
    eprintln!("proxy-FD (fixed in-repo extractor; not comparable to published FID)");
    println!("{}", rep.value);
    Ok(())
}

fn cmd_inspect_schedule(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let s = NoiseSchedule::new(cfg.schedule.kind, cfg.schedule.steps)?;
    let mut csv = String::from("t,beta,alpha,alpha_bar\n");
    for t in 1..=s.steps() {
        csv.push_str(&format!("{t},{},{},{}\n", s.beta(t), s.alpha(t), s.alpha_bar(t)));
    }
    write_text(out, &csv)
}

fn cmd_inspect_ckpt(ckpt: &Path) -> Result<()> {
    let state = read_state(ckpt)?;
    let (cfg, model, params) = load_checkpoint(ckpt)?;
    let ema = ckpt.join(train::EMA_FILE).is_file();
    println!("step: {}", state.step);
    println!("config_hash: {}", state.config_hash);
    println!("variant: {:?}", model.variant());
    println!("image: {:?}", cfg.model.image_shape());
    println!("schedule: {:?} T={}", cfg.schedule.kind, cfg.schedule.steps);
    println!("theta_params: {}", params.theta.numel());
    if let Some(phi) = &params.phi {
        println!("phi_params: {}", phi.numel());
    }
    println!("adam_steps_theta: {}", state.adam_steps_theta);
    if let Some(s) = state.adam_steps_phi {
        println!("adam_steps_phi: {s}");
    }
    println!("ema: {ema}");
    Ok(())
}
