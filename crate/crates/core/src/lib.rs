//! Cascaded diffusion models at desk scale.
//!
//! A noise-predicting network θ feeds a detached clean-image estimate to a
//! refining network φ. Metric losses on φ's output therefore cannot disturb
//! θ's training. The crate carries its own small autodiff engine, the noise
//! schedules, the samplers, a fixed-weight feature extractor used both as a
//! loss and for evaluation, and the training loop.

pub mod casdm;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metricfn;
pub mod netcore;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use casdm::{CasDm, ModelConfig, ModelParams, Variant};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use tensor::{Real, Tensor};

/// Guide chapters, compiled so their snippets stay in sync with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quickstart.md")]
    struct Quickstart;
    #[doc = include_str!("../../../book/src/schedule.md")]
    struct Schedule;
    #[doc = include_str!("../../../book/src/model.md")]
    struct Model;
    #[doc = include_str!("../../../book/src/sampling.md")]
    struct Sampling;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/configuration.md")]
    struct Configuration;
    #[doc = include_str!("../../../book/src/formats.md")]
    struct Formats;
}
