//! Few-step diffusion sampler optimization at desk scale: learned noise
//! schedules for the deterministic sampling ODE, denoiser finetuning to the
//! learned schedule, and evaluation against analytic Gaussian-mixture
//! oracles.
//!
//! The guide under `book/` walks through the concepts; its code blocks are
//! compiled and run as this crate's doc-tests.

pub mod config;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod gmm;
pub mod io;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod sched_opt;
pub mod schedule;
pub mod stats;

pub use error::{Error, Result};

// The book's chapters double as doc-tests so the guide can never drift from
// the API. `cargo test --doc` runs every fenced block below.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub struct Intro;
    #[doc = include_str!("../../../book/src/schedules.md")]
    pub struct Schedules;
    #[doc = include_str!("../../../book/src/denoisers.md")]
    pub struct Denoisers;
    #[doc = include_str!("../../../book/src/sampling.md")]
    pub struct Sampling;
    #[doc = include_str!("../../../book/src/discretization-loss.md")]
    pub struct DiscretizationLoss;
    #[doc = include_str!("../../../book/src/two-stage.md")]
    pub struct TwoStage;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
