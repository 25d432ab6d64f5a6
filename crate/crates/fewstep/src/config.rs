//! Run configuration: one JSON document describes the data distribution,
//! the denoiser, the schedule family and every optimization knob, so a run
//! is reproducible from the config and a seed alone. Unknown keys are
//! rejected and the format version is checked.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserHandle, MlpDenoiser};
use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, GmmComponent};
use crate::mlp::MlpSpec;
use crate::schedule::{
    init_params_from_reference, rho_schedule, NoiseRange, Schedule, ScheduleParams,
};
use crate::sched_opt::{EstimatorKind, NoiseMode};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmConfig {
    pub dim: usize,
    pub components: Vec<GmmComponent>,
}

impl GmmConfig {
    pub fn build(&self) -> Result<GaussianMixture> {
        let gmm = GaussianMixture::new(self.components.clone())?;
        if gmm.dim() != self.dim {
            return Err(Error::Config(format!(
                "problem dim {} does not match component dim {}",
                self.dim,
                gmm.dim()
            )));
        }
        Ok(gmm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    AnalyticGmm,
    TrainableMlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    #[serde(default)]
    pub mlp: MlpSpec,
}

/// How the schedule is initialized before any optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleInit {
    /// Power-curve warm start; `rho = 1` is the uniform (arithmetic) grid.
    Rho { rho: f64 },
    /// Load a schedule JSON written by an earlier run.
    File { file: PathBuf },
    /// Literal noise levels (must match the configured range and step count).
    Sigmas { sigmas: Vec<f64> },
}

impl Default for ScheduleInit {
    fn default() -> Self {
        ScheduleInit::Rho { rho: 7.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub init: ScheduleInit,
}

impl ScheduleConfig {
    pub fn range(&self) -> Result<NoiseRange> {
        NoiseRange::new(self.sigma_min, self.sigma_max)
    }

    /// Resolve the initial schedule. Relative file paths are taken against
    /// `base_dir` (usually the config file's directory).
    pub fn initial_schedule(&self, base_dir: &Path) -> Result<Schedule> {
        let range = self.range()?;
        match &self.init {
            ScheduleInit::Rho { rho } => rho_schedule(range, self.n_steps, *rho),
            ScheduleInit::File { file } => {
                let path = if file.is_absolute() { file.clone() } else { base_dir.join(file) };
                let s: Schedule = serde_json::from_str(&std::fs::read_to_string(path)?)?;
                if s.n_steps() != self.n_steps || s.range() != range {
                    return Err(Error::Config(
                        "schedule file does not match the configured range/steps".into(),
                    ));
                }
                Ok(s)
            }
            ScheduleInit::Sigmas { sigmas } => {
                let s = Schedule::new(sigmas.clone(), range)?;
                if s.n_steps() != self.n_steps {
                    return Err(Error::Config(format!(
                        "literal schedule has {} steps, config says {}",
                        s.n_steps(),
                        self.n_steps
                    )));
                }
                Ok(s)
            }
        }
    }

    pub fn initial_params(&self, base_dir: &Path) -> Result<ScheduleParams> {
        init_params_from_reference(&self.initial_schedule(base_dir)?)
    }
}

/// Which per-level weighting Stage-2 trains under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// The schedule-induced weights λ_t on the scheduled levels.
    #[default]
    Learned,
    /// The pretraining objective: lognormal σ draws with the variance-scaled
    /// weight, ignoring the schedule.
    Original,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Scale on the discretization-loss gradient in the joint Stage-1 update.
    pub gamma: f64,
    pub batch_size: usize,
    /// Stage-1 iterations per outer alternation.
    pub stage1_iters: usize,
    /// Stage-2 iterations per outer alternation.
    pub stage2_iters: usize,
    /// Hard cap on outer alternations.
    pub max_outer: usize,
    /// Iterations of standard denoising pretraining before the two stages
    /// (the desk-scale stand-in for loading a pretrained model).
    pub pretrain_iters: usize,
    pub seed: u64,
    /// Step size for the schedule parameters.
    pub lr_schedule: f64,
    /// Step size for the denoiser parameters.
    pub lr_denoiser: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub estimator: EstimatorKind,
    pub weights: WeightMode,
    pub noise_mode: NoiseMode,
    /// Resample the data batch for every inner iteration; `false` matches
    /// the literal one-batch-per-outer-iteration pseudocode.
    pub resample_per_inner: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            batch_size: 256,
            stage1_iters: 500,
            stage2_iters: 500,
            max_outer: 1,
            pretrain_iters: 1000,
            seed: 0,
            lr_schedule: 1e-2,
            lr_denoiser: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            estimator: EstimatorKind::FullUnroll,
            weights: WeightMode::Learned,
            noise_mode: NoiseMode::Independent,
            resample_per_inner: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma = {} must be >= 0", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::Config("max_outer must be positive".into()));
        }
        for (name, v) in [
            ("lr_schedule", self.lr_schedule),
            ("lr_denoiser", self.lr_denoiser),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Evaluation knobs shared by the `eval` and `sample` front ends.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Paired seeds for global-error comparisons.
    pub n_seeds: usize,
    /// Dense reference grid size.
    pub fine_steps: usize,
    /// Batch size for distributional metrics.
    pub sample_count: usize,
    /// Random projections for the sliced distance.
    pub n_projections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_seeds: 64, fine_steps: 1000, sample_count: 256, n_projections: 64 }
    }
}

/// The complete experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub problem: GmmConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.problem.build()?;
        self.schedule.range()?;
        if self.schedule.n_steps < 2 {
            return Err(Error::Config("schedule.n_steps must be at least 2".into()));
        }
        self.run.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Instantiate the configured denoiser; the trainable kind starts from
    /// its seeded random initialization (pretraining is the driver's job).
    pub fn build_denoiser<R: rand::Rng>(&self, rng: &mut R) -> Result<DenoiserHandle> {
        let gmm = self.problem.build()?;
        match self.denoiser.kind {
            DenoiserKind::AnalyticGmm => Ok(DenoiserHandle::analytic(gmm)),
            DenoiserKind::TrainableMlp => Ok(DenoiserHandle::Mlp(MlpDenoiser::new(
                self.problem.dim,
                self.denoiser.mlp.clone(),
                rng,
            )?)),
        }
    }
}
