//! Stage 2: finetuning the trainable denoiser to a schedule, plus the outer
//! two-stage alternation driver.
//!
//! The discretization loss is bounded by a per-step weighted denoising loss
//! (convexity of the squared norm over the unroll weights):
//!
//! ```text
//! L_disc(σ) ≤ Σ_t λ_t ||D(x + σ_t ε, σ_t) - x||² + 2 σ_min² d
//! ```
//!
//! so the denoiser can be trained for a fixed schedule exactly like an
//! ordinary weighted denoising objective. Stage 2 draws one scheduled level
//! per sample (uniformly over the `N-1` weighted steps) and applies the
//! single-term estimator, scaled by `N-1` so its expectation matches the
//! full weighted sum. The additive constant is reported in the loss value
//! but never enters the gradient.
//!
//! The driver alternates: Stage 1 updates the schedule for the current
//! denoiser, Stage 2 updates the denoiser for the current schedule. Either
//! stage can be disabled by setting its iteration count to zero, which
//! yields the single-stage ablations.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DenoiserKind, ExperimentConfig, WeightMode};
use crate::denoiser::{Denoiser, DenoiserHandle};
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::optim::Adam;
use crate::rng::{normal_vec, standard_normal, stream, substream};
use crate::sampler::sample;
use crate::schedule::{weights_from_schedule, Schedule};
use crate::sched_opt::{
    disc_loss_with_noise, stage1_step, DiscBatch, Stage1Options, Stage1State,
};
use crate::stats::{sum_vecs, MeanStderr};

/// Lognormal noise-level draws with the variance-scaled weight used for
/// pretraining (and for the `original` finetuning ablation). The location is
/// tied to the data scale, matching the convention the defaults were tuned
/// under: ln σ centred on `ln(0.6 · s_data)` with spread 1.2.
#[derive(Debug, Clone, Copy)]
pub struct LognormalSigma {
    pub p_mean: f64,
    pub p_std: f64,
    pub s_data: f64,
}

impl LognormalSigma {
    pub fn for_data(gmm: &GaussianMixture) -> Self {
        let s_data = gmm.data_std();
        Self { p_mean: (0.6 * s_data).ln(), p_std: 1.2, s_data }
    }

    /// Draw a level, clamped into the supported range.
    pub fn draw<R: Rng>(&self, range: crate::schedule::NoiseRange, rng: &mut R) -> f64 {
        let z = standard_normal(rng);
        (self.p_mean + self.p_std * z).exp().clamp(range.sigma_min(), range.sigma_max())
    }

    /// `(σ² + s_data²) / (σ · s_data)²`: keeps the weighted loss O(1) across
    /// the whole range.
    pub fn weight(&self, sigma: f64) -> f64 {
        let s2 = self.s_data * self.s_data;
        (sigma * sigma + s2) / (sigma * sigma * s2)
    }
}

/// Upper-bound loss with explicit weights, so weight sensitivity is
/// testable. Returns (value without the constant, θ-gradient).
fn ub_loss_terms<R: Rng>(
    h: &DenoiserHandle,
    s: &Schedule,
    lambdas: &[f64],
    xs: &[Vec<f64>],
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let mlp = h.as_mlp()?;
    let sig = s.sigmas();
    let n = sig.len();
    let dim = mlp.dim();
    let scale = (n - 1) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(xs.len());
    for x in xs {
        let t = rng.gen_range(0..n - 1);
        let eps = normal_vec(rng, dim);
        let noisy: Vec<f64> = (0..dim).map(|j| x[j] + sig[t] * eps[j]).collect();
        let (loss, grad) =
            mlp.mlp().forward_backward(&noisy, sig[t], x, scale * lambdas[t]);
        value += loss;
        grads.push(grad);
    }
    let inv = 1.0 / xs.len() as f64;
    let mut grad = sum_vecs(mlp.mlp().param_count(), &grads);
    for g in &mut grad {
        *g *= inv;
    }
    Ok((value * inv, grad))
}

/// Single-draw Monte-Carlo estimator of the Jensen upper bound and its
/// parameter gradient. The reported value includes the `2 σ_min² d`
/// constant; the gradient does not (it is constant in θ).
pub fn ub_loss<R: Rng>(
    h: &DenoiserHandle,
    s: &Schedule,
    xs: &[Vec<f64>],
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if xs.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let lambdas = weights_from_schedule(s).lambdas().to_vec();
    let dim = h.dim();
    let (value, grad) = ub_loss_terms(h, s, &lambdas, xs, rng)?;
    let constant = 2.0 * s.sigma_min() * s.sigma_min() * dim as f64;
    Ok((value + constant, grad))
}

/// Monte-Carlo comparison of the discretization loss and the full upper
/// bound (trajectory form) on common draws, per sample:
///
/// ```text
/// lhs = || x_{N-1} - (x + σ_min ε') ||²
/// rhs = Σ_t λ_t || D(x_t, σ_t) - x ||² + 2 σ_min² d
/// ```
///
/// With the target noise matched to the trajectory noise (`ε' = ε`, the
/// shared mode) the inequality is pointwise convexity and holds per sample.
/// With independent `ε'` the derivation additionally drops the cross term
/// `2 σ_min ⟨Σλ(D-x), ε⟩`, which is systematically positive for coarse
/// trajectories and can slightly exceed the convexity slack — so in that
/// mode the estimate may sit a fraction of a percent on either side.
#[derive(Debug, Clone)]
pub struct JensenCheck {
    pub disc: MeanStderr,
    pub bound: MeanStderr,
    /// Paired `rhs - lhs`.
    pub gap: MeanStderr,
}

pub fn jensen_check_with_mode<D: Denoiser + ?Sized, R: Rng>(
    h: &D,
    s: &Schedule,
    xs: &[Vec<f64>],
    mode: crate::sched_opt::NoiseMode,
    rng: &mut R,
) -> Result<JensenCheck> {
    if xs.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let sig = s.sigmas();
    let n = sig.len();
    let dim = xs[0].len();
    let smin = s.sigma_min();
    let smax = s.sigma_max();
    let lambdas = weights_from_schedule(s).lambdas().to_vec();
    let constant = 2.0 * smin * smin * dim as f64;
    let mut lhs = Vec::with_capacity(xs.len());
    let mut rhs = Vec::with_capacity(xs.len());
    for x in xs {
        let eps = normal_vec(rng, dim);
        let eps_t = match mode {
            crate::sched_opt::NoiseMode::Independent => normal_vec(rng, dim),
            crate::sched_opt::NoiseMode::Shared => eps.clone(),
        };
        let x0: Vec<f64> = (0..dim).map(|j| x[j] + smax * eps[j]).collect();
        let (_, traj) = sample(h, s, &x0)?;
        let pre = traj.iterates.last().unwrap();
        let mut l = 0.0;
        for j in 0..dim {
            let r = pre[j] - (x[j] + smin * eps_t[j]);
            l += r * r;
        }
        lhs.push(l);
        let mut b = constant;
        for t in 0..n - 1 {
            let mut sq = 0.0;
            for j in 0..dim {
                let r = traj.denoised[t][j] - x[j];
                sq += r * r;
            }
            b += lambdas[t] * sq;
        }
        rhs.push(b);
    }
    let gaps: Vec<f64> = rhs.iter().zip(&lhs).map(|(r, l)| r - l).collect();
    Ok(JensenCheck {
        disc: MeanStderr::from_samples(&lhs),
        bound: MeanStderr::from_samples(&rhs),
        gap: MeanStderr::from_samples(&gaps),
    })
}

/// [`jensen_check_with_mode`] with the target noise matched to the
/// trajectory noise.
pub fn jensen_check<D: Denoiser + ?Sized, R: Rng>(
    h: &D,
    s: &Schedule,
    xs: &[Vec<f64>],
    rng: &mut R,
) -> Result<JensenCheck> {
    jensen_check_with_mode(h, s, xs, crate::sched_opt::NoiseMode::Shared, rng)
}

/// Stage-2 state: the trainable denoiser, the (frozen) schedule and the
/// optimizer moments for θ.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub denoiser: DenoiserHandle,
    pub schedule: Schedule,
    opt: Adam,
    pub iter: usize,
    loss_window: VecDeque<f64>,
}

impl FinetuneState {
    pub fn new(
        denoiser: DenoiserHandle,
        schedule: Schedule,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let count = denoiser.as_mlp()?.mlp().param_count();
        Ok(Self {
            denoiser,
            schedule,
            opt: Adam::new(lr, beta1, beta2, epsilon, count),
            iter: 0,
            loss_window: VecDeque::with_capacity(256),
        })
    }

    /// The driver swaps in the Stage-1 result between phases; Stage 2 itself
    /// never touches the schedule.
    pub fn set_schedule(&mut self, s: Schedule) {
        self.schedule = s;
    }

    pub fn recent_losses(&self) -> impl Iterator<Item = &f64> {
        self.loss_window.iter()
    }
}

/// Stage-2 weighting knobs.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Options {
    pub mode: WeightMode,
    pub lognormal: LognormalSigma,
}

/// One adaptive-moment update of θ. Returns the loss the gradient was taken
/// from (including the bound constant in the learned mode).
pub fn stage2_step<R: Rng>(
    state: &mut FinetuneState,
    xs: &[Vec<f64>],
    opts: Stage2Options,
    rng: &mut R,
) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let (loss, grad) = match opts.mode {
        WeightMode::Learned => ub_loss(&state.denoiser, &state.schedule, xs, rng)?,
        WeightMode::Original => {
            let mlp = state.denoiser.as_mlp()?;
            let dim = mlp.dim();
            let range = state.schedule.range();
            let mut value = 0.0;
            let mut grads = Vec::with_capacity(xs.len());
            for x in xs {
                let sigma = opts.lognormal.draw(range, rng);
                let eps = normal_vec(rng, dim);
                let noisy: Vec<f64> = (0..dim).map(|j| x[j] + sigma * eps[j]).collect();
                let (l, g) =
                    mlp.mlp().forward_backward(&noisy, sigma, x, opts.lognormal.weight(sigma));
                value += l;
                grads.push(g);
            }
            let inv = 1.0 / xs.len() as f64;
            let mut grad = sum_vecs(mlp.mlp().param_count(), &grads);
            for g in &mut grad {
                *g *= inv;
            }
            (value * inv, grad)
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "stage-2 iter {}: loss {loss}",
            state.iter
        )));
    }
    let mlp = state.denoiser.as_mlp_mut()?;
    state.opt.step(mlp.mlp_mut().params_mut(), &grad);
    state.iter += 1;
    if self_window_full(&state.loss_window) {
        state.loss_window.pop_front();
    }
    state.loss_window.push_back(loss);
    Ok(loss)
}

fn self_window_full(w: &VecDeque<f64>) -> bool {
    w.len() >= 256
}

/// Standard denoising pretraining: lognormal σ draws with the
/// variance-scaled weight. The desk-scale stand-in for "pretrained model".
pub fn pretrain_denoiser<R: Rng>(
    h: &mut DenoiserHandle,
    gmm: &GaussianMixture,
    range: crate::schedule::NoiseRange,
    lognormal: LognormalSigma,
    iters: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<()> {
    let count = h.as_mlp()?.mlp().param_count();
    let mut opt = Adam::new(lr, 0.9, 0.999, 1e-8, count);
    let dim = gmm.dim();
    for _ in 0..iters {
        let xs = gmm.sample_batch(batch_size, rng);
        let mlp = h.as_mlp()?;
        let mut grads = Vec::with_capacity(batch_size);
        for x in &xs {
            let sigma = lognormal.draw(range, rng);
            let eps = normal_vec(rng, dim);
            let noisy: Vec<f64> = (0..dim).map(|j| x[j] + sigma * eps[j]).collect();
            let (_, g) = mlp.mlp().forward_backward(&noisy, sigma, x, lognormal.weight(sigma));
            grads.push(g);
        }
        let mut grad = sum_vecs(count, &grads);
        let inv = 1.0 / batch_size as f64;
        for g in &mut grad {
            *g *= inv;
        }
        opt.step(h.as_mlp_mut()?.mlp_mut().params_mut(), &grad);
    }
    Ok(())
}

/// One row of the run's loss history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRow {
    pub outer: usize,
    pub stage: String,
    pub inner: usize,
    pub disc_loss: Option<f64>,
    pub diff_loss: Option<f64>,
    pub stderr: Option<f64>,
}

/// Outcome of the full two-stage run.
#[derive(Debug, Clone)]
pub struct TwoStageOutput {
    pub schedule: Schedule,
    pub denoiser: DenoiserHandle,
    pub history: Vec<HistoryRow>,
    pub converged: bool,
    pub outer_iters_run: usize,
}

/// The full alternation: initialize the schedule from the configured warm
/// start, pretrain the trainable denoiser if requested, then alternate
/// `stage1_iters` schedule updates with `stage2_iters` denoiser updates
/// until the outer budget or the convergence window is hit (the moving
/// average of the outer-evaluation loss changes by less than 1e-4 relative
/// over 50 outer steps). Deterministic for a fixed seed.
pub fn run_two_stage(cfg: &ExperimentConfig, base_dir: &Path) -> Result<TwoStageOutput> {
    cfg.validate()?;
    let run = &cfg.run;
    let master = run.seed;
    let gmm = cfg.problem.build()?;
    let range = cfg.schedule.range()?;
    let lognormal = LognormalSigma::for_data(&gmm);

    let mut denoiser = cfg.build_denoiser(&mut stream(master, "init"))?;
    if cfg.denoiser.kind == DenoiserKind::TrainableMlp && run.pretrain_iters > 0 {
        pretrain_denoiser(
            &mut denoiser,
            &gmm,
            range,
            lognormal,
            run.pretrain_iters,
            run.batch_size,
            run.lr_denoiser,
            &mut stream(master, "pretrain"),
        )?;
    }
    if cfg.denoiser.kind == DenoiserKind::AnalyticGmm && run.stage2_iters > 0 {
        return Err(Error::DenoiserKind(
            "stage-2 iterations require the trainable denoiser".into(),
        ));
    }

    let params = cfg.schedule.initial_params(base_dir)?;
    let mut s1 = Stage1State::new(params, run.lr_schedule, run.beta1, run.beta2, run.epsilon);
    let s1_opts = Stage1Options {
        gamma: run.gamma,
        estimator: run.estimator,
        noise_mode: run.noise_mode,
    };
    let mut schedule = s1.schedule()?;

    // Stage-2 optimizer moments persist across outer iterations.
    let mut theta_opt: Option<Adam> = match &denoiser {
        DenoiserHandle::Mlp(m) => Some(Adam::new(
            run.lr_denoiser,
            run.beta1,
            run.beta2,
            run.epsilon,
            m.mlp().param_count(),
        )),
        DenoiserHandle::AnalyticGmm(_) => None,
    };

    // Fixed CRN evaluation batch for the convergence metric.
    let mut eval_rng = stream(master, "eval");
    let eval_xs = gmm.sample_batch(run.batch_size.max(256), &mut eval_rng);
    let eval_batch = DiscBatch::draw(eval_xs, run.noise_mode, &mut eval_rng);

    let mut history = Vec::new();
    let mut outer_losses: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut outer_run = 0;

    for outer in 0..run.max_outer {
        outer_run = outer + 1;
        let outer_batch = if run.resample_per_inner {
            None
        } else {
            Some(gmm.sample_batch(run.batch_size, &mut substream(master, "data", outer as u64)))
        };

        for inner in 0..run.stage1_iters {
            let counter = (outer * run.stage1_iters + inner) as u64;
            let xs = match &outer_batch {
                Some(b) => b.clone(),
                None => gmm
                    .sample_batch(run.batch_size, &mut substream(master, "data-stage1", counter)),
            };
            let mut rng = substream(master, "stage1", counter);
            let report = stage1_step(&denoiser, &mut s1, &xs, s1_opts, &mut rng)
                .map_err(|e| stage_context(e, "stage1", outer, inner))?;
            history.push(HistoryRow {
                outer,
                stage: "stage1".into(),
                inner,
                disc_loss: Some(report.disc_loss),
                diff_loss: Some(report.diff_loss),
                stderr: Some(report.disc_stderr),
            });
        }
        schedule = s1.schedule()?;

        if run.stage2_iters > 0 {
            let mut state = FinetuneState {
                denoiser,
                schedule: schedule.clone(),
                opt: theta_opt.take().expect("trainable denoiser has optimizer state"),
                iter: outer * run.stage2_iters,
                loss_window: VecDeque::new(),
            };
            let opts = Stage2Options { mode: run.weights, lognormal };
            for inner in 0..run.stage2_iters {
                let counter = (outer * run.stage2_iters + inner) as u64;
                let xs = match &outer_batch {
                    Some(b) => b.clone(),
                    None => gmm.sample_batch(
                        run.batch_size,
                        &mut substream(master, "data-stage2", counter),
                    ),
                };
                let mut rng = substream(master, "stage2", counter);
                let loss = stage2_step(&mut state, &xs, opts, &mut rng)
                    .map_err(|e| stage_context(e, "stage2", outer, inner))?;
                history.push(HistoryRow {
                    outer,
                    stage: "stage2".into(),
                    inner,
                    disc_loss: None,
                    diff_loss: Some(loss),
                    stderr: None,
                });
            }
            denoiser = state.denoiser;
            theta_opt = Some(state.opt);
        }

        let eval = disc_loss_with_noise(&denoiser, &schedule, &eval_batch)?;
        history.push(HistoryRow {
            outer,
            stage: "outer-eval".into(),
            inner: 0,
            disc_loss: Some(eval.value),
            diff_loss: None,
            stderr: Some(eval.stderr),
        });
        outer_losses.push(eval.value);

        let w = 50;
        if outer_losses.len() >= 2 * w {
            let recent: f64 = outer_losses[outer_losses.len() - w..].iter().sum::<f64>() / w as f64;
            let prev: f64 = outer_losses[outer_losses.len() - 2 * w..outer_losses.len() - w]
                .iter()
                .sum::<f64>()
                / w as f64;
            if (recent - prev).abs() < 1e-4 * prev.abs().max(1e-300) {
                converged = true;
                break;
            }
        }
    }

    Ok(TwoStageOutput { schedule, denoiser, history, converged, outer_iters_run: outer_run })
}

fn stage_context(e: Error, stage: &str, outer: usize, inner: usize) -> Error {
    match e {
        Error::NonFinite(msg) => {
            Error::NonFinite(format!("{stage} outer {outer} inner {inner}: {msg}"))
        }
        other => other,
    }
}

/// One row of the exported weighting scheme.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightRow {
    pub t: usize,
    pub lambda: f64,
    pub active_weight: f64,
}

/// The explicit per-step weights λ_t together with the active weights
/// `λ_t / N` that include the uniform level-sampling likelihood.
pub fn export_weight_scheme(s: &Schedule) -> Vec<WeightRow> {
    let w = weights_from_schedule(s);
    let n = s.n_steps() as f64;
    w.lambdas()
        .iter()
        .enumerate()
        .map(|(t, &l)| WeightRow { t, lambda: l, active_weight: l / n })
        .collect()
}
