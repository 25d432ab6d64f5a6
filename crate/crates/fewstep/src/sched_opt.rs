//! Stage 1: Monte-Carlo estimation of the discretization loss and its
//! gradient with respect to the schedule parameters.
//!
//! The discretization loss measures how far the unrolled sampler lands from
//! a minimally-noisy target when started from a noised data point:
//!
//! ```text
//! L_disc(σ) = E_{x, ε, ε'} || Σ_i λ_i D(x_i, σ_i) + (σ_min/σ_max) x_0
//!                              - (x + σ_min ε') ||²
//! x_0 = x + σ_max ε,   ε ⟂ ε'
//! ```
//!
//! Since `Σ λ_i(D_i - x) = x_{N-1} - x - σ_min ε`, the per-sample loss is
//! just `|| x_{N-1} - (x + σ_min ε') ||²` with `x_{N-1}` the pre-projection
//! iterate; the independent target noise leaves an irreducible floor of
//! `2 σ_min² d`.
//!
//! Three gradient estimators are provided:
//!
//! - `efficient`: the per-step by-product formula
//!   `∂L/∂σ_t ≈ 2 λ_t ⟨x_{N-1} - target, ∂D(x_t, σ_t)/∂σ_t⟩`, which costs
//!   one forward trajectory plus one σ-derivative per step but treats the
//!   weights and earlier iterates as constants in `σ_t`;
//! - `full-unroll`: exact reverse accumulation through the entire unrolled
//!   computation, including `λ(σ)` and the dependence of every iterate on
//!   earlier levels — cheap at desk scale and the default;
//! - `finite-diff`: central differences with common random numbers, the
//!   oracle the other two are measured against.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::normal_vec;
use crate::schedule::{
    chain_sigma_grad_to_v, schedule_from_params, weights_from_schedule, Schedule, ScheduleParams,
};
use crate::stats::{dot, par_map_indexed, sum_vecs, MeanStderr};

/// Which gradient estimator drives the schedule update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Efficient,
    FullUnroll,
    FiniteDiff,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EstimatorKind::Efficient => "efficient",
            EstimatorKind::FullUnroll => "full-unroll",
            EstimatorKind::FiniteDiff => "finite-diff",
        };
        f.write_str(s)
    }
}

/// How the trajectory noise `ε` and the target noise `ε'` relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Independent draws, the default reading of the loss.
    #[default]
    Independent,
    /// `ε' = ε`, the ablation variant.
    Shared,
}

/// A data batch with its pinned noise draws, so different estimators can be
/// evaluated on common random numbers.
#[derive(Debug, Clone)]
pub struct DiscBatch {
    pub xs: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    pub eps_target: Vec<Vec<f64>>,
}

impl DiscBatch {
    pub fn draw<R: Rng>(xs: Vec<Vec<f64>>, mode: NoiseMode, rng: &mut R) -> Self {
        let dim = xs.first().map_or(0, Vec::len);
        let eps: Vec<Vec<f64>> = xs.iter().map(|_| normal_vec(rng, dim)).collect();
        let eps_target = match mode {
            NoiseMode::Independent => xs.iter().map(|_| normal_vec(rng, dim)).collect(),
            NoiseMode::Shared => eps.clone(),
        };
        Self { xs, eps, eps_target }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// Monte-Carlo estimate of the discretization loss, with gradients when the
/// estimator computes them (empty vectors otherwise).
#[derive(Debug, Clone)]
pub struct DiscLossEstimate {
    pub value: f64,
    pub stderr: f64,
    pub grad_v: Vec<f64>,
    pub grad_sigma: Vec<f64>,
    pub mc_batch: usize,
    pub estimator_kind: EstimatorKind,
}

/// Per-sample forward pass shared by the value and gradient paths: the
/// trajectory down to the `σ_min` iterate plus the loss residual.
struct ForwardPass {
    iterates: Vec<Vec<f64>>,
    denoised: Vec<Vec<f64>>,
    /// `2 (x_{N-1} - target)`, the loss gradient seed.
    residual2: Vec<f64>,
    loss: f64,
}

fn forward_one<D: Denoiser + ?Sized>(
    h: &D,
    s: &Schedule,
    x: &[f64],
    eps: &[f64],
    eps_target: &[f64],
) -> Result<ForwardPass> {
    let sig = s.sigmas();
    let n = sig.len();
    let dim = x.len();
    let smax = s.sigma_max();
    let smin = s.sigma_min();
    let mut iterates = Vec::with_capacity(n);
    let mut denoised = Vec::with_capacity(n - 1);
    let mut cur: Vec<f64> = (0..dim).map(|j| x[j] + smax * eps[j]).collect();
    for i in 0..n - 1 {
        let d = h.denoise(&cur, sig[i])?;
        let ratio = sig[i + 1] / sig[i];
        let next: Vec<f64> =
            (0..dim).map(|j| ratio * cur[j] + (1.0 - ratio) * d[j]).collect();
        iterates.push(cur);
        denoised.push(d);
        cur = next;
    }
    let mut loss = 0.0;
    let mut residual2 = vec![0.0; dim];
    for j in 0..dim {
        let r = cur[j] - (x[j] + smin * eps_target[j]);
        loss += r * r;
        residual2[j] = 2.0 * r;
    }
    iterates.push(cur);
    Ok(ForwardPass { iterates, denoised, residual2, loss })
}

/// Value-only Monte-Carlo estimate on pinned noise.
pub fn disc_loss_with_noise<D: Denoiser + ?Sized>(
    h: &D,
    s: &Schedule,
    batch: &DiscBatch,
) -> Result<DiscLossEstimate> {
    if batch.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let losses: Vec<Result<f64>> = par_map_indexed(batch.len(), |b| {
        Ok(forward_one(h, s, &batch.xs[b], &batch.eps[b], &batch.eps_target[b])?.loss)
    });
    let losses: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
    let ms = MeanStderr::from_samples(&losses);
    Ok(DiscLossEstimate {
        value: ms.mean,
        stderr: ms.stderr,
        grad_v: vec![],
        grad_sigma: vec![],
        mc_batch: losses.len(),
        estimator_kind: EstimatorKind::FullUnroll,
    })
}

/// Value-only Monte-Carlo estimate, drawing noise from the stream.
pub fn disc_loss<D: Denoiser + ?Sized, R: Rng>(
    h: &D,
    s: &Schedule,
    xs: &[Vec<f64>],
    mode: NoiseMode,
    rng: &mut R,
) -> Result<DiscLossEstimate> {
    let batch = DiscBatch::draw(xs.to_vec(), mode, rng);
    disc_loss_with_noise(h, s, &batch)
}

/// Per-step σ-gradient terms of the by-product estimator, separated out so
/// the weight sensitivity can be probed directly in tests.
fn efficient_sigma_terms<D: Denoiser + ?Sized>(
    h: &D,
    s: &Schedule,
    lambdas: &[f64],
    fp: &ForwardPass,
) -> Result<Vec<f64>> {
    let sig = s.sigmas();
    let n = sig.len();
    let mut grad_sigma = vec![0.0; n];
    for t in 0..n - 1 {
        if lambdas[t] == 0.0 {
            continue;
        }
        let seed: Vec<f64> = fp.residual2.iter().map(|r| lambdas[t] * r).collect();
        let (_, sg) = h.input_vjp(&fp.iterates[t], sig[t], &seed)?;
        grad_sigma[t] = sg;
    }
    Ok(grad_sigma)
}

/// The by-product gradient estimator: one forward trajectory plus one
/// σ-derivative per step; weight and iterate dependencies on `σ` are
/// dropped.
pub fn disc_loss_grad_efficient<D: Denoiser + ?Sized>(
    h: &D,
    p: &ScheduleParams,
    batch: &DiscBatch,
) -> Result<DiscLossEstimate> {
    if p.n_steps() < 3 {
        return Err(Error::InvalidParameter(
            "efficient estimator needs n_steps >= 3 (no free parameters otherwise)".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let s = schedule_from_params(p)?;
    let lambdas = weights_from_schedule(&s).lambdas().to_vec();
    let n = s.n_steps();
    let per: Vec<Result<(f64, Vec<f64>)>> = par_map_indexed(batch.len(), |b| {
        let fp = forward_one(h, &s, &batch.xs[b], &batch.eps[b], &batch.eps_target[b])?;
        let gs = efficient_sigma_terms(h, &s, &lambdas, &fp)?;
        Ok((fp.loss, gs))
    });
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for r in per {
        let (l, g) = r?;
        losses.push(l);
        grads.push(g);
    }
    let ms = MeanStderr::from_samples(&losses);
    let mut grad_sigma = sum_vecs(n, &grads);
    for g in &mut grad_sigma {
        *g /= batch.len() as f64;
    }
    let grad_v = chain_sigma_grad_to_v(p, &grad_sigma);
    Ok(DiscLossEstimate {
        value: ms.mean,
        stderr: ms.stderr,
        grad_v,
        grad_sigma,
        mc_batch: losses.len(),
        estimator_kind: EstimatorKind::Efficient,
    })
}

/// Exact reverse sweep through the unrolled trajectory for one sample.
/// Returns (loss, ∂loss/∂σ).
fn full_unroll_one<D: Denoiser + ?Sized>(
    h: &D,
    s: &Schedule,
    x: &[f64],
    eps: &[f64],
    eps_target: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let sig = s.sigmas();
    let n = sig.len();
    let dim = x.len();
    let fp = forward_one(h, s, x, eps, eps_target)?;
    let mut grad_sigma = vec![0.0; n];
    let mut u = fp.residual2.clone();
    for i in (0..n - 1).rev() {
        let ratio = sig[i + 1] / sig[i];
        // x_{i+1} = ratio·x_i + (1-ratio)·D(x_i, σ_i)
        let xi = &fp.iterates[i];
        let di = &fp.denoised[i];
        let mut u_dot_xd = 0.0;
        for j in 0..dim {
            u_dot_xd += u[j] * (xi[j] - di[j]);
        }
        grad_sigma[i + 1] += u_dot_xd / sig[i];
        grad_sigma[i] -= u_dot_xd * sig[i + 1] / (sig[i] * sig[i]);
        let seed: Vec<f64> = u.iter().map(|ui| (1.0 - ratio) * ui).collect();
        let (xg, sg) = h.input_vjp(xi, sig[i], &seed)?;
        grad_sigma[i] += sg;
        for j in 0..dim {
            u[j] = ratio * u[j] + xg[j];
        }
    }
    Ok((fp.loss, grad_sigma))
}

/// Exact gradient by reverse accumulation through the whole unrolled
/// computation, including the weights' and iterates' dependence on `σ`.
pub fn disc_loss_grad_full<D: Denoiser + ?Sized>(
    h: &D,
    p: &ScheduleParams,
    batch: &DiscBatch,
) -> Result<DiscLossEstimate> {
    if p.n_steps() > 64 {
        return Err(Error::InvalidParameter(format!(
            "full-unroll gradient capped at 64 steps, got {}",
            p.n_steps()
        )));
    }
    if batch.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let s = schedule_from_params(p)?;
    let n = s.n_steps();
    let per: Vec<Result<(f64, Vec<f64>)>> = par_map_indexed(batch.len(), |b| {
        full_unroll_one(h, &s, &batch.xs[b], &batch.eps[b], &batch.eps_target[b])
    });
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for r in per {
        let (l, g) = r?;
        losses.push(l);
        grads.push(g);
    }
    let ms = MeanStderr::from_samples(&losses);
    let mut grad_sigma = sum_vecs(n, &grads);
    for g in &mut grad_sigma {
        *g /= batch.len() as f64;
    }
    let grad_v = chain_sigma_grad_to_v(p, &grad_sigma);
    Ok(DiscLossEstimate {
        value: ms.mean,
        stderr: ms.stderr,
        grad_v,
        grad_sigma,
        mc_batch: losses.len(),
        estimator_kind: EstimatorKind::FullUnroll,
    })
}

/// Central-difference oracle on common random numbers. `grad_v` perturbs the
/// free parameters; `grad_sigma` perturbs individual levels directly (same
/// full-dependence semantics as the unrolled sweep).
pub fn disc_loss_grad_fd<D: Denoiser + ?Sized>(
    h: &D,
    p: &ScheduleParams,
    batch: &DiscBatch,
) -> Result<DiscLossEstimate> {
    if batch.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let s = schedule_from_params(p)?;
    let base = disc_loss_with_noise(h, &s, batch)?;
    let n = p.n_steps();

    let mut grad_v = vec![0.0; n - 2];
    for k in 0..n - 2 {
        let hstep = 1e-5 * (1.0 + p.v[k].abs());
        let mut vp = p.clone();
        let mut vm = p.clone();
        vp.v[k] += hstep;
        vm.v[k] -= hstep;
        let lp = disc_loss_with_noise(h, &schedule_from_params(&vp)?, batch)?.value;
        let lm = disc_loss_with_noise(h, &schedule_from_params(&vm)?, batch)?.value;
        grad_v[k] = (lp - lm) / (2.0 * hstep);
    }

    let sig = s.sigmas();
    let mut grad_sigma = vec![0.0; n];
    for i in 0..n {
        // Keep the perturbed level inside the gaps to its neighbours.
        let gap_up = if i == 0 { sig[0] } else { sig[i - 1] - sig[i] };
        let gap_dn = if i == n - 1 { sig[i] } else { sig[i] - sig[i + 1] };
        let hstep = (1e-6 * sig[i]).min(0.25 * gap_up.min(gap_dn));
        let mut up = sig.to_vec();
        let mut dn = sig.to_vec();
        up[i] += hstep;
        dn[i] -= hstep;
        let su = Schedule::new_unchecked(up, s.range());
        let sd = Schedule::new_unchecked(dn, s.range());
        let lp = disc_loss_with_noise(h, &su, batch)?.value;
        let lm = disc_loss_with_noise(h, &sd, batch)?.value;
        grad_sigma[i] = (lp - lm) / (2.0 * hstep);
    }

    Ok(DiscLossEstimate {
        value: base.value,
        stderr: base.stderr,
        grad_v,
        grad_sigma,
        mc_batch: batch.len(),
        estimator_kind: EstimatorKind::FiniteDiff,
    })
}

pub fn disc_loss_grad<D: Denoiser + ?Sized>(
    h: &D,
    p: &ScheduleParams,
    batch: &DiscBatch,
    kind: EstimatorKind,
) -> Result<DiscLossEstimate> {
    match kind {
        EstimatorKind::Efficient => disc_loss_grad_efficient(h, p, batch),
        EstimatorKind::FullUnroll => disc_loss_grad_full(h, p, batch),
        EstimatorKind::FiniteDiff => disc_loss_grad_fd(h, p, batch),
    }
}

/// Λ-weighted diffusion loss over the scheduled levels, with its exact
/// v-gradient (through the weights, the noising and the denoiser's σ
/// argument). Returns (value, grad_sigma).
fn weighted_diffusion_loss<D: Denoiser + ?Sized>(
    h: &D,
    s: &Schedule,
    xs: &[Vec<f64>],
    noises: &[Vec<Vec<f64>>],
) -> Result<(f64, Vec<f64>)> {
    let sig = s.sigmas();
    let n = sig.len();
    let dim = xs[0].len();
    let w = weights_from_schedule(s);
    let lambdas = w.lambdas();
    let smin = s.sigma_min();

    let per: Vec<Result<(f64, Vec<f64>)>> = par_map_indexed(xs.len(), |b| {
        let x = &xs[b];
        let mut loss = 0.0;
        let mut gs = vec![0.0; n];
        for t in 0..n - 1 {
            let eps = &noises[b][t];
            let noisy: Vec<f64> = (0..dim).map(|j| x[j] + sig[t] * eps[j]).collect();
            let d = h.denoise(&noisy, sig[t])?;
            let mut sq = 0.0;
            let mut seed = vec![0.0; dim];
            for j in 0..dim {
                let r = d[j] - x[j];
                sq += r * r;
                seed[j] = 2.0 * lambdas[t] * r;
            }
            loss += lambdas[t] * sq;
            // σ_t enters through the noising x + σ_t ε and the denoiser's σ
            // argument; λ_t through both adjacent levels.
            let (xg, sg) = h.input_vjp(&noisy, sig[t], &seed)?;
            gs[t] += dot(&xg, eps) + sg;
            let dl_dlambda = sq;
            gs[t] += dl_dlambda * smin / (sig[t] * sig[t]);
            gs[t + 1] -= dl_dlambda * smin / (sig[t + 1] * sig[t + 1]);
        }
        Ok((loss, gs))
    });
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(xs.len());
    for r in per {
        let (l, g) = r?;
        total += l;
        grads.push(g);
    }
    let mut grad_sigma = sum_vecs(n, &grads);
    let inv = 1.0 / xs.len() as f64;
    for g in &mut grad_sigma {
        *g *= inv;
    }
    Ok((total * inv, grad_sigma))
}

/// Mutable Stage-1 state: the schedule parameters and their optimizer
/// moments.
#[derive(Debug, Clone)]
pub struct Stage1State {
    pub params: ScheduleParams,
    opt: Adam,
    pub iter: usize,
}

impl Stage1State {
    pub fn new(params: ScheduleParams, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let len = params.v.len();
        Self { params, opt: Adam::new(lr, beta1, beta2, epsilon, len), iter: 0 }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        schedule_from_params(&self.params)
    }
}

/// Per-step report of a Stage-1 update.
#[derive(Debug, Clone)]
pub struct Stage1Report {
    pub disc_loss: f64,
    pub disc_stderr: f64,
    pub diff_loss: f64,
    pub grad_norm: f64,
}

/// Hyperparameters consumed by one Stage-1 update.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Options {
    pub gamma: f64,
    pub estimator: EstimatorKind,
    pub noise_mode: NoiseMode,
}

/// One joint update of the schedule parameters: `∇_v (L_diff + γ L_disc)`
/// applied through the adaptive-moment optimizer. The weights and levels are
/// re-derived from `v` afterwards, so schedule validity is preserved by
/// construction.
pub fn stage1_step<D: Denoiser + ?Sized, R: Rng>(
    h: &D,
    state: &mut Stage1State,
    xs: &[Vec<f64>],
    opts: Stage1Options,
    rng: &mut R,
) -> Result<Stage1Report> {
    if xs.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let s = schedule_from_params(&state.params)?;
    let n = s.n_steps();
    let dim = xs[0].len();

    // Fresh per-step noise for the diffusion term, then the disc batch.
    let noises: Vec<Vec<Vec<f64>>> = xs
        .iter()
        .map(|_| (0..n - 1).map(|_| normal_vec(rng, dim)).collect())
        .collect();
    let disc_batch = DiscBatch::draw(xs.to_vec(), opts.noise_mode, rng);

    let (diff_loss, diff_gs) = weighted_diffusion_loss(h, &s, xs, &noises)?;
    let diff_gv = chain_sigma_grad_to_v(&state.params, &diff_gs);
    let disc = disc_loss_grad(h, &state.params, &disc_batch, opts.estimator)?;

    let mut grad = vec![0.0; state.params.v.len()];
    for k in 0..grad.len() {
        grad[k] = diff_gv[k] + opts.gamma * disc.grad_v[k];
    }
    let grad_norm = crate::stats::norm2(&grad);
    if !grad_norm.is_finite() || !disc.value.is_finite() || !diff_loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "stage-1 iter {}: disc_loss {}, diff_loss {diff_loss}, grad {grad:?}, v {:?}",
            state.iter, disc.value, state.params.v
        )));
    }
    state.opt.step(&mut state.params.v, &grad);
    state.iter += 1;
    Ok(Stage1Report {
        disc_loss: disc.value,
        disc_stderr: disc.stderr,
        diff_loss,
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticGmmDenoiser, DenoiserHandle};
    use crate::gmm::{GaussianMixture, GmmComponent};
    use crate::rng::stream;
    use crate::schedule::{rho_schedule, NoiseRange};

    fn gmm_1d_two() -> GaussianMixture {
        GaussianMixture::new(vec![
            GmmComponent { weight: 0.5, mean: vec![1.0], scale: 0.2 },
            GmmComponent { weight: 0.5, mean: vec![-1.0], scale: 0.2 },
        ])
        .unwrap()
    }

    fn random_params<R: Rng>(range: NoiseRange, n: usize, rng: &mut R) -> ScheduleParams {
        let v: Vec<f64> = (0..n - 2).map(|_| rng.gen_range(-1.5..1.5)).collect();
        ScheduleParams::new(v, range, n).unwrap()
    }

    #[test]
    fn empty_batch_is_rejected() {
        let h = DenoiserHandle::analytic(gmm_1d_two());
        let s = rho_schedule(NoiseRange::new(0.01, 10.0).unwrap(), 5, 7.0).unwrap();
        let batch = DiscBatch { xs: vec![], eps: vec![], eps_target: vec![] };
        assert!(disc_loss_with_noise(&h, &s, &batch).is_err());
    }

    #[test]
    fn degenerate_two_point_schedule_matches_closed_form() {
        // Single Gaussian, N = 2: the whole map is linear, so the loss is a
        // quadratic form with coefficient a = λ0·c(σmax) + σmin/σmax:
        // E = (a-1)²s² + a²σmax² + σmin², per dimension.
        let s2 = 0.8f64;
        let gmm = GaussianMixture::single(vec![0.0], s2.sqrt()).unwrap();
        let h = DenoiserHandle::analytic(gmm.clone());
        for (smin, smax) in [(0.05, 6.0), (2.0, 2.5)] {
            let s = Schedule::from_sigmas(vec![smax, smin]).unwrap();
            let c = s2 / (s2 + smax * smax);
            let a = (1.0 - smin / smax) * c + smin / smax;
            let expect = (a - 1.0) * (a - 1.0) * s2 + a * a * smax * smax + smin * smin;
            let mut rng = stream(21, "twopoint");
            let xs = gmm.sample_batch(20_000, &mut rng);
            let est =
                disc_loss(&h, &s, &xs, NoiseMode::Independent, &mut rng).unwrap();
            assert!(
                (est.value - expect).abs() < 4.0 * est.stderr,
                "smin {smin}: {} vs {expect} (stderr {})",
                est.value,
                est.stderr
            );
        }
    }

    #[test]
    fn shared_noise_perfect_one_step_denoiser_hits_zero() {
        // Point-mass data: the analytic denoiser returns the mean exactly,
        // and with ε' = ε the two-point sampler reconstructs the target.
        let gmm = GaussianMixture::single(vec![1.5], 1e-9).unwrap();
        let h = DenoiserHandle::analytic(gmm);
        let s = Schedule::from_sigmas(vec![5.0, 0.01]).unwrap();
        let mut rng = stream(22, "sharednoise");
        let batch = DiscBatch::draw(vec![vec![1.5]], NoiseMode::Shared, &mut rng);
        let est = disc_loss_with_noise(&h, &s, &batch).unwrap();
        assert!(est.value < 1e-12, "loss {}", est.value);
    }

    #[test]
    fn dense_schedule_reaches_noise_floor() {
        // Near-point-mass data (component scale far below σ_min) makes the
        // exact flow invert the noising, so only the 2 σ_min² d floor is
        // left. Euler is exact for this near-linear flow, so even moderate
        // N suffices to stand in for the dense limit.
        let dim = 2;
        let gmm = GaussianMixture::single(vec![0.7, -0.2], 1e-7).unwrap();
        let h = DenoiserHandle::analytic(gmm.clone());
        let range = NoiseRange::new(0.01, 10.0).unwrap();
        let s = crate::schedule::log_spaced_schedule(range, 400).unwrap();
        let mut rng = stream(23, "floor");
        let xs = gmm.sample_batch(4096, &mut rng);
        let est = disc_loss(&h, &s, &xs, NoiseMode::Independent, &mut rng).unwrap();
        let floor = 2.0 * 0.01f64.powi(2) * dim as f64;
        assert!(
            (est.value - floor).abs() < 3.0 * est.stderr,
            "{} vs floor {floor} (stderr {})",
            est.value,
            est.stderr
        );
    }

    #[test]
    fn efficient_gradient_zero_for_sigma_constant_denoiser() {
        // A denoiser with no σ sensitivity contributes nothing through the
        // by-product formula.
        struct Flat;
        impl Denoiser for Flat {
            fn dim(&self) -> usize {
                1
            }
            fn denoise(&self, x: &[f64], _s: f64) -> Result<Vec<f64>> {
                Ok(vec![0.3 * x[0]])
            }
            fn sigma_grad(&self, _x: &[f64], _s: f64) -> Result<Vec<f64>> {
                Ok(vec![0.0])
            }
            fn input_vjp(&self, _x: &[f64], _s: f64, u: &[f64]) -> Result<(Vec<f64>, f64)> {
                Ok((vec![0.3 * u[0]], 0.0))
            }
        }
        let mut rng = stream(24, "flat");
        let p = random_params(NoiseRange::new(0.01, 10.0).unwrap(), 5, &mut rng);
        let batch = DiscBatch::draw(vec![vec![0.4]; 8], NoiseMode::Independent, &mut rng);
        let est = disc_loss_grad_efficient(&Flat, &p, &batch).unwrap();
        assert!(est.grad_sigma.iter().all(|g| *g == 0.0), "{:?}", est.grad_sigma);
        assert!(est.grad_v.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn efficient_terms_vanish_where_lambda_is_zeroed() {
        let gmm = gmm_1d_two();
        let h = AnalyticGmmDenoiser::new(gmm.clone());
        let mut rng = stream(25, "lambdazero");
        let p = random_params(NoiseRange::new(0.01, 10.0).unwrap(), 6, &mut rng);
        let s = schedule_from_params(&p).unwrap();
        let mut lambdas = weights_from_schedule(&s).lambdas().to_vec();
        lambdas[2] = 0.0;
        let x = vec![0.9];
        let fp = forward_one(&h, &s, &x, &[0.3], &[-0.1]).unwrap();
        let terms = efficient_sigma_terms(&h, &s, &lambdas, &fp).unwrap();
        assert_eq!(terms[2], 0.0);
        assert!(terms[1] != 0.0);
    }

    #[test]
    fn efficient_vs_full_unroll_cosine_logged() {
        // The by-product estimator drops the weight and trajectory
        // dependencies on sigma, so its quality is measured, not assumed:
        // the cosine similarity to the exact gradient is logged without a
        // hard threshold.
        let gmm = GaussianMixture::single(vec![0.4], 0.7).unwrap();
        let h = DenoiserHandle::analytic(gmm.clone());
        let mut rng = stream(33, "cosine");
        let p = random_params(NoiseRange::new(0.05, 8.0).unwrap(), 3, &mut rng);
        let xs = gmm.sample_batch(256, &mut rng);
        let batch = DiscBatch::draw(xs, NoiseMode::Independent, &mut rng);
        let eff = disc_loss_grad_efficient(&h, &p, &batch).unwrap();
        let full = disc_loss_grad_full(&h, &p, &batch).unwrap();
        let cos = crate::stats::dot(&eff.grad_v, &full.grad_v)
            / (crate::stats::norm2(&eff.grad_v) * crate::stats::norm2(&full.grad_v)).max(1e-300);
        println!(
            "efficient vs full-unroll gradient cosine similarity (1-D, N=3): {cos:.4} \
             (efficient {:?}, full {:?})",
            eff.grad_v, full.grad_v
        );
        assert!(cos.is_finite());
        assert_eq!(eff.estimator_kind, EstimatorKind::Efficient);
    }

    #[test]
    fn full_unroll_matches_finite_differences() {
        // CRN central differences over v; 1-D single Gaussian, N = 4.
        let gmm = GaussianMixture::single(vec![0.4], 0.7).unwrap();
        let h = DenoiserHandle::analytic(gmm.clone());
        let mut rng = stream(26, "fdcheck");
        let p = random_params(NoiseRange::new(0.05, 8.0).unwrap(), 4, &mut rng);
        let xs = gmm.sample_batch(32, &mut rng);
        let batch = DiscBatch::draw(xs, NoiseMode::Independent, &mut rng);
        let full = disc_loss_grad_full(&h, &p, &batch).unwrap();
        let fd = disc_loss_grad_fd(&h, &p, &batch).unwrap();
        let scale = crate::stats::norm2(&fd.grad_v).max(crate::stats::norm2(&full.grad_v));
        for (a, b) in full.grad_v.iter().zip(&fd.grad_v) {
            assert!((a - b).abs() <= 1e-4 * scale, "{a} vs {b} (scale {scale})");
        }
        // The σ-space gradients share full-dependence semantics too.
        let sscale = crate::stats::norm2(&fd.grad_sigma).max(1e-12);
        for (a, b) in full.grad_sigma.iter().zip(&fd.grad_sigma) {
            assert!((a - b).abs() <= 1e-3 * sscale, "sigma grad {a} vs {b}");
        }
    }

    #[test]
    fn endpoint_gradients_vanish_in_v_space() {
        // Perturbing v never moves the endpoints, so a loss that only reads
        // the endpoints has zero v-gradient.
        let gmm = gmm_1d_two();
        let h = DenoiserHandle::analytic(gmm.clone());
        let mut rng = stream(27, "endpoints");
        let p = random_params(NoiseRange::new(0.01, 10.0).unwrap(), 5, &mut rng);
        let batch = DiscBatch::draw(gmm.sample_batch(8, &mut rng), NoiseMode::Independent, &mut rng);
        let full = disc_loss_grad_full(&h, &p, &batch).unwrap();
        // chain rule: grad_v = J^T grad_sigma where J has zero rows for the
        // endpoints; spot-check by zeroing interior entries.
        let mut only_endpoints = vec![0.0; 5];
        only_endpoints[0] = full.grad_sigma[0];
        only_endpoints[4] = full.grad_sigma[4];
        let gv = chain_sigma_grad_to_v(&p, &only_endpoints);
        assert!(gv.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn point_mass_perfect_denoiser_has_tiny_trajectory_gradient() {
        // Loss already at its floor: the v-gradient of the trajectory term
        // vanishes (only the σ_min(ε-ε') floor remains, independent of v).
        let gmm = GaussianMixture::single(vec![2.0], 1e-9).unwrap();
        let h = DenoiserHandle::analytic(gmm);
        let mut rng = stream(28, "pointmass");
        let p = random_params(NoiseRange::new(0.01, 10.0).unwrap(), 5, &mut rng);
        let batch = DiscBatch::draw(vec![vec![2.0]; 16], NoiseMode::Independent, &mut rng);
        let full = disc_loss_grad_full(&h, &p, &batch).unwrap();
        assert!(
            crate::stats::norm2(&full.grad_v) < 1e-8,
            "grad {:?}",
            full.grad_v
        );
    }

    #[test]
    fn cost_guard_rejects_deep_unrolls() {
        let gmm = gmm_1d_two();
        let h = DenoiserHandle::analytic(gmm.clone());
        let mut rng = stream(29, "guard");
        let p = random_params(NoiseRange::new(0.01, 10.0).unwrap(), 65, &mut rng);
        let batch = DiscBatch::draw(gmm.sample_batch(2, &mut rng), NoiseMode::Independent, &mut rng);
        assert!(disc_loss_grad_full(&h, &p, &batch).is_err());
    }

    #[test]
    fn stage1_lr_zero_keeps_params() {
        let gmm = gmm_1d_two();
        let h = DenoiserHandle::analytic(gmm.clone());
        let mut rng = stream(30, "lrzero");
        let p = random_params(NoiseRange::new(0.01, 10.0).unwrap(), 5, &mut rng);
        let mut state = Stage1State::new(p.clone(), 0.0, 0.9, 0.999, 1e-8);
        let xs = gmm.sample_batch(16, &mut rng);
        let opts = Stage1Options {
            gamma: 1.0,
            estimator: EstimatorKind::FullUnroll,
            noise_mode: NoiseMode::Independent,
        };
        let report = stage1_step(&h, &mut state, &xs, opts, &mut rng).unwrap();
        assert_eq!(state.params.v, p.v);
        assert!(report.disc_loss.is_finite() && report.diff_loss.is_finite());
    }

    #[test]
    fn stage1_gamma_zero_ignores_disc_gradient() {
        // With γ = 0 the update must match one driven only by the diffusion
        // term; run two states from the same start and rngs.
        let gmm = gmm_1d_two();
        let h = DenoiserHandle::analytic(gmm.clone());
        let mut rng = stream(31, "gammazero");
        let p = random_params(NoiseRange::new(0.01, 10.0).unwrap(), 5, &mut rng);
        let xs = gmm.sample_batch(16, &mut rng);

        let mut s1 = Stage1State::new(p.clone(), 1e-2, 0.9, 0.999, 1e-8);
        let mut r1 = stream(99, "inner");
        let opts = Stage1Options {
            gamma: 0.0,
            estimator: EstimatorKind::FullUnroll,
            noise_mode: NoiseMode::Independent,
        };
        stage1_step(&h, &mut s1, &xs, opts, &mut r1).unwrap();

        // Manual replication.
        let mut r2 = stream(99, "inner");
        let s = schedule_from_params(&p).unwrap();
        let noises: Vec<Vec<Vec<f64>>> = xs
            .iter()
            .map(|_| (0..4).map(|_| normal_vec(&mut r2, 1)).collect())
            .collect();
        let _ = DiscBatch::draw(xs.clone(), NoiseMode::Independent, &mut r2);
        let (_, gs) = weighted_diffusion_loss(&h, &s, &xs, &noises).unwrap();
        let gv = chain_sigma_grad_to_v(&p, &gs);
        let mut manual = p.clone();
        let mut opt = Adam::new(1e-2, 0.9, 0.999, 1e-8, 3);
        opt.step(&mut manual.v, &gv);
        assert_eq!(s1.params.v, manual.v);
    }

    #[test]
    fn stage1_converges_on_1d_problem() {
        // 200 iterations on the 1-D two-Gaussian problem, N = 5: the eval
        // disc loss decreases in non-overlapping window-20 averages and ends
        // below the rho = 7 baseline.
        let gmm = gmm_1d_two();
        let h = DenoiserHandle::analytic(gmm.clone());
        let range = NoiseRange::new(0.01, 10.0).unwrap();
        let warm = rho_schedule(range, 5, 7.0).unwrap();
        let p = crate::schedule::init_params_from_reference(&warm).unwrap();
        let mut state = Stage1State::new(p, 1e-2, 0.9, 0.999, 1e-8);
        let opts = Stage1Options {
            gamma: 1.0,
            estimator: EstimatorKind::FullUnroll,
            noise_mode: NoiseMode::Independent,
        };
        // Fixed CRN evaluation batch so the reported loss is a smooth
        // function of the parameters.
        let mut eval_rng = stream(40, "eval");
        let eval_xs = gmm.sample_batch(512, &mut eval_rng);
        let eval_batch = DiscBatch::draw(eval_xs, NoiseMode::Independent, &mut eval_rng);

        let mut train_rng = stream(40, "train");
        let mut history = Vec::new();
        for iter in 0..200 {
            let xs = gmm.sample_batch(128, &mut crate::rng::substream(40, "batch", iter));
            stage1_step(&h, &mut state, &xs, opts, &mut train_rng).unwrap();
            let eval = disc_loss_with_noise(&h, &state.schedule().unwrap(), &eval_batch).unwrap();
            history.push(eval.value);
        }
        let windows: Vec<f64> = history
            .chunks(20)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for k in 1..windows.len() {
            assert!(
                windows[k] < windows[k - 1],
                "window {k} did not decrease: {:?}",
                windows
            );
        }
        let baseline = disc_loss_with_noise(&h, &warm, &eval_batch).unwrap();
        let final_loss = *history.last().unwrap();
        assert!(
            final_loss < baseline.value,
            "final {final_loss} vs rho7 {}",
            baseline.value
        );
    }
}
