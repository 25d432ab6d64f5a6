//! Denoising functions `D(x, σ)` and their sensitivities.
//!
//! Two concrete denoisers share one interface: the exact posterior mean of a
//! Gaussian mixture (the L2-optimal denoiser for that data, used as an
//! oracle) and a small trainable network. Besides the value, both expose the
//! partial derivative in `σ` and a vector-Jacobian product in `x`, which is
//! everything the samplers and the schedule-gradient estimators need.
//!
//! For an isotropic mixture the posterior mean is
//!
//! ```text
//! D*(y, σ) = Σ_k w_k(y) · (μ_k + s_k²/(s_k² + σ²) · (y - μ_k))
//! w_k(y)   ∝ π_k · N(y; μ_k, (s_k² + σ²) I)
//! ```
//!
//! and `(D*(y, σ) - y)/σ²` equals the score of the σ-smoothed data
//! distribution, which ties the denoiser to the sampling ODE's drift.

use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::mlp::{Mlp, MlpSpec};

/// Common interface for denoisers.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    /// `D(x, σ)`.
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;

    /// `∂D/∂σ` holding `x` fixed.
    fn sigma_grad(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;

    /// One reverse pass: `((∂D/∂x)ᵀ u, ⟨u, ∂D/∂σ⟩)`.
    fn input_vjp(&self, x: &[f64], sigma: f64, u: &[f64]) -> Result<(Vec<f64>, f64)>;
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma = {sigma} must be positive")));
    }
    Ok(())
}

/// Exact Gaussian-mixture posterior-mean denoiser.
#[derive(Debug, Clone)]
pub struct AnalyticGmmDenoiser {
    gmm: GaussianMixture,
}

impl AnalyticGmmDenoiser {
    pub fn new(gmm: GaussianMixture) -> Self {
        Self { gmm }
    }

    pub fn gmm(&self) -> &GaussianMixture {
        &self.gmm
    }

    /// Posterior pieces reused by all three trait methods:
    /// per-component weights `w_k`, means `m_k`, shrink factors and the
    /// weight log-derivative ingredients.
    fn parts(&self, y: &[f64], sigma: f64) -> Parts {
        let comps = self.gmm.components();
        let d = self.gmm.dim();
        let w = self.gmm.posterior_weights(y, sigma);
        let mut means = Vec::with_capacity(comps.len());
        let mut shrinks = Vec::with_capacity(comps.len());
        let mut ts = Vec::with_capacity(comps.len());
        let mut sqs = Vec::with_capacity(comps.len());
        for c in comps {
            let t = c.scale * c.scale + sigma * sigma;
            let shrink = c.scale * c.scale / t;
            let mut m = vec![0.0; d];
            let mut sq = 0.0;
            for j in 0..d {
                let r = y[j] - c.mean[j];
                m[j] = c.mean[j] + shrink * r;
                sq += r * r;
            }
            means.push(m);
            shrinks.push(shrink);
            ts.push(t);
            sqs.push(sq);
        }
        Parts { w, means, shrinks, ts, sqs }
    }
}

struct Parts {
    w: Vec<f64>,
    means: Vec<Vec<f64>>,
    shrinks: Vec<f64>,
    ts: Vec<f64>,
    sqs: Vec<f64>,
}

impl Denoiser for AnalyticGmmDenoiser {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        let p = self.parts(x, sigma);
        let d = self.gmm.dim();
        let mut out = vec![0.0; d];
        for (wk, m) in p.w.iter().zip(&p.means) {
            for j in 0..d {
                out[j] += wk * m[j];
            }
        }
        Ok(out)
    }

    fn sigma_grad(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        let p = self.parts(x, sigma);
        let d = self.gmm.dim();
        let comps = self.gmm.components();
        // d g_k / d sigma for the posterior log-weights.
        let gdot: Vec<f64> = (0..comps.len())
            .map(|k| sigma * (p.sqs[k] / (p.ts[k] * p.ts[k]) - d as f64 / p.ts[k]))
            .collect();
        let mean_gdot: f64 = p.w.iter().zip(&gdot).map(|(w, g)| w * g).sum();
        let mut out = vec![0.0; d];
        for k in 0..comps.len() {
            let wdot = p.w[k] * (gdot[k] - mean_gdot);
            let shrink_dot = -2.0 * sigma * comps[k].scale * comps[k].scale / (p.ts[k] * p.ts[k]);
            for j in 0..d {
                out[j] += wdot * p.means[k][j] + p.w[k] * shrink_dot * (x[j] - comps[k].mean[j]);
            }
        }
        Ok(out)
    }

    fn input_vjp(&self, x: &[f64], sigma: f64, u: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_sigma(sigma)?;
        let p = self.parts(x, sigma);
        let d = self.gmm.dim();
        let comps = self.gmm.components();

        // x part: (∂D/∂y)ᵀ u = Σ_k (m_k·u) ∇w_k + (Σ_k w_k shrink_k) u
        // with ∇w_k = w_k (∇g_k - Σ_j w_j ∇g_j) and ∇g_k = -(y-μ_k)/t_k.
        let mu: Vec<f64> = p.means.iter().map(|m| crate::stats::dot(m, u)).collect();
        let mut mean_grad_g = vec![0.0; d];
        for k in 0..comps.len() {
            for j in 0..d {
                mean_grad_g[j] -= p.w[k] * (x[j] - comps[k].mean[j]) / p.ts[k];
            }
        }
        let shrink_avg: f64 = p.w.iter().zip(&p.shrinks).map(|(w, s)| w * s).sum();
        let mut xg = vec![0.0; d];
        for j in 0..d {
            xg[j] = shrink_avg * u[j];
        }
        for k in 0..comps.len() {
            for j in 0..d {
                let grad_w = p.w[k] * (-(x[j] - comps[k].mean[j]) / p.ts[k] - mean_grad_g[j]);
                xg[j] += mu[k] * grad_w;
            }
        }

        let sg = crate::stats::dot(u, &self.sigma_grad(x, sigma)?);
        Ok((xg, sg))
    }
}

/// Trainable denoiser wrapping the MLP.
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    mlp: Mlp,
}

impl MlpDenoiser {
    pub fn new<R: rand::Rng>(dim: usize, spec: MlpSpec, rng: &mut R) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(dim, spec, rng)? })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.mlp.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        Ok(self.mlp.forward(x, sigma))
    }

    fn sigma_grad(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_sigma(sigma)?;
        let (_, cache) = self.mlp.forward_cached(x, sigma);
        Ok(self.mlp.jvp_input(&cache, &vec![0.0; self.mlp.dim()], sigma, 1.0))
    }

    fn input_vjp(&self, x: &[f64], sigma: f64, u: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_sigma(sigma)?;
        let (_, cache) = self.mlp.forward_cached(x, sigma);
        let (_, xg, sg) = self.mlp.backward(&cache, sigma, u);
        Ok((xg, sg))
    }
}

/// A denoiser of either kind, as configured for a run.
#[derive(Debug, Clone)]
pub enum DenoiserHandle {
    AnalyticGmm(AnalyticGmmDenoiser),
    Mlp(MlpDenoiser),
}

impl DenoiserHandle {
    pub fn analytic(gmm: GaussianMixture) -> Self {
        Self::AnalyticGmm(AnalyticGmmDenoiser::new(gmm))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::AnalyticGmm(_) => "analytic-gmm",
            Self::Mlp(_) => "trainable-mlp",
        }
    }

    pub fn as_mlp(&self) -> Result<&MlpDenoiser> {
        match self {
            Self::Mlp(m) => Ok(m),
            Self::AnalyticGmm(_) => {
                Err(Error::DenoiserKind("operation requires the trainable denoiser".into()))
            }
        }
    }

    pub fn as_mlp_mut(&mut self) -> Result<&mut MlpDenoiser> {
        match self {
            Self::Mlp(m) => Ok(m),
            Self::AnalyticGmm(_) => {
                Err(Error::DenoiserKind("operation requires the trainable denoiser".into()))
            }
        }
    }
}

impl Denoiser for DenoiserHandle {
    fn dim(&self) -> usize {
        match self {
            Self::AnalyticGmm(d) => d.dim(),
            Self::Mlp(d) => d.dim(),
        }
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        match self {
            Self::AnalyticGmm(d) => d.denoise(x, sigma),
            Self::Mlp(d) => d.denoise(x, sigma),
        }
    }

    fn sigma_grad(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        match self {
            Self::AnalyticGmm(d) => d.sigma_grad(x, sigma),
            Self::Mlp(d) => d.sigma_grad(x, sigma),
        }
    }

    fn input_vjp(&self, x: &[f64], sigma: f64, u: &[f64]) -> Result<(Vec<f64>, f64)> {
        match self {
            Self::AnalyticGmm(d) => d.input_vjp(x, sigma, u),
            Self::Mlp(d) => d.input_vjp(x, sigma, u),
        }
    }
}

/// Weighted denoising loss and parameter gradient of the trainable denoiser:
/// `weight * ||D_θ(x_noisy, σ) - target||²`. Errors on the analytic kind.
pub fn mlp_forward_backward(
    h: &DenoiserHandle,
    x_noisy: &[f64],
    sigma: f64,
    target: &[f64],
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    check_sigma(sigma)?;
    let mlp = h.as_mlp()?;
    Ok(mlp.mlp().forward_backward(x_noisy, sigma, target, weight))
}
