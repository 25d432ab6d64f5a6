//! Isotropic Gaussian mixtures: the desk-scale data distribution.
//!
//! Every component has mean `μ_k`, scalar scale `s_k` (covariance `s_k² I`)
//! and weight `π_k`. Convolving the mixture with `σ`-level Gaussian noise
//! yields another mixture with component covariances `(s_k² + σ²) I`, which
//! keeps densities, scores and posterior means in closed form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GmmComponent>,
    dim: usize,
}

impl GaussianMixture {
    /// Weights must sum to 1 (within 1e-9; they are renormalized exactly),
    /// scales must be positive, and all means must share one dimension.
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        let dim = components[0].mean.len();
        if dim == 0 {
            return Err(Error::InvalidParameter("component means must be non-empty".into()));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::InvalidParameter(format!(
                    "component {k} has dim {} != {dim}",
                    c.mean.len()
                )));
            }
            if !(c.scale.is_finite() && c.scale > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "component {k} scale {} must be positive",
                    c.scale
                )));
            }
            if !(c.weight.is_finite() && c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "component {k} weight {} must be in (0, 1]",
                    c.weight
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        let components = components
            .into_iter()
            .map(|mut c| {
                c.weight /= total;
                c
            })
            .collect();
        Ok(Self { components, dim })
    }

    /// Single standard-ish Gaussian, handy in tests.
    pub fn single(mean: Vec<f64>, scale: f64) -> Result<Self> {
        Self::new(vec![GmmComponent { weight: 1.0, mean, scale }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// I.i.d. draws: component index by weight, then an isotropic Gaussian.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut idx = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            cum += c.weight;
            if u < cum {
                idx = k;
                break;
            }
        }
        let c = &self.components[idx];
        c.mean.iter().map(|m| m + c.scale * standard_normal(rng)).collect()
    }

    pub fn sample_batch<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// Log-weights of the component posterior given a `σ`-noisy observation,
    /// before normalization. The shared `(2π)^{d/2}` factor is omitted.
    fn posterior_log_weights(&self, y: &[f64], sigma: f64) -> Vec<f64> {
        let d = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let t = c.scale * c.scale + sigma * sigma;
                let sq: f64 = y.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.weight.ln() - 0.5 * d * t.ln() - sq / (2.0 * t)
            })
            .collect()
    }

    /// Normalized posterior component weights `w_k(y)` at noise level `σ`.
    /// Evaluated through log-sum-exp so large `σ` cannot underflow.
    pub fn posterior_weights(&self, y: &[f64], sigma: f64) -> Vec<f64> {
        let logs = self.posterior_log_weights(y, sigma);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        for x in &mut w {
            *x /= sum;
        }
        w
    }

    /// `ln p_σ(y)` of the noise-convolved mixture (full normal constant).
    pub fn log_density(&self, y: &[f64], sigma: f64) -> f64 {
        let d = self.dim as f64;
        let logs = self.posterior_log_weights(y, sigma);
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        max + sum.ln() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
    }

    /// Analytic score `∇_y ln p_σ(y) = -Σ_k w_k (y - μ_k)/(s_k² + σ²)`.
    pub fn score(&self, y: &[f64], sigma: f64) -> Vec<f64> {
        let w = self.posterior_weights(y, sigma);
        let mut out = vec![0.0; self.dim];
        for (c, wk) in self.components.iter().zip(&w) {
            let t = c.scale * c.scale + sigma * sigma;
            for (o, (yi, mi)) in out.iter_mut().zip(y.iter().zip(&c.mean)) {
                *o -= wk * (yi - mi) / t;
            }
        }
        out
    }

    /// Mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for c in &self.components {
            for (o, m) in out.iter_mut().zip(&c.mean) {
                *o += c.weight * m;
            }
        }
        out
    }

    /// Per-dimension standard deviation averaged over dimensions; the data
    /// scale used by the original lognormal training weight.
    pub fn data_std(&self) -> f64 {
        let mean = self.mean();
        let mut var = 0.0;
        for c in &self.components {
            let sq: f64 = c.mean.iter().zip(&mean).map(|(m, g)| (m - g) * (m - g)).sum();
            var += c.weight * (c.scale * c.scale + sq / self.dim as f64);
        }
        var.sqrt()
    }
}
