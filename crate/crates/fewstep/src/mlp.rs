//! A small fully-connected network with hand-rolled reverse- and
//! forward-mode differentiation.
//!
//! The network maps `(x, ln σ)` to a denoised estimate of `x`. Parameters
//! live in one flat `Vec<f64>` (row-major weight matrices followed by their
//! bias vectors, layer by layer), which keeps the optimizer, gradient checks
//! and serialization trivial.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture of the trainable denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Multiplier on the `1/sqrt(fan_in)` weight initialization.
    pub init_scale: f64,
    /// Residual output head: the network predicts `D(x, σ) - x` and the
    /// input is added back, so the small-noise near-identity regime does not
    /// consume capacity.
    pub residual: bool,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self { hidden: vec![64, 64], activation: Activation::Tanh, init_scale: 1.0, residual: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct LayerShape {
    rows: usize,
    cols: usize,
}

/// Flat-parameter multilayer perceptron conditioned on `ln σ`.
#[derive(Debug, Clone)]
pub struct Mlp {
    dim: usize,
    spec: MlpSpec,
    shapes: Vec<LayerShape>,
    params: Vec<f64>,
}

/// Forward-pass activations kept for the backward passes.
pub struct MlpCache {
    /// Layer inputs: `a[0]` is the network input, `a[l]` the activation of
    /// hidden layer `l`. The linear output layer is not stored.
    activations: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new<R: Rng>(dim: usize, spec: MlpSpec, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("mlp data dimension must be positive".into()));
        }
        if spec.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidParameter("hidden widths must be positive".into()));
        }
        let mut shapes = Vec::new();
        let mut fan_in = dim + 1; // x plus the ln-sigma feature
        for &h in &spec.hidden {
            shapes.push(LayerShape { rows: h, cols: fan_in });
            fan_in = h;
        }
        shapes.push(LayerShape { rows: dim, cols: fan_in });

        let mut params = Vec::with_capacity(Self::count(&shapes));
        for sh in &shapes {
            let std = spec.init_scale / (sh.cols as f64).sqrt();
            for _ in 0..sh.rows * sh.cols {
                params.push(std * crate::rng::standard_normal(rng));
            }
            params.extend(std::iter::repeat(0.0).take(sh.rows));
        }
        Ok(Self { dim, spec, shapes, params })
    }

    fn count(shapes: &[LayerShape]) -> usize {
        shapes.iter().map(|s| s.rows * s.cols + s.rows).sum()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn input_features(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.dim + 1);
        z.extend_from_slice(x);
        z.push(sigma.ln());
        z
    }

    /// Forward pass, keeping activations for a later backward pass.
    pub fn forward_cached(&self, x: &[f64], sigma: f64) -> (Vec<f64>, MlpCache) {
        debug_assert_eq!(x.len(), self.dim);
        let mut activations = Vec::with_capacity(self.shapes.len());
        activations.push(self.input_features(x, sigma));
        let mut offset = 0;
        let last = self.shapes.len() - 1;
        let mut out = Vec::new();
        for (l, sh) in self.shapes.iter().enumerate() {
            let input = activations.last().unwrap();
            let w = &self.params[offset..offset + sh.rows * sh.cols];
            let b = &self.params[offset + sh.rows * sh.cols..offset + sh.rows * sh.cols + sh.rows];
            offset += sh.rows * sh.cols + sh.rows;
            let mut next = vec![0.0; sh.rows];
            for r in 0..sh.rows {
                let row = &w[r * sh.cols..(r + 1) * sh.cols];
                let mut acc = b[r];
                for (wi, ai) in row.iter().zip(input) {
                    acc += wi * ai;
                }
                next[r] = if l == last { acc } else { self.spec.activation.apply(acc) };
            }
            if l == last {
                out = next;
            } else {
                activations.push(next);
            }
        }
        if self.spec.residual {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += xi;
            }
        }
        (out, MlpCache { activations })
    }

    pub fn forward(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        self.forward_cached(x, sigma).0
    }

    /// Reverse pass: given `∂L/∂out`, return the parameter gradient and the
    /// input gradient `(∂L/∂x, ∂L/∂σ)`. The `σ` slot already includes the
    /// `1/σ` factor from the log feature.
    pub fn backward(
        &self,
        cache: &MlpCache,
        sigma: f64,
        out_seed: &[f64],
    ) -> (Vec<f64>, Vec<f64>, f64) {
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = out_seed.to_vec();
        let mut offset = self.params.len();
        for (l, sh) in self.shapes.iter().enumerate().rev() {
            offset -= sh.rows * sh.cols + sh.rows;
            let input = &cache.activations[l];
            let w = &self.params[offset..offset + sh.rows * sh.cols];
            let (gw, gb) = grad[offset..offset + sh.rows * sh.cols + sh.rows]
                .split_at_mut(sh.rows * sh.cols);
            let mut prev = vec![0.0; sh.cols];
            for r in 0..sh.rows {
                let d = delta[r];
                gb[r] += d;
                let row = &w[r * sh.cols..(r + 1) * sh.cols];
                let grow = &mut gw[r * sh.cols..(r + 1) * sh.cols];
                for c in 0..sh.cols {
                    grow[c] += d * input[c];
                    prev[c] += d * row[c];
                }
            }
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(&cache.activations[l]) {
                    *p *= self.spec.activation.grad_from_output(*a);
                }
            }
            delta = prev;
        }
        let mut x_grad = delta[..self.dim].to_vec();
        if self.spec.residual {
            for (g, s) in x_grad.iter_mut().zip(out_seed) {
                *g += s;
            }
        }
        let sigma_grad = delta[self.dim] / sigma;
        (grad, x_grad, sigma_grad)
    }

    /// Forward-mode directional derivative of the output along an input
    /// direction (`x` direction plus a `σ` perturbation).
    pub fn jvp_input(&self, cache: &MlpCache, x_dir: &[f64], sigma: f64, sigma_dir: f64) -> Vec<f64> {
        let mut dir = Vec::with_capacity(self.dim + 1);
        dir.extend_from_slice(x_dir);
        dir.push(sigma_dir / sigma); // d(ln σ)/dσ = 1/σ
        let mut offset = 0;
        let last = self.shapes.len() - 1;
        for (l, sh) in self.shapes.iter().enumerate() {
            let w = &self.params[offset..offset + sh.rows * sh.cols];
            offset += sh.rows * sh.cols + sh.rows;
            let mut next = vec![0.0; sh.rows];
            for r in 0..sh.rows {
                let row = &w[r * sh.cols..(r + 1) * sh.cols];
                let mut acc = 0.0;
                for (wi, di) in row.iter().zip(&dir) {
                    acc += wi * di;
                }
                next[r] = acc;
            }
            if l < last {
                for (n, a) in next.iter_mut().zip(&cache.activations[l + 1]) {
                    *n *= self.spec.activation.grad_from_output(*a);
                }
            }
            dir = next;
        }
        if self.spec.residual {
            for (d, xd) in dir.iter_mut().zip(x_dir) {
                *d += xd;
            }
        }
        dir
    }

    /// Weighted squared-error loss and its parameter gradient:
    /// `loss = weight * ||D(x, σ) - target||²`.
    pub fn forward_backward(
        &self,
        x: &[f64],
        sigma: f64,
        target: &[f64],
        weight: f64,
    ) -> (f64, Vec<f64>) {
        let (out, cache) = self.forward_cached(x, sigma);
        let mut loss = 0.0;
        let mut seed = vec![0.0; self.dim];
        for i in 0..self.dim {
            let r = out[i] - target[i];
            loss += r * r;
            seed[i] = 2.0 * weight * r;
        }
        let (grad, _, _) = self.backward(&cache, sigma, &seed);
        (weight * loss, grad)
    }

    /// Write parameters as a little-endian f64 blob plus a JSON sidecar
    /// describing the architecture.
    pub fn save(&self, blob_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        std::fs::File::create(blob_path)?.write_all(&bytes)?;
        let sidecar = MlpSidecar {
            format_version: 1,
            dim: self.dim,
            spec: self.spec.clone(),
            param_count: self.params.len(),
        };
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(blob_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let sidecar: MlpSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        if sidecar.format_version != 1 {
            return Err(Error::Config(format!(
                "unsupported mlp format_version {}",
                sidecar.format_version
            )));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(blob_path)?.read_to_end(&mut bytes)?;
        if bytes.len() != sidecar.param_count * 8 {
            return Err(Error::Config(format!(
                "parameter blob has {} bytes, sidecar expects {}",
                bytes.len(),
                sidecar.param_count * 8
            )));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut shapes = Vec::new();
        let mut fan_in = sidecar.dim + 1;
        for &h in &sidecar.spec.hidden {
            shapes.push(LayerShape { rows: h, cols: fan_in });
            fan_in = h;
        }
        shapes.push(LayerShape { rows: sidecar.dim, cols: fan_in });
        if Self::count(&shapes) != params.len() {
            return Err(Error::Config("parameter count does not match architecture".into()));
        }
        Ok(Self { dim: sidecar.dim, spec: sidecar.spec, shapes, params })
    }
}

#[derive(Serialize, Deserialize)]
struct MlpSidecar {
    format_version: u32,
    dim: usize,
    spec: MlpSpec,
    param_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small_net() -> Mlp {
        let spec = MlpSpec { hidden: vec![8], ..Default::default() };
        Mlp::new(2, spec, &mut stream(11, "mlp")).unwrap()
    }

    #[test]
    fn zero_weight_means_zero_loss_and_gradient() {
        let net = small_net();
        let (loss, grad) = net.forward_backward(&[0.3, -0.4], 0.5, &[1.0, 1.0], 0.0);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn doubling_weight_doubles_loss_and_gradient() {
        let net = small_net();
        let (l1, g1) = net.forward_backward(&[0.3, -0.4], 0.5, &[1.0, 1.0], 1.0);
        let (l2, g2) = net.forward_backward(&[0.3, -0.4], 0.5, &[1.0, 1.0], 2.0);
        assert!((l2 - 2.0 * l1).abs() < 1e-14 * l1.abs());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() <= 1e-13 * a.abs().max(1e-12), "{a} {b}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        // 2-8-2 network, central differences over theta.
        let mut net = small_net();
        let x = [0.7, -0.2];
        let target = [0.1, 0.4];
        let (_, grad) = net.forward_backward(&x, 0.8, &target, 1.3);
        let h = 1e-5;
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for k in (0..net.param_count()).step_by(7) {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let (lp, _) = net.forward_backward(&x, 0.8, &target, 1.3);
            net.params_mut()[k] = orig - h;
            let (lm, _) = net.forward_backward(&x, 0.8, &target, 1.3);
            net.params_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad[k]).abs() <= 1e-4 * gnorm.max(1e-8),
                "param {k}: fd {fd} vs analytic {}",
                grad[k]
            );
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let net = small_net();
        let x = [0.7, -0.2];
        let sigma = 0.8;
        let (out, cache) = net.forward_cached(&x, sigma);
        let seed = [1.0, -2.0];
        let (_, xg, sg) = net.backward(&cache, sigma, &seed);
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let op = net.forward(&xp, sigma);
            let om = net.forward(&xm, sigma);
            let fd: f64 =
                (0..2).map(|i| seed[i] * (op[i] - om[i])).sum::<f64>() / (2.0 * h);
            assert!((fd - xg[j]).abs() < 1e-6 * (1.0 + fd.abs()), "x[{j}]: {fd} vs {}", xg[j]);
        }
        let op = net.forward(&x, sigma + h);
        let om = net.forward(&x, sigma - h);
        let fd: f64 = (0..2).map(|i| seed[i] * (op[i] - om[i])).sum::<f64>() / (2.0 * h);
        assert!((fd - sg).abs() < 1e-6 * (1.0 + fd.abs()), "sigma: {fd} vs {sg}");

        // Forward-mode agrees with reverse-mode on the sigma direction.
        let jvp = net.jvp_input(&cache, &[0.0, 0.0], sigma, 1.0);
        let dot: f64 = seed.iter().zip(&jvp).map(|(a, b)| a * b).sum();
        assert!((dot - sg).abs() < 1e-12 * (1.0 + sg.abs()));
        let _ = out;
    }

    #[test]
    fn save_load_round_trip() {
        let net = small_net();
        let dir = std::env::temp_dir().join("fewstep-mlp-test");
        std::fs::create_dir_all(&dir).unwrap();
        let blob = dir.join("params.bin");
        let sidecar = dir.join("params.json");
        net.save(&blob, &sidecar).unwrap();
        let back = Mlp::load(&blob, &sidecar).unwrap();
        assert_eq!(net.params(), back.params());
        assert_eq!(net.spec(), back.spec());
        let out1 = net.forward(&[0.1, 0.2], 0.7);
        let out2 = back.forward(&[0.1, 0.2], 0.7);
        assert_eq!(out1, out2);
    }
}
