//! Sampling schedules: strictly decreasing noise-level sequences, their
//! unconstrained softmax parameterization, and the per-step weight algebra.
//!
//! A schedule pins the noise levels `σ_0 > σ_1 > ... > σ_{N-1}` at which a
//! denoiser is evaluated while integrating the sampling ODE. The endpoints
//! are fixed to the supported range (`σ_0 = σ_max`, `σ_{N-1} = σ_min`); the
//! `N-2` interior levels carry all the freedom. The learnable form stores an
//! unconstrained vector `v` of length `N-2` and maps it through a softmax
//! over increments, so every finite `v` yields a valid schedule:
//!
//! ```text
//! w   = softmax(concat(v, 1))                      N-1 positive increments
//! σ_i = σ_min + (σ_max - σ_min) · Σ_{j>=i} w_j     interior levels
//! λ_i = σ_min/σ_{i+1} - σ_min/σ_i                  per-step weights
//! Σ_i λ_i + σ_min/σ_max = 1                        telescoping identity
//! ```
//!
//! The weights `λ_i` are the convex coefficients with which each step's
//! denoised output enters the final iterate of a first-order sampler; see
//! [`crate::sampler::unrolled_sample`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported noise-level range, `0 < sigma_min < sigma_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRange")]
pub struct NoiseRange {
    #[serde(rename = "min")]
    sigma_min: f64,
    #[serde(rename = "max")]
    sigma_max: f64,
}

#[derive(Deserialize)]
struct RawRange {
    min: f64,
    max: f64,
}

impl TryFrom<RawRange> for NoiseRange {
    type Error = Error;
    fn try_from(raw: RawRange) -> Result<Self> {
        NoiseRange::new(raw.min, raw.max)
    }
}

impl NoiseRange {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min.is_finite() && sigma_max.is_finite() && 0.0 < sigma_min && sigma_min < sigma_max)
        {
            return Err(Error::InvalidParameter(format!(
                "noise range requires 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]"
            )));
        }
        Ok(Self { sigma_min, sigma_max })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn span(&self) -> f64 {
        self.sigma_max - self.sigma_min
    }
}

impl Default for NoiseRange {
    /// The conventional `[0.002, 80]` range.
    fn default() -> Self {
        Self { sigma_min: 0.002, sigma_max: 80.0 }
    }
}

/// A strictly decreasing sequence of noise levels with pinned endpoints.
///
/// `n_steps` counts denoiser evaluations per sample: the `N-1` Euler steps
/// each evaluate once, and the final projection to `σ = 0` evaluates once
/// more at `σ_min`. Serializes as `{"sigma": [...], "range": {"min", "max"}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct Schedule {
    #[serde(rename = "sigma")]
    sigmas: Vec<f64>,
    range: NoiseRange,
}

#[derive(Deserialize)]
struct RawSchedule {
    sigma: Vec<f64>,
    range: NoiseRange,
}

impl TryFrom<RawSchedule> for Schedule {
    type Error = Error;
    fn try_from(raw: RawSchedule) -> Result<Self> {
        Schedule::new(raw.sigma, raw.range)
    }
}

impl Schedule {
    pub fn new(sigmas: Vec<f64>, range: NoiseRange) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 noise levels, got {}",
                sigmas.len()
            )));
        }
        for (i, &s) in sigmas.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidSchedule(format!("sigma[{i}] = {s} is not positive")));
            }
        }
        for i in 0..sigmas.len() - 1 {
            if !(sigmas[i] > sigmas[i + 1]) {
                return Err(Error::InvalidSchedule(format!(
                    "not strictly decreasing at index {i}: {} <= {}",
                    sigmas[i + 1],
                    sigmas[i]
                )));
            }
        }
        if sigmas[0] != range.sigma_max() || sigmas[sigmas.len() - 1] != range.sigma_min() {
            return Err(Error::InvalidSchedule(format!(
                "endpoints [{}, {}] do not match range [{}, {}]",
                sigmas[0],
                sigmas[sigmas.len() - 1],
                range.sigma_max(),
                range.sigma_min()
            )));
        }
        Ok(Self { sigmas, range })
    }

    /// Build from the sigma sequence alone; the range is taken from the endpoints.
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(Error::InvalidSchedule("need at least 2 noise levels".into()));
        }
        let range = NoiseRange::new(sigmas[sigmas.len() - 1], sigmas[0])?;
        Self::new(sigmas, range)
    }

    /// Bypass endpoint/monotonicity validation. Only for internal finite
    /// difference probes, which perturb single levels by less than the gap
    /// to their neighbours.
    pub(crate) fn new_unchecked(sigmas: Vec<f64>, range: NoiseRange) -> Self {
        Self { sigmas, range }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn n_steps(&self) -> usize {
        self.sigmas.len()
    }

    pub fn range(&self) -> NoiseRange {
        self.range
    }

    pub fn sigma_min(&self) -> f64 {
        self.range.sigma_min()
    }

    pub fn sigma_max(&self) -> f64 {
        self.range.sigma_max()
    }
}

/// Unconstrained schedule parameters: any finite `v` maps to a valid
/// schedule through [`schedule_from_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub v: Vec<f64>,
    range: NoiseRange,
    n_steps: usize,
}

impl ScheduleParams {
    pub fn new(v: Vec<f64>, range: NoiseRange, n_steps: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::InvalidParameter(format!("n_steps = {n_steps} < 2")));
        }
        if v.len() != n_steps - 2 {
            return Err(Error::InvalidParameter(format!(
                "expected {} free parameters for n_steps = {n_steps}, got {}",
                n_steps - 2,
                v.len()
            )));
        }
        Ok(Self { v, range, n_steps })
    }

    /// All-ones vector: matches the softmax anchor, so increments are equal
    /// and the schedule is linear.
    pub fn ones(range: NoiseRange, n_steps: usize) -> Result<Self> {
        Self::new(vec![1.0; n_steps.saturating_sub(2)], range, n_steps)
    }

    pub fn range(&self) -> NoiseRange {
        self.range
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

/// Per-step convex weights of the unrolled first-order sampler.
///
/// `lambdas[i] = σ_min/σ_{i+1} - σ_min/σ_i` for `i = 0..N-2`, and
/// `initial_coeff = σ_min/σ_max` multiplies the initial state. Together they
/// sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWeights {
    lambdas: Vec<f64>,
    initial_coeff: f64,
}

impl StepWeights {
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn initial_coeff(&self) -> f64 {
        self.initial_coeff
    }

    /// `Σ λ_i + initial_coeff`; equals 1 up to rounding.
    pub fn total(&self) -> f64 {
        self.lambdas.iter().sum::<f64>() + self.initial_coeff
    }
}

/// Derive the unrolled-sampler weights of a schedule.
pub fn weights_from_schedule(s: &Schedule) -> StepWeights {
    let sig = s.sigmas();
    let n = sig.len();
    let smin = s.sigma_min();
    // The product form keeps every lambda strictly positive even when
    // adjacent levels are only a few ulps apart.
    let lambdas = (0..n - 1)
        .map(|i| smin * (sig[i] - sig[i + 1]) / (sig[i] * sig[i + 1]))
        .collect();
    StepWeights { lambdas, initial_coeff: smin / s.sigma_max() }
}

/// Softmax of `concat(v, 1)`, evaluated stably.
fn increment_softmax(v: &[f64]) -> Vec<f64> {
    let mut bar: Vec<f64> = v.to_vec();
    bar.push(1.0);
    let max = bar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = bar.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    w
}

/// Map unconstrained parameters to a schedule.
///
/// Interior levels are cumulative softmax increments rescaled onto
/// `[σ_min, σ_max]`; the endpoints are set exactly. The output is strictly
/// decreasing for any finite `v`.
pub fn schedule_from_params(p: &ScheduleParams) -> Result<Schedule> {
    for (i, x) in p.v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::InvalidParameter(format!("v[{i}] = {x} is not finite")));
        }
    }
    let n = p.n_steps;
    let range = p.range;
    let mut sigmas = vec![0.0; n];
    sigmas[0] = range.sigma_max();
    sigmas[n - 1] = range.sigma_min();
    if n > 2 {
        let w = increment_softmax(&p.v);
        let span = range.span();
        let mut suffix = 0.0;
        for i in (1..n - 1).rev() {
            suffix += w[i];
            sigmas[i] = range.sigma_min() + span * suffix;
        }
    }
    Schedule::new(sigmas, range)
}

/// Invert [`schedule_from_params`]: recover parameters that reproduce a
/// reference schedule (up to the softmax shift gauge, anchored so the last
/// pseudo-parameter is 1).
pub fn init_params_from_reference(reference: &Schedule) -> Result<ScheduleParams> {
    let sig = reference.sigmas();
    let n = sig.len();
    if n == 2 {
        return ScheduleParams::new(vec![], reference.range(), 2);
    }
    let span = reference.range().span();
    let mut logs = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let incr = (sig[i] - sig[i + 1]) / span;
        if !(incr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "reference increment {i} is not strictly positive"
            )));
        }
        logs.push(incr.ln());
    }
    let shift = 1.0 - logs[n - 2];
    let v = logs[..n - 2].iter().map(|l| l + shift).collect();
    ScheduleParams::new(v, reference.range(), n)
}

/// Power-curve baseline schedule: `σ_i^{1/ρ}` interpolates linearly between
/// the endpoints. `ρ = 1` is an arithmetic grid; larger `ρ` concentrates
/// levels near `σ_min`.
pub fn rho_schedule(range: NoiseRange, n_steps: usize, rho: f64) -> Result<Schedule> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::InvalidParameter(format!("rho = {rho} must be positive")));
    }
    if n_steps < 2 {
        return Err(Error::InvalidSchedule(format!("n_steps = {n_steps} < 2")));
    }
    let inv = 1.0 / rho;
    let a = range.sigma_max().powf(inv);
    let b = range.sigma_min().powf(inv);
    let last = (n_steps - 1) as f64;
    let mut sigmas: Vec<f64> =
        (0..n_steps).map(|i| (a + (i as f64 / last) * (b - a)).powf(rho)).collect();
    sigmas[0] = range.sigma_max();
    sigmas[n_steps - 1] = range.sigma_min();
    Schedule::new(sigmas, range)
}

/// Geometric (log-spaced) schedule; the grid used by the dense reference
/// solver.
pub fn log_spaced_schedule(range: NoiseRange, n_steps: usize) -> Result<Schedule> {
    if n_steps < 2 {
        return Err(Error::InvalidSchedule(format!("n_steps = {n_steps} < 2")));
    }
    let ratio = range.sigma_min() / range.sigma_max();
    let last = (n_steps - 1) as f64;
    let mut sigmas: Vec<f64> =
        (0..n_steps).map(|i| range.sigma_max() * ratio.powf(i as f64 / last)).collect();
    sigmas[0] = range.sigma_max();
    sigmas[n_steps - 1] = range.sigma_min();
    Schedule::new(sigmas, range)
}

/// ∂σ/∂v chain rule: push a gradient over the sigma vector back to the free
/// parameters. Endpoint entries of `grad_sigma` are ignored since those
/// levels are pinned.
pub fn chain_sigma_grad_to_v(p: &ScheduleParams, grad_sigma: &[f64]) -> Vec<f64> {
    let n = p.n_steps;
    assert_eq!(grad_sigma.len(), n);
    if n == 2 {
        return vec![];
    }
    let w = increment_softmax(&p.v);
    let span = p.range.span();
    // sigma_i = min + span * sum_{j>=i} w_j  =>  dL/dw_j = span * sum_{i<=j} g_i
    // over interior i in 1..=n-2.
    let mut grad_w = vec![0.0; n - 1];
    let mut prefix = 0.0;
    for j in 0..n - 1 {
        if (1..=n - 2).contains(&j) {
            prefix += grad_sigma[j];
        }
        grad_w[j] = span * prefix;
    }
    // Softmax backward; the anchored last pseudo-parameter is not free.
    let inner: f64 = grad_w.iter().zip(&w).map(|(g, wi)| g * wi).sum();
    (0..n - 2).map(|k| w[k] * (grad_w[k] - inner)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(min: f64, max: f64) -> NoiseRange {
        NoiseRange::new(min, max).unwrap()
    }

    #[test]
    fn weights_telescope_4_2_1() {
        let s = Schedule::from_sigmas(vec![4.0, 2.0, 1.0]).unwrap();
        let w = weights_from_schedule(&s);
        assert_eq!(w.lambdas(), &[0.25, 0.5]);
        assert_eq!(w.initial_coeff(), 0.25);
        assert!((w.total() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weights_two_point_schedule() {
        let s = Schedule::from_sigmas(vec![80.0, 0.002]).unwrap();
        let w = weights_from_schedule(&s);
        assert_eq!(w.lambdas().len(), 1);
        assert!((w.lambdas()[0] - (1.0 - 0.002 / 80.0)).abs() < 1e-15);
    }

    #[test]
    fn weights_10_5_2_1() {
        // Direct evaluation of the lambda formula with sigma_min = 1:
        // 1/5 - 1/10 = 0.1, 1/2 - 1/5 = 0.3, 1/1 - 1/2 = 0.5.
        let s = Schedule::from_sigmas(vec![10.0, 5.0, 2.0, 1.0]).unwrap();
        let w = weights_from_schedule(&s);
        let expect = [0.1, 0.3, 0.5];
        for (l, e) in w.lambdas().iter().zip(expect) {
            assert!((l - e).abs() < 1e-15, "{l} vs {e}");
        }
        assert!((w.initial_coeff() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn params_two_steps_is_endpoints_only() {
        let p = ScheduleParams::new(vec![], range(0.002, 80.0), 2).unwrap();
        let s = schedule_from_params(&p).unwrap();
        assert_eq!(s.sigmas(), &[80.0, 0.002]);
    }

    #[test]
    fn params_symmetric_softmax_three_steps() {
        let p = ScheduleParams::new(vec![1.0], range(0.002, 80.0), 3).unwrap();
        let s = schedule_from_params(&p).unwrap();
        assert_eq!(s.sigmas()[0], 80.0);
        assert!((s.sigmas()[1] - 40.001).abs() < 1e-10);
        assert_eq!(s.sigmas()[2], 0.002);
    }

    #[test]
    fn params_at_anchor_are_linear() {
        // Hand evaluation: softmax of [1,1,1,1] has equal increments 1/4 of
        // the span, so sigma is the arithmetic grid min + span * {1, 3/4,
        // 1/2, 1/4, 0}.
        let p = ScheduleParams::ones(range(1.0, 9.0), 5).unwrap();
        let s = schedule_from_params(&p).unwrap();
        let expect = [9.0, 7.0, 5.0, 3.0, 1.0];
        for (a, b) in s.sigmas().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn params_zero_vector_by_hand_softmax() {
        // softmax([0, 0, 0, 1]) = [1, 1, 1, e] / (3 + e); cumulative sums
        // from the tail give the interior levels.
        let p = ScheduleParams::new(vec![0.0; 3], range(1.0, 9.0), 5).unwrap();
        let s = schedule_from_params(&p).unwrap();
        let z = 3.0 + std::f64::consts::E;
        let w = [1.0 / z, 1.0 / z, 1.0 / z, std::f64::consts::E / z];
        let expect = [
            9.0,
            1.0 + 8.0 * (w[1] + w[2] + w[3]),
            1.0 + 8.0 * (w[2] + w[3]),
            1.0 + 8.0 * w[3],
            1.0,
        ];
        for (a, b) in s.sigmas().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn params_reject_non_finite() {
        let p = ScheduleParams::new(vec![f64::NAN], range(0.002, 80.0), 3).unwrap();
        assert!(schedule_from_params(&p).is_err());
    }

    #[test]
    fn round_trip_random_params() {
        use rand::Rng;
        let mut rng = crate::rng::stream(42, "roundtrip");
        for n in [3usize, 5, 9, 17] {
            let v: Vec<f64> = (0..n - 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p = ScheduleParams::new(v, range(0.002, 80.0), n).unwrap();
            let s = schedule_from_params(&p).unwrap();
            let q = init_params_from_reference(&s).unwrap();
            let s2 = schedule_from_params(&q).unwrap();
            for (a, b) in s.sigmas().iter().zip(s2.sigmas()) {
                assert!((a - b).abs() <= 1e-9 * a.abs(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn round_trip_linear_and_rho7() {
        for s in [
            rho_schedule(range(0.002, 80.0), 5, 1.0).unwrap(),
            rho_schedule(range(0.002, 80.0), 5, 7.0).unwrap(),
        ] {
            let p = init_params_from_reference(&s).unwrap();
            let s2 = schedule_from_params(&p).unwrap();
            for (a, b) in s.sigmas().iter().zip(s2.sigmas()) {
                assert!((a - b).abs() <= 1e-9 * a.abs(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn init_params_rejects_flat_increments() {
        let s = Schedule::new_unchecked(vec![4.0, 2.0, 2.0, 1.0], range(1.0, 4.0));
        assert!(init_params_from_reference(&s).is_err());
    }

    #[test]
    fn rho_one_is_arithmetic() {
        let s = rho_schedule(range(0.5, 4.5), 5, 1.0).unwrap();
        let expect = [4.5, 3.5, 2.5, 1.5, 0.5];
        for (a, b) in s.sigmas().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rho_two_steps_is_endpoints() {
        let s = rho_schedule(range(0.002, 80.0), 2, 3.3).unwrap();
        assert_eq!(s.sigmas(), &[80.0, 0.002]);
    }

    #[test]
    fn rho_seven_monotone_and_endpoint_exact() {
        let s = rho_schedule(range(0.002, 80.0), 5, 7.0).unwrap();
        assert_eq!(s.sigmas()[0], 80.0);
        assert_eq!(s.sigmas()[4], 0.002);
        for i in 0..4 {
            assert!(s.sigmas()[i] > s.sigmas()[i + 1]);
        }
        // Spot value from the closed form.
        let a = 80.0f64.powf(1.0 / 7.0);
        let b = 0.002f64.powf(1.0 / 7.0);
        let expect = (a + 0.25 * (b - a)).powi(7);
        assert!((s.sigmas()[1] - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn schedule_rejects_bad_sequences() {
        assert!(Schedule::from_sigmas(vec![1.0]).is_err());
        assert!(Schedule::from_sigmas(vec![1.0, 2.0]).is_err());
        assert!(Schedule::from_sigmas(vec![2.0, 2.0]).is_err());
        assert!(Schedule::from_sigmas(vec![2.0, -1.0]).is_err());
        assert!(Schedule::new(vec![3.0, 1.0], range(1.0, 4.0)).is_err());
    }

    #[test]
    fn json_round_trip_and_rejection() {
        let s = rho_schedule(range(0.002, 80.0), 7, 7.0).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"sigma\""));
        let back: Schedule = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);

        let bad = r#"{"sigma": [1.0, 2.0], "range": {"min": 1.0, "max": 2.0}}"#;
        assert!(serde_json::from_str::<Schedule>(bad).is_err());
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let p = ScheduleParams::new(vec![0.3, -0.7, 1.1], range(0.01, 10.0), 5).unwrap();
        // Arbitrary downstream gradient over sigma.
        let g = [0.2, -1.0, 0.5, 2.0, -0.3];
        let grad_v = chain_sigma_grad_to_v(&p, &g);
        let f = |v: &[f64]| {
            let p = ScheduleParams::new(v.to_vec(), p.range(), 5).unwrap();
            let s = schedule_from_params(&p).unwrap();
            s.sigmas().iter().zip(g).map(|(s, gi)| s * gi).sum::<f64>()
        };
        let h = 1e-6;
        for k in 0..3 {
            let mut vp = p.v.clone();
            let mut vm = p.v.clone();
            vp[k] += h;
            vm[k] -= h;
            let fd = (f(&vp) - f(&vm)) / (2.0 * h);
            assert!(
                (fd - grad_v[k]).abs() < 1e-6 * (1.0 + fd.abs()),
                "k={k}: {fd} vs {}",
                grad_v[k]
            );
        }
    }
}
