//! Quantitative evaluation: per-sample global error against the dense
//! reference solution, and distributional distances between generated and
//! true data (energy distance and a sliced transport distance — the
//! desk-scale stand-ins for feature-space metrics).

use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::gmm::GaussianMixture;
use crate::rng::{normal_vec, substream};
use crate::sampler::{reference_solve, sample, OdeMethod};
use crate::schedule::Schedule;
use crate::stats::{par_map_indexed, sq_dist, MeanStderr};

/// Summary of one schedule/denoiser evaluation.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub schedule_id: String,
    pub n_steps: usize,
    pub mean_global_error: MeanStderr,
    pub energy_distance: f64,
    pub sliced_wasserstein: f64,
    pub sample_count: usize,
    pub seed: u64,
}

/// One CSV row of an evaluation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub schedule_id: String,
    pub n_steps: usize,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub seed: u64,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<EvalRow> {
        vec![
            EvalRow {
                schedule_id: self.schedule_id.clone(),
                n_steps: self.n_steps,
                metric: "global_error".into(),
                value: self.mean_global_error.mean,
                stderr: Some(self.mean_global_error.stderr),
                seed: self.seed,
            },
            EvalRow {
                schedule_id: self.schedule_id.clone(),
                n_steps: self.n_steps,
                metric: "energy_distance".into(),
                value: self.energy_distance,
                stderr: None,
                seed: self.seed,
            },
            EvalRow {
                schedule_id: self.schedule_id.clone(),
                n_steps: self.n_steps,
                metric: "sliced_wasserstein".into(),
                value: self.sliced_wasserstein,
                stderr: None,
                seed: self.seed,
            },
        ]
    }
}

/// Paired squared error of the few-step sampler against the reference
/// solution, over shared initial noise draws. The reference integrates with
/// RK4; see [`paired_global_errors_with_method`] to choose otherwise.
pub fn global_error<D: Denoiser + ?Sized>(
    h: &D,
    s: &Schedule,
    n_seeds: usize,
    fine_steps: usize,
    seed: u64,
) -> Result<MeanStderr> {
    let per = paired_global_errors(h, std::slice::from_ref(s), n_seeds, fine_steps, seed)?;
    Ok(MeanStderr::from_samples(&per[0]))
}

/// Per-seed squared errors for several schedules sharing initial noise and
/// reference solutions (common random numbers). Returns one error vector per
/// schedule, index-aligned by seed.
pub fn paired_global_errors<D: Denoiser + ?Sized>(
    h: &D,
    schedules: &[Schedule],
    n_seeds: usize,
    fine_steps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    paired_global_errors_with_method(h, schedules, n_seeds, fine_steps, seed, OdeMethod::Rk4)
}

pub fn paired_global_errors_with_method<D: Denoiser + ?Sized>(
    h: &D,
    schedules: &[Schedule],
    n_seeds: usize,
    fine_steps: usize,
    seed: u64,
    method: OdeMethod,
) -> Result<Vec<Vec<f64>>> {
    if n_seeds < 2 {
        return Err(Error::InvalidParameter("global error needs at least 2 seeds".into()));
    }
    if schedules.is_empty() {
        return Err(Error::InvalidParameter("no schedules given".into()));
    }
    let range = schedules[0].range();
    for s in schedules {
        if s.range() != range {
            return Err(Error::InvalidParameter(
                "paired comparison requires a common noise range".into(),
            ));
        }
    }
    let dim = h.dim();
    let per_seed: Vec<Result<Vec<f64>>> = par_map_indexed(n_seeds, |k| {
        let mut rng = substream(seed, "eval-ge", k as u64);
        let eps = normal_vec(&mut rng, dim);
        let x0: Vec<f64> = eps.iter().map(|e| range.sigma_max() * e).collect();
        // One dense solve serves every schedule for this seed.
        let reference = reference_solve(h, range, &x0, fine_steps, method)?;
        let mut errs = Vec::with_capacity(schedules.len());
        for s in schedules {
            let (fin, _) = sample(h, s, &x0)?;
            errs.push(sq_dist(&fin, &reference.final_x));
        }
        Ok(errs)
    });
    let mut out = vec![Vec::with_capacity(n_seeds); schedules.len()];
    for row in per_seed {
        for (i, e) in row?.into_iter().enumerate() {
            out[i].push(e);
        }
    }
    Ok(out)
}

/// Paired mean difference `errors(a) - errors(b)` with its standard error.
pub fn paired_difference(a: &[f64], b: &[f64]) -> MeanStderr {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    MeanStderr::from_samples(&diffs)
}

/// Energy distance `2 E||X-Y|| - E||X-X'|| - E||Y-Y'||`, estimated with all
/// ordered pairs (including the zero diagonal) in every term so that
/// identical batches give exactly zero.
pub fn energy_distance(gen: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    for (name, batch) in [("first", gen), ("second", truth)] {
        if batch.len() < 64 {
            return Err(Error::BatchTooSmall { need: 64, got: batch.len() });
        }
        let _ = name;
    }
    let cross = mean_pair_distance(gen, truth);
    let within_gen = mean_pair_distance(gen, gen);
    let within_truth = mean_pair_distance(truth, truth);
    Ok(2.0 * cross - within_gen - within_truth)
}

fn mean_pair_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let sums: Vec<f64> = par_map_indexed(a.len(), |i| {
        let mut acc = 0.0;
        for y in b {
            acc += sq_dist(&a[i], y).sqrt();
        }
        acc
    });
    sums.iter().sum::<f64>() / (a.len() as f64 * b.len() as f64)
}

/// Sliced squared-transport distance: project both batches on `n_proj`
/// random unit directions, compare empirical quantile functions, average
/// the squared 1-D costs and take the root.
pub fn sliced_wasserstein(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_proj: usize,
    seed: u64,
) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: a.len().min(b.len()) });
    }
    if n_proj == 0 {
        return Err(Error::InvalidParameter("need at least one projection".into()));
    }
    let dim = a[0].len();
    let mut rng = substream(seed, "sw-projections", 0);
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir = normal_vec(&mut rng, dim);
        let norm = crate::stats::norm2(&dir).max(1e-300);
        for d in &mut dir {
            *d /= norm;
        }
        let mut pa: Vec<f64> = a.iter().map(|x| crate::stats::dot(x, &dir)).collect();
        let mut pb: Vec<f64> = b.iter().map(|x| crate::stats::dot(x, &dir)).collect();
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        let k = pa.len().max(pb.len());
        let mut cost = 0.0;
        for i in 0..k {
            let q = (i as f64 + 0.5) / k as f64;
            let qa = pa[((q * pa.len() as f64) as usize).min(pa.len() - 1)];
            let qb = pb[((q * pb.len() as f64) as usize).min(pb.len() - 1)];
            cost += (qa - qb) * (qa - qb);
        }
        total += cost / k as f64;
    }
    Ok((total / n_proj as f64).sqrt())
}

/// Draw a generated batch: pure-noise initial states run through the
/// few-step sampler.
pub fn generate_batch<D: Denoiser + ?Sized>(
    h: &D,
    s: &Schedule,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let dim = h.dim();
    let smax = s.sigma_max();
    let rows: Vec<Result<Vec<f64>>> = par_map_indexed(count, |k| {
        let mut rng = substream(seed, "gen-batch", k as u64);
        let x0: Vec<f64> = normal_vec(&mut rng, dim).iter().map(|e| smax * e).collect();
        Ok(sample(h, s, &x0)?.0)
    });
    rows.into_iter().collect()
}

/// Evaluate a set of schedules under one denoiser: paired global error plus
/// distributional distances against the true data.
pub fn compare_schedules<D: Denoiser + ?Sized>(
    schedules: &[(String, Schedule)],
    h: &D,
    gmm: &GaussianMixture,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if schedules.is_empty() {
        return Err(Error::InvalidParameter("no schedules given".into()));
    }
    let mut truth_rng = substream(seed, "eval-truth", 0);
    let truth = gmm.sample_batch(cfg.sample_count, &mut truth_rng);
    let mut reports = Vec::with_capacity(schedules.len());
    for (id, s) in schedules {
        let ge = global_error(h, s, cfg.n_seeds, cfg.fine_steps, seed)?;
        let generated = generate_batch(h, s, cfg.sample_count, seed)?;
        let ed = energy_distance(&generated, &truth)?;
        let sw = sliced_wasserstein(&generated, &truth, cfg.n_projections, seed)?;
        reports.push(EvalReport {
            schedule_id: id.clone(),
            n_steps: s.n_steps(),
            mean_global_error: ge,
            energy_distance: ed,
            sliced_wasserstein: sw,
            sample_count: cfg.sample_count,
            seed,
        });
    }
    Ok(reports)
}
