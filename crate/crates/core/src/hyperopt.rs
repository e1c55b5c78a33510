//! Gaussian-process Bayesian optimization over regularization weights and
//! prior coefficients.
//!
//! Points are handled in two coordinates: raw values (what the objective
//! sees) and the unit cube `[0, 1]^d` the GP is fit on. `log10` dimensions are
//! mapped affinely in `log10` space.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Objective value recorded for a trial whose training run failed.
pub const FAILURE_PENALTY: f64 = 1e6;
pub const N_CANDIDATES: usize = 1024;
pub const PATTERN_STEPS: usize = 50;
const MAX_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Log10,
    Linear,
}

/// One searched quantity; bounds are in raw space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dim {
    pub name: String,
    pub scale: Scale,
    pub lower: f64,
    pub upper: f64,
}

impl Dim {
    pub fn log10(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        Dim {
            name: name.into(),
            scale: Scale::Log10,
            lower,
            upper,
        }
    }

    pub fn linear(name: impl Into<String>, lower: f64, upper: f64) -> Self {
        Dim {
            name: name.into(),
            scale: Scale::Linear,
            lower,
            upper,
        }
    }

    fn bounds_internal(&self) -> (f64, f64) {
        match self.scale {
            Scale::Log10 => (self.lower.log10(), self.upper.log10()),
            Scale::Linear => (self.lower, self.upper),
        }
    }

    pub fn to_unit(&self, raw: f64) -> f64 {
        let (lo, hi) = self.bounds_internal();
        let v = match self.scale {
            Scale::Log10 => raw.log10(),
            Scale::Linear => raw,
        };
        (v - lo) / (hi - lo)
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        let (lo, hi) = self.bounds_internal();
        let v = lo + u.clamp(0.0, 1.0) * (hi - lo);
        let raw = match self.scale {
            Scale::Log10 => 10f64.powf(v),
            Scale::Linear => v,
        };
        raw.clamp(self.lower, self.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self> {
        let s = SearchSpace { dims };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::contract("search space has no dimensions"));
        }
        for d in &self.dims {
            if !(d.lower.is_finite() && d.upper.is_finite() && d.lower < d.upper) {
                return Err(Error::contract(format!(
                    "dimension {}: need finite lower < upper, got [{}, {}]",
                    d.name, d.lower, d.upper
                )));
            }
            if d.scale == Scale::Log10 && d.lower <= 0.0 {
                return Err(Error::contract(format!(
                    "log10 dimension {} needs a positive lower bound",
                    d.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn to_unit(&self, raw: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(raw).map(|(d, &r)| d.to_unit(r)).collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(u).map(|(d, &v)| d.from_unit(v)).collect()
    }

    pub fn contains(&self, raw: &[f64]) -> bool {
        raw.len() == self.len()
            && self
                .dims
                .iter()
                .zip(raw)
                .all(|(d, &r)| r >= d.lower && r <= d.upper)
    }
}

/// One evaluation of the outer objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// Raw-space point.
    pub point: Vec<f64>,
    /// Same point in the unit cube.
    pub unit: Vec<f64>,
    pub objective: f64,
    pub failed: bool,
    pub wallclock_seconds: f64,
    pub model_ref: Option<String>,
}

/// Matérn-5/2 ARD kernel hyperparameters, for objectives standardized to
/// zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl KernelParams {
    pub fn isotropic(dim: usize, lengthscale: f64, signal_var: f64, noise_var: f64) -> Self {
        KernelParams {
            lengthscales: vec![lengthscale; dim],
            signal_var,
            noise_var,
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        self.signal_var * matern52(r2.sqrt())
    }
}

/// `k(r) = (1 + √5 r + 5r²/3) e^{−√5 r}`.
pub fn matern52(r: f64) -> f64 {
    let s = 5f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub kernel: KernelParams,
    y_mean: f64,
    y_scale: f64,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GpModel {
    /// Exact GP posterior at fixed kernel hyperparameters.
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], kernel: &KernelParams) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::contract(format!(
                "need >= 1 observation with matching targets, got {} inputs and {} targets",
                xs.len(),
                ys.len()
            )));
        }
        let d = kernel.lengthscales.len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(Error::shape("observation dimension differs from kernel"));
        }
        if ys.iter().any(|y| !y.is_finite()) || xs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite observation".into()));
        }
        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let z = DVector::from_iterator(ys.len(), ys.iter().map(|y| (y - y_mean) / y_scale));
        let (chol, jitter) = factor(xs, kernel)?;
        let alpha = chol.solve(&z);
        Ok(GpModel {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            kernel: kernel.clone(),
            y_mean,
            y_scale,
            jitter,
            chol,
            alpha,
        })
    }

    /// Fits the kernel by maximizing the log marginal likelihood with a
    /// multi-start coordinate search in log-hyperparameter space.
    pub fn fit_ml(xs: &[Vec<f64>], ys: &[f64], seed: u64) -> Result<Self> {
        let d = xs.first().map(|x| x.len()).ok_or_else(|| Error::contract("no observations"))?;
        let kernel = fit_kernel(xs, ys, d, seed);
        Self::fit(xs, ys, &kernel)
    }

    /// Jitter added to the diagonal beyond the noise variance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Posterior mean and standard deviation of the latent objective.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| self.kernel.eval(x, xi)));
        let mu = k.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .expect("factor has a positive diagonal");
        let var = (self.kernel.signal_var - v.dot(&v)).max(0.0);
        (self.y_mean + self.y_scale * mu, self.y_scale * var.sqrt())
    }

    /// Log marginal likelihood of the standardized observations.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.ys.len() as f64;
        let z = DVector::from_iterator(
            self.ys.len(),
            self.ys.iter().map(|y| (y - self.y_mean) / self.y_scale),
        );
        let logdet: f64 = self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * z.dot(&self.alpha) - logdet - 0.5 * n * (2.0 * PI).ln()
    }

    pub fn best_observed(&self) -> f64 {
        self.ys.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn factor(xs: &[Vec<f64>], kernel: &KernelParams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = xs.len();
    let base = DMatrix::from_fn(n, n, |i, j| kernel.eval(&xs[i], &xs[j]));
    let mut jitter = 0.0;
    loop {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += kernel.noise_var + jitter;
        }
        if let Some(c) = k.cholesky() {
            return Ok((c, jitter));
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "kernel matrix not positive definite with jitter up to {MAX_JITTER:e}"
            )));
        }
    }
}

const LOG_LEN: (f64, f64) = (-4.6, 2.3);
const LOG_SIGNAL: (f64, f64) = (-3.0, 3.0);
const LOG_NOISE: (f64, f64) = (-18.4, 0.0);

fn fit_kernel(xs: &[Vec<f64>], ys: &[f64], d: usize, seed: u64) -> KernelParams {
    let decode = |th: &[f64]| KernelParams {
        lengthscales: th[..d].iter().map(|v| v.exp()).collect(),
        signal_var: th[d].exp(),
        noise_var: th[d + 1].exp(),
    };
    let bounds: Vec<(f64, f64)> = std::iter::repeat_n(LOG_LEN, d)
        .chain([LOG_SIGNAL, LOG_NOISE])
        .collect();
    let score = |th: &[f64]| {
        GpModel::fit(xs, ys, &decode(th))
            .map(|m| m.log_marginal_likelihood())
            .ok()
            .filter(|v| v.is_finite())
            .unwrap_or(f64::NEG_INFINITY)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![std::iter::repeat_n((0.3f64).ln(), d)
        .chain([0.0, (1e-4f64).ln()])
        .collect::<Vec<_>>()];
    for _ in 0..3 {
        starts.push(bounds.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect());
    }
    let mut best = (f64::NEG_INFINITY, starts[0].clone());
    for mut th in starts {
        let mut f = score(&th);
        let mut step = 1.0;
        while step > 1e-2 {
            let mut improved = false;
            for i in 0..th.len() {
                for dir in [1.0, -1.0] {
                    let mut cand = th.clone();
                    cand[i] = (cand[i] + dir * step).clamp(bounds[i].0, bounds[i].1);
                    let fc = score(&cand);
                    if fc > f {
                        th = cand;
                        f = fc;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if f > best.0 {
            best = (f, th);
        }
    }
    decode(&best.1)
}

/// Fits a GP on the trials' unit-cube points. With `kernel = None` the
/// hyperparameters are fit by maximum marginal likelihood.
pub fn gp_fit(trials: &[TrialRecord], kernel: Option<&KernelParams>) -> Result<GpModel> {
    let xs: Vec<Vec<f64>> = trials.iter().map(|t| t.unit.clone()).collect();
    let ys: Vec<f64> = trials.iter().map(|t| t.objective).collect();
    match kernel {
        Some(k) => GpModel::fit(&xs, &ys, k),
        None => GpModel::fit_ml(&xs, &ys, 0),
    }
}

pub fn gp_predict(model: &GpModel, x: &[f64]) -> (f64, f64) {
    model.predict(x)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Expected improvement below `best` for minimization.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    if !(sigma > 0.0) {
        return (best - mu).max(0.0);
    }
    let z = (best - mu) / sigma;
    ((best - mu) * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// EI maximizer over the unit cube: best of [`N_CANDIDATES`] uniform
/// candidates (earliest index wins ties) refined by [`PATTERN_STEPS`] steps
/// of compass search.
pub fn propose_next(model: &GpModel, rng: &mut impl Rng) -> Vec<f64> {
    let d = model.kernel.lengthscales.len();
    let best = model.best_observed();
    let ei = |x: &[f64]| {
        let (mu, sigma) = model.predict(x);
        expected_improvement(mu, sigma, best)
    };
    let candidates: Vec<Vec<f64>> = (0..N_CANDIDATES)
        .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut x = candidates[0].clone();
    let mut fx = ei(&x);
    for c in &candidates[1..] {
        let fc = ei(c);
        if fc > fx {
            x = c.clone();
            fx = fc;
        }
    }
    let mut step = 0.05;
    for _ in 0..PATTERN_STEPS {
        let mut moved = false;
        'dims: for i in 0..d {
            for dir in [1.0, -1.0] {
                let mut c = x.clone();
                c[i] = (c[i] + dir * step).clamp(0.0, 1.0);
                let fc = ei(&c);
                if fc > fx {
                    x = c;
                    fx = fc;
                    moved = true;
                    break 'dims;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    x
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// `n` points of a Halton sequence in `[0,1]^d` under a seeded random shift
/// modulo 1.
pub fn initial_design(n: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if d > PRIMES.len() {
        return Err(Error::contract(format!("initial design supports up to {} dims", PRIMES.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4841_4c54);
    let shift: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
    Ok((1..=n)
        .map(|i| {
            (0..d)
                .map(|k| (radical_inverse(i, PRIMES[k]) + shift[k]).fract())
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoOptions {
    pub n_init: usize,
    pub budget: usize,
    pub seed: u64,
    /// Fit the GP on `ln(objective)`; for strictly positive objectives
    /// spanning orders of magnitude.
    #[serde(default)]
    pub log_objective: bool,
}

impl BoOptions {
    pub fn new(n_init: usize, budget: usize, seed: u64) -> Self {
        BoOptions {
            n_init,
            budget,
            seed,
            log_objective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoResult {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub trials: Vec<TrialRecord>,
}

impl BoResult {
    /// Best objective seen after each trial.
    pub fn incumbents(&self) -> Vec<f64> {
        incumbent_trace(&self.trials)
    }

    pub fn best_trial(&self) -> &TrialRecord {
        best_index(&self.trials).map(|i| &self.trials[i]).expect("at least one trial")
    }
}

pub fn incumbent_trace(trials: &[TrialRecord]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    trials
        .iter()
        .map(|t| {
            best = best.min(t.objective);
            best
        })
        .collect()
}

fn best_index(trials: &[TrialRecord]) -> Option<usize> {
    (0..trials.len()).reduce(|a, b| if trials[b].objective < trials[a].objective { b } else { a })
}

/// Values the GP is fit on: failures are replaced by the worst successful
/// objective so a single penalty does not swamp the standardization.
fn surrogate_targets(trials: &[TrialRecord], log: bool) -> Vec<f64> {
    let worst_ok = trials
        .iter()
        .filter(|t| !t.failed)
        .map(|t| t.objective)
        .fold(f64::NEG_INFINITY, f64::max);
    let fill = if worst_ok.is_finite() { worst_ok } else { FAILURE_PENALTY };
    trials
        .iter()
        .map(|t| {
            let y = if t.failed { fill } else { t.objective };
            if log {
                y.max(1e-300).ln()
            } else {
                y
            }
        })
        .collect()
}

/// Sequential GP/EI minimization of `objective` over `space`. The objective
/// receives raw-space points and the trial index; an `Err` is recorded as
/// [`FAILURE_PENALTY`] and the loop continues.
pub fn bo_minimize<F>(mut objective: F, space: &SearchSpace, opts: &BoOptions) -> Result<BoResult>
where
    F: FnMut(&[f64], usize) -> Result<f64>,
{
    space.validate()?;
    if opts.n_init == 0 || opts.budget < opts.n_init {
        return Err(Error::contract(format!(
            "need budget >= n_init >= 1, got n_init = {}, budget = {}",
            opts.n_init, opts.budget
        )));
    }
    if opts.log_objective {
        log::debug!("fitting the surrogate on ln(objective)");
    }
    let d = space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let design = initial_design(opts.n_init, d, opts.seed)?;
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(opts.budget);
    let mut evaluate = |unit: Vec<f64>, trials: &mut Vec<TrialRecord>| {
        let point = space.from_unit(&unit);
        let unit = space.to_unit(&point);
        let trial = trials.len();
        let start = Instant::now();
        let outcome = objective(&point, trial);
        let wallclock_seconds = start.elapsed().as_secs_f64();
        let (objective, failed) = match outcome {
            Ok(v) if v.is_finite() => (v, false),
            Ok(v) => {
                log::warn!("trial {trial}: non-finite objective {v}, recording penalty");
                (FAILURE_PENALTY, true)
            }
            Err(e) => {
                log::warn!("trial {trial}: {e}; recording penalty");
                (FAILURE_PENALTY, true)
            }
        };
        trials.push(TrialRecord {
            trial,
            point,
            unit,
            objective,
            failed,
            wallclock_seconds,
            model_ref: None,
        });
    };
    for u in design {
        evaluate(u, &mut trials);
    }
    while trials.len() < opts.budget {
        let xs: Vec<Vec<f64>> = trials.iter().map(|t| t.unit.clone()).collect();
        let ys = surrogate_targets(&trials, opts.log_objective);
        let model = GpModel::fit_ml(&xs, &ys, opts.seed.wrapping_add(trials.len() as u64))?;
        let next = propose_next(&model, &mut rng);
        evaluate(next, &mut trials);
    }
    let b = best_index(&trials).expect("budget >= 1");
    Ok(BoResult {
        best_point: trials[b].point.clone(),
        best_value: trials[b].objective,
        trials,
    })
}

/// Writes the trial log with columns `trial, <dim names>, objective,
/// wallclock_seconds`.
pub fn write_trials_csv(path: &Path, space: &SearchSpace, trials: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["trial".to_string()];
    header.extend(space.dims.iter().map(|d| d.name.clone()));
    header.extend(["objective".into(), "wallclock_seconds".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for t in trials {
        let mut row = vec![t.trial.to_string()];
        row.extend(t.point.iter().map(|v| format!("{v:e}")));
        row.push(format!("{:e}", t.objective));
        row.push(format!("{:.3}", t.wallclock_seconds));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
