//! Ground-truth fields and noisy training datasets.
//!
//! Space is periodic on `[0, 2π)`; the grid omits `x = 2π` and the periodic
//! boundary loss ties the two ends together instead.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::PriorFamily;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Space-time mesh for oracle fields and test points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub nx: usize,
    pub nt: usize,
}

impl GridSpec {
    pub fn new(t_max: f64, nx: usize, nt: usize) -> Result<Self> {
        let g = GridSpec {
            x_min: 0.0,
            x_max: 2.0 * PI,
            t_min: 0.0,
            t_max,
            nx,
            nt,
        };
        g.validate()?;
        Ok(g)
    }

    /// 256 × 100 points over `[0, 2π) × [0, 0.5]`.
    pub fn reaction_default() -> Self {
        GridSpec::new(0.5, 256, 100).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.nt < 2 {
            return Err(Error::contract(format!(
                "grid needs nx, nt >= 2 (got {} × {})",
                self.nx, self.nt
            )));
        }
        let finite = [self.x_min, self.x_max, self.t_min, self.t_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.t_max <= self.t_min {
            return Err(Error::contract("grid bounds must be finite and increasing"));
        }
        Ok(())
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (self.x_max - self.x_min) * i as f64 / self.nx as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        self.t_min + (self.t_max - self.t_min) * j as f64 / (self.nt - 1) as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..self.nt).map(|j| self.t(j)).collect()
    }

    pub fn len(&self) -> usize {
        self.nx * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every grid point as `(x, t)`, x-major: index `i * nt + j`.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let ts = self.ts();
        self.xs()
            .into_iter()
            .flat_map(|x| ts.iter().map(move |&t| [x, t]))
            .collect()
    }
}

/// Scalar field sampled on a grid; `values[[i, j]] = u(x_i, t_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub grid: GridSpec,
    pub values: Array2<f64>,
}

impl Field {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    /// `exp(−(x − π)² / (2 (π/4)²))`
    GaussianBump,
    /// `sin x`
    Sine,
}

impl InitialCondition {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            InitialCondition::GaussianBump => gaussian_bump(x),
            InitialCondition::Sine => x.sin(),
        }
    }
}

pub fn gaussian_bump(x: f64) -> f64 {
    let s = PI / 4.0;
    (-(x - PI).powi(2) / (2.0 * s * s)).exp()
}

/// The hidden true system that generates data. Never used as a prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub family: PriorFamily,
    pub coeffs: BTreeMap<String, f64>,
    pub initial_condition: InitialCondition,
}

impl OracleSpec {
    pub fn reaction(rho: f64) -> Self {
        OracleSpec {
            family: PriorFamily::Reaction,
            coeffs: BTreeMap::from([("rho".into(), rho)]),
            initial_condition: InitialCondition::GaussianBump,
        }
    }

    pub fn convection(beta: f64) -> Self {
        OracleSpec {
            family: PriorFamily::Convection,
            coeffs: BTreeMap::from([("beta".into(), beta)]),
            initial_condition: InitialCondition::Sine,
        }
    }

    pub fn reaction_diffusion(rho: f64, nu: f64) -> Self {
        OracleSpec {
            family: PriorFamily::ReactionDiffusion,
            coeffs: BTreeMap::from([("rho".into(), rho), ("nu".into(), nu)]),
            initial_condition: InitialCondition::GaussianBump,
        }
    }

    pub fn coeff(&self, name: &str) -> Result<f64> {
        self.coeffs
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("oracle has no coefficient `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        let expected_ic = match self.family {
            PriorFamily::Reaction | PriorFamily::ReactionDiffusion => InitialCondition::GaussianBump,
            PriorFamily::Convection => InitialCondition::Sine,
            PriorFamily::Hamiltonian => {
                return Err(Error::contract("Hamiltonian oracles live in the hnn module"))
            }
        };
        if self.initial_condition != expected_ic {
            return Err(Error::contract(format!(
                "{:?} oracle requires the {expected_ic:?} initial condition",
                self.family
            )));
        }
        let required = self.family.required_coeffs();
        if self.coeffs.len() != required.len() || required.iter().any(|k| !self.coeffs.contains_key(*k)) {
            return Err(Error::contract(format!(
                "{:?} oracle needs coefficients {required:?}",
                self.family
            )));
        }
        if self.coeffs.values().any(|v| !v.is_finite()) {
            return Err(Error::contract("oracle coefficients must be finite"));
        }
        if self.coeffs.get("nu").is_some_and(|nu| *nu < 0.0) {
            return Err(Error::contract("nu must be non-negative"));
        }
        Ok(())
    }

    /// The oracle solution over the whole grid.
    pub fn field(&self, grid: &GridSpec) -> Result<Field> {
        self.validate()?;
        grid.validate()?;
        match self.family {
            PriorFamily::Reaction => {
                let rho = self.coeff("rho")?;
                Ok(tabulate(grid, |x, t| reaction_exact(x, t, rho)))
            }
            PriorFamily::Convection => {
                let beta = self.coeff("beta")?;
                Ok(tabulate(grid, |x, t| convection_exact(x, t, beta)))
            }
            PriorFamily::ReactionDiffusion => {
                rd_spectral_solve(grid, self.coeff("rho")?, self.coeff("nu")?)
            }
            PriorFamily::Hamiltonian => unreachable!("rejected by validate"),
        }
    }
}

fn tabulate(grid: &GridSpec, f: impl Fn(f64, f64) -> f64) -> Field {
    let values = Array2::from_shape_fn((grid.nx, grid.nt), |(i, j)| f(grid.x(i), grid.t(j)));
    Field {
        grid: grid.clone(),
        values,
    }
}

/// Exact logistic flow: the value reached after time `tau` from `u0` under
/// `du/dt = ρ u (1 − u)`.
fn logistic_flow(u0: f64, rho: f64, tau: f64) -> f64 {
    if u0 == 0.0 || u0 == 1.0 {
        return u0;
    }
    let decay = (-rho * tau).exp();
    u0 / (u0 + (1.0 - u0) * decay)
}

/// Closed-form solution of `u_t = ρ u (1 − u)` from the Gaussian bump.
pub fn reaction_exact(x: f64, t: f64, rho: f64) -> f64 {
    let g = gaussian_bump(x);
    if g <= 0.0 {
        return 0.0;
    }
    if g >= 1.0 {
        return 1.0;
    }
    // 1 / (1 + (1−g)/g · e^{−ρt}) without forming e^{ρt}
    let log_ratio = ((1.0 - g) / g).ln() - rho * t;
    if log_ratio > 700.0 {
        return 0.0;
    }
    1.0 / (1.0 + log_ratio.exp())
}

/// Traveling wave `sin(x − βt)` solving `u_t + β u_x = 0` from `sin x`.
pub fn convection_exact(x: f64, t: f64, beta: f64) -> f64 {
    (x - beta * t).sin()
}

/// Default number of Strang steps per grid time interval.
pub const RD_SUBSTEPS: usize = 20;

/// Reaction–diffusion oracle by Strang splitting with [`RD_SUBSTEPS`].
pub fn rd_spectral_solve(grid: &GridSpec, rho: f64, nu: f64) -> Result<Field> {
    rd_spectral_solve_with(grid, rho, nu, RD_SUBSTEPS)
}

/// Solves `u_t = ν u_xx + ρ u (1 − u)` from the Gaussian bump. Each step of
/// size `Δt` is a half-step of the exact logistic flow, a full step of the
/// exact heat semigroup in Fourier space, and another logistic half-step.
pub fn rd_spectral_solve_with(
    grid: &GridSpec,
    rho: f64,
    nu: f64,
    substeps: usize,
) -> Result<Field> {
    grid.validate()?;
    let u0: Vec<f64> = grid.xs().iter().map(|&x| gaussian_bump(x)).collect();
    rd_spectral_evolve(grid, &u0, rho, nu, substeps)
}

/// Strang-split evolution of an arbitrary periodic profile `u0` sampled at
/// the grid's `x` nodes.
pub fn rd_spectral_evolve(
    grid: &GridSpec,
    u0: &[f64],
    rho: f64,
    nu: f64,
    substeps: usize,
) -> Result<Field> {
    grid.validate()?;
    if u0.len() != grid.nx {
        return Err(Error::shape(format!(
            "initial profile has {} values, grid has {}",
            u0.len(),
            grid.nx
        )));
    }
    if !grid.nx.is_power_of_two() {
        return Err(Error::contract(format!(
            "spectral solver needs a power-of-two nx, got {}",
            grid.nx
        )));
    }
    if !(nu >= 0.0) || !rho.is_finite() || !nu.is_finite() {
        return Err(Error::contract("need finite rho and nu >= 0"));
    }
    if substeps == 0 {
        return Err(Error::contract("substeps must be positive"));
    }
    let n = grid.nx;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let period = grid.x_max - grid.x_min;
    let wavenumber = |k: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        2.0 * PI * k / period
    };

    let dt = (grid.t_max - grid.t_min) / ((grid.nt - 1) * substeps) as f64;
    let heat: Vec<f64> = (0..n)
        .map(|k| (-nu * wavenumber(k).powi(2) * dt).exp())
        .collect();

    let mut u = u0.to_vec();
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut values = Array2::zeros((n, grid.nt));
    for (i, v) in u.iter().enumerate() {
        values[[i, 0]] = *v;
    }
    for j in 1..grid.nt {
        for _ in 0..substeps {
            u.iter_mut().for_each(|v| *v = logistic_flow(*v, rho, 0.5 * dt));
            for (b, v) in buf.iter_mut().zip(&u) {
                *b = Complex::new(*v, 0.0);
            }
            fwd.process(&mut buf);
            for (b, h) in buf.iter_mut().zip(&heat) {
                *b *= *h;
            }
            inv.process(&mut buf);
            for (v, b) in u.iter_mut().zip(&buf) {
                *v = b.re / n as f64;
            }
            u.iter_mut().for_each(|v| *v = logistic_flow(*v, rho, 0.5 * dt));
        }
        for (i, v) in u.iter().enumerate() {
            values[[i, j]] = *v;
        }
    }
    Ok(Field {
        grid: grid.clone(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::contract("noise sigma must be finite and >= 0"));
        }
        Ok(NoiseSpec { sigma })
    }
}

/// A labelled point `(x, t) ↦ y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: [f64; 2],
    pub target: f64,
}

/// Everything one PDE experiment trains and tests on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub format_version: u32,
    pub oracle: OracleSpec,
    pub grid: GridSpec,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Noisy observations at interior grid points.
    pub train: Vec<Sample>,
    /// Clean initial condition at every grid `x`, `t = 0`.
    pub ic: Vec<Sample>,
    /// Times at which periodicity `u(0, t) = u(2π, t)` is enforced.
    pub bc_times: Vec<f64>,
    /// Unlabelled points drawn from the continuous support.
    pub collocation: Vec<[f64; 2]>,
    /// Clean targets at every grid point not used for training.
    pub test: Vec<Sample>,
}

/// Draws a dataset. A pure function of its arguments.
pub fn make_dataset(
    oracle: &OracleSpec,
    grid: &GridSpec,
    n_train: usize,
    noise: NoiseSpec,
    n_colloc: usize,
    seed: u64,
) -> Result<Dataset> {
    oracle.validate()?;
    grid.validate()?;
    NoiseSpec::new(noise.sigma)?;
    if n_train + grid.nx > grid.len() {
        return Err(Error::contract(format!(
            "{n_train} training points do not fit in the {} interior grid points",
            grid.len() - grid.nx
        )));
    }
    let field = oracle.field(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // interior = every grid point with t index >= 1
    let interior = grid.nx * (grid.nt - 1);
    let picked = sample(&mut rng, interior, n_train).into_vec();
    let mut in_train = vec![false; grid.len()];
    let normal = Normal::new(0.0, noise.sigma.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;
    let train = picked
        .iter()
        .map(|&k| {
            let (i, j) = (k / (grid.nt - 1), 1 + k % (grid.nt - 1));
            in_train[i * grid.nt + j] = true;
            let eps = if noise.sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            Sample {
                input: [grid.x(i), grid.t(j)],
                target: field.at(i, j) + eps,
            }
        })
        .collect();

    let ic = (0..grid.nx)
        .map(|i| Sample {
            input: [grid.x(i), grid.t_min],
            target: oracle.initial_condition.eval(grid.x(i)),
        })
        .collect();

    let collocation = (0..n_colloc)
        .map(|_| {
            [
                rng.random_range(grid.x_min..grid.x_max),
                rng.random_range(grid.t_min..=grid.t_max),
            ]
        })
        .collect();

    let mut test = Vec::with_capacity(grid.len() - n_train);
    for i in 0..grid.nx {
        for j in 0..grid.nt {
            if !in_train[i * grid.nt + j] {
                test.push(Sample {
                    input: [grid.x(i), grid.t(j)],
                    target: field.at(i, j),
                });
            }
        }
    }

    Ok(Dataset {
        format_version: DATASET_FORMAT_VERSION,
        oracle: oracle.clone(),
        grid: grid.clone(),
        noise,
        seed,
        train,
        ic,
        bc_times: grid.ts(),
        collocation,
        test,
    })
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ds: Dataset = serde_json::from_str(&text)?;
        if ds.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                ds.format_version
            )));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reaction_initial_and_fixed_point() {
        for x in [0.0, 1.0, 2.5, 4.0] {
            assert!((reaction_exact(x, 0.0, 10.0) - gaussian_bump(x)).abs() < 1e-15);
        }
        for t in [0.0, 0.1, 0.5, 3.0] {
            assert_eq!(reaction_exact(PI, t, 20.0), 1.0);
        }
    }

    #[test]
    fn reaction_satisfies_logistic_ode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = 1e-5;
        for _ in 0..100 {
            let x = rng.random_range(0.0..2.0 * PI);
            let t = rng.random_range(0.01..0.5);
            let rho = 20.0;
            let u = reaction_exact(x, t, rho);
            let ut = (reaction_exact(x, t + h, rho) - reaction_exact(x, t - h, rho)) / (2.0 * h);
            assert!((ut - rho * u * (1.0 - u)).abs() < 1e-6);
        }
    }

    #[test]
    fn reaction_guards_overflow() {
        let u = reaction_exact(0.3, 1e3, 10.0);
        assert!(u.is_finite() && (u - 1.0).abs() < 1e-12);
        assert!(reaction_exact(0.3, 1e3, -10.0).abs() < 1e-12);
    }

    #[test]
    fn convection_periodicity() {
        let beta = 30.0;
        for x in [0.1, 1.0, 4.0] {
            assert_eq!(convection_exact(x, 0.0, beta), x.sin());
            let period = 2.0 * PI / beta;
            assert!((convection_exact(x, period, beta) - x.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn non_power_of_two_grid_rejected() {
        let grid = GridSpec::new(0.5, 100, 10).unwrap();
        assert!(matches!(rd_spectral_solve(&grid, 1.0, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn pure_diffusion_conserves_mean() {
        let grid = GridSpec::new(0.5, 64, 11).unwrap();
        let f = rd_spectral_solve(&grid, 0.0, 3.0).unwrap();
        let mean0 = f.values.column(0).mean().unwrap();
        let mean_end = f.values.column(10).mean().unwrap();
        assert!((mean0 - mean_end).abs() < 1e-12);
    }

    #[test]
    fn grid_excludes_periodic_endpoint() {
        let g = GridSpec::reaction_default();
        assert_eq!(g.x(0), 0.0);
        assert!(g.x(g.nx - 1) < 2.0 * PI);
        assert_eq!(g.t(0), 0.0);
        assert!((g.t(g.nt - 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn oversubscribed_train_rejected() {
        let g = GridSpec::new(1.0, 4, 3).unwrap();
        let err = make_dataset(&OracleSpec::reaction(10.0), &g, 9, NoiseSpec::new(0.1).unwrap(), 3, 1);
        assert!(matches!(err, Err(Error::Contract(_))));
        assert!(make_dataset(&OracleSpec::reaction(10.0), &g, 8, NoiseSpec::new(0.1).unwrap(), 3, 1).is_ok());
    }

    #[test]
    fn oracle_ic_mismatch_rejected() {
        let mut o = OracleSpec::convection(30.0);
        o.initial_condition = InitialCondition::GaussianBump;
        assert!(o.validate().is_err());
    }

    #[test]
    fn noiseless_targets_match_oracle() {
        let g = GridSpec::new(0.5, 16, 10).unwrap();
        let ds = make_dataset(&OracleSpec::reaction(10.0), &g, 20, NoiseSpec::new(0.0).unwrap(), 5, 3).unwrap();
        for s in &ds.train {
            assert_eq!(s.target, reaction_exact(s.input[0], s.input[1], 10.0));
            assert!(s.input[1] > 0.0);
        }
    }

    #[test]
    fn heat_modes_decay_exactly() {
        let g = GridSpec::new(0.25, 64, 2).unwrap();
        let nu = 0.7;
        let u0: Vec<f64> = g.xs().iter().map(|&x| x.sin() + 0.5 * (3.0 * x).cos()).collect();
        let f = rd_spectral_evolve(&g, &u0, 0.0, nu, 7).unwrap();
        for (i, x) in g.xs().into_iter().enumerate() {
            let t = 0.25;
            let expected = (-nu * t).exp() * x.sin() + 0.5 * (-9.0 * nu * t).exp() * (3.0 * x).cos();
            assert!((f.at(i, 1) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_diffusion_reduces_to_reaction() {
        let g = GridSpec::new(0.5, 64, 11).unwrap();
        let f = rd_spectral_solve(&g, 12.0, 0.0).unwrap();
        for i in 0..g.nx {
            for j in 0..g.nt {
                assert!((f.at(i, j) - reaction_exact(g.x(i), g.t(j), 12.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn splitting_is_second_order_in_time() {
        let g = GridSpec::new(0.5, 64, 2).unwrap();
        let (rho, nu) = (8.0, 0.5);
        let reference = rd_spectral_solve_with(&g, rho, nu, 2048).unwrap();
        let err = |s: usize| {
            let f = rd_spectral_solve_with(&g, rho, nu, s).unwrap();
            (0..g.nx)
                .map(|i| (f.at(i, 1) - reference.at(i, 1)).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(16), err(32));
        let order = (e1 / e2).log2();
        assert!((1.7..=2.3).contains(&order), "observed order {order}");
    }

    #[test]
    fn reaction_default_dataset_counts() {
        let g = GridSpec::reaction_default();
        let ds = make_dataset(&OracleSpec::reaction(10.0), &g, 50, NoiseSpec::new(0.1).unwrap(), 100, 0)
            .unwrap();
        assert_eq!(ds.ic.len(), 256);
        assert_eq!(ds.bc_times.len(), 100);
        assert_eq!(ds.train.len(), 50);
        assert_eq!(ds.collocation.len(), 100);
        assert_eq!(ds.test.len(), 25_550);
        for c in &ds.collocation {
            assert!((0.0..=2.0 * PI).contains(&c[0]) && (0.0..=0.5).contains(&c[1]));
        }
    }

    #[test]
    fn dataset_is_seeded() {
        let g = GridSpec::new(0.5, 16, 10).unwrap();
        let make = |seed| {
            make_dataset(&OracleSpec::reaction(10.0), &g, 20, NoiseSpec::new(0.1).unwrap(), 5, seed)
                .unwrap()
        };
        assert_eq!(make(4), make(4));
        assert_ne!(make(4).train, make(5).train);
    }

    #[test]
    fn dataset_json_round_trip() {
        let g = GridSpec::new(0.5, 16, 10).unwrap();
        let ds = make_dataset(&OracleSpec::convection(30.0), &g, 20, NoiseSpec::new(0.1).unwrap(), 5, 2)
            .unwrap();
        let path = std::env::temp_dir().join(format!("priorreg-ds-{}.json", std::process::id()));
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        std::fs::remove_file(path).ok();
    }
}
