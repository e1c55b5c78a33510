//! Hamiltonian neural networks with a reference-Hamiltonian regularizer.
//!
//! The network maps `(q, p)` to a scalar `H_w`; its symplectic gradient
//! `(∂H_w/∂p, −∂H_w/∂q)` is the learned vector field.

use std::cell::RefCell;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{mlp_jet, Direction, JetBatch, JetOrder, LossProgram, MlpParams, Probe};
use crate::error::{Error, Result};
use crate::priors::{PriorFamily, PriorSpec};
use crate::training::{optimize, LossBreakdown, TrainConfig, TrainedModel};

/// `|q| + |p|` beyond which an integrated trajectory is cut off.
pub const BLOWUP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    /// `H = (k q² + p²/m) / 2`
    MassSpring { mass: f64, spring_k: f64 },
    /// `H = 2 m g l (1 − cos q) + l² p² / (2m)`
    IdealPendulum { mass: f64, length: f64, gravity: f64 },
}

impl HamiltonianSpec {
    pub fn mass_spring() -> Self {
        HamiltonianSpec::MassSpring {
            mass: 1.0,
            spring_k: 1.0,
        }
    }

    pub fn ideal_pendulum() -> Self {
        HamiltonianSpec::IdealPendulum {
            mass: 1.0,
            length: 1.0,
            gravity: 3.0,
        }
    }

    /// Pendulum Hamiltonian from a prior carrying `mass`, `length`, `gravity`.
    pub fn from_prior(prior: &PriorSpec) -> Result<Self> {
        if prior.family != PriorFamily::Hamiltonian {
            return Err(Error::contract(format!("{} is not a Hamiltonian prior", prior.label())));
        }
        let s = HamiltonianSpec::IdealPendulum {
            mass: prior.coeff("mass")?,
            length: prior.coeff("length")?,
            gravity: prior.coeff("gravity")?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let coeffs: &[f64] = match self {
            HamiltonianSpec::MassSpring { mass, spring_k } => &[*mass, *spring_k],
            HamiltonianSpec::IdealPendulum {
                mass,
                length,
                gravity,
            } => &[*mass, *length, *gravity],
        };
        if coeffs.iter().all(|c| c.is_finite() && *c > 0.0) {
            Ok(())
        } else {
            Err(Error::contract(format!("Hamiltonian coefficients must be > 0: {self:?}")))
        }
    }

    pub fn energy(&self, s: PhaseState) -> f64 {
        match *self {
            HamiltonianSpec::MassSpring { mass, spring_k } => {
                0.5 * (spring_k * s.q * s.q + s.p * s.p / mass)
            }
            HamiltonianSpec::IdealPendulum {
                mass,
                length,
                gravity,
            } => {
                2.0 * mass * gravity * length * (1.0 - s.q.cos())
                    + length * length * s.p * s.p / (2.0 * mass)
            }
        }
    }

    /// `(∂H/∂q, ∂H/∂p)`.
    pub fn gradient(&self, s: PhaseState) -> (f64, f64) {
        match *self {
            HamiltonianSpec::MassSpring { mass, spring_k } => (spring_k * s.q, s.p / mass),
            HamiltonianSpec::IdealPendulum {
                mass,
                length,
                gravity,
            } => (
                2.0 * mass * gravity * length * s.q.sin(),
                length * length * s.p / mass,
            ),
        }
    }

    /// Hamilton's equations `(dq/dt, dp/dt) = (∂H/∂p, −∂H/∂q)`.
    pub fn vector_field(&self, s: PhaseState) -> (f64, f64) {
        let (hq, hp) = self.gradient(s);
        (hp, -hq)
    }

    fn initial_radius(&self) -> (f64, f64) {
        match self {
            HamiltonianSpec::MassSpring { .. } => (0.1, 1.0),
            HamiltonianSpec::IdealPendulum { .. } => (1.3, 2.3),
        }
    }
}

pub fn h_analytic(spec: &HamiltonianSpec, s: PhaseState) -> f64 {
    spec.energy(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub q: f64,
    pub p: f64,
}

impl PhaseState {
    pub fn new(q: f64, p: f64) -> Self {
        PhaseState { q, p }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
    /// `(dq/dt, dp/dt)` at each sample.
    pub derivs: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = HnnSample> + '_ {
        self.states
            .iter()
            .zip(&self.derivs)
            .map(|(&state, &(dq, dp))| HnnSample { state, dq, dp })
    }
}

/// One supervised phase-space observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HnnSample {
    pub state: PhaseState,
    pub dq: f64,
    pub dp: f64,
}

fn rk4_step(f: &impl Fn(PhaseState) -> (f64, f64), s: PhaseState, dt: f64) -> PhaseState {
    let add = |s: PhaseState, k: (f64, f64), h: f64| PhaseState::new(s.q + h * k.0, s.p + h * k.1);
    let k1 = f(s);
    let k2 = f(add(s, k1, 0.5 * dt));
    let k3 = f(add(s, k2, 0.5 * dt));
    let k4 = f(add(s, k3, dt));
    PhaseState::new(
        s.q + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        s.p + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    )
}

fn step_count(t_span: (f64, f64), dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() || !(t_span.1 > t_span.0) {
        return Err(Error::contract("need dt > 0 and t_span.1 > t_span.0"));
    }
    Ok(((t_span.1 - t_span.0) / dt).round() as usize)
}

/// RK4 path of the true dynamics from `s0`, sampled every `dt`.
pub fn integrate_true(spec: &HamiltonianSpec, s0: PhaseState, t_span: (f64, f64), dt: f64) -> Result<Trajectory> {
    spec.validate()?;
    let n = step_count(t_span, dt)?;
    let f = |s| spec.vector_field(s);
    let mut states = Vec::with_capacity(n + 1);
    let mut s = s0;
    states.push(s);
    for _ in 0..n {
        s = rk4_step(&f, s, dt);
        states.push(s);
    }
    Ok(Trajectory {
        times: (0..=n).map(|i| t_span.0 + i as f64 * dt).collect(),
        derivs: states.iter().map(|&s| spec.vector_field(s)).collect(),
        states,
    })
}

/// Seeded initial state on an energy shell, uniform in angle.
pub fn random_initial_state(spec: &HamiltonianSpec, rng: &mut impl Rng) -> PhaseState {
    let (lo, hi) = spec.initial_radius();
    let r = rng.random_range(lo..hi);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    PhaseState::new(r * phi.cos(), r * phi.sin())
}

/// `n_traj` RK4 trajectories from seeded random initial states, with
/// `N(0, σ²)` noise added to the sampled states and derivatives.
pub fn generate_trajectories(
    spec: &HamiltonianSpec,
    n_traj: usize,
    t_span: (f64, f64),
    dt: f64,
    sigma: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::contract("noise sigma must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::contract(e.to_string()))?;
    let mut out = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let s0 = random_initial_state(spec, &mut rng);
        let mut traj = integrate_true(spec, s0, t_span, dt)?;
        if sigma > 0.0 {
            for (s, d) in traj.states.iter_mut().zip(traj.derivs.iter_mut()) {
                s.q += noise.sample(&mut rng);
                s.p += noise.sample(&mut rng);
                d.0 += noise.sample(&mut rng);
                d.1 += noise.sample(&mut rng);
            }
        }
        out.push(traj);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    /// Mismatches of `∂H/∂p` and `∂H/∂q` are added before squaring.
    #[default]
    Summed,
    /// Each mismatch is squared on its own.
    Separated,
}

fn phase_probe(states: &[PhaseState]) -> Result<Probe> {
    let pts: Vec<[f64; 2]> = states.iter().map(|s| [s.q, s.p]).collect();
    Probe::new(
        &pts,
        vec![Direction::axis("q", 2, 0, false), Direction::axis("p", 2, 1, false)],
    )
}

/// Reference-Hamiltonian penalty attached to an [`HnnLoss`].
#[derive(Debug, Clone, PartialEq)]
pub struct HnnRegularizer {
    pub spec: HamiltonianSpec,
    pub lambda: f64,
    pub mode: RegMode,
    pub points: Vec<PhaseState>,
}

/// `mean(‖∂H_w/∂p − dq/dt‖² + ‖∂H_w/∂q + dp/dt‖²) + λ · reg`.
pub struct HnnLoss {
    probes: Vec<Probe>,
    dq: Vec<f64>,
    dp: Vec<f64>,
    reg: Option<(HnnRegularizer, Vec<(f64, f64)>)>,
    last: RefCell<Option<LossBreakdown>>,
}

impl HnnLoss {
    /// `batch` may be empty when only the regularizer is wanted.
    pub fn new(batch: &[HnnSample], reg: Option<HnnRegularizer>) -> Result<Self> {
        let states: Vec<PhaseState> = batch.iter().map(|s| s.state).collect();
        let shared = reg
            .as_ref()
            .is_some_and(|r| !batch.is_empty() && r.points.starts_with(&states));
        let mut probes = vec![];
        if !batch.is_empty() && !shared {
            probes.push(phase_probe(&states)?);
        }
        let reg = match reg {
            Some(r) => {
                r.spec.validate()?;
                if !(r.lambda >= 0.0) || !r.lambda.is_finite() {
                    return Err(Error::contract("regularization weight must be finite and >= 0"));
                }
                if r.points.is_empty() {
                    return Err(Error::contract("regularizer needs at least one point"));
                }
                probes.push(phase_probe(&r.points)?);
                let grads = r.points.iter().map(|&s| r.spec.gradient(s)).collect();
                Some((r, grads))
            }
            None => None,
        };
        if probes.is_empty() {
            return Err(Error::contract("HNN loss needs data or a regularizer"));
        }
        Ok(HnnLoss {
            probes,
            dq: batch.iter().map(|s| s.dq).collect(),
            dp: batch.iter().map(|s| s.dp).collect(),
            reg,
            last: RefCell::new(None),
        })
    }

    pub fn last_breakdown(&self) -> Option<LossBreakdown> {
        self.last.borrow().clone()
    }
}

fn data_term(jets: &JetBatch, dq: &[f64], dp: &[f64], adj: Option<&mut JetBatch>) -> f64 {
    let n = dq.len() as f64;
    let (hq, hp) = (&jets.d1[0], &jets.d1[1]);
    let mut v = 0.0;
    let mut adj = adj;
    for j in 0..dq.len() {
        let ep = hp[[0, j]] - dq[j];
        let eq = hq[[0, j]] + dp[j];
        v += ep * ep + eq * eq;
        if let Some(a) = adj.as_deref_mut() {
            a.d1[1][[0, j]] += 2.0 * ep / n;
            a.d1[0][[0, j]] += 2.0 * eq / n;
        }
    }
    v / n
}

fn reg_term(
    jets: &JetBatch,
    grads: &[(f64, f64)],
    mode: RegMode,
    adj: Option<(&mut JetBatch, f64)>,
) -> f64 {
    let m = grads.len() as f64;
    let (wq, wp) = (&jets.d1[0], &jets.d1[1]);
    let mut adj = adj;
    let mut v = 0.0;
    for (j, &(tq, tp)) in grads.iter().enumerate() {
        let (eq, ep) = (wq[[0, j]] - tq, wp[[0, j]] - tp);
        let (gq, gp) = match mode {
            RegMode::Summed => {
                v += (eq + ep) * (eq + ep);
                (2.0 * (eq + ep), 2.0 * (eq + ep))
            }
            RegMode::Separated => {
                v += eq * eq + ep * ep;
                (2.0 * eq, 2.0 * ep)
            }
        };
        if let Some((a, scale)) = adj.as_mut() {
            a.d1[0][[0, j]] += *scale * gq / m;
            a.d1[1][[0, j]] += *scale * gp / m;
        }
    }
    v / m
}

impl LossProgram for HnnLoss {
    fn probes(&self) -> &[Probe] {
        &self.probes
    }

    fn reduce(&self, jets: &[JetBatch], mut adjoints: Option<&mut [JetBatch]>) -> Result<f64> {
        let has_data = !self.dq.is_empty();
        let data = if has_data {
            let adj = adjoints.as_deref_mut().map(|a| &mut a[0]);
            data_term(&jets[0], &self.dq, &self.dp, adj)
        } else {
            0.0
        };
        if !data.is_finite() {
            return Err(Error::Diverged {
                term: "hnn".into(),
                step: None,
            });
        }
        let mut prior = vec![];
        let mut total = data;
        if let Some((r, grads)) = &self.reg {
            let k = probes_before_reg(has_data, self.probes.len());
            let adj = adjoints.map(|a| (&mut a[k], r.lambda));
            let v = reg_term(&jets[k], grads, r.mode, adj);
            if !v.is_finite() {
                return Err(Error::Diverged {
                    term: "hamiltonian prior".into(),
                    step: None,
                });
            }
            total += r.lambda * v;
            prior.push(v);
        }
        *self.last.borrow_mut() = Some(LossBreakdown {
            data,
            ic: 0.0,
            bc: 0.0,
            prior,
            weight_decay: 0.0,
            total,
        });
        Ok(total)
    }
}

/// Index of the regularizer probe: 0 when it shares columns with the data.
fn probes_before_reg(has_data: bool, n_probes: usize) -> usize {
    usize::from(has_data && n_probes == 2)
}

fn check_phase_net(params: &MlpParams) -> Result<()> {
    if params.input_dim() != 2 || params.output_dim() != 1 {
        return Err(Error::contract(format!(
            "Hamiltonian network must map 2 -> 1, got {} -> {}",
            params.input_dim(),
            params.output_dim()
        )));
    }
    Ok(())
}

pub fn hnn_loss(params: &MlpParams, batch: &[HnnSample]) -> Result<f64> {
    check_phase_net(params)?;
    if batch.is_empty() {
        return Err(Error::contract("empty HNN batch"));
    }
    crate::autodiff::loss_value(params, &HnnLoss::new(batch, None)?)
}

/// The reference-Hamiltonian penalty alone, without `λ`.
pub fn hnn_reg(params: &MlpParams, pts: &[PhaseState], spec: &HamiltonianSpec, mode: RegMode) -> Result<f64> {
    check_phase_net(params)?;
    let reg = HnnRegularizer {
        spec: *spec,
        lambda: 1.0,
        mode,
        points: pts.to_vec(),
    };
    crate::autodiff::loss_value(params, &HnnLoss::new(&[], Some(reg))?)
}

/// Training states plus `n_extra` seeded uniform samples over their
/// bounding box.
pub fn regularizer_points(train: &[HnnSample], n_extra: usize, seed: u64) -> Vec<PhaseState> {
    let mut pts: Vec<PhaseState> = train.iter().map(|s| s.state).collect();
    if pts.is_empty() {
        return pts;
    }
    let (mut q0, mut q1, mut p0, mut p1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in &pts {
        q0 = q0.min(s.q);
        q1 = q1.max(s.q);
        p0 = p0.min(s.p);
        p1 = p1.max(s.p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_extra {
        pts.push(PhaseState::new(
            q0 + (q1 - q0) * rng.random::<f64>(),
            p0 + (p1 - p0) * rng.random::<f64>(),
        ));
    }
    pts
}

/// Trains a Hamiltonian network on `train`; `final_test_mse` holds the HNN
/// loss on `test`.
pub fn train_hnn(
    config: &TrainConfig,
    train: &[HnnSample],
    test: &[HnnSample],
    reg: Option<HnnRegularizer>,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::contract("empty HNN training set"));
    }
    let program = HnnLoss::new(train, reg)?;
    let (params, history) = optimize(config, 2, &program, |p| p.last_breakdown())?;
    let final_test_mse = if test.is_empty() {
        f64::NAN
    } else {
        hnn_loss(&params, test)?
    };
    Ok(TrainedModel {
        params,
        config: config.clone(),
        history,
        final_test_mse,
    })
}

/// `(∂H_w/∂p, −∂H_w/∂q)` at one state.
pub fn learned_field(params: &MlpParams, s: PhaseState) -> Result<(f64, f64)> {
    let jet = mlp_jet(
        params,
        &[s.q, s.p],
        &[("q", &[1.0, 0.0]), ("p", &[0.0, 1.0])],
        JetOrder::First,
    )?;
    Ok((jet.first("p")?, -jet.first("q")?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedTrajectory {
    pub trajectory: Trajectory,
    /// Set when integration stopped early at [`BLOWUP`].
    pub diverged: bool,
}

/// RK4 under the network's symplectic gradient.
pub fn integrate_learned(
    params: &MlpParams,
    s0: PhaseState,
    t_span: (f64, f64),
    dt: f64,
) -> Result<LearnedTrajectory> {
    check_phase_net(params)?;
    let n = step_count(t_span, dt)?;
    let field = |s: PhaseState| learned_field(params, s).unwrap_or((f64::NAN, f64::NAN));
    let mut traj = Trajectory {
        times: vec![t_span.0],
        states: vec![s0],
        derivs: vec![field(s0)],
    };
    let mut s = s0;
    let mut diverged = false;
    for i in 1..=n {
        s = rk4_step(&field, s, dt);
        if !(s.q.abs() + s.p.abs() <= BLOWUP) {
            log::warn!("learned trajectory left |q| + |p| <= {BLOWUP:e} at step {i}");
            diverged = true;
            break;
        }
        traj.times.push(t_span.0 + i as f64 * dt);
        traj.states.push(s);
        traj.derivs.push(field(s));
    }
    Ok(LearnedTrajectory {
        trajectory: traj,
        diverged,
    })
}

/// Mean squared phase-space error of learned rollouts against observed
/// trajectories, each started from its first observed state and sampled at
/// its own times.
pub fn rollout_error(params: &MlpParams, trajs: &[Trajectory]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for tr in trajs {
        if tr.len() < 2 {
            return Err(Error::contract("rollout needs trajectories of >= 2 samples"));
        }
        let dt = tr.times[1] - tr.times[0];
        let span = (tr.times[0], tr.times[tr.len() - 1]);
        let l = integrate_learned(params, tr.states[0], span, dt)?;
        if l.diverged || l.trajectory.len() != tr.len() {
            return Err(Error::Diverged {
                term: "rollout".into(),
                step: None,
            });
        }
        for (a, b) in l.trajectory.states.iter().zip(&tr.states) {
            sum += (a.q - b.q).powi(2) + (a.p - b.p).powi(2);
        }
        count += tr.len();
    }
    if count == 0 {
        return Err(Error::contract("no trajectories to roll out"));
    }
    Ok(sum / count as f64)
}

/// Mean squared drift of the true energy from its initial value.
pub fn energy_metric(traj: &Trajectory, spec: &HamiltonianSpec) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::contract("empty trajectory"));
    }
    let e0 = spec.energy(traj.states[0]);
    Ok(traj
        .states
        .iter()
        .map(|&s| (spec.energy(s) - e0).powi(2))
        .sum::<f64>()
        / traj.len() as f64)
}

/// Trajectory sets for one Hamiltonian task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HnnDataset {
    pub format_version: u32,
    pub spec: HamiltonianSpec,
    pub seed: u64,
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    /// Clean initial states for learned-dynamics rollouts.
    pub test_initial: Vec<PhaseState>,
}

impl HnnDataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: HnnDataset = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ds.format_version != crate::oracles::DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset format version {} is not supported",
                ds.format_version
            )));
        }
        Ok(ds)
    }

    pub fn train_samples(&self) -> Vec<HnnSample> {
        self.train.iter().flat_map(|t| t.samples()).collect()
    }

    pub fn validation_samples(&self) -> Vec<HnnSample> {
        self.validation.iter().flat_map(|t| t.samples()).collect()
    }
}

/// Noisy train and validation trajectories plus clean test initial states,
/// all drawn from one seed.
#[allow(clippy::too_many_arguments)]
pub fn make_hnn_dataset(
    spec: &HamiltonianSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    t_span: (f64, f64),
    dt: f64,
    sigma: f64,
    seed: u64,
) -> Result<HnnDataset> {
    let mut all = generate_trajectories(spec, n_train + n_val, t_span, dt, sigma, seed)?;
    let validation = all.split_off(n_train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7e57));
    let test_initial = (0..n_test).map(|_| random_initial_state(spec, &mut rng)).collect();
    Ok(HnnDataset {
        format_version: crate::oracles::DATASET_FORMAT_VERSION,
        spec: *spec,
        seed,
        train: all,
        validation,
        test_initial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Dense};
    use ndarray::{array, Array1, Array2};

    /// `2 → 4 → 1` tanh net whose output is `(q² + p²)/2` up to `O(ε²)`.
    fn quadratic_net(eps: f64) -> MlpParams {
        let b: f64 = 0.5;
        let th = b.tanh();
        let t2 = -2.0 * th * (1.0 - th * th);
        let c = 1.0 / (2.0 * t2 * eps * eps);
        MlpParams::new(
            vec![
                Dense {
                    weight: array![[eps, 0.0], [-eps, 0.0], [0.0, eps], [0.0, -eps]],
                    bias: Array1::from_elem(4, b),
                },
                Dense {
                    weight: Array2::from_elem((1, 4), c),
                    bias: array![-4.0 * c * th],
                },
            ],
            Activation::Tanh,
        )
        .unwrap()
    }

    #[test]
    fn analytic_energies() {
        let ms = HamiltonianSpec::mass_spring();
        let pend = HamiltonianSpec::ideal_pendulum();
        assert_eq!(h_analytic(&ms, PhaseState::new(0.0, 0.0)), 0.0);
        assert_eq!(h_analytic(&pend, PhaseState::new(0.0, 0.0)), 0.0);
        assert!((h_analytic(&pend, PhaseState::new(std::f64::consts::PI, 0.0)) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_coefficients_rejected() {
        let bad = HamiltonianSpec::IdealPendulum {
            mass: 1.0,
            length: -1.0,
            gravity: 3.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rk4_matches_harmonic_oscillator() {
        let ms = HamiltonianSpec::mass_spring();
        let s0 = PhaseState::new(0.7, -0.3);
        let tr = integrate_true(&ms, s0, (0.0, std::f64::consts::TAU), 0.01).unwrap();
        for (t, s) in tr.times.iter().zip(&tr.states) {
            let q = s0.q * t.cos() + s0.p * t.sin();
            let p = -s0.q * t.sin() + s0.p * t.cos();
            assert!((s.q - q).abs() < 1e-6 && (s.p - p).abs() < 1e-6);
        }
        let e0 = ms.energy(s0);
        let e1 = ms.energy(*tr.states.last().unwrap());
        assert!(((e1 - e0) / e0).abs() < 1e-8);
    }

    #[test]
    fn noiseless_generation_is_seeded() {
        let pend = HamiltonianSpec::ideal_pendulum();
        let a = generate_trajectories(&pend, 3, (0.0, 1.0), 0.1, 0.0, 9).unwrap();
        assert_eq!(a, generate_trajectories(&pend, 3, (0.0, 1.0), 0.1, 0.0, 9).unwrap());
        assert_eq!(a[0].len(), 11);
        let b = generate_trajectories(&pend, 3, (0.0, 1.0), 0.1, 0.1, 9).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn exact_quadratic_net_has_zero_loss() {
        let net = quadratic_net(1e-4);
        let ms = HamiltonianSpec::mass_spring();
        let data = generate_trajectories(&ms, 4, (0.0, 3.0), 0.1, 0.0, 1).unwrap();
        let batch: Vec<HnnSample> = data.iter().flat_map(|t| t.samples()).collect();
        assert!(hnn_loss(&net, &batch).unwrap() < 1e-10);
    }

    #[test]
    fn zero_net_zero_derivs() {
        let mut net = MlpParams::glorot(&[2, 3, 1], 0).unwrap();
        net.layers.iter_mut().for_each(|l| l.weight.fill(0.0));
        let s = HnnSample {
            state: PhaseState::new(0.3, 0.2),
            dq: 0.0,
            dp: 0.0,
        };
        assert_eq!(hnn_loss(&net, &[s]).unwrap(), 0.0);
        assert!(matches!(
            hnn_loss(&MlpParams::glorot(&[3, 2, 1], 0).unwrap(), &[s]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn matching_gradients_give_zero_penalty() {
        let net = quadratic_net(1e-4);
        let pts = [PhaseState::new(0.5, -0.2), PhaseState::new(-1.0, 0.7)];
        let ms = HamiltonianSpec::mass_spring();
        for mode in [RegMode::Summed, RegMode::Separated] {
            assert!(hnn_reg(&net, &pts, &ms, mode).unwrap() < 1e-12);
        }
    }

    #[test]
    fn summed_mode_cancels_opposite_mismatches() {
        // Zero network: ∂H_w = 0, so mismatches are −∂H_θ. Pick a state where
        // ∂H_θ/∂q = −∂H_θ/∂p = a.
        let mut net = MlpParams::glorot(&[2, 3, 1], 0).unwrap();
        net.layers.iter_mut().for_each(|l| l.weight.fill(0.0));
        let a = 0.4;
        let pt = PhaseState::new(a, -a);
        let ms = HamiltonianSpec::mass_spring();
        assert_eq!(hnn_reg(&net, &[pt], &ms, RegMode::Summed).unwrap(), 0.0);
        let sep = hnn_reg(&net, &[pt], &ms, RegMode::Separated).unwrap();
        assert!((sep - 2.0 * a * a).abs() < 1e-15);
    }

    #[test]
    fn learned_exact_dynamics_match_true() {
        let net = quadratic_net(1e-4);
        let ms = HamiltonianSpec::mass_spring();
        let s0 = PhaseState::new(0.6, 0.3);
        let l = integrate_learned(&net, s0, (0.0, std::f64::consts::TAU), 0.01).unwrap();
        let t = integrate_true(&ms, s0, (0.0, std::f64::consts::TAU), 0.01).unwrap();
        assert!(!l.diverged);
        for (a, b) in l.trajectory.states.iter().zip(&t.states) {
            assert!((a.q - b.q).abs() < 1e-6 && (a.p - b.p).abs() < 1e-6);
        }
    }

    #[test]
    fn learned_integration_is_fourth_order() {
        let net = MlpParams::glorot(&[2, 8, 1], 3).unwrap();
        let s0 = PhaseState::new(0.5, -0.4);
        let end = |dt: f64| *integrate_learned(&net, s0, (0.0, 2.0), dt).unwrap().trajectory.states.last().unwrap();
        let r = end(0.2 / 64.0);
        let err = |dt| {
            let e = end(dt);
            ((e.q - r.q).powi(2) + (e.p - r.p).powi(2)).sqrt()
        };
        let ratio = err(0.2) / err(0.1);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn constant_network_freezes_state() {
        let mut net = MlpParams::glorot(&[2, 3, 1], 0).unwrap();
        net.layers.iter_mut().for_each(|l| l.weight.fill(0.0));
        let s0 = PhaseState::new(0.2, 0.9);
        let l = integrate_learned(&net, s0, (0.0, 1.0), 0.1).unwrap();
        assert!(l.trajectory.states.iter().all(|s| *s == s0));
    }

    #[test]
    fn energy_metric_cases() {
        let ms = HamiltonianSpec::mass_spring();
        let tr = integrate_true(&ms, PhaseState::new(0.5, 0.5), (0.0, 6.0), 0.01).unwrap();
        assert!(energy_metric(&tr, &ms).unwrap() < 1e-10);
        let frozen = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![PhaseState::new(0.3, 0.1); 2],
            derivs: vec![(0.0, 0.0); 2],
        };
        assert_eq!(energy_metric(&frozen, &ms).unwrap(), 0.0);
        let two = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![PhaseState::new(0.0, 0.0), PhaseState::new(2f64.sqrt(), 0.0)],
            derivs: vec![(0.0, 0.0); 2],
        };
        assert!((energy_metric(&two, &ms).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dataset_round_trip() {
        let ds = make_hnn_dataset(&HamiltonianSpec::ideal_pendulum(), 2, 1, 2, (0.0, 1.0), 0.1, 0.1, 3).unwrap();
        let path = std::env::temp_dir().join(format!("priorreg-hnn-{}.json", std::process::id()));
        ds.save(&path).unwrap();
        assert_eq!(HnnDataset::load(&path).unwrap(), ds);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn gradients_match_finite_differences() {
        let pend = HamiltonianSpec::ideal_pendulum();
        let data = generate_trajectories(&pend, 2, (0.0, 0.5), 0.1, 0.1, 4).unwrap();
        let batch: Vec<HnnSample> = data.iter().flat_map(|t| t.samples()).collect();
        let net = MlpParams::glorot(&[2, 6, 6, 1], 21).unwrap();
        let pts = regularizer_points(&batch, 5, 1);
        let check = |prog: &HnnLoss| crate::autodiff::gradient_check(&net, prog, 1e-5, 1e-6).unwrap();
        assert!(check(&HnnLoss::new(&batch, None).unwrap()) < 1e-5);
        for mode in [RegMode::Summed, RegMode::Separated] {
            let reg = HnnRegularizer {
                spec: HamiltonianSpec::IdealPendulum {
                    mass: 1.0,
                    length: 1.2,
                    gravity: 2.5,
                },
                lambda: 0.7,
                mode,
                points: pts.clone(),
            };
            assert!(check(&HnnLoss::new(&[], Some(reg.clone())).unwrap()) < 1e-5);
            assert!(check(&HnnLoss::new(&batch, Some(reg)).unwrap()) < 1e-5);
        }
    }

    #[test]
    fn shared_and_separate_probes_agree() {
        let pend = HamiltonianSpec::ideal_pendulum();
        let data = generate_trajectories(&pend, 2, (0.0, 0.5), 0.1, 0.1, 4).unwrap();
        let batch: Vec<HnnSample> = data.iter().flat_map(|t| t.samples()).collect();
        let net = MlpParams::glorot(&[2, 6, 1], 2).unwrap();
        let pts = regularizer_points(&batch, 5, 1);
        let mut reversed = pts.clone();
        reversed.reverse();
        let reg = |points| HnnRegularizer {
            spec: pend,
            lambda: 0.3,
            mode: RegMode::Summed,
            points,
        };
        let shared = HnnLoss::new(&batch, Some(reg(pts))).unwrap();
        let separate = HnnLoss::new(&batch, Some(reg(reversed))).unwrap();
        assert_eq!(shared.probes().len(), 1);
        assert_eq!(separate.probes().len(), 2);
        let (a, ga) = crate::autodiff::loss_grad(&net, &shared).unwrap();
        let (b, gb) = crate::autodiff::loss_grad(&net, &separate).unwrap();
        assert!((a - b).abs() < 1e-12);
        for (x, y) in ga.to_flat().iter().zip(gb.to_flat()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_network_has_small_rollout_error() {
        let net = quadratic_net(1e-4);
        let ms = HamiltonianSpec::mass_spring();
        let trajs = generate_trajectories(&ms, 3, (0.0, 2.0), 0.1, 0.0, 6).unwrap();
        assert!(rollout_error(&net, &trajs).unwrap() < 1e-12);
    }
}
