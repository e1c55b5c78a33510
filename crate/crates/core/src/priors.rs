//! Physics-prior residual operators and the generalized regularizer.
//!
//! Network inputs are ordered `(x, t)`. Jets are looked up by the direction
//! labels [`X`] and [`T`].

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_value, Direction, Jet2, JetBatch, LossProgram, MlpParams, Probe, Tape};
use crate::error::{Error, Result};

pub const X: &str = "x";
pub const T: &str = "t";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFamily {
    Reaction,
    Convection,
    ReactionDiffusion,
    Hamiltonian,
}

impl PriorFamily {
    pub fn required_coeffs(self) -> &'static [&'static str] {
        match self {
            PriorFamily::Reaction => &["rho"],
            PriorFamily::Convection => &["beta"],
            PriorFamily::ReactionDiffusion => &["rho", "nu"],
            PriorFamily::Hamiltonian => &["mass", "length", "gravity"],
        }
    }

    fn needs_x(self) -> bool {
        matches!(self, PriorFamily::Convection | PriorFamily::ReactionDiffusion)
    }

    fn needs_xx(self) -> bool {
        matches!(self, PriorFamily::ReactionDiffusion)
    }

    pub fn is_pde(self) -> bool {
        !matches!(self, PriorFamily::Hamiltonian)
    }
}

/// An approximate mechanistic model `F_θ(u) = 0` and which of its
/// coefficients the outer optimizer may move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub family: PriorFamily,
    pub coeffs: BTreeMap<String, f64>,
    #[serde(default)]
    pub tunable: BTreeSet<String>,
}

impl PriorSpec {
    pub fn new(family: PriorFamily, coeffs: &[(&str, f64)]) -> Result<Self> {
        let spec = PriorSpec {
            family,
            coeffs: coeffs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            tunable: BTreeSet::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn reaction(rho: f64) -> Result<Self> {
        Self::new(PriorFamily::Reaction, &[("rho", rho)])
    }

    pub fn convection(beta: f64) -> Result<Self> {
        Self::new(PriorFamily::Convection, &[("beta", beta)])
    }

    pub fn reaction_diffusion(rho: f64, nu: f64) -> Result<Self> {
        Self::new(PriorFamily::ReactionDiffusion, &[("rho", rho), ("nu", nu)])
    }

    pub fn hamiltonian(mass: f64, length: f64, gravity: f64) -> Result<Self> {
        Self::new(
            PriorFamily::Hamiltonian,
            &[("mass", mass), ("length", length), ("gravity", gravity)],
        )
    }

    /// Marks a coefficient as tunable by the outer loop.
    pub fn tunable(mut self, name: &str) -> Result<Self> {
        if !self.coeffs.contains_key(name) {
            return Err(Error::contract(format!(
                "{:?} prior has no coefficient `{name}`",
                self.family
            )));
        }
        self.tunable.insert(name.to_string());
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let required: BTreeSet<&str> = self.family.required_coeffs().iter().copied().collect();
        let present: BTreeSet<&str> = self.coeffs.keys().map(String::as_str).collect();
        if required != present {
            return Err(Error::contract(format!(
                "{:?} prior needs coefficients {required:?}, got {present:?}",
                self.family
            )));
        }
        if let Some((k, _)) = self.coeffs.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::contract(format!("coefficient `{k}` is not finite")));
        }
        if self.coeffs.get("nu").is_some_and(|nu| *nu < 0.0) {
            return Err(Error::contract("nu must be non-negative"));
        }
        if let Some(t) = self.tunable.iter().find(|t| !self.coeffs.contains_key(*t)) {
            return Err(Error::contract(format!("tunable `{t}` is not a coefficient")));
        }
        Ok(())
    }

    pub fn coeff(&self, name: &str) -> Result<f64> {
        self.coeffs
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("prior has no coefficient `{name}`")))
    }

    /// A copy with one coefficient replaced.
    pub fn with_coeff(&self, name: &str, value: f64) -> Result<Self> {
        let mut spec = self.clone();
        match spec.coeffs.get_mut(name) {
            Some(v) => *v = value,
            None => return Err(Error::contract(format!("prior has no coefficient `{name}`"))),
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Short human-readable label, e.g. `reaction(rho=15)`.
    pub fn label(&self) -> String {
        let coeffs: Vec<String> = self.coeffs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let family = match self.family {
            PriorFamily::Reaction => "reaction",
            PriorFamily::Convection => "convection",
            PriorFamily::ReactionDiffusion => "reaction_diffusion",
            PriorFamily::Hamiltonian => "hamiltonian",
        };
        format!("{family}({})", coeffs.join(","))
    }

    /// Residual `F_θ` at one jet.
    pub fn residual(&self, jet: &Jet2) -> Result<f64> {
        match self.family {
            PriorFamily::Reaction => residual_reaction(jet, self.coeff("rho")?),
            PriorFamily::Convection => residual_convection(jet, self.coeff("beta")?),
            PriorFamily::ReactionDiffusion => {
                residual_reaction_diffusion(jet, self.coeff("rho")?, self.coeff("nu")?)
            }
            PriorFamily::Hamiltonian => Err(Error::contract(
                "Hamiltonian priors are evaluated by the hnn module",
            )),
        }
    }
}

/// `u_t − ρ·u·(1 − u)`
pub fn residual_reaction(jet: &Jet2, rho: f64) -> Result<f64> {
    let u = jet.u();
    Ok(jet.first(T)? - rho * u * (1.0 - u))
}

/// `u_t + β·u_x`
pub fn residual_convection(jet: &Jet2, beta: f64) -> Result<f64> {
    Ok(jet.first(T)? + beta * jet.first(X)?)
}

/// `u_t − ν·u_xx − ρ·u·(1 − u)`
pub fn residual_reaction_diffusion(jet: &Jet2, rho: f64, nu: f64) -> Result<f64> {
    let u = jet.u();
    Ok(jet.first(T)? - nu * jet.second(X)? - rho * u * (1.0 - u))
}

/// A collocation point and the prior residual of the network there.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub point: Vec<f64>,
    pub residual: Vec<f64>,
}

/// Builds the collocation probe with every direction the given priors need.
/// The `t` direction is always present; `x` is added (at second order when
/// needed) only if some prior uses it.
pub fn collocation_probe<P: AsRef<[f64]>>(points: &[P], priors: &[PriorSpec]) -> Result<Probe> {
    if points.is_empty() {
        return Err(Error::contract("collocation set is empty"));
    }
    if let Some(p) = priors.iter().find(|p| !p.family.is_pde()) {
        return Err(Error::contract(format!(
            "{} is not a PDE prior",
            p.label()
        )));
    }
    let needs_x = priors.iter().any(|p| p.family.needs_x());
    let needs_xx = priors.iter().any(|p| p.family.needs_xx());
    let mut dirs = vec![Direction::axis(T, 2, 1, false)];
    if needs_x {
        dirs.push(Direction::axis(X, 2, 0, needs_xx));
    }
    Probe::new(points, dirs)
}

struct DirIndex {
    t: usize,
    x: Option<usize>,
}

fn dir_index(probe: &Probe) -> DirIndex {
    let pos = |label: &str| probe.dirs().iter().position(|d| d.label == label);
    DirIndex {
        t: pos(T).unwrap_or(usize::MAX),
        x: pos(X),
    }
}

/// Evaluates `mean_i Σ_c r_ic²` for one prior over a collocation batch and,
/// when `adjoint` is given, adds `scale · ∂/∂jets` into it.
pub fn prior_term(
    prior: &PriorSpec,
    probe: &Probe,
    jets: &JetBatch,
    adjoint: Option<(&mut JetBatch, f64)>,
) -> Result<f64> {
    let residuals = residual_batch(prior, probe, jets)?;
    let n = probe.len() as f64;
    let value = residuals.iter().map(|r| r * r).sum::<f64>() / n;
    if let Some((adj, scale)) = adjoint {
        let idx = dir_index(probe);
        let (m, cols) = jets.value.dim();
        for c in 0..m {
            for j in 0..cols {
                let r = residuals[[c, j]];
                let w = scale * 2.0 * r / n;
                let u = jets.value[[c, j]];
                adj.d1[idx.t][[c, j]] += w;
                match prior.family {
                    PriorFamily::Reaction => {
                        let rho = prior.coeff("rho")?;
                        adj.value[[c, j]] += w * (-rho * (1.0 - 2.0 * u));
                    }
                    PriorFamily::Convection => {
                        let beta = prior.coeff("beta")?;
                        adj.d1[idx.x.expect("checked in residual_batch")][[c, j]] += w * beta;
                    }
                    PriorFamily::ReactionDiffusion => {
                        let rho = prior.coeff("rho")?;
                        let nu = prior.coeff("nu")?;
                        adj.value[[c, j]] += w * (-rho * (1.0 - 2.0 * u));
                        let xi = idx.x.expect("checked in residual_batch");
                        adj.d2[xi].as_mut().expect("checked in residual_batch")[[c, j]] += w * -nu;
                    }
                    PriorFamily::Hamiltonian => unreachable!("rejected by residual_batch"),
                }
            }
        }
    }
    Ok(value)
}

/// Residuals of `prior` at every column of a collocation batch, `output_dim × n`.
pub fn residual_batch(prior: &PriorSpec, probe: &Probe, jets: &JetBatch) -> Result<Array2<f64>> {
    let idx = dir_index(probe);
    let missing = |what: &str| Error::contract(format!("collocation jets lack {what}"));
    if idx.t == usize::MAX {
        return Err(missing("u_t"));
    }
    let ut = &jets.d1[idx.t];
    let u = &jets.value;
    let logistic = |rho: f64| u.mapv(|v| rho * v * (1.0 - v));
    Ok(match prior.family {
        PriorFamily::Reaction => ut - &logistic(prior.coeff("rho")?),
        PriorFamily::Convection => {
            let ux = &jets.d1[idx.x.ok_or_else(|| missing("u_x"))?];
            ut + &(ux * prior.coeff("beta")?)
        }
        PriorFamily::ReactionDiffusion => {
            let xi = idx.x.ok_or_else(|| missing("u_xx"))?;
            let uxx = jets.d2[xi].as_ref().ok_or_else(|| missing("u_xx"))?;
            ut - &(uxx * prior.coeff("nu")?) - &logistic(prior.coeff("rho")?)
        }
        PriorFamily::Hamiltonian => {
            return Err(Error::contract(
                "Hamiltonian priors are evaluated by the hnn module",
            ))
        }
    })
}

/// The generalized regularizer of one prior as a differentiable program.
pub struct PriorLoss {
    prior: PriorSpec,
    probes: [Probe; 1],
}

impl PriorLoss {
    pub fn new<P: AsRef<[f64]>>(collocation: &[P], prior: &PriorSpec) -> Result<Self> {
        prior.validate()?;
        let probe = collocation_probe(collocation, std::slice::from_ref(prior))?;
        Ok(PriorLoss {
            prior: prior.clone(),
            probes: [probe],
        })
    }
}

impl LossProgram for PriorLoss {
    fn probes(&self) -> &[Probe] {
        &self.probes
    }

    fn reduce(&self, jets: &[JetBatch], adjoints: Option<&mut [JetBatch]>) -> Result<f64> {
        let adj = adjoints.map(|a| (&mut a[0], 1.0));
        prior_term(&self.prior, &self.probes[0], &jets[0], adj)
    }
}

/// `(1/N_p) Σ_i F_θ(G_w(x_i))²` over the collocation points.
pub fn prior_loss<P: AsRef<[f64]>>(
    params: &MlpParams,
    collocation: &[P],
    prior: &PriorSpec,
) -> Result<f64> {
    loss_value(params, &PriorLoss::new(collocation, prior)?)
}

pub fn residual_samples<P: AsRef<[f64]>>(
    params: &MlpParams,
    collocation: &[P],
    prior: &PriorSpec,
) -> Result<Vec<ResidualSample>> {
    let probe = collocation_probe(collocation, std::slice::from_ref(prior))?;
    let tape = Tape::record(params, &probe)?;
    let r = residual_batch(prior, &probe, tape.jets())?;
    Ok((0..probe.len())
        .map(|j| ResidualSample {
            point: probe.point(j),
            residual: r.column(j).to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{loss_grad, mlp_jet, JetOrder};
    use std::f64::consts::PI;

    fn jet(u: f64, ut: f64, ux: Option<f64>, uxx: Option<f64>) -> Jet2 {
        let mut d1 = BTreeMap::from([(T.to_string(), vec![ut])]);
        let mut d2 = BTreeMap::new();
        if let Some(ux) = ux {
            d1.insert(X.to_string(), vec![ux]);
        }
        if let Some(uxx) = uxx {
            d2.insert(X.to_string(), vec![uxx]);
        }
        Jet2 {
            value: vec![u],
            d1,
            d2,
            renormalized: false,
        }
    }

    #[test]
    fn reaction_fixed_points() {
        assert_eq!(residual_reaction(&jet(0.0, 0.0, None, None), 7.0).unwrap(), 0.0);
        assert_eq!(residual_reaction(&jet(1.0, 0.0, None, None), 7.0).unwrap(), 0.0);
    }

    #[test]
    fn missing_derivative_is_contract_error() {
        let mut j = jet(0.5, 0.1, None, None);
        j.d1.clear();
        assert!(matches!(residual_reaction(&j, 1.0), Err(Error::Contract(_))));
        assert!(matches!(
            residual_convection(&jet(0.5, 0.1, None, None), 1.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            residual_reaction_diffusion(&jet(0.5, 0.1, Some(0.0), None), 1.0, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn convection_constant_field_and_traveling_wave() {
        assert_eq!(residual_convection(&jet(3.0, 0.0, Some(0.0), None), 40.0).unwrap(), 0.0);
        let beta = 30.0;
        for &(x, t) in &[(0.3, 0.01), (2.0, 0.4), (5.5, 0.9)] {
            let phase: f64 = x - beta * t;
            let j = jet(phase.sin(), -beta * phase.cos(), Some(phase.cos()), None);
            assert!(residual_convection(&j, beta).unwrap().abs() < 1e-10);
            let other = 25.0;
            let expected = (other - beta) * phase.cos();
            assert!((residual_convection(&j, other).unwrap() - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn reaction_diffusion_reduces_and_matches_heat_mode() {
        let j = jet(0.3, 1.2, Some(0.4), Some(-2.0));
        assert_eq!(
            residual_reaction_diffusion(&j, 5.0, 0.0).unwrap(),
            residual_reaction(&j, 5.0).unwrap()
        );
        let nu: f64 = 3.0;
        for &(x, t) in &[(0.5, 0.1), (PI, 0.3)] {
            let decay = (-nu * t).exp();
            let u = decay * f64::sin(x);
            let j = jet(u, -nu * u, Some(decay * f64::cos(x)), Some(-u));
            assert!(residual_reaction_diffusion(&j, 0.0, nu).unwrap().abs() < 1e-10);
        }
        let one = jet(1.0, 0.0, Some(0.0), Some(0.0));
        assert_eq!(residual_reaction_diffusion(&one, 10.0, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn spec_rejects_wrong_coefficients() {
        assert!(PriorSpec::new(PriorFamily::Reaction, &[("beta", 1.0)]).is_err());
        assert!(PriorSpec::reaction_diffusion(1.0, -0.1).is_err());
        assert!(PriorSpec::reaction(f64::NAN).is_err());
        assert!(PriorSpec::reaction(1.0).unwrap().tunable("nu").is_err());
        assert!(PriorSpec::reaction(1.0).unwrap().tunable("rho").is_ok());
    }

    fn zero_net() -> MlpParams {
        let mut p = MlpParams::glorot(&[2, 8, 1], 5).unwrap();
        p.layers.iter_mut().for_each(|l| {
            l.weight.fill(0.0);
            l.bias.fill(0.0)
        });
        p
    }

    #[test]
    fn zero_network_is_reaction_fixed_point() {
        let pts = vec![[0.5, 0.1], [3.0, 0.4]];
        let loss = prior_loss(&zero_net(), &pts, &PriorSpec::reaction(10.0).unwrap()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_point_is_squared_residual() {
        let p = MlpParams::glorot(&[2, 8, 8, 1], 2).unwrap();
        let prior = PriorSpec::reaction_diffusion(4.0, 0.5).unwrap();
        let x = [1.1, 0.2];
        let j = mlp_jet(&p, &x, &[(T, &[0.0, 1.0]), (X, &[1.0, 0.0])], JetOrder::Second).unwrap();
        let r = prior.residual(&j).unwrap();
        let loss = prior_loss(&p, &[x], &prior).unwrap();
        assert!((loss - r * r).abs() <= 1e-14 * (1.0 + r * r));
    }

    #[test]
    fn matches_resummation_over_single_jets() {
        let p = MlpParams::glorot(&[2, 16, 16, 1], 8).unwrap();
        let prior = PriorSpec::reaction(12.0).unwrap();
        let pts: Vec<[f64; 2]> = (0..10)
            .map(|i| [0.6 * i as f64, 0.05 * i as f64])
            .collect();
        let direct: f64 = pts
            .iter()
            .map(|x| {
                let j = mlp_jet(&p, x, &[(T, &[0.0, 1.0])], JetOrder::First).unwrap();
                residual_reaction(&j, 12.0).unwrap().powi(2)
            })
            .sum::<f64>()
            / 10.0;
        let loss = prior_loss(&p, &pts, &prior).unwrap();
        assert!((loss - direct).abs() < 1e-12, "{loss} vs {direct}");
    }

    #[test]
    fn empty_collocation_rejected() {
        let pts: Vec<[f64; 2]> = vec![];
        let err = prior_loss(&zero_net(), &pts, &PriorSpec::reaction(1.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn hamiltonian_prior_rejected_here() {
        let h = PriorSpec::hamiltonian(1.0, 1.0, 3.0).unwrap();
        assert!(prior_loss(&zero_net(), &[[0.0, 0.0]], &h).is_err());
    }

    #[test]
    fn residual_samples_carry_points() {
        let p = MlpParams::glorot(&[2, 4, 1], 1).unwrap();
        let pts = vec![[0.1, 0.2], [0.3, 0.4]];
        let samples = residual_samples(&p, &pts, &PriorSpec::convection(3.0).unwrap()).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[1].point, vec![0.3, 0.4]);
        let total: f64 = samples.iter().map(|s| s.residual[0].powi(2)).sum::<f64>() / 2.0;
        let loss = prior_loss(&p, &pts, &PriorSpec::convection(3.0).unwrap()).unwrap();
        assert!((total - loss).abs() < 1e-14);
    }

    #[test]
    fn gradient_is_exact_against_finite_differences() {
        for prior in [
            PriorSpec::reaction(8.0).unwrap(),
            PriorSpec::convection(5.0).unwrap(),
            PriorSpec::reaction_diffusion(6.0, 0.7).unwrap(),
        ] {
            let p = MlpParams::glorot(&[2, 6, 6, 1], 17).unwrap();
            let pts = vec![[0.4, 0.1], [2.5, 0.3], [5.0, 0.45]];
            let prog = PriorLoss::new(&pts, &prior).unwrap();
            let (_, g) = loss_grad(&p, &prog).unwrap();
            let flat = p.to_flat();
            let gflat = g.to_flat();
            let h = 1e-5;
            for i in 0..flat.len() {
                let mut q = p.clone();
                let mut f = flat.clone();
                f[i] += h;
                q.set_flat(&f).unwrap();
                let up = loss_value(&q, &prog).unwrap();
                f[i] -= 2.0 * h;
                q.set_flat(&f).unwrap();
                let down = loss_value(&q, &prog).unwrap();
                let fd = (up - down) / (2.0 * h);
                let err = (fd - gflat[i]).abs() / (1e-6_f64).max(fd.abs().max(gflat[i].abs()));
                assert!(err < 1e-5, "{} param {i}: fd {fd} vs ad {}", prior.label(), gflat[i]);
            }
        }
    }
}
