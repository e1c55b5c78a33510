//! Experiment configuration and the named case presets.

use std::path::Path;

use priorreg::hnn::{HamiltonianSpec, RegMode};
use priorreg::oracles::{GridSpec, NoiseSpec, OracleSpec};
use priorreg::priors::PriorSpec;
use priorreg::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    /// Seeds for repeatability runs; the CLI `--seed` is used when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Pde(PdeTask),
    Hamiltonian(HnnTask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeTask {
    pub oracle: OracleSpec,
    pub grid: GridSpec,
    pub n_train: usize,
    pub n_colloc: usize,
    pub noise: NoiseSpec,
    pub priors: Vec<PriorSpec>,
    /// Share of the noisy observations held out to score outer-loop trials.
    pub validation_fraction: f64,
    /// Candidate decays for the weight-decay baseline; empty skips it.
    pub weight_decays: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HnnTask {
    pub system: HamiltonianSpec,
    pub prior: HamiltonianSpec,
    #[serde(default)]
    pub mode: RegMode,
    pub n_train_traj: usize,
    pub n_val_traj: usize,
    pub n_test: usize,
    pub t_span: (f64, f64),
    pub dt: f64,
    pub sigma: f64,
    /// Uniform regularizer points added to the training states.
    pub reg_extra_points: usize,
    pub rollout_span: (f64, f64),
    pub rollout_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub n_init: usize,
    pub budget: usize,
    pub lambda_lower: f64,
    pub lambda_upper: f64,
    /// Relative half-width of the window searched around a tunable
    /// coefficient's nominal value.
    pub coefficient_window: f64,
    /// Skip the search and train once with these weights.
    #[serde(default)]
    pub fixed_lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub log_objective: bool,
}

impl SearchConfig {
    pub fn for_scale(scale: Scale) -> Self {
        SearchConfig {
            n_init: 5,
            budget: match scale {
                Scale::Desk => 15,
                Scale::Paper => 20,
            },
            lambda_lower: 1e-8,
            lambda_upper: 10.0,
            coefficient_window: 0.5,
            fixed_lambdas: None,
            log_objective: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let s = &self.search;
        if s.n_init == 0 || s.budget < s.n_init {
            return Err(HarnessError::Config(format!(
                "need budget >= n_init >= 1, got {} and {}",
                s.budget, s.n_init
            )));
        }
        if !(s.lambda_lower > 0.0 && s.lambda_lower < s.lambda_upper) {
            return Err(HarnessError::Config("need 0 < lambda_lower < lambda_upper".into()));
        }
        if !(s.coefficient_window > 0.0 && s.coefficient_window < 1.0) {
            return Err(HarnessError::Config("coefficient_window must be in (0, 1)".into()));
        }
        match &self.task {
            TaskConfig::Pde(t) => {
                t.oracle.validate()?;
                t.grid.validate()?;
                for p in &t.priors {
                    p.validate()?;
                    if !p.family.is_pde() {
                        return Err(HarnessError::Config(format!(
                            "PDE task cannot use prior {}",
                            p.label()
                        )));
                    }
                }
                if !(0.0..1.0).contains(&t.validation_fraction) {
                    return Err(HarnessError::Config("validation_fraction must be in [0, 1)".into()));
                }
                if t.weight_decays.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(HarnessError::Config("weight decays must be finite and >= 0".into()));
                }
                if let Some(l) = &s.fixed_lambdas {
                    if l.len() != t.priors.len() {
                        return Err(HarnessError::Config(format!(
                            "{} fixed lambdas for {} priors",
                            l.len(),
                            t.priors.len()
                        )));
                    }
                } else if t.priors.is_empty() {
                    return Err(HarnessError::Config("a search needs at least one prior".into()));
                }
            }
            TaskConfig::Hamiltonian(h) => {
                h.system.validate()?;
                h.prior.validate()?;
                if std::mem::discriminant(&h.system) != std::mem::discriminant(&h.prior) {
                    return Err(HarnessError::Config("prior and system must be the same kind".into()));
                }
                if h.n_train_traj == 0 || h.n_val_traj == 0 || h.n_test == 0 {
                    return Err(HarnessError::Config("trajectory counts must be >= 1".into()));
                }
                if let Some(l) = &s.fixed_lambdas {
                    if l.len() != 1 {
                        return Err(HarnessError::Config("Hamiltonian tasks take one lambda".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn train_config(scale: Scale, seed: u64) -> TrainConfig {
    match scale {
        Scale::Desk => TrainConfig {
            lr: 1e-3,
            ..TrainConfig::desk(seed)
        },
        Scale::Paper => TrainConfig::paper(seed),
    }
}

fn hnn_train_config(scale: Scale, seed: u64) -> TrainConfig {
    match scale {
        Scale::Desk => TrainConfig {
            hidden_layers: 2,
            width: 64,
            lr: 1e-3,
            steps: 3000,
            seed,
            weight_decay: 0.0,
            eval_every: 500,
        },
        Scale::Paper => TrainConfig {
            hidden_layers: 2,
            width: 200,
            lr: 1e-3,
            steps: 2000,
            seed,
            weight_decay: 0.0,
            eval_every: 200,
        },
    }
}

pub const WEIGHT_DECAYS: [f64; 4] = [1e-3, 1e-4, 1e-6, 1e-8];
pub const VALIDATION_FRACTION: f64 = 0.2;
pub const NOISE_SIGMA: f64 = 0.1;
pub const N_COLLOC: usize = 100;

/// Every preset name, in listing order.
pub const PRESETS: &[&str] = &[
    "reaction-case1-prior5",
    "reaction-case1-prior15",
    "reaction-case2-prior15",
    "reaction-case2-prior25",
    "reaction-case2-multi",
    "reaction-case2-coopt",
    "convection-case1-prior25",
    "convection-case1-prior35",
    "convection-case2-prior45",
    "convection-case2-prior55",
    "convection-case1-multi",
    "convection-case1-coopt",
    "convection-case2-coopt",
    "rd-case1-prior5",
    "rd-case1-prior15",
    "rd-case2-prior15",
    "rd-case2-prior25",
    "rd-case2-multi",
    "pendulum-hnn",
    "mass-spring-hnn",
    "smoke",
];

fn pde(
    name: &str,
    scale: Scale,
    oracle: OracleSpec,
    grid: GridSpec,
    n_train: usize,
    priors: Vec<PriorSpec>,
) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig {
        name: name.to_string(),
        task: TaskConfig::Pde(PdeTask {
            oracle,
            grid,
            n_train,
            n_colloc: N_COLLOC,
            noise: NoiseSpec::new(NOISE_SIGMA)?,
            priors,
            validation_fraction: VALIDATION_FRACTION,
            weight_decays: WEIGHT_DECAYS.to_vec(),
        }),
        train: train_config(scale, 0),
        search: SearchConfig::for_scale(scale),
        seeds: vec![],
    })
}

fn hnn(name: &str, scale: Scale, system: HamiltonianSpec) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        task: TaskConfig::Hamiltonian(HnnTask {
            system,
            prior: system,
            mode: RegMode::Summed,
            n_train_traj: 20,
            n_val_traj: 5,
            n_test: 10,
            t_span: (0.0, 5.0),
            dt: 0.1,
            sigma: 0.1,
            reg_extra_points: 100,
            rollout_span: (0.0, 10.0),
            rollout_dt: 0.05,
        }),
        train: hnn_train_config(scale, 0),
        search: SearchConfig::for_scale(scale),
        seeds: vec![],
    }
}

/// Resolves a preset name to its configuration at the given scale.
pub fn preset(name: &str, scale: Scale) -> Result<ExperimentConfig> {
    let reaction_grid = GridSpec::reaction_default();
    let convection_grid = GridSpec::new(0.5, 256, 100)?;
    let r = |rho: f64| PriorSpec::reaction(rho);
    let c = |beta: f64| PriorSpec::convection(beta);
    let rd = |rho: f64| PriorSpec::reaction_diffusion(rho, 3.0);
    let react = |n: &str, oracle: f64, priors: Vec<PriorSpec>| {
        pde(n, scale, OracleSpec::reaction(oracle), reaction_grid.clone(), 50, priors)
    };
    let conv = |n: &str, oracle: f64, priors: Vec<PriorSpec>| {
        pde(n, scale, OracleSpec::convection(oracle), convection_grid.clone(), 100, priors)
    };
    let rdiff = |n: &str, oracle: f64, priors: Vec<PriorSpec>| {
        pde(n, scale, OracleSpec::reaction_diffusion(oracle, 3.0), reaction_grid.clone(), 50, priors)
    };
    let cfg = match name {
        "reaction-case1-prior5" => react(name, 10.0, vec![r(5.0)?])?,
        "reaction-case1-prior15" => react(name, 10.0, vec![r(15.0)?])?,
        "reaction-case2-prior15" => react(name, 20.0, vec![r(15.0)?])?,
        "reaction-case2-prior25" => react(name, 20.0, vec![r(25.0)?])?,
        "reaction-case2-multi" => react(name, 20.0, vec![r(15.0)?, r(25.0)?])?,
        "reaction-case2-coopt" => react(name, 20.0, vec![r(15.0)?.tunable("rho")?])?,
        "convection-case1-prior25" => conv(name, 30.0, vec![c(25.0)?])?,
        "convection-case1-prior35" => conv(name, 30.0, vec![c(35.0)?])?,
        "convection-case2-prior45" => conv(name, 50.0, vec![c(45.0)?])?,
        "convection-case2-prior55" => conv(name, 50.0, vec![c(55.0)?])?,
        "convection-case1-multi" => conv(name, 30.0, vec![c(25.0)?, c(35.0)?])?,
        "convection-case1-coopt" => conv(name, 30.0, vec![c(25.0)?.tunable("beta")?])?,
        "convection-case2-coopt" => conv(name, 50.0, vec![c(45.0)?.tunable("beta")?])?,
        "rd-case1-prior5" => rdiff(name, 10.0, vec![rd(5.0)?])?,
        "rd-case1-prior15" => rdiff(name, 10.0, vec![rd(15.0)?])?,
        "rd-case2-prior15" => rdiff(name, 20.0, vec![rd(15.0)?])?,
        "rd-case2-prior25" => rdiff(name, 20.0, vec![rd(25.0)?])?,
        "rd-case2-multi" => rdiff(name, 20.0, vec![rd(15.0)?, rd(25.0)?])?,
        "pendulum-hnn" => hnn(name, scale, HamiltonianSpec::ideal_pendulum()),
        "mass-spring-hnn" => hnn(name, scale, HamiltonianSpec::mass_spring()),
        "smoke" => smoke()?,
        other => {
            return Err(HarnessError::Config(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A seconds-scale reaction run on the full 256 × 100 grid, used for
/// artifact and determinism checks.
fn smoke() -> Result<ExperimentConfig> {
    let mut cfg = pde(
        "smoke",
        Scale::Desk,
        OracleSpec::reaction(10.0),
        GridSpec::reaction_default(),
        50,
        vec![PriorSpec::reaction(15.0)?],
    )?;
    cfg.train = TrainConfig {
        hidden_layers: 2,
        width: 8,
        lr: 1e-3,
        steps: 100,
        seed: 0,
        weight_decay: 0.0,
        eval_every: 50,
    };
    cfg.search.n_init = 2;
    cfg.search.budget = 3;
    if let TaskConfig::Pde(t) = &mut cfg.task {
        t.weight_decays = vec![1e-4];
    }
    Ok(cfg)
}

/// Names and families of a PDE task's priors, e.g. `reaction(rho=15)`.
pub fn prior_labels(priors: &[PriorSpec]) -> String {
    priors.iter().map(|p| p.label()).collect::<Vec<_>>().join("+")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves_at_both_scales() {
        for name in PRESETS {
            for scale in [Scale::Desk, Scale::Paper] {
                let cfg = preset(name, scale).unwrap();
                assert_eq!(cfg.name, *name);
            }
        }
        assert!(preset("reaction-case9", Scale::Desk).is_err());
    }

    #[test]
    fn desk_and_paper_budgets() {
        let d = preset("reaction-case2-prior15", Scale::Desk).unwrap();
        let p = preset("reaction-case2-prior15", Scale::Paper).unwrap();
        assert_eq!((d.train.hidden_layers, d.train.width, d.train.steps, d.search.budget), (4, 64, 5000, 15));
        assert_eq!((p.train.hidden_layers, p.train.width, p.train.steps, p.search.budget), (5, 512, 20000, 20));
        assert_eq!(p.train.lr, 2e-4);
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = preset("reaction-case2-coopt", Scale::Desk).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["train"]["dropout"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["task"]["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }
}
