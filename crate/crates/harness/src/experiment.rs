//! The baseline / weight-decay / tuned-prior pipeline for one case and
//! seed, and multi-seed repeatability runs.

use std::path::{Path, PathBuf};

use priorreg::hnn::{
    energy_metric, integrate_learned, make_hnn_dataset, regularizer_points, train_hnn, HnnDataset,
    HnnRegularizer, PhaseState,
};
use priorreg::hyperopt::{bo_minimize, write_trials_csv, BoOptions, Dim, SearchSpace, TrialRecord};
use priorreg::oracles::{make_dataset, Dataset};
use priorreg::priors::PriorSpec;
use priorreg::training::{mse, predict_field, split_validation, train, LossWeights, TrainConfig, TrainedModel};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{prior_labels, ExperimentConfig, HnnTask, PdeTask, SearchConfig, TaskConfig};
use crate::error::{HarnessError, Result};
use crate::heatmap::emit_heatmap;
use crate::report::{aggregate, write_report, ReportRow};

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub row: ReportRow,
    pub dir: PathBuf,
    /// Outer-loop trials; empty when the weights were fixed.
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone)]
pub struct RepeatOutcome {
    pub rows: Vec<ReportRow>,
    pub aggregate: ReportRow,
    pub failed_seeds: Vec<u64>,
}

#[derive(Serialize)]
struct ErrorManifest<'a> {
    case: &'a str,
    seed: u64,
    stage: &'a str,
    error: String,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| HarnessError::stage(name, e))
}

pub fn seed_dir(out: &Path, case: &str, seed: u64) -> PathBuf {
    out.join(case).join(format!("seed-{seed}"))
}

/// Runs one case for one seed under `out/<case>/seed-<seed>/`. On failure an
/// `error.json` naming the failed stage is left in that directory.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = seed_dir(out, &cfg.name, seed);
    std::fs::create_dir_all(&dir)?;
    cfg.save(&dir.join("config.json"))?;
    let result = match &cfg.task {
        TaskConfig::Pde(task) => run_pde(cfg, task, seed, &dir),
        TaskConfig::Hamiltonian(task) => run_hnn(cfg, task, seed, &dir),
    };
    match result {
        Ok(o) => {
            write_report(&dir.join("row.csv"), std::slice::from_ref(&o.row))?;
            let _ = std::fs::remove_file(dir.join("error.json"));
            Ok(o)
        }
        Err(e) => {
            let stage = match &e {
                HarnessError::Stage { stage, .. } => stage.as_str(),
                _ => "setup",
            };
            let manifest = ErrorManifest {
                case: &cfg.name,
                seed,
                stage,
                error: e.to_string(),
            };
            std::fs::write(dir.join("error.json"), serde_json::to_string_pretty(&manifest)?)?;
            Err(e)
        }
    }
}

fn seeded(train: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..train.clone()
    }
}

fn bo_options(search: &SearchConfig, seed: u64) -> BoOptions {
    BoOptions {
        log_objective: search.log_objective,
        ..BoOptions::new(search.n_init, search.budget, seed)
    }
}

fn dim_name(base: &str, k: usize, n: usize) -> String {
    if n == 1 {
        base.to_string()
    } else {
        format!("{base}_{}", k + 1)
    }
}

/// One log-scaled weight per prior, then a linear window around every
/// tunable coefficient.
fn pde_space(priors: &[PriorSpec], search: &SearchConfig) -> Result<SearchSpace> {
    let n = priors.len();
    let mut dims: Vec<Dim> = (0..n)
        .map(|k| Dim::log10(dim_name("lambda", k, n), search.lambda_lower, search.lambda_upper))
        .collect();
    for (k, p) in priors.iter().enumerate() {
        for c in &p.tunable {
            let v = p.coeff(c)?;
            let (a, b) = (v * (1.0 - search.coefficient_window), v * (1.0 + search.coefficient_window));
            dims.push(Dim::linear(dim_name(c, k, n), a.min(b), a.max(b)));
        }
    }
    Ok(SearchSpace::new(dims)?)
}

type Decoded = (Vec<f64>, Vec<PriorSpec>, Vec<(String, f64)>);

/// Splits a search point back into weights and adjusted priors, plus the
/// named coefficient values.
fn decode(priors: &[PriorSpec], point: &[f64]) -> Result<Decoded> {
    let n = priors.len();
    let lambdas = point[..n].to_vec();
    let mut rest = point[n..].iter();
    let mut adjusted = Vec::with_capacity(n);
    let mut theta = Vec::new();
    for (k, p) in priors.iter().enumerate() {
        let mut q = p.clone();
        for c in &p.tunable {
            let v = *rest
                .next()
                .ok_or_else(|| HarnessError::Config("search point is too short".into()))?;
            q = q.with_coeff(c, v)?;
            theta.push((dim_name(c, k, n), v));
        }
        adjusted.push(q);
    }
    Ok((lambdas, adjusted, theta))
}

/// Runs the outer loop with per-trial checkpoints and returns the trial log
/// with the model of the best trial.
fn search<F>(
    space: &SearchSpace,
    search: &SearchConfig,
    seed: u64,
    dir: &Path,
    mut fit: F,
) -> Result<(Vec<TrialRecord>, TrainedModel)>
where
    F: FnMut(&[f64]) -> Result<(TrainedModel, f64)>,
{
    let trials_dir = dir.join("trials");
    std::fs::create_dir_all(&trials_dir)?;
    let ckpt = |i: usize| format!("trials/trial-{i:03}.json");
    let result = bo_minimize(
        |point, i| {
            let (model, score) = fit(point).map_err(|e| match e {
                HarnessError::Core(c) => c,
                other => priorreg::Error::Numerical(other.to_string()),
            })?;
            model.save(&dir.join(ckpt(i)))?;
            log::info!("trial {i}: {point:?} -> {score:e}");
            Ok(score)
        },
        space,
        &bo_options(search, seed),
    )?;
    let mut trials = result.trials;
    for t in trials.iter_mut().filter(|t| !t.failed) {
        t.model_ref = Some(ckpt(t.trial));
    }
    write_trials_csv(&dir.join("trials.csv"), space, &trials)?;
    let best = trials
        .iter()
        .filter(|t| !t.failed)
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .ok_or_else(|| HarnessError::Config("every trial failed".into()))?;
    let model = TrainedModel::load(&dir.join(ckpt(best.trial)))?;
    Ok((trials, model))
}

fn run_pde(cfg: &ExperimentConfig, task: &PdeTask, seed: u64, dir: &Path) -> Result<ExperimentOutcome> {
    let (full, fit, val) = stage("data", || {
        let full = make_dataset(&task.oracle, &task.grid, task.n_train, task.noise, task.n_colloc, seed)?;
        full.save(&dir.join("dataset.json"))?;
        let (fit, val) = split_validation(&full, task.validation_fraction, seed)?;
        Ok((full, fit, val))
    })?;
    let scoring = if val.is_empty() { &fit.train } else { &val };
    let score = |m: &TrainedModel| -> Result<f64> { Ok(mse(&m.params, scoring)?) };
    let tc = seeded(&cfg.train, seed);

    let baseline = stage("baseline", || {
        let m = train(&tc, &fit, &[], &LossWeights::none())?;
        m.save(&dir.join("baseline.json"))?;
        Ok(m)
    })?;

    let decayed = stage("weight_decay", || {
        let mut best: Option<(f64, f64, TrainedModel)> = None;
        for &wd in &task.weight_decays {
            let c = TrainConfig {
                weight_decay: wd,
                ..tc.clone()
            };
            let m = train(&c, &fit, &[], &LossWeights::none())?;
            let s = score(&m)?;
            log::info!("weight decay {wd:e}: validation {s:e}");
            if best.as_ref().is_none_or(|(b, _, _)| s < *b) {
                best = Some((s, wd, m));
            }
        }
        if let Some((_, _, m)) = &best {
            m.save(&dir.join("weight_decay.json"))?;
        }
        Ok(best.map(|(_, wd, m)| (wd, m)))
    })?;

    let (tuned, lambdas, theta, trials) = stage("tune", || tune_pde(cfg, task, &tc, &fit, &score, seed, dir))?;

    stage("heatmap", || {
        let hm = dir.join("heatmaps");
        std::fs::create_dir_all(&hm)?;
        emit_heatmap(&full.oracle.field(&full.grid)?, &hm.join("exact"))?;
        emit_heatmap(&predict_field(&baseline.params, &full.grid)?, &hm.join("baseline"))?;
        if let Some((_, m)) = &decayed {
            emit_heatmap(&predict_field(&m.params, &full.grid)?, &hm.join("weight_decay"))?;
        }
        emit_heatmap(&predict_field(&tuned.params, &full.grid)?, &hm.join("tuned"))?;
        Ok(())
    })?;

    let row = ReportRow {
        case: cfg.name.clone(),
        priors: prior_labels(&task.priors),
        metric: "test_mse".into(),
        seeds: vec![seed],
        baseline: baseline.final_test_mse,
        baseline_std: None,
        weight_decay: decayed.as_ref().map(|(_, m)| m.final_test_mse),
        weight_decay_std: None,
        wd_opt: decayed.as_ref().map(|(wd, _)| *wd),
        tuned: tuned.final_test_mse,
        tuned_std: None,
        lambda_opt: lambdas,
        theta_opt: theta,
        flags: vec![],
    };
    Ok(ExperimentOutcome {
        row,
        dir: dir.to_path_buf(),
        trials,
    })
}

type Tuned = (TrainedModel, Vec<f64>, Vec<(String, f64)>, Vec<TrialRecord>);

fn tune_pde(
    cfg: &ExperimentConfig,
    task: &PdeTask,
    tc: &TrainConfig,
    fit: &Dataset,
    score: &dyn Fn(&TrainedModel) -> Result<f64>,
    seed: u64,
    dir: &Path,
) -> Result<Tuned> {
    let train_with = |lambdas: &[f64], priors: &[PriorSpec]| -> Result<TrainedModel> {
        Ok(train(tc, fit, priors, &LossWeights::new(lambdas.to_vec())?)?)
    };
    if let Some(lambdas) = &cfg.search.fixed_lambdas {
        let m = train_with(lambdas, &task.priors)?;
        m.save(&dir.join("tuned.json"))?;
        let theta = named_coeffs(&task.priors)?;
        return Ok((m, lambdas.clone(), theta, vec![]));
    }
    let space = pde_space(&task.priors, &cfg.search)?;
    let (trials, model) = search(&space, &cfg.search, seed, dir, |point| {
        let (lambdas, priors, _) = decode(&task.priors, point)?;
        let m = train_with(&lambdas, &priors)?;
        let s = score(&m)?;
        Ok((m, s))
    })?;
    model.save(&dir.join("tuned.json"))?;
    let best = trials
        .iter()
        .filter(|t| !t.failed)
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("search returned a model");
    let (lambdas, _, theta) = decode(&task.priors, &best.point)?;
    Ok((model, lambdas, theta, trials))
}

fn named_coeffs(priors: &[PriorSpec]) -> Result<Vec<(String, f64)>> {
    let n = priors.len();
    let mut out = Vec::new();
    for (k, p) in priors.iter().enumerate() {
        for c in &p.tunable {
            out.push((dim_name(c, k, n), p.coeff(c)?));
        }
    }
    Ok(out)
}

/// Mean energy drift of learned rollouts from `starts`, measured under `h`.
pub fn rollout_energy(
    params: &priorreg::autodiff::MlpParams,
    starts: &[PhaseState],
    task: &HnnTask,
    h: &priorreg::hnn::HamiltonianSpec,
) -> Result<f64> {
    if starts.is_empty() {
        return Err(HarnessError::Config("no rollout starts".into()));
    }
    let mut sum = 0.0;
    for &s0 in starts {
        let l = integrate_learned(params, s0, task.rollout_span, task.rollout_dt)?;
        if l.diverged {
            log::warn!("learned rollout from ({:.3}, {:.3}) diverged", s0.q, s0.p);
        }
        sum += energy_metric(&l.trajectory, h)?;
    }
    Ok(sum / starts.len() as f64)
}

fn run_hnn(cfg: &ExperimentConfig, task: &HnnTask, seed: u64, dir: &Path) -> Result<ExperimentOutcome> {
    let ds: HnnDataset = stage("data", || {
        let ds = make_hnn_dataset(
            &task.system,
            task.n_train_traj,
            task.n_val_traj,
            task.n_test,
            task.t_span,
            task.dt,
            task.sigma,
            seed,
        )?;
        ds.save(&dir.join("dataset.json"))?;
        Ok(ds)
    })?;
    let train_set = ds.train_samples();
    let val_set = ds.validation_samples();
    let val_starts: Vec<PhaseState> = ds.validation.iter().map(|t| t.states[0]).collect();
    let tc = seeded(&cfg.train, seed);
    let test_energy = |m: &TrainedModel| rollout_energy(&m.params, &ds.test_initial, task, &task.system);

    let baseline = stage("baseline", || {
        let m = train_hnn(&tc, &train_set, &val_set, None)?;
        m.save(&dir.join("baseline.json"))?;
        Ok(m)
    })?;

    let points = regularizer_points(&train_set, task.reg_extra_points, seed);
    let train_reg = |lambda: f64| -> Result<TrainedModel> {
        let reg = HnnRegularizer {
            spec: task.prior,
            lambda,
            mode: task.mode,
            points: points.clone(),
        };
        Ok(train_hnn(&tc, &train_set, &val_set, Some(reg))?)
    };

    let (tuned, lambda, trials) = stage("tune", || {
        if let Some(l) = &cfg.search.fixed_lambdas {
            let m = train_reg(l[0])?;
            m.save(&dir.join("tuned.json"))?;
            return Ok((m, l[0], vec![]));
        }
        let space = SearchSpace::new(vec![Dim::log10(
            "lambda",
            cfg.search.lambda_lower,
            cfg.search.lambda_upper,
        )])?;
        let (trials, model) = search(&space, &cfg.search, seed, dir, |point| {
            let m = train_reg(point[0])?;
            let s = rollout_energy(&m.params, &val_starts, task, &task.prior)?;
            Ok((m, s))
        })?;
        model.save(&dir.join("tuned.json"))?;
        let best = trials
            .iter()
            .filter(|t| !t.failed)
            .min_by(|a, b| a.objective.total_cmp(&b.objective))
            .expect("search returned a model");
        Ok((model, best.point[0], trials))
    })?;

    let (base_e, tuned_e) = stage("evaluate", || Ok((test_energy(&baseline)?, test_energy(&tuned)?)))?;
    let row = ReportRow {
        case: cfg.name.clone(),
        priors: format!("{:?}", task.prior),
        metric: "energy".into(),
        seeds: vec![seed],
        baseline: base_e,
        baseline_std: None,
        weight_decay: None,
        weight_decay_std: None,
        wd_opt: None,
        tuned: tuned_e,
        tuned_std: None,
        lambda_opt: vec![lambda],
        theta_opt: vec![],
        flags: vec![],
    };
    Ok(ExperimentOutcome {
        row,
        dir: dir.to_path_buf(),
        trials,
    })
}

/// Runs `seeds` on a pool of `workers` threads and writes
/// `out/<case>/report.csv` with one row per surviving seed plus the
/// aggregate. Failed seeds are logged, flagged and skipped.
pub fn repeatability_run(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
    workers: usize,
) -> Result<RepeatOutcome> {
    if seeds.is_empty() {
        return Err(HarnessError::Config("no seeds given".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let mut unique = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let results: Vec<(u64, Result<ExperimentOutcome>)> =
        pool.install(|| unique.par_iter().map(|&s| (s, run_experiment(cfg, s, out))).collect());
    let mut failed_seeds = Vec::new();
    for (s, r) in &results {
        if let Err(e) = r {
            log::error!("{} seed {s} failed: {e}", cfg.name);
            failed_seeds.push(*s);
        }
    }
    let rows: Vec<ReportRow> = seeds
        .iter()
        .filter_map(|s| match &results.iter().find(|(u, _)| u == s).expect("every seed ran").1 {
            Ok(o) => Some(o.row.clone()),
            Err(_) => None,
        })
        .collect();
    if rows.is_empty() {
        return Err(results.into_iter().find_map(|(_, r)| r.err()).expect("every seed failed"));
    }
    let mut agg = aggregate(&rows)?;
    agg.flags.extend(failed_seeds.iter().map(|s| format!("failed_seed={s}")));
    let mut all = rows.clone();
    all.push(agg.clone());
    write_report(&out.join(&cfg.name).join("report.csv"), &all)?;
    Ok(RepeatOutcome {
        rows,
        aggregate: agg,
        failed_seeds,
    })
}
