//! Composite loss assembly, Adam, and the inner training loop.

use std::cell::RefCell;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_grad, JetBatch, LossProgram, MlpParams, ParamGradient, Probe, Tape};
use crate::error::{Error, Result};
use crate::oracles::{Dataset, Field, GridSpec, Sample};
use crate::priors::{collocation_probe, prior_term, PriorSpec};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Coefficient of `‖w‖²` in the loss; 0 disables.
    #[serde(default)]
    pub weight_decay: f64,
    pub eval_every: usize,
}

impl TrainConfig {
    /// 4 × 64 tanh network, 5000 full-batch steps.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            hidden_layers: 4,
            width: 64,
            lr: 2e-4,
            steps: 5000,
            seed,
            weight_decay: 0.0,
            eval_every: 500,
        }
    }

    /// 5 × 512 tanh network, 20000 full-batch steps.
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            hidden_layers: 5,
            width: 512,
            lr: 2e-4,
            steps: 20_000,
            seed,
            weight_decay: 0.0,
            eval_every: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::contract("learning rate must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::contract("steps must be >= 1"));
        }
        if self.width == 0 {
            return Err(Error::contract("width must be >= 1"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::contract("weight decay must be finite and >= 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::contract("eval_every must be >= 1"));
        }
        Ok(())
    }
}

/// One non-negative multiplier per attached prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambdas: Vec<f64>,
}

impl LossWeights {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::contract(format!(
                "regularization weights must be finite and >= 0: {lambdas:?}"
            )));
        }
        Ok(LossWeights { lambdas })
    }

    pub fn none() -> Self {
        LossWeights { lambdas: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub ic: f64,
    pub bc: f64,
    pub prior: Vec<f64>,
    pub weight_decay: f64,
    pub total: f64,
}

/// The composite objective
/// `L_d + L_I + L_b + Σ_k λ_k L_pk + decay·‖w‖²` as a differentiable program.
pub struct ProblemLoss {
    probes: Vec<Probe>,
    data_targets: Vec<f64>,
    ic_targets: Vec<f64>,
    n_bc: usize,
    priors: Vec<PriorSpec>,
    lambdas: Vec<f64>,
    weight_decay: f64,
    last: RefCell<Option<LossBreakdown>>,
}

impl ProblemLoss {
    pub fn new(
        data: &Dataset,
        priors: &[PriorSpec],
        weights: &LossWeights,
        weight_decay: f64,
    ) -> Result<Self> {
        if priors.len() != weights.lambdas.len() {
            return Err(Error::contract(format!(
                "{} priors but {} regularization weights",
                priors.len(),
                weights.lambdas.len()
            )));
        }
        LossWeights::new(weights.lambdas.clone())?;
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::contract("weight decay must be finite and >= 0"));
        }
        for p in priors {
            p.validate()?;
        }
        if data.train.is_empty() && data.ic.is_empty() {
            return Err(Error::contract("dataset has no supervised points"));
        }
        let (x_lo, x_hi) = (data.grid.x_min, data.grid.x_max);
        let mut points: Vec<[f64; 2]> = data.train.iter().map(|s| s.input).collect();
        points.extend(data.ic.iter().map(|s| s.input));
        points.extend(data.bc_times.iter().map(|&t| [x_lo, t]));
        points.extend(data.bc_times.iter().map(|&t| [x_hi, t]));
        let mut probes = vec![Probe::new(&points, vec![])?];
        if !priors.is_empty() {
            probes.push(collocation_probe(&data.collocation, priors)?);
        }
        Ok(ProblemLoss {
            probes,
            data_targets: data.train.iter().map(|s| s.target).collect(),
            ic_targets: data.ic.iter().map(|s| s.target).collect(),
            n_bc: data.bc_times.len(),
            priors: priors.to_vec(),
            lambdas: weights.lambdas.clone(),
            weight_decay,
            last: RefCell::new(None),
        })
    }

    /// Breakdown recorded by the most recent evaluation (value or gradient).
    pub fn last_breakdown(&self) -> Option<LossBreakdown> {
        self.last.borrow().clone()
    }

    fn diverged(term: impl Into<String>) -> Error {
        Error::Diverged {
            term: term.into(),
            step: None,
        }
    }
}

/// `(1/N) Σ (pred_j − target_j)²`, adding `scale · ∂/∂pred` to `adj`.
fn mse_term(pred: &[f64], targets: &[f64], adj: Option<(&mut [f64], f64)>) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let n = targets.len() as f64;
    let sum: f64 = pred.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum();
    if let Some((a, scale)) = adj {
        for ((ai, p), y) in a.iter_mut().zip(pred).zip(targets) {
            *ai += scale * 2.0 * (p - y) / n;
        }
    }
    sum / n
}

impl LossProgram for ProblemLoss {
    fn probes(&self) -> &[Probe] {
        &self.probes
    }

    fn reduce(&self, jets: &[JetBatch], mut adjoints: Option<&mut [JetBatch]>) -> Result<f64> {
        let nd = self.data_targets.len();
        let ni = self.ic_targets.len();
        let nb = self.n_bc;
        let values = jets[0].value.row(0);
        let values = values.as_slice().expect("contiguous output row");

        let mut value_adj = adjoints
            .as_deref_mut()
            .map(|a| a[0].value.as_slice_mut().expect("contiguous adjoint"));

        let data = {
            let adj = value_adj.as_deref_mut().map(|a| (&mut a[..nd], 1.0));
            mse_term(&values[..nd], &self.data_targets, adj)
        };
        let ic = {
            let adj = value_adj.as_deref_mut().map(|a| (&mut a[nd..nd + ni], 1.0));
            mse_term(&values[nd..nd + ni], &self.ic_targets, adj)
        };
        let bc = if nb == 0 {
            0.0
        } else {
            let left = &values[nd + ni..nd + ni + nb];
            let right = &values[nd + ni + nb..nd + ni + 2 * nb];
            let n = nb as f64;
            if let Some(a) = value_adj {
                for k in 0..nb {
                    let d = 2.0 * (left[k] - right[k]) / n;
                    a[nd + ni + k] += d;
                    a[nd + ni + nb + k] -= d;
                }
            }
            left.iter().zip(right).map(|(l, r)| (l - r) * (l - r)).sum::<f64>() / n
        };
        for (name, v) in [("data", data), ("ic", ic), ("bc", bc)] {
            if !v.is_finite() {
                return Err(Self::diverged(name));
            }
        }

        let mut prior = Vec::with_capacity(self.priors.len());
        for (k, (p, &lambda)) in self.priors.iter().zip(&self.lambdas).enumerate() {
            let adj = adjoints.as_deref_mut().map(|a| (&mut a[1], lambda));
            let v = prior_term(p, &self.probes[1], &jets[1], adj)?;
            if !v.is_finite() {
                return Err(Self::diverged(format!("prior[{k}] {}", p.label())));
            }
            prior.push(v);
        }

        let mut total = data + ic + bc;
        for (l, v) in self.lambdas.iter().zip(&prior) {
            total += l * v;
        }
        *self.last.borrow_mut() = Some(LossBreakdown {
            data,
            ic,
            bc,
            prior,
            weight_decay: 0.0,
            total,
        });
        Ok(total)
    }

    fn param_term(&self, params: &MlpParams, grad: Option<&mut ParamGradient>) -> Result<f64> {
        if self.weight_decay == 0.0 {
            return Ok(0.0);
        }
        let term = self.weight_decay * params.squared_norm();
        if !term.is_finite() {
            return Err(Self::diverged("weight_decay"));
        }
        if let Some(g) = grad {
            g.add_scaled_params(params, 2.0 * self.weight_decay);
        }
        if let Some(b) = self.last.borrow_mut().as_mut() {
            b.weight_decay = term;
            b.total += term;
        }
        Ok(term)
    }
}

/// Evaluates every loss component at fixed weights.
pub fn total_loss(
    params: &MlpParams,
    data: &Dataset,
    priors: &[PriorSpec],
    weights: &LossWeights,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    let program = ProblemLoss::new(data, priors, weights, weight_decay)?;
    crate::autodiff::loss_value(params, &program)?;
    Ok(program.last_breakdown().expect("reduce records a breakdown"))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamGradient,
    v: ParamGradient,
    t: u64,
}

impl Adam {
    pub fn new(params: &MlpParams) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: ParamGradient::zeros_like(params),
            v: ParamGradient::zeros_like(params),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &ParamGradient, lr: f64) -> Result<()> {
        if !grads.is_congruent(params) || !self.m.is_congruent(params) {
            return Err(Error::shape("optimizer state, gradient and parameters differ in shape"));
        }
        if !grads.all_finite() {
            return Err(Error::Diverged {
                term: "gradient".into(),
                step: Some(self.t as usize),
            });
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let slices = params
            .slices_mut()
            .zip(grads.slices())
            .zip(self.m.slices_mut().zip(self.v.slices_mut()));
        for ((p, g), (m, v)) in slices {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    state: &mut Adam,
    params: &mut MlpParams,
    grads: &ParamGradient,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: MlpParams,
    pub config: TrainConfig,
    pub history: Vec<HistoryEntry>,
    pub final_test_mse: f64,
}

/// Trains a fresh network with full-batch Adam on the composite loss.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    priors: &[PriorSpec],
    weights: &LossWeights,
) -> Result<TrainedModel> {
    config.validate()?;
    let program = ProblemLoss::new(data, priors, weights, config.weight_decay)?;
    let (params, history) = optimize(config, 2, &program, |p| p.last_breakdown())?;
    let final_test_mse = if data.test.is_empty() {
        f64::NAN
    } else {
        mse(&params, &data.test)?
    };
    Ok(TrainedModel {
        params,
        config: config.clone(),
        history,
        final_test_mse,
    })
}

/// Full-batch Adam on any differentiable program, starting from a seeded
/// Glorot network with `input_dim` inputs and one output. `snapshot` reads
/// the breakdown recorded by the program's last evaluation.
pub fn optimize<L, F>(
    config: &TrainConfig,
    input_dim: usize,
    program: &L,
    snapshot: F,
) -> Result<(MlpParams, Vec<HistoryEntry>)>
where
    L: LossProgram,
    F: Fn(&L) -> Option<LossBreakdown>,
{
    config.validate()?;
    let mut params =
        MlpParams::glorot_uniform(input_dim, config.hidden_layers, config.width, 1, config.seed)?;
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(config.steps / config.eval_every + 2);
    let with_step = |e: Error, step: usize| match e {
        Error::Diverged { term, .. } => Error::Diverged {
            term,
            step: Some(step),
        },
        other => other,
    };
    let record = |step: usize| HistoryEntry {
        step,
        loss: snapshot(program).expect("program records a breakdown"),
    };
    for step in 0..config.steps {
        let (_, grad) = loss_grad(&params, program).map_err(|e| with_step(e, step))?;
        if step % config.eval_every == 0 {
            history.push(record(step));
        }
        adam.step(&mut params, &grad, config.lr)
            .map_err(|e| with_step(e, step))?;
    }
    crate::autodiff::loss_value(&params, program).map_err(|e| with_step(e, config.steps))?;
    history.push(record(config.steps));
    Ok((params, history))
}

const EVAL_CHUNK: usize = 4096;

/// Network outputs at many points, evaluated in batches.
pub fn predict(params: &MlpParams, inputs: &[[f64; 2]]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let probe = Probe::new(chunk, vec![])?;
        let tape = Tape::record(params, &probe)?;
        out.extend(tape.jets().value.row(0).iter().copied());
    }
    Ok(out)
}

/// Mean squared error of the network over labelled samples.
pub fn mse(params: &MlpParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("cannot take the MSE of an empty set"));
    }
    let inputs: Vec<[f64; 2]> = samples.iter().map(|s| s.input).collect();
    let pred = predict(params, &inputs)?;
    let sum: f64 = pred
        .iter()
        .zip(samples)
        .map(|(p, s)| (p - s.target) * (p - s.target))
        .sum();
    Ok(sum / samples.len() as f64)
}

pub fn evaluate_mse(model: &TrainedModel, test: &[Sample]) -> Result<f64> {
    mse(&model.params, test)
}

/// The network's prediction over a full grid, shaped like an oracle field.
pub fn predict_field(params: &MlpParams, grid: &GridSpec) -> Result<Field> {
    let values = predict(params, &grid.points())?;
    let values = ndarray::Array2::from_shape_vec((grid.nx, grid.nt), values)
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(Field {
        grid: grid.clone(),
        values,
    })
}

/// Holds out a seeded `fraction` of the training observations for
/// validation. Returns the reduced dataset and the held-out samples.
pub fn split_validation(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<Sample>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::contract("validation fraction must be in [0, 1)"));
    }
    let n = data.train.len();
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = if fraction > 0.0 && n >= 2 { n_val.clamp(1, n - 1) } else { 0 };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    order[..n_val].iter().for_each(|&i| is_val[i] = true);
    let mut fit = data.clone();
    fit.train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (s, v) in data.train.iter().zip(is_val) {
        if v {
            val.push(*s);
        } else {
            fit.train.push(*s);
        }
    }
    Ok((fit, val))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    config: TrainConfig,
    layer_sizes: Vec<usize>,
    weights: Vec<f64>,
    history: Vec<HistoryEntry>,
    final_test_mse: Option<f64>,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut layer_sizes = vec![self.params.input_dim()];
        layer_sizes.extend(self.params.layers.iter().map(|l| l.out_dim()));
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            layer_sizes,
            weights: self.params.to_flat(),
            history: self.history.clone(),
            final_test_mse: self.final_test_mse.is_finite().then_some(self.final_test_mse),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {} is not supported",
                ck.format_version
            )));
        }
        let mut params = MlpParams::glorot(&ck.layer_sizes, 0)?;
        params.set_flat(&ck.weights)?;
        params.validate()?;
        Ok(TrainedModel {
            params,
            config: ck.config,
            history: ck.history,
            final_test_mse: ck.final_test_mse.unwrap_or(f64::NAN),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{make_dataset, NoiseSpec, OracleSpec};

    fn small_dataset() -> Dataset {
        let grid = GridSpec::new(0.5, 16, 8).unwrap();
        make_dataset(&OracleSpec::reaction(10.0), &grid, 12, NoiseSpec::new(0.1).unwrap(), 10, 7)
            .unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            hidden_layers: 2,
            width: 8,
            lr: 1e-3,
            steps: 30,
            seed,
            weight_decay: 0.0,
            eval_every: 10,
        }
    }

    #[test]
    fn zero_network_on_zero_dataset_has_zero_loss() {
        let mut ds = small_dataset();
        ds.train.iter_mut().for_each(|s| s.target = 0.0);
        ds.ic.iter_mut().for_each(|s| s.target = 0.0);
        let mut p = MlpParams::glorot_uniform(2, 2, 8, 1, 0).unwrap();
        p.layers.iter_mut().for_each(|l| {
            l.weight.fill(0.0);
            l.bias.fill(0.0)
        });
        let b = total_loss(
            &p,
            &ds,
            &[PriorSpec::reaction(5.0).unwrap()],
            &LossWeights::new(vec![1.0]).unwrap(),
            0.0,
        )
        .unwrap();
        assert_eq!((b.data, b.ic, b.bc, b.prior[0], b.total), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn breakdown_total_is_sum_of_parts() {
        let ds = small_dataset();
        let p = MlpParams::glorot_uniform(2, 2, 8, 1, 3).unwrap();
        let priors = [PriorSpec::reaction(5.0).unwrap(), PriorSpec::reaction(15.0).unwrap()];
        let w = LossWeights::new(vec![0.3, 0.02]).unwrap();
        let b = total_loss(&p, &ds, &priors, &w, 1e-3).unwrap();
        let expected = b.data + b.ic + b.bc + 0.3 * b.prior[0] + 0.02 * b.prior[1]
            + 1e-3 * p.squared_norm();
        assert!((b.total - expected).abs() < 1e-14);
        let plain = total_loss(&p, &ds, &priors, &LossWeights::new(vec![0.0, 0.0]).unwrap(), 0.0)
            .unwrap();
        assert_eq!(plain.total, plain.data + plain.ic + plain.bc);
    }

    #[test]
    fn prior_count_mismatch_rejected() {
        let ds = small_dataset();
        let p = MlpParams::glorot_uniform(2, 1, 4, 1, 3).unwrap();
        let err = total_loss(&p, &ds, &[PriorSpec::reaction(5.0).unwrap()], &LossWeights::none(), 0.0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn adam_zero_lr_leaves_params() {
        let mut p = MlpParams::glorot(&[2, 3, 1], 1).unwrap();
        let before = p.clone();
        let mut g = ParamGradient::zeros_like(&p);
        g.slices_mut().for_each(|s| s.fill(0.5));
        Adam::new(&p).step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = MlpParams::glorot(&[2, 3, 1], 1).unwrap();
        let before = p.to_flat();
        let mut g = ParamGradient::zeros_like(&p);
        for (k, s) in g.slices_mut().enumerate() {
            for (i, v) in s.iter_mut().enumerate() {
                *v = if (i + k) % 2 == 0 { 0.37 * (i + 1) as f64 } else { -2.1 };
            }
        }
        let lr = 1e-2;
        Adam::new(&p).step(&mut p, &g, lr).unwrap();
        for ((a, b), gi) in p.to_flat().iter().zip(&before).zip(g.to_flat()) {
            let expected = -lr * gi.signum();
            assert!((a - b - expected).abs() < lr * 1e-7, "{} vs {expected}", a - b);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = MlpParams::new(vec![crate::autodiff::Dense::zeros(1, 1)], crate::autodiff::Activation::Tanh)
            .unwrap();
        let mut adam = Adam::new(&p);
        for _ in 0..5000 {
            let w = p.layers[0].bias[0];
            let mut g = ParamGradient::zeros_like(&p);
            g.layers[0].bias[0] = 2.0 * (w - 3.0);
            adam.step(&mut p, &g, 1e-2).unwrap();
        }
        assert!((p.layers[0].bias[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = MlpParams::glorot(&[1, 1], 1).unwrap();
        let mut g = ParamGradient::zeros_like(&p);
        g.layers[0].bias[0] = f64::NAN;
        let err = Adam::new(&p).step(&mut p, &g, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_dataset();
        let priors = [PriorSpec::reaction(5.0).unwrap()];
        let w = LossWeights::new(vec![0.1]).unwrap();
        let a = train(&tiny_config(4), &ds, &priors, &w).unwrap();
        let b = train(&tiny_config(4), &ds, &priors, &w).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_test_mse.to_bits(), b.final_test_mse.to_bits());
        let steps: Vec<usize> = a.history.iter().map(|h| h.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30]);
    }

    #[test]
    fn zero_lambda_matches_unregularized_run() {
        let ds = small_dataset();
        let base = train(&tiny_config(9), &ds, &[], &LossWeights::none()).unwrap();
        let reg = train(
            &tiny_config(9),
            &ds,
            &[PriorSpec::reaction(15.0).unwrap()],
            &LossWeights::new(vec![0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(base.params, reg.params);
    }

    #[test]
    fn mse_edge_cases() {
        let mut p = MlpParams::glorot(&[2, 3, 1], 1).unwrap();
        p.layers.iter_mut().for_each(|l| {
            l.weight.fill(0.0);
            l.bias.fill(0.0)
        });
        let ones: Vec<Sample> = (0..5)
            .map(|i| Sample {
                input: [i as f64, 0.1],
                target: 1.0,
            })
            .collect();
        assert_eq!(mse(&p, &ones).unwrap(), 1.0);
        let zeros: Vec<Sample> = ones.iter().map(|s| Sample { target: 0.0, ..*s }).collect();
        assert_eq!(mse(&p, &zeros).unwrap(), 0.0);
        assert!(mse(&p, &[]).is_err());
    }

    #[test]
    fn validation_split_partitions_train() {
        let ds = small_dataset();
        let (fit, val) = split_validation(&ds, 0.2, 3).unwrap();
        assert_eq!(fit.train.len() + val.len(), ds.train.len());
        assert_eq!(val.len(), 2);
        for s in &val {
            assert!(!fit.train.contains(s));
        }
        assert_eq!(split_validation(&ds, 0.2, 3).unwrap().1, val);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ds = small_dataset();
        let m = train(&tiny_config(2), &ds, &[], &LossWeights::none()).unwrap();
        let dir = std::env::temp_dir().join(format!("priorreg-ck-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        m.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.history, m.history);
        assert_eq!(back.final_test_mse.to_bits(), m.final_test_mse.to_bits());
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let ds = small_dataset();
        let p = MlpParams::glorot_uniform(2, 2, 5, 1, 8).unwrap();
        let priors = [PriorSpec::reaction(5.0).unwrap(), PriorSpec::reaction_diffusion(4.0, 0.5).unwrap()];
        let w = LossWeights::new(vec![0.3, 0.05]).unwrap();
        let prog = ProblemLoss::new(&ds, &priors, &w, 1e-3).unwrap();
        assert!(crate::autodiff::gradient_check(&p, &prog, 1e-5, 1e-6).unwrap() < 1e-5);
    }
}
