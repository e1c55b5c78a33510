//! Truncated second-order Taylor propagation through an MLP.
//!
//! For a batch of points and a set of input directions `v_k`, the forward
//! pass carries, per layer, the value `h`, the first directional derivative
//! `h'_k = J h · v_k` and, where requested, the second directional derivative
//! `h''_k = v_kᵀ (∇² h) v_k`. All of them are stored side by side as column
//! blocks of one matrix so that each layer costs a single matrix product.
//!
//! The reverse pass walks the same blocks backwards and accumulates exact
//! parameter gradients of any scalar built from the output jets, including
//! the contributions that flow through the second derivatives.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2};

use super::mlp::{Activation, MlpParams, ParamGradient};
use crate::error::{Error, Result};

/// An input direction along which derivatives are propagated.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub label: String,
    pub vector: Vec<f64>,
    pub second_order: bool,
}

impl Direction {
    pub fn new(label: impl Into<String>, vector: Vec<f64>, second_order: bool) -> Self {
        Direction {
            label: label.into(),
            vector,
            second_order,
        }
    }

    /// The `axis`-th unit vector of an `dim`-dimensional input.
    pub fn axis(label: impl Into<String>, dim: usize, axis: usize, second_order: bool) -> Self {
        let mut vector = vec![0.0; dim];
        vector[axis] = 1.0;
        Self::new(label, vector, second_order)
    }
}

/// A fixed batch of evaluation points together with the directions the
/// loss needs derivatives along.
#[derive(Debug, Clone)]
pub struct Probe {
    /// `input_dim × n`, one column per point.
    inputs: Array2<f64>,
    dirs: Vec<Direction>,
    /// Column-block index of the second derivative for each direction.
    second_block: Vec<Option<usize>>,
}

impl Probe {
    pub fn new<P: AsRef<[f64]>>(points: &[P], dirs: Vec<Direction>) -> Result<Self> {
        let dim = points
            .first()
            .map(|p| p.as_ref().len())
            .or_else(|| dirs.first().map(|d| d.vector.len()))
            .unwrap_or(0);
        let mut inputs = Array2::zeros((dim, points.len()));
        for (j, p) in points.iter().enumerate() {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(Error::shape(format!(
                    "point {j} has length {}, expected {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|v| v.is_nan()) {
                return Err(Error::Domain(format!("point {j} contains NaN")));
            }
            for (i, v) in p.iter().enumerate() {
                inputs[[i, j]] = *v;
            }
        }
        for d in &dirs {
            if d.vector.len() != dim {
                return Err(Error::shape(format!(
                    "direction `{}` has length {}, expected {dim}",
                    d.label,
                    d.vector.len()
                )));
            }
        }
        let mut next = 1 + dirs.len();
        let second_block = dirs
            .iter()
            .map(|d| {
                d.second_order.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Ok(Probe {
            inputs,
            dirs,
            second_block,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.ncols() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dirs(&self) -> &[Direction] {
        &self.dirs
    }

    /// The `j`-th point.
    pub fn point(&self, j: usize) -> Vec<f64> {
        self.inputs.column(j).to_vec()
    }

    fn blocks(&self) -> usize {
        1 + self.dirs.len() + self.second_block.iter().flatten().count()
    }
}

/// Network outputs and their directional derivatives over a [`Probe`].
///
/// Every array is `output_dim × n`. The same shape doubles as the adjoint
/// container in [`LossProgram::reduce`].
#[derive(Debug, Clone, PartialEq)]
pub struct JetBatch {
    pub value: Array2<f64>,
    pub d1: Vec<Array2<f64>>,
    pub d2: Vec<Option<Array2<f64>>>,
}

impl JetBatch {
    fn zeros_for(probe: &Probe, out_dim: usize) -> Self {
        let n = probe.len();
        JetBatch {
            value: Array2::zeros((out_dim, n)),
            d1: probe.dirs.iter().map(|_| Array2::zeros((out_dim, n))).collect(),
            d2: probe
                .second_block
                .iter()
                .map(|b| b.map(|_| Array2::zeros((out_dim, n))))
                .collect(),
        }
    }

    /// The jet at column `j`, keyed by the probe's direction labels.
    pub fn point_jet(&self, probe: &Probe, j: usize) -> Jet2 {
        let col = |a: &Array2<f64>| a.column(j).to_vec();
        let mut d1 = BTreeMap::new();
        let mut d2 = BTreeMap::new();
        for (k, dir) in probe.dirs.iter().enumerate() {
            d1.insert(dir.label.clone(), col(&self.d1[k]));
            if let Some(a) = &self.d2[k] {
                d2.insert(dir.label.clone(), col(a));
            }
        }
        Jet2 {
            value: col(&self.value),
            d1,
            d2,
            renormalized: false,
        }
    }
}

/// Value plus first/second directional derivatives of the network at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub value: Vec<f64>,
    pub d1: BTreeMap<String, Vec<f64>>,
    pub d2: BTreeMap<String, Vec<f64>>,
    /// Set when a requested direction was not unit length and got normalized.
    pub renormalized: bool,
}

impl Jet2 {
    /// Scalar view for single-output networks.
    pub fn u(&self) -> f64 {
        self.value[0]
    }

    pub fn first(&self, label: &str) -> Result<f64> {
        self.d1
            .get(label)
            .map(|v| v[0])
            .ok_or_else(|| Error::contract(format!("jet has no first derivative along `{label}`")))
    }

    pub fn second(&self, label: &str) -> Result<f64> {
        self.d2
            .get(label)
            .map(|v| v[0])
            .ok_or_else(|| Error::contract(format!("jet has no second derivative along `{label}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JetOrder {
    First,
    Second,
}

/// `c = alpha·a·b + beta·c` through one fixed kernel regardless of size, so
/// that a column's result never depends on how many other columns share the
/// product.
fn gemm(alpha: f64, a: ArrayView2<f64>, b: ArrayView2<f64>, beta: f64, c: &mut Array2<f64>) {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert!(k == k2 && c.dim() == (m, n), "gemm shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.mapv_inplace(|v| beta * v);
        return;
    }
    let (sa, sb, sc) = (a.strides(), b.strides(), c.strides());
    let (rsc, csc) = (sc[0], sc[1]);
    // SAFETY: the pointers and strides come from live ndarray views whose
    // shapes were checked above; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa[0],
            sa[1],
            b.as_ptr(),
            sb[0],
            sb[1],
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

struct LayerCache {
    input: Array2<f64>,
    /// Hidden layers only: pre-activations with the value block replaced by
    /// `tanh` of itself.
    pre: Option<Array2<f64>>,
}

/// Forward pass over one probe, retaining what the reverse pass needs.
pub struct Tape<'p> {
    probe: &'p Probe,
    caches: Vec<LayerCache>,
    jets: JetBatch,
}

impl<'p> Tape<'p> {
    pub fn record(params: &MlpParams, probe: &'p Probe) -> Result<Self> {
        if probe.input_dim() != params.input_dim() {
            return Err(Error::shape(format!(
                "probe points have dimension {}, network expects {}",
                probe.input_dim(),
                params.input_dim()
            )));
        }
        let Activation::Tanh = params.activation;
        let n = probe.len();
        let nb = probe.blocks();
        let nd = probe.dirs.len();

        let mut h = Array2::zeros((probe.input_dim(), nb * n));
        h.slice_mut(s![.., ..n]).assign(&probe.inputs);
        for (k, dir) in probe.dirs.iter().enumerate() {
            for (i, v) in dir.vector.iter().enumerate() {
                h.slice_mut(s![i, (1 + k) * n..(2 + k) * n]).fill(*v);
            }
        }

        let last = params.layers.len() - 1;
        let mut caches = Vec::with_capacity(params.layers.len());
        for (l, layer) in params.layers.iter().enumerate() {
            let mut a = Array2::zeros((layer.out_dim(), nb * n));
            gemm(1.0, layer.weight.view(), h.view(), 0.0, &mut a);
            for (mut row, b) in a.rows_mut().into_iter().zip(layer.bias.iter()) {
                row.slice_mut(s![..n]).mapv_inplace(|v| v + b);
            }
            if l == last {
                caches.push(LayerCache {
                    input: h,
                    pre: None,
                });
                h = a;
                break;
            }
            let mut next = Array2::zeros(a.dim());
            for (mut arow, mut nrow) in a.rows_mut().into_iter().zip(next.rows_mut()) {
                let ar = arow.as_slice_mut().expect("row-major");
                let nr = nrow.as_slice_mut().expect("row-major");
                for j in 0..n {
                    let y = ar[j].tanh();
                    ar[j] = y;
                    nr[j] = y;
                }
                for k in 0..nd {
                    let o1 = (1 + k) * n;
                    let second = probe.second_block[k].map(|b| b * n);
                    for j in 0..n {
                        let y = ar[j];
                        let sd = 1.0 - y * y;
                        let a1 = ar[o1 + j];
                        nr[o1 + j] = sd * a1;
                        if let Some(o2) = second {
                            let sp = -2.0 * y * sd;
                            nr[o2 + j] = sd * ar[o2 + j] + sp * a1 * a1;
                        }
                    }
                }
            }
            caches.push(LayerCache {
                input: h,
                pre: Some(a),
            });
            h = next;
        }

        let mut jets = JetBatch::zeros_for(probe, params.output_dim());
        jets.value.assign(&h.slice(s![.., ..n]));
        for k in 0..nd {
            jets.d1[k].assign(&h.slice(s![.., (1 + k) * n..(2 + k) * n]));
            if let (Some(b), Some(d2)) = (probe.second_block[k], jets.d2[k].as_mut()) {
                d2.assign(&h.slice(s![.., b * n..(b + 1) * n]));
            }
        }
        Ok(Tape {
            probe,
            caches,
            jets,
        })
    }

    pub fn jets(&self) -> &JetBatch {
        &self.jets
    }

    pub fn into_jets(self) -> JetBatch {
        self.jets
    }

    /// Accumulates `∂loss/∂w` into `grad` given `∂loss/∂jets`.
    pub fn backward(&self, params: &MlpParams, adjoint: &JetBatch, grad: &mut ParamGradient) {
        let probe = self.probe;
        let n = probe.len();
        let nb = probe.blocks();
        let nd = probe.dirs.len();

        let mut g = Array2::zeros((params.output_dim(), nb * n));
        g.slice_mut(s![.., ..n]).assign(&adjoint.value);
        for k in 0..nd {
            g.slice_mut(s![.., (1 + k) * n..(2 + k) * n])
                .assign(&adjoint.d1[k]);
            if let (Some(b), Some(a2)) = (probe.second_block[k], adjoint.d2[k].as_ref()) {
                g.slice_mut(s![.., b * n..(b + 1) * n]).assign(a2);
            }
        }

        for (l, (layer, cache)) in params.layers.iter().zip(&self.caches).enumerate().rev() {
            if let Some(pre) = &cache.pre {
                for (prow, mut grow) in pre.rows().into_iter().zip(g.rows_mut()) {
                    let pr = prow.as_slice().expect("row-major");
                    let gr = grow.as_slice_mut().expect("row-major");
                    for j in 0..n {
                        let y = pr[j];
                        let sd = 1.0 - y * y;
                        let sp = -2.0 * y * sd;
                        let mut g_s = 0.0;
                        let mut g_sp = 0.0;
                        for k in 0..nd {
                            let i1 = (1 + k) * n + j;
                            let a1 = pr[i1];
                            let gy1 = gr[i1];
                            g_s += gy1 * a1;
                            let mut ga1 = gy1 * sd;
                            if let Some(b) = probe.second_block[k] {
                                let i2 = b * n + j;
                                let gy2 = gr[i2];
                                g_s += gy2 * pr[i2];
                                g_sp += gy2 * a1 * a1;
                                ga1 += gy2 * sp * 2.0 * a1;
                                gr[i2] = gy2 * sd;
                            }
                            gr[i1] = ga1;
                        }
                        gr[j] = (gr[j] - 2.0 * y * g_s + (4.0 * y * y - 2.0 * sd) * g_sp) * sd;
                    }
                }
            }
            let gl = &mut grad.layers[l];
            gemm(1.0, g.view(), cache.input.t(), 1.0, &mut gl.weight);
            for (gb, row) in gl.bias.iter_mut().zip(g.rows()) {
                *gb += row.slice(s![..n]).sum();
            }
            if l > 0 {
                let mut gin = Array2::zeros((layer.in_dim(), nb * n));
                gemm(1.0, layer.weight.t(), g.view(), 0.0, &mut gin);
                g = gin;
            }
        }
    }
}

/// A scalar loss assembled from network evaluations over fixed probes.
pub trait LossProgram {
    fn probes(&self) -> &[Probe];

    /// Reduces the jets (one per probe, same order) to the loss. When
    /// `adjoints` is supplied, zero-initialized and shaped like `jets`, it
    /// must be filled with `∂loss/∂jets`.
    fn reduce(&self, jets: &[JetBatch], adjoints: Option<&mut [JetBatch]>) -> Result<f64>;

    /// Loss contributions that depend on the weights directly.
    fn param_term(&self, _params: &MlpParams, _grad: Option<&mut ParamGradient>) -> Result<f64> {
        Ok(0.0)
    }
}

fn check_finite(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged {
            term: "total".into(),
            step: None,
        })
    }
}

pub fn loss_value<L: LossProgram + ?Sized>(params: &MlpParams, program: &L) -> Result<f64> {
    let jets = program
        .probes()
        .iter()
        .map(|p| Tape::record(params, p).map(Tape::into_jets))
        .collect::<Result<Vec<_>>>()?;
    let value = program.reduce(&jets, None)? + program.param_term(params, None)?;
    check_finite(value)
}

/// Loss value and its exact gradient with respect to every trainable scalar.
pub fn loss_grad<L: LossProgram + ?Sized>(
    params: &MlpParams,
    program: &L,
) -> Result<(f64, ParamGradient)> {
    let tapes = program
        .probes()
        .iter()
        .map(|p| Tape::record(params, p))
        .collect::<Result<Vec<_>>>()?;
    let jets: Vec<JetBatch> = tapes.iter().map(|t| t.jets.clone()).collect();
    let mut adjoints: Vec<JetBatch> = tapes
        .iter()
        .map(|t| JetBatch::zeros_for(t.probe, params.output_dim()))
        .collect();
    let mut grad = ParamGradient::zeros_like(params);
    let mut value = program.reduce(&jets, Some(&mut adjoints))?;
    value += program.param_term(params, Some(&mut grad))?;
    check_finite(value)?;
    for (tape, adj) in tapes.iter().zip(&adjoints) {
        tape.backward(params, adj, &mut grad);
    }
    Ok((value, grad))
}

/// Value and directional derivatives of `G_w` at one point.
///
/// Directions that are not unit length are normalized and the returned jet
/// has `renormalized` set.
pub fn mlp_jet(
    params: &MlpParams,
    x: &[f64],
    dirs: &[(&str, &[f64])],
    order: JetOrder,
) -> Result<Jet2> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("input contains NaN".into()));
    }
    if x.len() != params.input_dim() {
        return Err(Error::shape(format!(
            "input has length {}, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut renormalized = false;
    let mut directions = Vec::with_capacity(dirs.len());
    for (label, v) in dirs {
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Domain(format!("direction `{label}` has zero or non-finite length")));
        }
        let mut vector = v.to_vec();
        if (norm - 1.0).abs() > 1e-12 {
            log::warn!("direction `{label}` has norm {norm}; normalizing");
            renormalized = true;
            vector.iter_mut().for_each(|c| *c /= norm);
        }
        directions.push(Direction::new(*label, vector, order == JetOrder::Second));
    }
    let probe = Probe::new(&[x], directions)?;
    let tape = Tape::record(params, &probe)?;
    let mut jet = tape.jets.point_jet(&probe, 0);
    jet.renormalized = renormalized;
    Ok(jet)
}

/// Largest relative error between `loss_grad` and central finite differences
/// of `loss_value` with step `h`, over every parameter. Relative error uses
/// `max(|fd|, |ad|, floor)` as the denominator.
pub fn gradient_check<L: LossProgram + ?Sized>(
    params: &MlpParams,
    program: &L,
    h: f64,
    floor: f64,
) -> Result<f64> {
    let (_, grad) = loss_grad(params, program)?;
    let flat = params.to_flat();
    let ad = grad.to_flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut f = flat.clone();
        f[i] = flat[i] + h;
        probe.set_flat(&f)?;
        let up = loss_value(&probe, program)?;
        f[i] = flat[i] - h;
        probe.set_flat(&f)?;
        let down = loss_value(&probe, program)?;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - ad[i]).abs() / floor.max(fd.abs()).max(ad[i].abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
