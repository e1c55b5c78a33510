//! Physics priors as generalized regularizers for neural surrogates of 1-D
//! dynamical systems.
//!
//! An approximate mechanistic model `F_θ(u) = 0` is turned into a penalty
//! `λ · mean(F_θ(G_w(x_i))²)` over collocation points and added to the data
//! loss. The weights `w` are trained by Adam; `λ` (and optionally `θ`) are
//! tuned in an outer Gaussian-process Bayesian optimization loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod hnn;
pub mod hyperopt;
pub mod oracles;
pub mod priors;
pub mod training;

pub use error::{Error, Result};
