//! MLP evaluation with exact input jets and parameter gradients.

mod mlp;
mod taylor;

pub use mlp::{mlp_forward, Activation, Dense, MlpParams, ParamGradient};
pub use taylor::{gradient_check, 
    loss_grad, loss_value, mlp_jet, Direction, Jet2, JetBatch, JetOrder, LossProgram, Probe, Tape,
};
