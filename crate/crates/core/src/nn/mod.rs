//! Noise-prediction network: a small MLP with a reverse-mode tape, parameter
//! interpolation and JSON checkpoints.

mod adam;
mod checkpoint;
mod mlp;
mod tape;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use mlp::{
    forward, forward_batch, forward_rows, forward_tape, init_params, interpolate_params,
    time_embedding, Activation, MlpArchitecture, MlpParams,
};
pub use tape::{log_sigmoid, sigmoid, Tape, Var};

/// Gradient of the scalar `loss` recorded on `tape` with respect to the tape's
/// parameter vector.
pub fn grad(tape: &Tape, loss: Var) -> crate::Result<Vec<f64>> {
    tape.gradient(loss)
}
