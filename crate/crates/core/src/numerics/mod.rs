//! Dense tensors, reverse-mode differentiation, parameter storage and
//! finite-difference gradient checks.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{gradient_check, gradient_check_in, gradient_check_params, sample_param_entries, ParamEntry};
pub use params::{is_buffer_name, Init, ParamStore};
pub use tape::{
    apply_stat_updates, sigmoid, ElementwiseKind, Gradients, Mode, SparsePattern, StatUpdate, Tape, Var,
    STANDARDIZE_EPS, STANDARDIZE_MOMENTUM,
};
pub use tensor::Tensor;

use crate::error::Result;

/// Fully connected map `x · W + b` reading `{prefix}.weight` and `{prefix}.bias`.
pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    let xw = tape.matmul(x, w)?;
    let rows = tape.shape(x)[0];
    let ones = tape.constant(Tensor::ones(&[rows, 1]));
    let bias = tape.matmul(ones, b)?;
    tape.add(xw, bias)
}
