//! Dense `f64` tensors with a reverse-mode gradient tape, parameter storage,
//! optimisers, gradient checking and the binary checkpoint format.

mod array;
pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use array::Tensor;
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_report, relative_error, GradCheckReport};
pub use params::{Init, Optimizer, OptimizerKind, ParameterStore};
pub use tape::{Gradients, OpKind, Tape, Var};

pub(crate) use checkpoint::{put_record, put_u32, Reader};

use crate::error::Result;

/// `x·W + b` with `W: in×out` and `b: out`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}
