//! Dense arrays with a reverse-mode differentiation tape.
//!
//! Values live in [`Tensor`]. Recording operations on a [`Tape`] yields
//! [`Var`] handles; [`Tape::backward`] walks the tape in reverse and returns
//! [`Gradients`]. Network weights are [`Parameter`]s held in a
//! [`ParamStore`], which also owns the on-disk checkpoint format.

mod fd;
mod param;
mod tape;
mod value;

pub use fd::{check_input_gradients, check_param_gradients, relative_error, FdOptions};
pub use param::{write_atomic, ParamStore, Parameter};
pub(crate) use param::Cursor;
pub use tape::{Elementwise, Gradients, Reduce, Tape, Var};
pub use value::Tensor;

#[cfg(test)]
mod tests;
