//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Operations are recorded on a [`Tape`] during the forward pass; a single
//! call to [`Tape::backward`] then visits every record once, in reverse, and
//! accumulates vector-Jacobian products. Trainable arrays live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`].

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, Stencil};
pub use matrix::Matrix;
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use tape::{logsumexp, Gradients, Tape, Var};


#[cfg(test)]
mod tests;
