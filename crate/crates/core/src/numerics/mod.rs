//! Dense linear algebra, stable kernels and the gradient tape.

pub mod cholesky;
pub mod fd;
pub mod matrix;
pub mod stable;
pub mod tape;

pub use cholesky::{backward_substitute, cholesky_decompose, forward_substitute, log_det_from_cholesky};
pub use fd::finite_difference_gradient;
pub use matrix::{dot, Matrix};
pub use stable::{entropy, gelu, gelu_derivative, log_sum_exp, stable_softmax};
pub use tape::{Gradients, OpKind, Tape, Var};
