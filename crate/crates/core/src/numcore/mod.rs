//! Dense numeric core: matrices, reverse-mode differentiation,
//! initialization, optimization, and gradient verification.

mod gradcheck;
mod init;
mod matrix;
mod optim;
mod params;
mod tape;

pub use gradcheck::{finite_difference_check, relative_error, CoordinateError, FdOptions, FdReport};
pub use init::{embedding_bound, embedding_init, xavier_bound, xavier_init};
pub use matrix::DenseMatrix;
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tape::{gelu, inject_adjoint_fault, log_sigmoid, sigmoid, Gradients, OpKind, Tape, Var, ZERO_NORM};
