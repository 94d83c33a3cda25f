//! Dense feed-forward networks with batch normalization, dropout, softmax outputs,
//! analytic backpropagation, and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, CheckMode, FdOptions, GradReport};
pub use mlp::{softmax_rows, Activation, BatchNorm, Dense, DenseGrads, ForwardCache, Mlp, MlpGrads, MlpSpec, Pass};
