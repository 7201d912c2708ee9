//! Minimal feed-forward classifier with analytic gradients and SGD.

mod checkpoint;
mod model;
mod optim;
mod prob;

pub(crate) use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint};
pub use model::{Activation, Dense, ForwardCache, Gradients, MlpModel};
pub use optim::{sgd_step, SgdConfig, SgdState};
pub use prob::{softmax, softmax_rows, ProbVector, SIMPLEX_TOL};
