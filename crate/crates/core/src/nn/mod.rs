//! Small deterministic numeric core: dense matrices, tanh MLPs with exact
//! backpropagation, SGD, special functions and the checkpoint format.

pub mod checkpoint;
pub mod matrix;
pub mod mlp;
pub mod special;

pub use matrix::Matrix;
pub use mlp::{Activation, Backward, GradientSet, Layer, MlpParams, Tape};
pub use special::{digamma, lgamma, trigamma};
