//! Dense numeric substrate: matrices, fully-connected nets with manual
//! backprop, losses, Adam, and checkpoints.

mod adam;
pub mod checkpoint;
pub mod loss;
mod matrix;
mod mlp;

pub use adam::Adam;
pub use matrix::{argmax, dot, Matrix};
pub use mlp::{sigmoid, softmax_in_place, Activation, Dense, ForwardCache, Gradients, MlpNet};
