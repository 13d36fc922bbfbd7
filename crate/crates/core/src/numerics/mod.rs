//! Small deterministic numeric kernel: dense `f32` matrices, the transformer
//! sub-operations, a seeded generator and least-squares polynomial fitting.

mod matrix;
mod poly;
mod rng;

pub use matrix::{gelu, gelu_scalar, layer_norm, matmul, softmax_rows, FeatureTensor, Matrix};
pub use poly::{poly_eval, polyfit, Polynomial};
pub use rng::{splitmix64, standard_normal, Rng};
