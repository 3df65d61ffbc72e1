//! Dense linear algebra and statistics kernel.
//!
//! Everything here is pure and single-threaded. Reductions run in a fixed
//! order so that repeated calls on identical inputs are bit-identical.

mod dense;
mod linalg;
mod pca;
mod stats;

pub use dense::{Matrix, Vector};
pub use linalg::{gemm, ridge_fit, Transpose};
pub use pca::{pca2, PcaResult};
pub use stats::{bootstrap_ci, cosine, mean, r_squared, softmax, softmax_in_place, Ci95};
