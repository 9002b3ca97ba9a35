//! Dense numerical kernel: matrices, softmax, layer norm, symmetric
//! eigendecomposition and seeded random streams.

mod eigen;
mod matrix;
mod rng;

pub use eigen::{sym_eigen, sym_eigenvalues, sym_eigenvalues_f64, SymEigen, MAX_JACOBI_DIM};
pub use matrix::{cosine, dot, gelu, layer_norm, norm, softmax_rows, softmax_rows_in_place, Matrix};
pub(crate) use matrix::softmax_slice;
pub use rng::{stream, RandomStream};
