//! Numerical toolkit for small dense models.
//!
//! `f32` storage with `f64` accumulation in products and reductions, a
//! reverse-mode [`Tape`] covering the operations a residual transformer
//! block needs, a Jacobi symmetric eigensolver, Cholesky ridge least squares
//! and an Adam optimizer.

pub mod adam;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{NumError, Result};
pub use graph::{Eager, Graph};
pub use linalg::{psd_sqrt, ridge_lstsq, sym_eig, sym_eig64, Mat64, SymEig};
pub use ops::BinaryKind;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
