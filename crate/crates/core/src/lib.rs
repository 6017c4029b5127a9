//! Residual-branch replacement for a toy FLUX-shaped transformer.
//!
//! Blocks are ranked by leave-one-out importance, the least important
//! residual branches are replaced by least-squares affine maps, and each
//! replacement is refined together with low-rank adapters on the nearest
//! unpruned neighbours.

pub mod brll;
pub mod data;
pub mod error;
pub mod evalbench;
pub mod importance;
pub mod manifest;
pub mod sandwich;
pub mod store;
pub mod toymodel;

pub use error::{Error, Result};
