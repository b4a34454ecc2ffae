//! Affinity-matrix contrastive learning at desk scale.
//!
//! The crate is layered bottom-up: [`matrix`] and [`autodiff`] provide dense
//! `f64` matrices with reverse-mode differentiation, [`linalg`] and
//! [`whitening`] the Cholesky-based batch whitening, [`losses`] the
//! SimAffinity / SimWhitening / SimTrace objectives with the symmetric
//! regularizer and an InfoNCE baseline. [`encoder`], [`data`], [`trainer`]
//! and [`eval`] turn those into an end-to-end pipeline, and [`cli`] drives
//! it from the command line.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod matrix;
pub mod plot;
pub mod trainer;
pub mod whitening;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use matrix::DenseMatrix;
