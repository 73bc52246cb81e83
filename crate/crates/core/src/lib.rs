//! Sparse multiclass support vector machines trained by proximal splitting.
//!
//! The model is one linear discriminant per class; training minimizes a
//! sparsity-promoting regularizer together with the exact multiclass hinge
//! loss, either penalized or as a constraint.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod linop;
pub mod model;
pub mod prox;
pub mod solvers;

pub use error::{Error, Result};
pub use model::{
    BlockStructure, Dataset, Features, GroupMode, MarginOffsets, ModelVector, RegularizerKind, RegularizerSpec, Sample,
};
pub use solvers::{SolveReport, SolverConfig, SolverKind};
