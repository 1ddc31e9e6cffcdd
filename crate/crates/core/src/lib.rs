//! Structured sparse coding and dictionary learning.
//!
//! * [`groups`]: group structures (sequence, tree, cyclic grid) and the
//!   penalty `Σ_g η_g ‖α_g‖_q`.
//! * [`prox`]: closed-form proximal operators and the tree composition.
//! * [`solvers`]: FISTA/ISTA and ADMM for `½‖y − Dα‖² + λ Ω(α)`.
//! * [`dictlearn`]: alternating and online dictionary learning, λ calibration.
//! * [`data`]: patches, whitening, matrix and PGM files, atom mosaics.

pub mod data;
pub mod dictlearn;
pub mod error;
pub mod groups;
pub mod prox;
pub mod seeding;
pub mod solvers;

pub use error::{Error, Result};
pub use groups::{GroupStructure, Norm, StructureClass, TreeSpec};
pub use solvers::{LassoProblem, Method, SolveResult, SolverOptions, SparseCoder};

pub use nalgebra::{DMatrix, DVector};
