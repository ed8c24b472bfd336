//! Desk-scale numerical calculus of differential forms on model domains.
//!
//! The crate provides quadrature grids with diagonal Riemannian metrics,
//! a dual (analytic / sampled) representation of differential k-forms with
//! the usual exterior calculus, cone and averaged homotopy operators on
//! convex domains, single-chart de Rham regularization, finite cochain
//! complexes with best-constant solvers, witness constructions for
//! (non)vanishing of L_{q,p}-cohomology, a p-Laplacian energy minimizer,
//! and the discrete L^2 Hodge/Green machinery on flat tori.

pub mod complex;
pub mod error;
pub mod forms;
pub mod geometry;
pub mod hodge;
pub mod homotopy;
pub mod pde;
pub mod quad;
pub mod smoothing;
pub mod sobolev;
pub mod witnesses;

pub use error::LqpError;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, LqpError>;
