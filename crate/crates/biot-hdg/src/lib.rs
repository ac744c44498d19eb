//! Divergence-conforming HDG discretization of quasi-static Biot consolidation.
//!
//! The library assembles a hybridizable discontinuous Galerkin method on
//! triangular meshes: pressure is approximated in broken `P^k` with facet
//! unknowns in `P^{k-1}`, displacement in an H(div)-conforming vector `P^{k+1}`
//! space built from shared facet-normal moments, with tangential facet
//! unknowns in `P^k`. Element-interior unknowns are statically condensed and
//! the facet system is solved by a sparse symmetric-indefinite LDL^T
//! factorization. Time stepping uses BDF formulas of order 1..=5.

pub mod assembly;
pub mod fe_spaces;
pub mod mesh;
pub mod ref_elements;
pub mod scenarios;
pub mod sparse_linalg;
pub mod time_integration;
