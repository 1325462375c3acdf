//! Conformal Gauss maps of conformal immersions into the conformal n-sphere,
//! modelled as the projectivized lightcone of R^{n+1,1}.
//!
//! * [`minkowski`]: indefinite linear algebra (Gram forms, projectors, intersections, null lines).
//! * [`surfaces`]: built-in conformally parametrized surfaces and their lifts.
//! * [`congruence`]: the central sphere congruence `V`, the split `d = D + N`,
//!   the tension field and all residuals of the structure and containment identities.
//! * [`reconstruct`]: recovering the surface (and its dual) from `V` alone.
//! * [`cli`]: report generation, convergence studies and mesh export.

pub mod cli;
pub mod congruence;
pub mod error;
pub mod grid;
pub mod minkowski;
pub mod reconstruct;
pub mod surfaces;

pub use error::{Error, Result};
