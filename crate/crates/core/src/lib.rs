//! Generalized multiscale inversion for heterogeneous parabolic problems.
//!
//! The pipeline builds nested structured meshes of the unit square with
//! discrete fractures ([`geometry`]), assembles fine P1 operators
//! ([`assembly`]), constructs a spectral multiscale coarse space and the
//! element-wise coarse mass/stiffness blocks ([`gmsfem`]), integrates fine and
//! coarse systems and generates cell-average observations ([`forward`]), and
//! recovers the coarse blocks from observed pressures by adjoint-state
//! gradient descent ([`inversion`]).

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the element formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assembly;
pub mod eigen;
pub mod forward;
pub mod error;
pub mod geometry;
pub mod gmsfem;
pub mod inversion;
pub mod sparse;

pub use error::{Error, Result};
