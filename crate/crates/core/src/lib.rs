//! Sparse-actuation state-feedback synthesis for affine LPV systems.
//!
//! The crate is organized as a pipeline:
//!
//! * [`lpv`]: affine parameter-dependent plants and their vertex sets,
//! * [`wing`]: the flexible-wing benchmark plant and its quasi-LPV embedding,
//! * [`sdp`]: a small semidefinite-programming modeling layer and solver adapter,
//! * [`synthesis`]: H-infinity / H2 LMI assembly, reweighted l1 and pruning,
//! * [`analysis`]: independent norm computations and certificate audits,
//! * [`sim`]: nonlinear closed-loop simulation with seeded disturbances.

// links the system BLAS/LAPACK used by the conic solver
extern crate openblas_src;

pub mod analysis;
pub mod error;
pub mod lpv;
pub mod matrix_io;
pub mod sdp;
pub mod sim;
pub mod synthesis;
pub mod wing;

pub use error::{Error, Result};
