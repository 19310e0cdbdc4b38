//! Level-set reconstruction of volume susceptibility from magnetic modulus data.
//!
//! The pipeline is split into small modules that mirror the processing chain:
//!
//! * [`geometry`]: computational box, depth-layered grid, inducing field, scenes
//!   and measurement point sets.
//! * [`forward`]: the magnetic dipole kernel, dense kernel blocks, forward field
//!   and the per-component noise model.
//! * [`lowrank`]: depth-partitioned truncated SVD of the kernel and the
//!   row-subsampled products used by the stochastic gradient.
//! * [`levelset`]: Heaviside/band evaluation, upwind and central gradient norms,
//!   Laplacian regularization and signed-distance reinitialization.
//! * [`optimizer`]: mini-batch SGD with random reshuffling and a CFL stepsize.
//! * [`config`] and [`io`]: run configuration and on-disk formats.
//!
//! Data-parallel loops go through [`par`]; with the `parallel` feature disabled
//! everything runs sequentially. Both paths use identical summation orders, so
//! results do not depend on the thread count.

// `!(x > 0.0)` is used on purpose so NaN is rejected too; axis loops index
// several parallel arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod levelset;
pub mod lowrank;
pub mod optimizer;
pub mod par;

pub use error::{Error, Result};
pub use geometry::{DomainBox, Grid3, InducingField, MeasurementSet, Vec3};
pub use levelset::LevelSetField;
pub use lowrank::KernelOperator;
