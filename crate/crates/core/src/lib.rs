//! Conformal prediction regions built from kernel density estimates.
//!
//! A [`ConformalModel`] wraps a [`DensityEstimate`] and answers exact
//! membership queries for the full conformal region, together with the
//! inner and outer level-set bounds that sandwich it. The remaining modules
//! supply ground-truth oracles, grid geometry, bandwidth tuners and a
//! Monte-Carlo experiment harness.

pub mod bandwidth;
pub mod cli;
pub mod conformal;
pub mod density;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod oracle;

pub use conformal::{ConformalModel, SandwichCutoffs, SandwichRegions};
pub use density::{Dataset, DensityEstimate};
pub use error::{Error, Result};
pub use geometry::{Grid, GridRegion};
pub use kernels::{product_kernel, KernelFamily, KernelSpec};
pub use oracle::{MixtureDensity, Truth};
