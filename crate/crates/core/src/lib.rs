//! Shape from shading with quadratic patches.
//!
//! * [`patch_model`]: quadratic patch geometry, Lambertian rendering, the
//!   azimuthal θ parametrisation and generators for image-preserving
//!   shape/light families.
//! * [`proposals`]: per-patch inference of θ-indexed shape proposals and
//!   their likelihood costs.
//! * [`reconstruct`]: global depth recovery by alternating proposal labeling
//!   with surface integration.
//! * [`synth`]: random surfaces and rendered test scenes.
//! * [`evalkit`]: angular-error metrics and evaluation protocols.
//! * [`io`] and [`config`]: file formats and run configuration.

pub mod exec;
pub mod grid;
pub mod patch_model;
pub mod proposals;
pub mod reconstruct;
pub mod synth;
pub mod evalkit;
pub mod io;
pub mod config;

pub use exec::Exec;
pub use grid::Grid2;
pub use patch_model::{IntensityPatch, LightVector, PatchGrid, QuadShape};
