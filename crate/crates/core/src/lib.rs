//! Diffeomorphic 3-D image registration with stationary velocity fields.
//!
//! The crate is organised bottom-up: [`grid`] holds containers and sampling,
//! [`svf`] the velocity-field algebra, [`analysis`] the deformation metrics,
//! [`insilico`] the synthetic dataset generator, [`autodiff`] a small
//! reverse-mode engine, [`nets`] the registration networks and [`train`] the
//! losses, optimizer and experiment drivers. [`io`] reads and writes volumes.

pub mod error;
pub mod grid;
pub mod svf;
pub mod analysis;
pub mod insilico;
pub mod io;
pub mod autodiff;
pub mod nets;
pub mod train;

pub use error::{Error, Result};
pub use grid::{FieldKind, GridGeometry, ScalarVolume, VectorField};
