//! Nonlinear blind source separation from multichannel time series.
//!
//! The pipeline estimates measurement velocities, bins phase samples over a
//! rectangular grid, computes local second- and fourth-order velocity
//! moments per bin, builds a local frame matrix that whitens the second
//! moments and diagonalizes the contracted fourth moments, and extracts the
//! columns of the inverse frame as local vectors. Velocities expressed in
//! that basis yield sensor-independent weight series; if the weights split
//! into uncorrelated groups, streamline integration of the group vector
//! fields produces a separable coordinate map that recovers each
//! independent subsystem's time course.
//!
//! Hot loops (moment accumulation, per-bin frames, per-sample weights,
//! per-node streamline traces) run on rayon when the default `parallel`
//! feature is enabled; every operation has a sequential fallback with
//! bit-identical output, so results never depend on thread count.

pub mod coordinate_map;
pub mod error;
pub mod local_frames;
pub mod numeric;
pub mod phase_binning;
pub mod pipeline;
pub mod separability;
pub mod signal_io;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
