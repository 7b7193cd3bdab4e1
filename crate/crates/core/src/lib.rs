//! Desk-scale digital-twin toolkit for a packed-bed thermal storage loop.
//!
//! The crate provides four building blocks that the CLI wires together:
//!
//! * [`sim`] — a physics-based trajectory generator: a 1-D packed-bed
//!   thermocline (two-phase fluid/filler energy balances) coupled to a lumped
//!   glycol heat-exchanger model, driven by Sobol-sampled actuator schedules.
//! * [`sindy`] — deterministic linear system identification with control
//!   (sequential thresholded least squares) and [`mvg`], its probabilistic
//!   extension over an ensemble of identified coefficient vectors.
//! * [`neural`] — from-scratch feedforward and gated-recurrent surrogates with
//!   analytic backpropagation and Adam.
//! * [`active`] — active-learning query strategies (Mahalanobis distance in
//!   coefficient space, prediction-error ranking) and the paired
//!   AL-versus-random comparison harness.
//!
//! Shared domain types (time grids, trajectories, datasets, deterministic RNG
//! streams) live at the crate root and are re-exported below.

pub mod active;
pub mod error;
pub mod grid;
pub mod harness;
pub mod io;
pub mod mvg;
pub mod neural;
pub mod ode;
pub mod rng;
pub mod sim;
pub mod sindy;
pub mod sobol;
pub mod timeseries;
pub mod types;

pub use error::{CoreError, Result};
pub use grid::TimeGrid;
pub use rng::RngStream;
pub use types::{ControlVector, Dataset, GhxState, Provenance, TesState, Trajectory};
