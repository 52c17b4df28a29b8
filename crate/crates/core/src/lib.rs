//! Physics-informed convolutional-recurrent PDE solver.
//!
//! An encoder, a periodic ConvLSTM and a decoder act together as a
//! forward-Euler time integrator whose training signal is the PDE residual,
//! with all spatial derivatives evaluated by nonlocal peridynamic
//! convolution filters.

pub mod autodiff;
mod binio;
pub mod config;
pub mod error;
pub mod field;
mod linalg;
pub mod metrics;
pub mod network;
pub mod pddo;
pub mod physics;
pub mod reference;
pub mod render;
pub mod trainer;

pub use error::{Error, Result};
pub use field::{sample_field, Field, FieldSequence, Grid};
pub use pddo::{apply_derivative, temporal_derivative, DerivativeFilterSet, Order};
