//! Single-step ground-deformation nowcasting from InSAR point time series.
//!
//! The crate covers the whole path from EGMS-style L3 CSV tiles to evaluated
//! forecasts:
//!
//! - [`ingest`] parses tiles into point time series with an acquisition calendar.
//! - [`raster`] triangulates the scatterers and interpolates each epoch onto a grid.
//! - [`features`] fits training-window static indicators, time encodings and
//!   normalisation statistics, and cuts sliding windows.
//! - [`transformer`] and [`stgcn`] are the two learned forecasters, built on the
//!   small reverse-mode engine in [`autodiff`].
//! - [`baselines`] holds the closed-form per-pixel regressions and persistence.
//! - [`training`] has the losses, AdamW, schedule, EMA and the fit loop.
//! - [`eval`] computes the metric suite and runs zero-shot cross-site evaluation.
//! - [`synth`] generates synthetic tiles with known ground truth.
//! - [`cli`] wires the pipeline behind the `deformcast` binary.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod cube_io;
pub mod error;
pub mod eval;
pub mod features;
pub mod ingest;
mod lstsq;
pub mod model;
pub mod raster;
pub mod rng;
pub mod stgcn;
pub mod synth;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
