//! Depth covariance fields: Gaussian-process regression over log-depth with a
//! spatially varying (nonstationary) Matern kernel read from per-image field
//! rasters.
//!
//! The crate provides the kernel and its decode map ([`kernel`]), exact and
//! sparse variational GP evaluation ([`gp`]), greedy active sampling
//! ([`select`]), per-image field fitting ([`fit`]), uncertainty calibration
//! ([`calib`]), pinhole geometry and SE(3) utilities ([`geometry`]), bundle
//! adjustment with dense-depth priors ([`ba`]), photometric two-frame
//! alignment ([`photo`]), synthetic scene generation ([`synth`]), and file
//! formats plus the command-line surface ([`io`]).

pub mod ba;
pub mod calib;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod gp;
pub mod io;
pub mod kernel;
pub mod photo;
pub mod select;
pub mod synth;

pub use error::{Error, Result};
