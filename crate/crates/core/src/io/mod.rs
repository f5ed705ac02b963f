//! File formats: PFM float rasters, CSV tables, 16-bit depth PNGs, and the
//! JSON run configuration.

pub mod config;
pub mod depth_png;
pub mod pfm;
pub mod tables;
