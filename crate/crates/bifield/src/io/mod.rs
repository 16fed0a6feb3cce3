//! File formats and run configuration: strict CSV tables, plain-text
//! rasters, the flat key = value config, and run manifests.

pub mod config;
pub mod csv;
pub mod dataset;
pub mod manifest;
pub mod raster;
