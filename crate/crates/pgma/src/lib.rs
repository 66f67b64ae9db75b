//! File formats, experiment drivers and reports around [`pgma_core`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pgme;
pub mod raster;
pub mod report;
pub mod runner;
