//! Synthetic phantom data, dataset management and experiment pipelines for
//! TMS-Net.

pub mod dataset;
pub mod experiment;
pub mod phantom;
