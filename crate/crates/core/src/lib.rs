//! TMS-Net: a multi-view wavelet segmentation network whose three
//! view-specific decoders double as a label-free segmentation quality check.

pub mod checkpoint;
pub mod corruption;
mod error;
pub mod model;
pub mod qc;
pub mod quality;
pub mod segment;
pub mod trainer;
pub mod volume;
pub mod wavelet;

pub use error::{Error, Result};
pub use model::{ModelConfig, TmsNet, Variant};
pub use volume::{Mask3D, ViewAxis, Volume3D};
