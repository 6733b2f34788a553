//! Segmentation network with supervised row/column correlation attention,
//! adaptive receptive-field features, hybrid losses, metrics and raster data
//! tooling, built on `slc-tensor`.

pub mod arfe;
pub mod blocks;
pub mod checkpoint;
pub mod consistency;
pub mod data;
pub mod error;
pub mod fcsm;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod train;

pub use error::{CoreError, Result};
pub use labels::{LabelMap, DEFAULT_IGNORE};
