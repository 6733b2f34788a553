//! Rasters, tiling, augmentation, synthetic data and dataset layout.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod raster;
pub mod synth;
pub mod tiles;

pub use image::Image;
