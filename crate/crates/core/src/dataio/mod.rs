//! Images, file formats, quality metrics and synthetic multi-exposure scenes.

pub mod dataset;
pub mod image;
pub mod metrics;
pub mod pnm;
pub mod synthetic;

pub use image::{ColorSpace, ImageBuffer};
pub use metrics::{psnr, psnr_from_mse, ssim};
pub use dataset::{Dataset, Split, ViewSet};
