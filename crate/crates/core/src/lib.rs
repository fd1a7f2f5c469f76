//! Differentiable CPU Gaussian splatting for HDR novel view synthesis from
//! multi-exposure LDR images.
//!
//! Each Gaussian carries a reflectance feature and an ambient illumination
//! level; a small composer network turns them into HDR color. Two branches
//! share geometry: the exposure branch scales the rendered HDR image by the
//! shutter time, the illumination branch relights every Gaussian through a
//! modulator network. A learned per-pixel tone mapper cross-fuses both into
//! the LDR prediction.

pub mod dataio;
pub mod densify;
pub mod error;
pub mod eval;
pub mod grad;
pub mod gradcheck;
pub mod kv;
pub mod linalg;
pub mod losses;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod radiance;
pub mod raster;
pub mod scene;
pub mod tonemap;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
