//! Projection of Gaussians to screen space and front-to-back alpha
//! compositing, with analytic backward passes.

mod composite;
mod project;
pub mod reference;

pub use composite::{composite, composite_backward, composite_weights, PixelWeights, SplatGrads};
pub use project::{project, project_backward, GeometryGrads, Projection, Splat2D};

/// Low-pass term added to the diagonal of every screen covariance (px^2).
pub const LOW_PASS: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub background: [f64; 3],
    /// Splats whose NDC center lies outside `[-margin, margin]^2` are culled.
    pub ndc_margin: f64,
    /// Disables the bounding box, the skip threshold and early termination
    /// so the rendered image is a smooth function of the splats.
    pub exact: bool,
    /// Contributions with `alpha * G` below this are skipped.
    pub min_weight: f64,
    /// A pixel stops after the transmittance drops below this.
    pub min_transmittance: f64,
    /// Half-extent of the per-splat bounding box, in standard deviations.
    pub bbox_sigmas: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            ndc_margin: 1.3,
            exact: false,
            min_weight: 1.0 / 255.0,
            min_transmittance: 1e-4,
            bbox_sigmas: 3.0,
        }
    }
}

impl RasterConfig {
    pub fn exact() -> Self {
        Self {
            exact: true,
            ..Self::default()
        }
    }
}
