//! Procedural multi-exposure scenes with analytic HDR ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, Split, ViewSet};
use super::image::{ColorSpace, ImageBuffer};
use crate::error::{Error, Result};
use crate::linalg::logit;
use crate::raster::reference::composite_reference;
use crate::raster::{project, RasterConfig};
use crate::scene::{Camera, GaussianCloud, ViewRecord, HR_DIM, LA_DIM};

/// Relative shutter times, geometric with ratio 2 around 1.
pub const EXPOSURE_LADDER: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
/// Ladder positions used for training images (lowest, middle, highest).
pub const TRAIN_EXPOSURE_SLOTS: [usize; 3] = [0, 2, 4];
/// Exponent of the reference camera response.
pub const CRF_GAMMA: f64 = 2.2;

/// Reference camera response: `clamp(x, 0, 1)^(1/2.2)`.
pub fn crf(x: f64) -> f64 {
    x.clamp(0.0, 1.0).powf(1.0 / CRF_GAMMA)
}

/// LDR image seen at exposure `t`.
pub fn derive_ldr(hdr: &ImageBuffer, t: f64) -> ImageBuffer {
    hdr.map(|v| crf(t * v)).with_space(ColorSpace::LdrUnit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Ground-truth Gaussians.
    pub n_gaussians: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub n_views: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_gaussians: 24,
            image_size: 64,
            n_views: 12,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 3 {
            return Err(Error::invalid(format!("need at least 3 views, got {}", self.n_views)));
        }
        if self.n_gaussians == 0 {
            return Err(Error::invalid("need at least one Gaussian"));
        }
        if self.image_size < 4 {
            return Err(Error::invalid(format!("image size {} is too small", self.image_size)));
        }
        Ok(())
    }
}

/// Ground-truth geometry plus HDR radiance per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub cloud: GaussianCloud,
    pub radiance: Vec<[f64; 3]>,
}

impl GroundTruth {
    /// Builds a layout from explicit values.
    pub fn explicit(
        mu: Vec<[f64; 3]>,
        log_scale: Vec<[f64; 3]>,
        rotation: Vec<[f64; 4]>,
        alpha: Vec<f64>,
        radiance: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let n = mu.len();
        if alpha.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::invalid("opacity must lie in (0, 1)"));
        }
        if radiance.len() != n || radiance.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("one non-negative radiance triple per Gaussian"));
        }
        let cloud = GaussianCloud {
            mu,
            log_scale,
            rotation,
            opacity_logit: alpha.into_iter().map(logit).collect(),
            h_r: vec![[0.0; HR_DIM]; n],
            l_a_raw: vec![[0.0; LA_DIM]; n],
        };
        cloud.validate()?;
        Ok(Self { cloud, radiance })
    }

    /// HDR render with the naive reference compositor on black.
    pub fn render(&self, camera: &Camera) -> ImageBuffer {
        let cfg = RasterConfig::exact();
        let p = project(&self.cloud, camera, &cfg);
        let colors: Vec<[f64; 3]> = p.splats.iter().map(|s| self.radiance[s.index]).collect();
        composite_reference(&p.splats, &colors, camera.width, camera.height, [0.0; 3])
    }

    /// Axis-aligned bounds of the centers padded by three scales.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..self.cloud.len() {
            let s = self.cloud.scales(i);
            let r = 3.0 * s.iter().fold(0.0f64, |m, v| m.max(*v));
            for k in 0..3 {
                lo[k] = lo[k].min(self.cloud.mu[i][k] - r);
                hi[k] = hi[k].max(self.cloud.mu[i][k] + r);
            }
        }
        (lo, hi)
    }
}

fn random_layout(n: usize, rng: &mut ChaCha8Rng) -> GroundTruth {
    let (lo_r, hi_r) = (0.02f64.ln(), 4.0f64.ln());
    let mut mu = Vec::with_capacity(n);
    let mut log_scale = Vec::with_capacity(n);
    let mut rotation = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut radiance = Vec::with_capacity(n);
    for i in 0..n {
        // Rejection-sample a point in the unit ball, shrunk.
        let p = loop {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if p.iter().map(|v: &f64| v * v).sum::<f64>() <= 1.0 {
                break p.map(|v| 0.8 * v);
            }
        };
        mu.push(p);
        log_scale.push([0; 3].map(|_| rng.random_range(0.12f64.ln()..0.3f64.ln())));
        let q: [f64; 4] = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        rotation.push(q.map(|v| v / norm));
        alpha.push(rng.random_range(0.6..0.95));
        // The first two Gaussians pin the ends of the radiance range so every
        // scene spans at least two orders of magnitude.
        let base = match i {
            0 => lo_r.exp(),
            1 => hi_r.exp(),
            _ => rng.random_range(lo_r..hi_r).exp(),
        };
        radiance.push([0; 3].map(|_| base * rng.random_range(-0.25f64..0.25).exp()));
    }
    GroundTruth::explicit(mu, log_scale, rotation, alpha, radiance).expect("valid by construction")
}

/// Camera `k` of `n` on a ring of radius 3 around the origin, alternating
/// above and below the equator.
pub fn ring_camera(k: usize, n: usize, size: usize) -> Camera {
    let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
    let elev: f64 = if k % 2 == 0 { 0.3 } else { -0.2 };
    let r = 3.0;
    let eye = [r * elev.cos() * theta.sin(), r * elev.sin(), -r * elev.cos() * theta.cos()];
    Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], size, size, 1.1 * size as f64).expect("ring camera")
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub truth: GroundTruth,
    pub dataset: Dataset,
}

/// Renders `truth` from `n_views` ring cameras and derives every LDR image.
/// View `k` is a test view when `k % 3 == 1`; train views keep the lowest,
/// middle and highest exposures, test views keep all five.
pub fn build_scene(spec: SceneSpec, truth: GroundTruth) -> Result<SyntheticScene> {
    spec.validate()?;
    let (bounds_min, bounds_max) = truth.bounds();
    let mut views = Vec::with_capacity(spec.n_views);
    for k in 0..spec.n_views {
        let camera = ring_camera(k, spec.n_views, spec.image_size);
        let hdr = truth.render(&camera);
        let split = if k % 3 == 1 { Split::Test } else { Split::Train };
        let slots: Vec<usize> = match split {
            Split::Train => TRAIN_EXPOSURE_SLOTS.to_vec(),
            Split::Test => (0..EXPOSURE_LADDER.len()).collect(),
        };
        let id = format!("view_{k:02}");
        let records = slots
            .iter()
            .map(|&s| {
                let t = EXPOSURE_LADDER[s];
                ViewRecord::new(format!("{id}@{t}"), camera.clone(), t, derive_ldr(&hdr, t))
            })
            .collect::<Result<Vec<_>>>()?;
        views.push(ViewSet {
            id,
            camera,
            split,
            nominal_exposure: EXPOSURE_LADDER[k % EXPOSURE_LADDER.len()],
            hdr: Some(hdr),
            records,
        });
    }
    Ok(SyntheticScene {
        spec,
        truth,
        dataset: Dataset {
            ladder: EXPOSURE_LADDER.to_vec(),
            bounds_min,
            bounds_max,
            views,
        },
    })
}

/// Random ground truth from `spec.seed`, rendered by [`build_scene`].
pub fn generate_scene(spec: SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = random_layout(spec.n_gaussians, &mut rng);
    build_scene(spec, truth)
}
