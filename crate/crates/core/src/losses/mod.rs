//! Training objectives: LDR reconstruction, cross-branch HDR consistency,
//! unit-exposure regularization and their weighted total.

pub mod filter;
pub mod ssim;

use crate::dataio::ImageBuffer;
use crate::error::{Error, Result};
pub use filter::GaussianFilter;
pub use ssim::{dssim_forward, ssim_backward, ssim_forward, ssim_window, SsimCache};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the reconstruction term.
    pub lambda1: f64,
    /// Weight of the consistency term.
    pub lambda2: f64,
    /// Weight of the unit-exposure term; zero skips it entirely.
    pub lambda3: f64,
    /// MSE weight inside the reconstruction term.
    pub gamma: f64,
    pub blur_sigma: f64,
    pub blur_radius: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.0,
            gamma: 0.2,
            blur_sigma: 2.0,
            blur_radius: 5,
        }
    }
}

impl LossWeights {
    /// Defaults for scenes with a unit-exposure reference (synthetic data).
    pub fn synthetic() -> Self {
        Self {
            lambda3: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.gamma];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma > 0.0) {
            return Err(Error::invalid("blur_sigma must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cons: f64,
    pub unit: f64,
    pub total: f64,
}

pub fn total_loss(rec: f64, cons: f64, unit: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        rec,
        cons,
        unit,
        total: weights.lambda1 * rec + weights.lambda2 * cons + weights.lambda3 * unit,
    }
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Gradient of `d * mse(a, b)` with respect to `a`.
pub fn mse_backward(a: &ImageBuffer, b: &ImageBuffer, d: f64) -> Vec<f64> {
    let k = 2.0 * d / a.data().len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| k * (x - y)).collect()
}

/// `sum over I of [gamma * MSE(I, gt) + (1 - SSIM(I, gt)) / 2]` over the
/// three LDR predictions (final, IG-fused, GI-fused).
#[derive(Debug, Clone)]
pub struct ReconstructionLoss {
    pub gamma: f64,
    window: GaussianFilter,
}

#[derive(Debug, Clone)]
pub struct ReconstructionCache {
    ssim: Vec<SsimCache>,
}

impl ReconstructionLoss {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            window: ssim_window(),
        }
    }

    pub fn forward(&self, preds: &[&ImageBuffer], gt: &ImageBuffer) -> Result<(f64, ReconstructionCache)> {
        let mut total = 0.0;
        let mut ssim = Vec::with_capacity(preds.len());
        for p in preds {
            p.ensure_same_shape(gt, "reconstruction loss")?;
            let (d, cache) = dssim_forward(p, gt, &self.window);
            total += self.gamma * mse(p, gt) + 0.5 * d;
            ssim.push(cache);
        }
        Ok((total, ReconstructionCache { ssim }))
    }

    pub fn value(&self, preds: &[&ImageBuffer], gt: &ImageBuffer) -> Result<f64> {
        Ok(self.forward(preds, gt)?.0)
    }

    /// Per-prediction gradients of `d * loss`.
    pub fn backward(
        &self,
        preds: &[&ImageBuffer],
        gt: &ImageBuffer,
        cache: &ReconstructionCache,
        d: f64,
    ) -> Vec<Vec<f64>> {
        preds
            .iter()
            .zip(&cache.ssim)
            .map(|(p, sc)| {
                let mut g = mse_backward(p, gt, self.gamma * d);
                let gs = ssim_backward(p, gt, sc, &self.window, -0.5 * d);
                g.iter_mut().zip(gs).for_each(|(a, b)| *a += b);
                g
            })
            .collect()
    }
}

/// Mean absolute difference of the blurred exposure-scaled and relit HDR
/// images.
#[derive(Debug, Clone)]
pub struct ConsistencyLoss {
    blur: GaussianFilter,
}

#[derive(Debug, Clone)]
pub struct ConsistencyCache {
    /// Blurred difference per channel plane.
    diff: Vec<Vec<f64>>,
    width: usize,
    height: usize,
}

impl ConsistencyCache {
    /// Smallest |blurred difference|, the distance from the kink of |.|.
    pub fn kink_margin(&self) -> f64 {
        self.diff.iter().flatten().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl ConsistencyLoss {
    pub fn new(sigma: f64, radius: usize) -> Self {
        Self {
            blur: GaussianFilter::new(sigma, radius),
        }
    }

    pub fn from_weights(w: &LossWeights) -> Self {
        Self::new(w.blur_sigma, w.blur_radius)
    }

    pub fn filter(&self) -> &GaussianFilter {
        &self.blur
    }

    pub fn forward(&self, scaled: &ImageBuffer, relit: &ImageBuffer) -> Result<(f64, ConsistencyCache)> {
        scaled.ensure_same_shape(relit, "consistency loss")?;
        let (w, h) = (scaled.width(), scaled.height());
        // The blur is linear, so blurring the difference equals the
        // difference of the blurred images.
        let mut diff = Vec::with_capacity(3);
        let mut total = 0.0;
        for c in 0..3 {
            let d: Vec<f64> = scaled
                .channel(c)
                .iter()
                .zip(relit.channel(c))
                .map(|(a, b)| a - b)
                .collect();
            let blurred = self.blur.apply(&d, w, h);
            total += blurred.iter().map(|v| v.abs()).sum::<f64>();
            diff.push(blurred);
        }
        let value = total / (3 * w * h) as f64;
        Ok((
            value,
            ConsistencyCache {
                diff,
                width: w,
                height: h,
            },
        ))
    }

    pub fn value(&self, scaled: &ImageBuffer, relit: &ImageBuffer) -> Result<f64> {
        Ok(self.forward(scaled, relit)?.0)
    }

    /// Gradients of `d * loss` for `(scaled, relit)`. At a zero difference
    /// the subgradient 0 is used.
    pub fn backward(&self, cache: &ConsistencyCache, d: f64) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (cache.width, cache.height);
        let k = d / (3 * w * h) as f64;
        let mut ga = vec![0.0; 3 * w * h];
        for (c, plane) in cache.diff.iter().enumerate() {
            let sign: Vec<f64> = plane
                .iter()
                .map(|v| {
                    if *v > 0.0 {
                        k
                    } else if *v < 0.0 {
                        -k
                    } else {
                        0.0
                    }
                })
                .collect();
            let back = self.blur.adjoint(&sign, w, h);
            for (p, v) in back.into_iter().enumerate() {
                ga[p * 3 + c] = v;
            }
        }
        let gb = ga.iter().map(|v| -v).collect();
        (ga, gb)
    }
}

/// Unit-exposure term: MSE between the tone-mapped unit-exposure render and
/// the unit-exposure ground truth.
pub fn unit_exposure_loss(pred_unit: &ImageBuffer, gt_unit: &ImageBuffer) -> Result<f64> {
    pred_unit.ensure_same_shape(gt_unit, "unit-exposure loss")?;
    Ok(mse(pred_unit, gt_unit))
}
