//! Gaussian-window SSIM with its gradient with respect to the first image.
//!
//! Local statistics use an 11x11 window (sigma 1.5) with mirrored borders,
//! so the map has the same size as the input and constant images yield the
//! textbook closed form at every pixel.

use super::filter::{reflect_index, GaussianFilter};
use crate::dataio::ImageBuffer;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;

pub fn ssim_window() -> GaussianFilter {
    GaussianFilter::new(SSIM_SIGMA, SSIM_RADIUS)
}

#[derive(Debug, Clone)]
struct ChannelStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    vxx: Vec<f64>,
    vyy: Vec<f64>,
    vxy: Vec<f64>,
    /// Windowed variance of `x - y`.
    vdd: Vec<f64>,
}

/// Saved local statistics of an SSIM evaluation.
#[derive(Debug, Clone)]
pub struct SsimCache {
    channels: Vec<ChannelStats>,
}

#[inline]
fn terms(mx: f64, my: f64, vxx: f64, vyy: f64, vxy: f64) -> (f64, f64, f64, f64) {
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * vxy + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = vxx + vyy + SSIM_C2;
    (a1, a2, b1, b2)
}

/// Mirrored source indices of every tap for every output coordinate along
/// one axis of length `n`.
fn tap_table(window: &GaussianFilter, n: usize) -> Vec<usize> {
    let r = window.radius() as isize;
    let taps = window.window();
    let mut t = Vec::with_capacity(n * taps);
    for p in 0..n {
        for k in 0..taps {
            t.push(reflect_index(p as isize + k as isize - r, n));
        }
    }
    t
}

/// Precomputed window geometry for a `w x h` plane.
struct Taps<'a> {
    weights: &'a [f64],
    xs: Vec<usize>,
    ys: Vec<usize>,
    w: usize,
}

impl<'a> Taps<'a> {
    fn new(window: &'a GaussianFilter, w: usize, h: usize) -> Self {
        Self {
            weights: window.taps(),
            xs: tap_table(window, w),
            ys: tap_table(window, h),
            w,
        }
    }

    /// Calls `f(source_index, weight)` for every tap of the window centred
    /// on pixel `(px, py)`.
    #[inline]
    fn each(&self, px: usize, py: usize, mut f: impl FnMut(usize, f64)) {
        let n = self.weights.len();
        let xs = &self.xs[px * n..(px + 1) * n];
        for (ky, &ty) in self.weights.iter().enumerate() {
            let row = self.ys[py * n + ky] * self.w;
            for (&sx, &tx) in xs.iter().zip(self.weights) {
                f(row + sx, ty * tx);
            }
        }
    }
}

/// Windowed (co)variances from deviations about the local means. Forming
/// them as `E[x^2] - mu^2` instead loses most significant digits in flat
/// regions, which the small stabilizing constants then amplify.
fn centered_stats(xp: &[f64], yp: &[f64], w: usize, h: usize, window: &GaussianFilter) -> ChannelStats {
    let mu_x = window.apply(xp, w, h);
    let mu_y = window.apply(yp, w, h);
    let n = w * h;
    let taps = Taps::new(window, w, h);
    let (mut vxx, mut vyy, mut vxy, mut vdd) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for py in 0..h {
        for px in 0..w {
            let p = py * w + px;
            let (mx, my) = (mu_x[p], mu_y[p]);
            let (mut sxx, mut syy, mut sxy, mut sdd) = (0.0, 0.0, 0.0, 0.0);
            taps.each(px, py, |k, wt| {
                let (dx, dy) = (xp[k] - mx, yp[k] - my);
                sxx += wt * dx * dx;
                syy += wt * dy * dy;
                sxy += wt * dx * dy;
                sdd += wt * (dx - dy) * (dx - dy);
            });
            vxx[p] = sxx;
            vyy[p] = syy;
            vxy[p] = sxy;
            vdd[p] = sdd;
        }
    }
    ChannelStats { mu_x, mu_y, vxx, vyy, vxy, vdd }
}

/// Mean SSIM over pixels and channels. Shapes must already match.
pub fn ssim_forward(x: &ImageBuffer, y: &ImageBuffer, window: &GaussianFilter) -> (f64, SsimCache) {
    let (d, cache) = dssim_forward(x, y, window);
    (1.0 - d, cache)
}

/// Mean of `1 - SSIM` over pixels and channels, evaluated per pixel as
/// `(b1 b2 - a1 a2) / (b1 b2)` with the numerator expanded so that nearly
/// identical images keep full relative precision.
pub fn dssim_forward(x: &ImageBuffer, y: &ImageBuffer, window: &GaussianFilter) -> (f64, SsimCache) {
    let (w, h) = (x.width(), x.height());
    let mut total = 0.0;
    let mut channels = Vec::with_capacity(3);
    for c in 0..3 {
        let st = centered_stats(&x.channel(c), &y.channel(c), w, h, window);
        for p in 0..w * h {
            let (a1, a2, b1, b2) = terms(st.mu_x[p], st.mu_y[p], st.vxx[p], st.vyy[p], st.vxy[p]);
            let d1 = (st.mu_x[p] - st.mu_y[p]).powi(2);
            let d2 = st.vdd[p];
            total += (a1 * d2 + d1 * a2 + d1 * d2) / (b1 * b2);
        }
        channels.push(st);
    }
    (total / (3 * w * h) as f64, SsimCache { channels })
}

/// Gradient of `d_ssim * mean_ssim(x, y)` with respect to `x`, interleaved
/// like the image data.
///
/// Uses `d vxx(p) / d x_k = 2 w_pk (x_k - mu_x(p))`; the mean's own
/// contribution vanishes because centred deviations sum to zero under the
/// window.
pub fn ssim_backward(
    x: &ImageBuffer,
    y: &ImageBuffer,
    cache: &SsimCache,
    window: &GaussianFilter,
    d_ssim: f64,
) -> Vec<f64> {
    let (w, h) = (x.width(), x.height());
    let n = w * h;
    let scale = d_ssim / (3 * n) as f64;
    let mut grad = vec![0.0; 3 * n];
    let taps = Taps::new(window, w, h);
    for (c, st) in cache.channels.iter().enumerate() {
        let xp = x.channel(c);
        let yp = y.channel(c);
        let mut gc = vec![0.0; n];
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let (mx, my) = (st.mu_x[p], st.mu_y[p]);
                let (a1, a2, b1, b2) = terms(mx, my, st.vxx[p], st.vyy[p], st.vxy[p]);
                let s = scale * (a1 * a2) / (b1 * b2);
                let g_mu = s * (2.0 * my / a1 - 2.0 * mx / b1);
                let g_vxx = -s / b2;
                let g_vxy = 2.0 * s / a2;
                taps.each(px, py, |k, wt| {
                    gc[k] += wt * (g_mu + 2.0 * g_vxx * (xp[k] - mx) + g_vxy * (yp[k] - my));
                });
            }
        }
        for (p, g) in gc.into_iter().enumerate() {
            grad[p * 3 + c] = g;
        }
    }
    grad
}
