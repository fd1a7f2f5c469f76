use rayon::prelude::*;

use super::project::{Projection, Splat2D};
use super::RasterConfig;
use crate::dataio::{ColorSpace, ImageBuffer};
use crate::scene::Camera;

/// Image rows handled per parallel work item. Fixed so that the merge order
/// of partial gradients does not depend on the thread count.
const ROWS_PER_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Contribution {
    /// Position in `Projection::splats`.
    splat: usize,
    gauss: f64,
    /// `alpha * gauss`.
    weight: f64,
    /// Transmittance in front of this splat.
    trans: f64,
}

fn gaussian_at(sp: &Splat2D, x: f64, y: f64) -> (f64, f64, f64) {
    let dx = x - sp.pixel[0];
    let dy = y - sp.pixel[1];
    let [a, b, c] = sp.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    (power.exp(), dx, dy)
}

/// Splats (in depth order) whose bounding box covers row `y`.
fn row_list(proj: &Projection, y: usize) -> Vec<usize> {
    let y = y as i64;
    proj.order
        .iter()
        .copied()
        .filter(|&s| {
            let b = proj.splats[s].bbox;
            b.0 <= b.1 && b.2 <= y && y <= b.3
        })
        .collect()
}

/// Front-to-back walk over one pixel. Returns the final transmittance.
fn walk_pixel(
    proj: &Projection,
    row: &[usize],
    x: usize,
    y: usize,
    cfg: &RasterConfig,
    out: &mut Vec<Contribution>,
) -> f64 {
    out.clear();
    let mut trans = 1.0;
    let xi = x as i64;
    for &s in row {
        let sp = &proj.splats[s];
        if xi < sp.bbox.0 || xi > sp.bbox.1 {
            continue;
        }
        let (g, _, _) = gaussian_at(sp, x as f64, y as f64);
        let weight = sp.alpha * g;
        if !cfg.exact && weight < cfg.min_weight {
            continue;
        }
        out.push(Contribution {
            splat: s,
            gauss: g,
            weight,
            trans,
        });
        trans *= 1.0 - weight;
        if !cfg.exact && trans < cfg.min_transmittance {
            break;
        }
    }
    trans
}

fn chunk_rows(height: usize) -> Vec<(usize, usize)> {
    (0..height.div_ceil(ROWS_PER_CHUNK))
        .map(|c| (c * ROWS_PER_CHUNK, ((c + 1) * ROWS_PER_CHUNK).min(height)))
        .collect()
}

/// Composites one image per color set. `colors[k][s]` is the color of splat
/// `s` (position in `proj.splats`) in image `k`; all images share geometry,
/// ordering and weights.
pub fn composite(proj: &Projection, camera: &Camera, colors: &[&[[f64; 3]]], cfg: &RasterConfig) -> Vec<ImageBuffer> {
    let (w, h) = (camera.width, camera.height);
    let k_count = colors.len();
    for c in colors {
        assert_eq!(c.len(), proj.splats.len(), "one color per splat");
    }
    let parts: Vec<Vec<Vec<f64>>> = chunk_rows(h)
        .into_par_iter()
        .map(|(y0, y1)| {
            let mut planes = vec![vec![0.0; (y1 - y0) * w * 3]; k_count];
            let mut contrib = Vec::new();
            for y in y0..y1 {
                let row = row_list(proj, y);
                for x in 0..w {
                    let trans = walk_pixel(proj, &row, x, y, cfg, &mut contrib);
                    let base = ((y - y0) * w + x) * 3;
                    for (k, plane) in planes.iter_mut().enumerate() {
                        let mut acc = [0.0; 3];
                        for ct in &contrib {
                            let col = colors[k][ct.splat];
                            let wgt = ct.weight * ct.trans;
                            for ch in 0..3 {
                                acc[ch] += wgt * col[ch];
                            }
                        }
                        for ch in 0..3 {
                            plane[base + ch] = acc[ch] + trans * cfg.background[ch];
                        }
                    }
                }
            }
            planes
        })
        .collect();
    (0..k_count)
        .map(|k| {
            let data: Vec<f64> = parts.iter().flat_map(|p| p[k].iter().copied()).collect();
            ImageBuffer::from_vec(w, h, data, ColorSpace::LinearHdr).expect("sized by construction")
        })
        .collect()
}

/// Per-splat gradients of a composite.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    /// `color[k][s]`: gradient on the color of splat `s` in image `k`.
    pub color: Vec<Vec<[f64; 3]>>,
    pub alpha: Vec<f64>,
    pub conic: Vec<[f64; 3]>,
    pub pixel: Vec<[f64; 2]>,
    /// The splat received a nonzero weight in at least one pixel.
    pub contributed: Vec<bool>,
}

impl SplatGrads {
    fn zeros(n: usize, k: usize) -> Self {
        Self {
            color: vec![vec![[0.0; 3]; n]; k],
            alpha: vec![0.0; n],
            conic: vec![[0.0; 3]; n],
            pixel: vec![[0.0; 2]; n],
            contributed: vec![false; n],
        }
    }

    fn merge(&mut self, other: &SplatGrads) {
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            for (x, y) in a.iter_mut().zip(b) {
                for c in 0..3 {
                    x[c] += y[c];
                }
            }
        }
        for (x, y) in self.alpha.iter_mut().zip(&other.alpha) {
            *x += y;
        }
        for (x, y) in self.conic.iter_mut().zip(&other.conic) {
            for c in 0..3 {
                x[c] += y[c];
            }
        }
        for (x, y) in self.pixel.iter_mut().zip(&other.pixel) {
            x[0] += y[0];
            x[1] += y[1];
        }
        for (x, y) in self.contributed.iter_mut().zip(&other.contributed) {
            *x |= *y;
        }
    }
}

/// Vector-Jacobian product of [`composite`]. `cotangents[k]` is the gradient
/// on image `k` (row-major, 3 channels).
pub fn composite_backward(
    proj: &Projection,
    camera: &Camera,
    colors: &[&[[f64; 3]]],
    cotangents: &[&[f64]],
    cfg: &RasterConfig,
) -> SplatGrads {
    let (w, h) = (camera.width, camera.height);
    let n = proj.splats.len();
    let k_count = colors.len();
    assert_eq!(cotangents.len(), k_count);
    for c in cotangents {
        assert_eq!(c.len(), w * h * 3);
    }
    let parts: Vec<SplatGrads> = chunk_rows(h)
        .into_par_iter()
        .map(|(y0, y1)| {
            let mut g = SplatGrads::zeros(n, k_count);
            let mut contrib = Vec::new();
            let mut rest = vec![[0.0; 3]; k_count];
            for y in y0..y1 {
                let row = row_list(proj, y);
                for x in 0..w {
                    walk_pixel(proj, &row, x, y, cfg, &mut contrib);
                    let base = (y * w + x) * 3;
                    // `rest[k]` is the normalized color of everything behind
                    // the current splat, background included.
                    rest.iter_mut().for_each(|r| *r = cfg.background);
                    for ct in contrib.iter().rev() {
                        let s = ct.splat;
                        let mut d_weight = 0.0;
                        for k in 0..k_count {
                            let col = colors[k][s];
                            let dc = &cotangents[k][base..base + 3];
                            for ch in 0..3 {
                                d_weight += dc[ch] * (col[ch] - rest[k][ch]);
                                g.color[k][s][ch] += ct.trans * ct.weight * dc[ch];
                                rest[k][ch] = ct.weight * col[ch] + (1.0 - ct.weight) * rest[k][ch];
                            }
                        }
                        d_weight *= ct.trans;
                        if ct.weight > 0.0 {
                            g.contributed[s] = true;
                        }
                        let sp = &proj.splats[s];
                        g.alpha[s] += d_weight * ct.gauss;
                        let d_power = d_weight * sp.alpha * ct.gauss;
                        let dx = x as f64 - sp.pixel[0];
                        let dy = y as f64 - sp.pixel[1];
                        let [a, b, c] = sp.conic;
                        g.conic[s][0] += -0.5 * dx * dx * d_power;
                        g.conic[s][1] += -dx * dy * d_power;
                        g.conic[s][2] += -0.5 * dy * dy * d_power;
                        // d(power)/d(center) = +(conic * d)
                        g.pixel[s][0] += (a * dx + b * dy) * d_power;
                        g.pixel[s][1] += (b * dx + c * dy) * d_power;
                    }
                }
            }
            g
        })
        .collect();
    let mut total = SplatGrads::zeros(n, k_count);
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Splat weights at one pixel, in compositing order.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelWeights {
    /// `(gaussian index, alpha * G * transmittance)`.
    pub entries: Vec<(usize, f64)>,
    pub final_transmittance: f64,
}

/// Dumps the per-pixel compositing weights (row-major).
pub fn composite_weights(proj: &Projection, camera: &Camera, cfg: &RasterConfig) -> Vec<PixelWeights> {
    let mut out = Vec::with_capacity(camera.width * camera.height);
    let mut contrib = Vec::new();
    for y in 0..camera.height {
        let row = row_list(proj, y);
        for x in 0..camera.width {
            let t = walk_pixel(proj, &row, x, y, cfg, &mut contrib);
            out.push(PixelWeights {
                entries: contrib
                    .iter()
                    .map(|c| (proj.splats[c.splat].index, c.weight * c.trans))
                    .collect(),
                final_transmittance: t,
            });
        }
    }
    out
}
