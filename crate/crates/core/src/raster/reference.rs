//! Naive per-pixel compositor used as a test oracle and to render ground
//! truth: every splat is evaluated at every pixel, sorted per pixel, with no
//! bounding box, skip threshold or early termination.

use super::project::Splat2D;
use crate::dataio::{ColorSpace, ImageBuffer};

/// Composites `splats` with per-splat `colors` over `background`.
pub fn composite_reference(
    splats: &[Splat2D],
    colors: &[[f64; 3]],
    width: usize,
    height: usize,
    background: [f64; 3],
) -> ImageBuffer {
    let mut img = ImageBuffer::zeros(width, height, ColorSpace::LinearHdr);
    for y in 0..height {
        for x in 0..width {
            let mut hits: Vec<(f64, usize, f64)> = splats
                .iter()
                .enumerate()
                .map(|(s, sp)| {
                    let [a, b, c] = sp.cov2d;
                    let det = a * c - b * b;
                    let (ia, ib, ic) = (c / det, -b / det, a / det);
                    let dx = x as f64 - sp.pixel[0];
                    let dy = y as f64 - sp.pixel[1];
                    let q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy;
                    (sp.depth, s, sp.alpha * (-0.5 * q).exp())
                })
                .collect();
            hits.sort_by(|p, q| p.0.total_cmp(&q.0).then(splats[p.1].index.cmp(&splats[q.1].index)));
            let mut acc = [0.0; 3];
            let mut trans = 1.0;
            for (_, s, a) in hits {
                for c in 0..3 {
                    acc[c] += trans * a * colors[s][c];
                }
                trans *= 1.0 - a;
            }
            for c in 0..3 {
                acc[c] += trans * background[c];
            }
            img.set_pixel(x, y, acc);
        }
    }
    img
}
