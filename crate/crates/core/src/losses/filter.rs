//! Separable, normalized Gaussian filtering with mirror (reflect-101) borders.

/// Maps an out-of-range index back into `0..n` by mirroring about the edge
/// samples (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFilter {
    radius: usize,
    taps: Vec<f64>,
}

impl GaussianFilter {
    /// A `(2 * radius + 1)`-tap kernel normalized to unit sum.
    pub fn new(sigma: f64, radius: usize) -> Self {
        let mut taps: Vec<f64> = (0..=2 * radius)
            .map(|k| {
                let d = k as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        Self { radius, taps }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Filters a dense `height x width` plane.
    pub fn apply(&self, plane: &[f64], width: usize, height: usize) -> Vec<f64> {
        debug_assert_eq!(plane.len(), width * height);
        let r = self.radius as isize;
        let mut tmp = vec![0.0; plane.len()];
        for y in 0..height {
            let row = &plane[y * width..(y + 1) * width];
            for x in 0..width {
                let mut acc = 0.0;
                for (k, &w) in self.taps.iter().enumerate() {
                    acc += w * row[reflect_index(x as isize + k as isize - r, width)];
                }
                tmp[y * width + x] = acc;
            }
        }
        let mut out = vec![0.0; plane.len()];
        for y in 0..height {
            for (k, &w) in self.taps.iter().enumerate() {
                let src = reflect_index(y as isize + k as isize - r, height);
                let src_row = &tmp[src * width..(src + 1) * width];
                let dst_row = &mut out[y * width..(y + 1) * width];
                for (d, s) in dst_row.iter_mut().zip(src_row) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Transpose of [`GaussianFilter::apply`]: scatters output cotangents back
    /// onto the input plane, folding mirrored taps onto their sources.
    pub fn adjoint(&self, cot: &[f64], width: usize, height: usize) -> Vec<f64> {
        debug_assert_eq!(cot.len(), width * height);
        let r = self.radius as isize;
        let mut tmp = vec![0.0; cot.len()];
        for y in 0..height {
            for (k, &w) in self.taps.iter().enumerate() {
                let src = reflect_index(y as isize + k as isize - r, height);
                let (c_row, t_row) = (&cot[y * width..(y + 1) * width], src * width);
                for x in 0..width {
                    tmp[t_row + x] += w * c_row[x];
                }
            }
        }
        let mut out = vec![0.0; cot.len()];
        for y in 0..height {
            for x in 0..width {
                let c = tmp[y * width + x];
                if c == 0.0 {
                    continue;
                }
                for (k, &w) in self.taps.iter().enumerate() {
                    out[y * width + reflect_index(x as isize + k as isize - r, width)] += w * c;
                }
            }
        }
        out
    }
}
