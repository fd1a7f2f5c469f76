use super::image::ImageBuffer;
use crate::error::{Error, Result};
use crate::losses::{ssim_forward, ssim_window};

/// Peak signal-to-noise ratio for unit-range images, `-10 log10(MSE)`.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    Ok(psnr_from_mse(crate::losses::mse(a, b)))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    -10.0 * mse.log10()
}

/// Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5).
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let window = ssim_window();
    let side = window.window();
    if a.width() < side || a.height() < side {
        return Err(Error::ImageTooSmall {
            width: a.width(),
            height: a.height(),
            window: side,
        });
    }
    Ok(ssim_forward(a, b, &window).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ColorSpace;
    use crate::losses::ssim::{SSIM_C1, SSIM_C2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random::<f64>()).collect();
        ImageBuffer::from_vec(w, h, data, ColorSpace::LdrUnit).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageBuffer::filled(4, 4, 0.5, ColorSpace::LdrUnit);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = ImageBuffer::filled(4, 4, 0.6, ColorSpace::LdrUnit);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr_from_mse(1e-4), 40.0);
        // MSE = 0.01 up to the rounding of 0.6 - 0.5.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        let c = ImageBuffer::filled(4, 4, 0.51, ColorSpace::LdrUnit);
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &ImageBuffer::filled(3, 4, 0.5, ColorSpace::LdrUnit)).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let a = random(16, 13, 1);
        let b = random(16, 13, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-14);
        let small = random(10, 20, 3);
        assert!(matches!(ssim(&small, &small), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_constant_closed_form() {
        let (p, q) = (0.3, 0.7);
        let a = ImageBuffer::filled(12, 12, p, ColorSpace::LdrUnit);
        let b = ImageBuffer::filled(12, 12, q, ColorSpace::LdrUnit);
        let expected = (2.0 * p * q + SSIM_C1) * SSIM_C2 / ((p * p + q * q + SSIM_C1) * SSIM_C2);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }
}
