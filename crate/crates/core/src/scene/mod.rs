//! Learnable Gaussian scene representation and the camera/view data model.

mod camera;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use camera::Camera;

use crate::dataio::ImageBuffer;
use crate::error::{Error, Result};
use crate::linalg::{logit, mat3_mul, quat_to_mat, quat_to_mat_vjp, sigmoid, softplus, softplus_inv, transpose3, Mat3};

/// Length of the per-Gaussian reflectance feature.
pub const HR_DIM: usize = 8;
/// Ambient illumination has one value per color channel.
pub const LA_DIM: usize = 3;

/// The learnable scene. Every array has one entry per Gaussian.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianCloud {
    /// World-space centers.
    pub mu: Vec<[f64; 3]>,
    /// Log of the per-axis scales.
    pub log_scale: Vec<[f64; 3]>,
    /// Rotation quaternions `(w, x, y, z)`, kept at unit length.
    pub rotation: Vec<[f64; 4]>,
    /// Opacity before the sigmoid.
    pub opacity_logit: Vec<f64>,
    /// Reflectance feature.
    pub h_r: Vec<[f64; HR_DIM]>,
    /// Ambient illumination before the softplus.
    pub l_a_raw: Vec<[f64; LA_DIM]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub opacity: f64,
    pub ambient: f64,
    pub h_r_std: f64,
    /// Scale used when a seed has no neighbor.
    pub lone_scale: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            opacity: 0.1,
            ambient: 1.0,
            h_r_std: 0.1,
            lone_scale: 0.1,
            seed: 0,
        }
    }
}

/// Mean distance from each point to its (up to) three nearest neighbors.
fn mean_neighbor_distance(points: &[[f64; 3]]) -> Vec<f64> {
    let k = 3.min(points.len().saturating_sub(1));
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if k == 0 {
                return f64::NAN;
            }
            let mut best = [f64::INFINITY; 3];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d2 < best[2] {
                    best[2] = d2;
                    best.sort_by(f64::total_cmp);
                }
            }
            best[..k].iter().map(|d| d.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

/// Creates one isotropic Gaussian per seed point.
pub fn init_cloud(seed_points: &[[f64; 3]], config: &InitConfig) -> Result<GaussianCloud> {
    if seed_points.is_empty() {
        return Err(Error::invalid("init_cloud: empty seed set"));
    }
    if seed_points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("seed points".into()));
    }
    let n = seed_points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.h_r_std).map_err(|e| Error::invalid(e.to_string()))?;
    let dists = mean_neighbor_distance(seed_points);
    let log_scale = dists
        .iter()
        .map(|&d| {
            let d = if d.is_nan() { config.lone_scale } else { d.max(1e-7) };
            [d.ln(); 3]
        })
        .collect();
    let h_r = (0..n)
        .map(|_| {
            let mut f = [0.0; HR_DIM];
            f.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            f
        })
        .collect();
    Ok(GaussianCloud {
        mu: seed_points.to_vec(),
        log_scale,
        rotation: vec![[1.0, 0.0, 0.0, 0.0]; n],
        opacity_logit: vec![logit(config.opacity); n],
        h_r,
        l_a_raw: vec![[softplus_inv(config.ambient); LA_DIM]; n],
    })
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.log_scale.len(),
            self.rotation.len(),
            self.opacity_logit.len(),
            self.h_r.len(),
            self.l_a_raw.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::shape(format!("cloud arrays disagree: {n} centers vs {lens:?}")));
        }
        let finite = self.mu.iter().flatten().all(|v| v.is_finite())
            && self.log_scale.iter().flatten().all(|v| v.is_finite())
            && self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.h_r.iter().flatten().all(|v| v.is_finite())
            && self.l_a_raw.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        Ok(())
    }

    pub fn alpha(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logit[i])
    }

    pub fn ambient(&self, i: usize) -> [f64; LA_DIM] {
        self.l_a_raw[i].map(softplus)
    }

    pub fn scales(&self, i: usize) -> [f64; 3] {
        self.log_scale[i].map(f64::exp)
    }

    pub fn covariance(&self, i: usize) -> Mat3 {
        covariance(&self.log_scale[i], &self.rotation[i])
    }

    /// Renormalizes every quaternion to unit length.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotation {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    /// New cloud made of the Gaussians at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> GaussianCloud {
        GaussianCloud {
            mu: indices.iter().map(|&i| self.mu[i]).collect(),
            log_scale: indices.iter().map(|&i| self.log_scale[i]).collect(),
            rotation: indices.iter().map(|&i| self.rotation[i]).collect(),
            opacity_logit: indices.iter().map(|&i| self.opacity_logit[i]).collect(),
            h_r: indices.iter().map(|&i| self.h_r[i]).collect(),
            l_a_raw: indices.iter().map(|&i| self.l_a_raw[i]).collect(),
        }
    }
}

/// `R S S^T R^T` for scales `exp(log_scale)` and rotation `q`.
pub fn covariance(log_scale: &[f64; 3], q: &[f64; 4]) -> Mat3 {
    let r = quat_to_mat(q);
    let s = log_scale.map(f64::exp);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| r[i][k] * s[k] * s[k] * r[j][k]).sum();
        }
    }
    out
}

/// Pulls a cotangent on the covariance (full 3x3) back to
/// `(log_scale, quaternion)`.
pub fn covariance_vjp(log_scale: &[f64; 3], q: &[f64; 4], g: &Mat3) -> ([f64; 3], [f64; 4]) {
    let r = quat_to_mat(q);
    let s = log_scale.map(f64::exp);
    // Sigma = M M^T with M = R diag(s); dM = (G + G^T) M.
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * s[j];
        }
    }
    let gs = [
        [2.0 * g[0][0], g[0][1] + g[1][0], g[0][2] + g[2][0]],
        [g[1][0] + g[0][1], 2.0 * g[1][1], g[1][2] + g[2][1]],
        [g[2][0] + g[0][2], g[2][1] + g[1][2], 2.0 * g[2][2]],
    ];
    let dm = mat3_mul(&gs, &m);
    let mut dr = [[0.0; 3]; 3];
    let mut dlog = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            dr[i][j] = dm[i][j] * s[j];
            dlog[j] += dm[i][j] * r[i][j] * s[j];
        }
    }
    (dlog, quat_to_mat_vjp(q, &dr))
}

/// Rotation-sandwich helper: `A Sigma A^T`.
pub fn sandwich(a: &Mat3, sigma: &Mat3) -> Mat3 {
    mat3_mul(&mat3_mul(a, sigma), &transpose3(a))
}

/// One training or evaluation observation.
#[derive(Debug, Clone)]
pub struct ViewRecord {
    pub id: String,
    pub camera: Camera,
    /// Relative shutter time.
    pub exposure_t: f64,
    /// Target lighting level fed to the modulator.
    pub lighting_l: f64,
    pub gt_ldr: ImageBuffer,
    /// Radiance ground truth for evaluation.
    pub gt_hdr: Option<ImageBuffer>,
}

impl ViewRecord {
    pub fn new(id: impl Into<String>, camera: Camera, exposure_t: f64, gt_ldr: ImageBuffer) -> Result<Self> {
        camera.validate()?;
        if !(exposure_t.is_finite() && exposure_t > 0.0) {
            return Err(Error::invalid(format!("exposure must be > 0, got {exposure_t}")));
        }
        gt_ldr.validate()?;
        if gt_ldr.width() != camera.width || gt_ldr.height() != camera.height {
            return Err(Error::shape("ground truth does not match camera resolution"));
        }
        Ok(Self {
            id: id.into(),
            camera,
            exposure_t,
            lighting_l: exposure_t,
            gt_ldr,
            gt_hdr: None,
        })
    }

    pub fn with_hdr(mut self, hdr: ImageBuffer) -> Self {
        self.gt_hdr = Some(hdr);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn covariance_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert!(close(&covariance(&[0.0; 3], &id), &crate::linalg::IDENTITY3, 1e-15));
        let ln2 = 2f64.ln();
        let diag = covariance(&[ln2, 0.0, 0.0], &id);
        assert!(close(&diag, &[[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1e-14));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let rz = covariance(&[ln2, 0.0, 0.0], &[h, 0.0, 0.0, h]);
        assert!(close(&rz, &[[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 1.0]], 1e-14));
    }

    #[test]
    fn covariance_vjp_matches_finite_differences() {
        let ls = [0.2, -0.5, 0.1];
        let q = [0.8, 0.1, -0.3, 0.5];
        let g = [[0.4, -0.2, 0.9], [0.3, 1.1, -0.6], [-0.8, 0.2, 0.5]];
        let (dl, dq) = covariance_vjp(&ls, &q, &g);
        let f = |ls: &[f64; 3], q: &[f64; 4]| -> f64 {
            let c = covariance(ls, q);
            (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| g[i][j] * c[i][j]).sum()
        };
        let h = 1e-6;
        for k in 0..3 {
            let (mut p, mut m) = (ls, ls);
            p[k] += h;
            m[k] -= h;
            let num = (f(&p, &q) - f(&m, &q)) / (2.0 * h);
            assert!((num - dl[k]).abs() < 1e-8);
        }
        for k in 0..4 {
            let (mut p, mut m) = (q, q);
            p[k] += h;
            m[k] -= h;
            let num = (f(&ls, &p) - f(&ls, &m)) / (2.0 * h);
            assert!((num - dq[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn init_defaults() {
        let one = init_cloud(&[[0.0, 0.0, 0.0]], &InitConfig::default()).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one.alpha(0) - 0.1).abs() < 1e-15);
        for v in one.ambient(0) {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let d = 0.37;
        let two = init_cloud(&[[0.0; 3], [d, 0.0, 0.0]], &InitConfig::default()).unwrap();
        for i in 0..2 {
            for s in two.scales(i) {
                assert!((s - d).abs() < 1e-15);
            }
        }
        assert!(init_cloud(&[], &InitConfig::default()).is_err());
    }

    #[test]
    fn init_statistics_on_random_seeds() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..100).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let cloud = init_cloud(&pts, &InitConfig::default()).unwrap();
        cloud.validate().unwrap();
        let mean_la: f64 = (0..100).map(|i| cloud.ambient(i).iter().sum::<f64>() / 3.0).sum::<f64>() / 100.0;
        assert!((mean_la - 1.0).abs() < 1e-14);
        assert!((0..100).all(|i| (cloud.alpha(i) - 0.1).abs() < 1e-15));
        let hr: Vec<f64> = cloud.h_r.iter().flatten().copied().collect();
        let var = hr.iter().map(|v| v * v).sum::<f64>() / hr.len() as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.01);
    }

    #[test]
    fn view_record_checks() {
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 4, 4, 5.0).unwrap();
        let ok = ImageBuffer::filled(4, 4, 0.5, crate::dataio::ColorSpace::LdrUnit);
        let v = ViewRecord::new("v", cam.clone(), 2.0, ok.clone()).unwrap();
        assert_eq!(v.lighting_l, 2.0);
        assert!(ViewRecord::new("v", cam.clone(), 0.0, ok.clone()).is_err());
        let bad = ImageBuffer::filled(4, 4, 1.5, crate::dataio::ColorSpace::LdrUnit);
        assert!(ViewRecord::new("v", cam, 1.0, bad).is_err());
    }

    proptest! {
        #[test]
        fn covariance_symmetric_psd_and_double_cover(
            ls in proptest::array::uniform3(-3.0f64..1.5),
            q in proptest::array::uniform4(-1.0f64..1.0),
        ) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(n > 1e-3);
            let q = q.map(|v| v / n);
            let c = covariance(&ls, &q);
            let scale = c.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((c[i][j] - c[j][i]).abs() <= 1e-14 * scale.max(1.0));
                }
            }
            // Non-negative quadratic form on a few directions.
            for v in [[1.0, 0.0, 0.0], [0.3, -0.7, 0.2], [-0.5, 0.5, 0.9]] {
                let cv = crate::linalg::mat3_vec(&c, &v);
                prop_assert!(crate::linalg::dot3(&v, &cv) >= -1e-14 * scale);
            }
            let neg = covariance(&ls, &q.map(|v| -v));
            prop_assert_eq!(c, neg);
        }
    }
}
