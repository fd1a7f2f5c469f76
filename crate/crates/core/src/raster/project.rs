use super::{RasterConfig, LOW_PASS};
use crate::linalg::{mat3_vec, transpose3, Mat3};
use crate::scene::{covariance_vjp, sandwich, Camera, GaussianCloud};

/// A Gaussian after projection into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian in the cloud.
    pub index: usize,
    /// Homogeneous clip-space center `P W [mu, 1]`.
    pub clip: [f64; 4],
    /// `clip[..3] / clip[3]`.
    pub ndc: [f64; 3],
    /// Center in pixel coordinates.
    pub pixel: [f64; 2],
    /// Screen covariance `(a, b, c)` for `[[a, b], [b, c]]`, low-pass included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d` in the same layout.
    pub conic: [f64; 3],
    /// Camera-space z.
    pub depth: f64,
    pub alpha: f64,
    /// Inclusive pixel ranges `(x0, x1, y0, y1)`; empty when `x0 > x1`.
    pub bbox: (i64, i64, i64, i64),
    pub(crate) cam: [f64; 3],
    pub(crate) cov_cam: Mat3,
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub splats: Vec<Splat2D>,
    /// Per Gaussian: survived culling.
    pub visible: Vec<bool>,
    /// Splat positions sorted by `(depth, index)`.
    pub order: Vec<usize>,
}

fn mat4_vec(m: &[[f64; 4]; 4], v: &[f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (0..4).map(|k| m[i][k] * v[k]).sum();
    }
    out
}

fn jacobian(camera: &Camera, t: &[f64; 3]) -> [[f64; 3]; 2] {
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t[2];
    [
        [fx * iz, 0.0, -fx * t[0] * iz * iz],
        [0.0, fy * iz, -fy * t[1] * iz * iz],
    ]
}

/// `J M J^T` for a 2x3 `J` and symmetric 3x3 `M`, as `(a, b, c)`.
fn jmjt(j: &[[f64; 3]; 2], m: &Mat3) -> [f64; 3] {
    let mut jm = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jm[r][c] = (0..3).map(|k| j[r][k] * m[k][c]).sum();
        }
    }
    let e = |r: usize, s: usize| (0..3).map(|k| jm[r][k] * j[s][k]).sum::<f64>();
    [e(0, 0), e(0, 1), e(1, 1)]
}

/// Projects every Gaussian and culls those behind the near plane, beyond
/// the far plane or outside the NDC margin.
pub fn project(cloud: &GaussianCloud, camera: &Camera, cfg: &RasterConfig) -> Projection {
    let proj = camera.projection_matrix();
    let rot = camera.rotation();
    let (w, h) = (camera.width as i64, camera.height as i64);
    let mut splats = Vec::new();
    let mut visible = vec![false; cloud.len()];
    for i in 0..cloud.len() {
        let t = camera.to_camera(&cloud.mu[i]);
        if !(t[2] > camera.near && t[2] < camera.far) {
            continue;
        }
        let clip = mat4_vec(&proj, &[t[0], t[1], t[2], 1.0]);
        let ndc = [clip[0] / clip[3], clip[1] / clip[3], clip[2] / clip[3]];
        if !(ndc[0].abs() <= cfg.ndc_margin && ndc[1].abs() <= cfg.ndc_margin) {
            continue;
        }
        let pixel = [
            camera.fx * t[0] / t[2] + camera.cx,
            camera.fy * t[1] / t[2] + camera.cy,
        ];
        let cov_cam = sandwich(&rot, &cloud.covariance(i));
        let mut cov2d = jmjt(&jacobian(camera, &t), &cov_cam);
        cov2d[0] += LOW_PASS;
        cov2d[2] += LOW_PASS;
        let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
        if !(det > 0.0 && det.is_finite()) {
            continue;
        }
        let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
        let bbox = if cfg.exact {
            (0, w - 1, 0, h - 1)
        } else {
            let mid = 0.5 * (cov2d[0] + cov2d[2]);
            let half = 0.5 * (cov2d[0] - cov2d[2]);
            let lmax = mid + (half * half + cov2d[1] * cov2d[1]).sqrt();
            let r = cfg.bbox_sigmas * lmax.sqrt();
            (
                ((pixel[0] - r).ceil() as i64).max(0),
                ((pixel[0] + r).floor() as i64).min(w - 1),
                ((pixel[1] - r).ceil() as i64).max(0),
                ((pixel[1] + r).floor() as i64).min(h - 1),
            )
        };
        visible[i] = true;
        splats.push(Splat2D {
            index: i,
            clip,
            ndc,
            pixel,
            cov2d,
            conic,
            depth: t[2],
            alpha: cloud.alpha(i),
            bbox,
            cam: t,
            cov_cam,
        });
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .total_cmp(&splats[b].depth)
            .then(splats[a].index.cmp(&splats[b].index))
    });
    Projection { splats, visible, order }
}

/// Gradients on the Gaussian parameters that shape the geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryGrads {
    pub mu: Vec<[f64; 3]>,
    pub log_scale: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    /// Gradient on the NDC center `(x, y)` per Gaussian.
    pub ndc: Vec<[f64; 2]>,
}

impl GeometryGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![[0.0; 3]; n],
            log_scale: vec![[0.0; 3]; n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            ndc: vec![[0.0; 2]; n],
        }
    }
}

/// Pulls per-splat gradients on alpha, conic and pixel center back to the
/// cloud parameters.
pub fn project_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    proj: &Projection,
    d_alpha: &[f64],
    d_conic: &[[f64; 3]],
    d_pixel: &[[f64; 2]],
) -> GeometryGrads {
    let mut out = GeometryGrads::zeros(cloud.len());
    let rot = camera.rotation();
    let rot_t = transpose3(&rot);
    let (fx, fy) = (camera.fx, camera.fy);
    for (s, sp) in proj.splats.iter().enumerate() {
        let i = sp.index;
        let a = sp.alpha;
        out.opacity_logit[i] += d_alpha[s] * a * (1.0 - a);

        // conic = inverse(cov2d)
        let [ca, cb, cc] = sp.cov2d;
        let det = ca * cc - cb * cb;
        let d2 = det * det;
        let [ga, gb, gc] = d_conic[s];
        let da = ga * (-cc * cc / d2) + gb * (cb * cc / d2) + gc * (-cb * cb / d2);
        let db = ga * (2.0 * cb * cc / d2) + gb * (-1.0 / det - 2.0 * cb * cb / d2) + gc * (2.0 * ca * cb / d2);
        let dc = ga * (-cb * cb / d2) + gb * (ca * cb / d2) + gc * (-ca * ca / d2);

        // cov2d = J M J^T (+ low pass); the off-diagonal appears twice.
        let g2 = [[da, 0.5 * db], [0.5 * db, dc]];
        let t = sp.cam;
        let j = jacobian(camera, &t);
        let m = &sp.cov_cam;
        let mut dm = [[0.0; 3]; 3];
        for p in 0..3 {
            for q in 0..3 {
                dm[p][q] = (0..2)
                    .flat_map(|r| (0..2).map(move |u| (r, u)))
                    .map(|(r, u)| j[r][p] * g2[r][u] * j[u][q])
                    .sum();
            }
        }
        // dJ = 2 G2 J M
        let mut jm = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                jm[r][c] = (0..3).map(|k| j[r][k] * m[k][c]).sum();
            }
        }
        let mut dj = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                dj[r][c] = 2.0 * (g2[r][0] * jm[0][c] + g2[r][1] * jm[1][c]);
            }
        }
        let iz = 1.0 / t[2];
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let [dpx, dpy] = d_pixel[s];
        let dt = [
            dj[0][2] * (-fx * iz2) + dpx * fx * iz,
            dj[1][2] * (-fy * iz2) + dpy * fy * iz,
            dj[0][0] * (-fx * iz2)
                + dj[0][2] * (2.0 * fx * t[0] * iz3)
                + dj[1][1] * (-fy * iz2)
                + dj[1][2] * (2.0 * fy * t[1] * iz3)
                - dpx * fx * t[0] * iz2
                - dpy * fy * t[1] * iz2,
        ];
        let dmu = mat3_vec(&rot_t, &dt);
        for k in 0..3 {
            out.mu[i][k] += dmu[k];
        }
        // M = R_w Sigma R_w^T
        let dsigma = crate::linalg::mat3_mul(&crate::linalg::mat3_mul(&rot_t, &dm), &rot);
        let (dls, dq) = covariance_vjp(&cloud.log_scale[i], &cloud.rotation[i], &dsigma);
        for k in 0..3 {
            out.log_scale[i][k] += dls[k];
        }
        for k in 0..4 {
            out.rotation[i][k] += dq[k];
        }
        out.ndc[i] = [
            dpx * camera.width as f64 / 2.0,
            dpy * camera.height as f64 / 2.0,
        ];
    }
    out
}
