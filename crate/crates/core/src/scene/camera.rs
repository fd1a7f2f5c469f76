use crate::error::{Error, Result};
use crate::linalg::{cross3, dot3, mat3_vec, normalize3, sub3, Mat3, Vec3};

/// Pinhole camera. Camera space follows the x-right, y-down, z-forward
/// convention; pixel centers sit at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rigid world-to-camera transform.
    pub world_to_cam: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera has zero-sized image"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be > 0 ({}, {})", self.fx, self.fy)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(format!("need 0 < near < far ({}, {})", self.near, self.far)));
        }
        let finite = self.world_to_cam.iter().flatten().all(|v| v.is_finite())
            && [self.fx, self.fy, self.cx, self.cy, self.far].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("camera parameters".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing towards the
    /// top of the image. The principal point is the image center, so the
    /// optical axis lands at NDC (0, 0).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: usize, height: usize, focal: f64) -> Result<Self> {
        let forward = normalize3(&sub3(&target, &eye));
        let right = cross3(&forward, &up);
        if dot3(&right, &right) < 1e-24 {
            return Err(Error::invalid("look_at: up is parallel to the viewing direction"));
        }
        let right = normalize3(&right);
        let down = cross3(&forward, &right);
        let rot: Mat3 = [right, down, forward];
        let t = mat3_vec(&rot, &eye);
        let mut w = [[0.0; 4]; 4];
        for i in 0..3 {
            w[i][..3].copy_from_slice(&rot[i]);
            w[i][3] = -t[i];
        }
        w[3][3] = 1.0;
        let cam = Camera {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            world_to_cam: w,
            near: 0.01,
            far: 100.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> Mat3 {
        let w = &self.world_to_cam;
        [
            [w[0][0], w[0][1], w[0][2]],
            [w[1][0], w[1][1], w[1][2]],
            [w[2][0], w[2][1], w[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3 {
        [self.world_to_cam[0][3], self.world_to_cam[1][3], self.world_to_cam[2][3]]
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        let r = mat3_vec(&self.rotation(), p);
        let t = self.translation();
        [r[0] + t[0], r[1] + t[1], r[2] + t[2]]
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        let r = self.rotation();
        let t = self.translation();
        // -R^T t
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    /// Projection matrix taking camera-space points to clip space such that
    /// NDC x, y in `[-1, 1]` span the image (`ndc = (2 px + 1) / W - 1`) and
    /// NDC z in `[0, 1]` spans `[near, far]`.
    pub fn projection_matrix(&self) -> [[f64; 4]; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        let (n, f) = (self.near, self.far);
        [
            [2.0 * self.fx / w, 0.0, (2.0 * self.cx + 1.0) / w - 1.0, 0.0],
            [0.0, 2.0 * self.fy / h, (2.0 * self.cy + 1.0) / h - 1.0, 0.0],
            [0.0, 0.0, f / (f - n), -f * n / (f - n)],
            [0.0, 0.0, 1.0, 0.0],
        ]
    }

    /// Scale factors from pixel offsets to NDC offsets along x and y.
    pub fn ndc_per_pixel(&self) -> [f64; 2] {
        [2.0 / self.width as f64, 2.0 / self.height as f64]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 64, 48, 60.0).unwrap();
        let p = cam.to_camera(&[0.0, 0.0, 0.0]);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        assert!((p[2] - 3.0).abs() < 1e-12);
        // World up projects to negative camera y (image up).
        let up = cam.to_camera(&[0.0, 1.0, 0.0]);
        assert!(up[1] < 0.0);
        let c = cam.center();
        assert!((c[2] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        let mut cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 8, 8, 10.0).unwrap();
        cam.near = 5.0;
        cam.far = 1.0;
        assert!(cam.validate().is_err());
        assert!(Camera::look_at([0.0; 3], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], 8, 8, 10.0).is_err());
    }
}
