use hdrgs_core::dataio::{ColorSpace, ImageBuffer};
use hdrgs_core::linalg::Mat3;
use hdrgs_core::scene::{covariance, covariance_vjp, init_cloud, Camera, InitConfig, ViewRecord};
use proptest::prelude::*;

/// Rotation matrix of a unit quaternion `(w, x, y, z)`, written out.
fn rot(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn frob(a: &Mat3, g: &Mat3) -> f64 {
    (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| a[i][j] * g[i][j]).sum()
}

#[test]
fn identity_rotation_gives_diagonal_covariance() {
    let c = covariance(&[0.0, 2f64.ln(), -1.0], &[1.0, 0.0, 0.0, 0.0]);
    let want = [1.0, 4.0, (-2.0f64).exp()];
    for i in 0..3 {
        for j in 0..3 {
            let w = if i == j { want[i] } else { 0.0 };
            assert!((c[i][j] - w).abs() < 1e-15, "{i}{j}");
        }
    }
}

#[test]
fn quarter_turn_swaps_axes() {
    // 90 degrees about z maps x to y.
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let c = covariance(&[(3f64).ln(), 0.0, 0.0], &[h, 0.0, 0.0, h]);
    assert!((c[0][0] - 1.0).abs() < 1e-14);
    assert!((c[1][1] - 9.0).abs() < 1e-14);
    assert!((c[2][2] - 1.0).abs() < 1e-14);
}

#[test]
fn look_at_camera_geometry() {
    let eye = [1.0, 2.0, -4.0];
    let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], 40, 30, 35.0).unwrap();
    let c = cam.center();
    for k in 0..3 {
        assert!((c[k] - eye[k]).abs() < 1e-12);
    }
    let p = cam.to_camera(&[0.0; 3]);
    assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
    assert!((p[2] - (1.0f64 + 4.0 + 16.0).sqrt()).abs() < 1e-12);
    // A point above the target lands in the upper half (y down).
    assert!(cam.to_camera(&[0.0, 0.5, 0.0])[1] < 0.0);
    let r = cam.rotation();
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
            assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }
    assert!(Camera::look_at([0.0, 3.0, 0.0], [0.0; 3], [0.0, 1.0, 0.0], 8, 8, 8.0).is_err());
}

#[test]
fn projection_maps_pixel_centers_to_ndc() {
    let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 20, 10, 18.0).unwrap();
    let m = cam.projection_matrix();
    for (px, py) in [(0.0, 0.0), (19.0, 9.0), (4.5, 7.25)] {
        let z = 2.5;
        let p = [(px - cam.cx) * z / cam.fx, (py - cam.cy) * z / cam.fy, z, 1.0];
        let clip: Vec<f64> = (0..4).map(|i| (0..4).map(|k| m[i][k] * p[k]).sum()).collect();
        let ndc = [clip[0] / clip[3], clip[1] / clip[3]];
        assert!((ndc[0] - ((2.0 * px + 1.0) / 20.0 - 1.0)).abs() < 1e-12);
        assert!((ndc[1] - ((2.0 * py + 1.0) / 10.0 - 1.0)).abs() < 1e-12);
    }
    let depth = |z: f64| (m[2][2] * z + m[2][3]) / z;
    assert!(depth(cam.near).abs() < 1e-12);
    assert!((depth(cam.far) - 1.0).abs() < 1e-12);
    assert_eq!(cam.ndc_per_pixel(), [0.1, 0.2]);
}

#[test]
fn init_cloud_uses_neighbor_distances() {
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
    let cfg = InitConfig::default();
    let cloud = init_cloud(&pts, &cfg).unwrap();
    cloud.validate().unwrap();
    assert_eq!(cloud.len(), 4);
    // Point 0: neighbors at 1, 2, 3.
    assert!((cloud.scales(0)[0] - 2.0).abs() < 1e-12);
    assert!((cloud.alpha(0) - 0.1).abs() < 1e-12);
    for v in cloud.ambient(2) {
        assert!((v - 1.0).abs() < 1e-12);
    }
    assert_eq!(cloud.rotation[3], [1.0, 0.0, 0.0, 0.0]);
    let lone = init_cloud(&pts[..1], &cfg).unwrap();
    assert!((lone.scales(0)[1] - cfg.lone_scale).abs() < 1e-15);
    assert!(init_cloud(&[], &cfg).is_err());
    assert!(init_cloud(&[[f64::NAN, 0.0, 0.0]], &cfg).is_err());
    assert_eq!(init_cloud(&pts, &cfg).unwrap(), cloud);
}

#[test]
fn cloud_gather_and_validation() {
    let pts = [[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
    let mut cloud = init_cloud(&pts, &InitConfig::default()).unwrap();
    let g = cloud.gather(&[2, 0]);
    assert_eq!(g.mu, vec![[2.0, 0.0, 0.0], [0.0; 3]]);
    assert_eq!(g.h_r[1], cloud.h_r[0]);
    cloud.rotation[1] = [2.0, 0.0, 0.0, 0.0];
    cloud.rotation[2] = [0.0; 4];
    cloud.normalize_rotations();
    assert_eq!(cloud.rotation[1], [1.0, 0.0, 0.0, 0.0]);
    assert_eq!(cloud.rotation[2], [1.0, 0.0, 0.0, 0.0]);
    cloud.opacity_logit.pop();
    assert!(cloud.validate().is_err());
}

#[test]
fn view_records_are_validated() {
    let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 4, 4, 4.0).unwrap();
    let img = ImageBuffer::filled(4, 4, 0.5, ColorSpace::LdrUnit);
    let r = ViewRecord::new("v", cam.clone(), 2.0, img.clone()).unwrap();
    assert_eq!(r.lighting_l, 2.0);
    assert!(r.gt_hdr.is_none());
    assert!(ViewRecord::new("v", cam.clone(), 0.0, img.clone()).is_err());
    assert!(ViewRecord::new("v", cam.clone(), f64::INFINITY, img).is_err());
    assert!(ViewRecord::new("v", cam.clone(), 1.0, ImageBuffer::filled(4, 3, 0.5, ColorSpace::LdrUnit)).is_err());
    assert!(ViewRecord::new("v", cam, 1.0, ImageBuffer::filled(4, 4, 1.5, ColorSpace::LdrUnit)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_r_s2_rt(
        s in prop::array::uniform3(-2.0f64..1.0),
        q in prop::array::uniform4(-1.0f64..1.0),
    ) {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(n > 0.2);
        let q = q.map(|v| v / n);
        let c = covariance(&s, &q);
        let r = rot(&q);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..3).map(|k| r[i][k] * (2.0 * s[k]).exp() * r[j][k]).sum();
                prop_assert!((c[i][j] - want).abs() < 1e-12 * (1.0 + want.abs()));
                prop_assert!((c[i][j] - c[j][i]).abs() < 1e-14 * (1.0 + want.abs()));
            }
        }
        // Trace is the sum of squared scales.
        let tr = c[0][0] + c[1][1] + c[2][2];
        let want: f64 = s.iter().map(|v| (2.0 * v).exp()).sum();
        prop_assert!((tr - want).abs() < 1e-12 * want);
    }

    #[test]
    fn covariance_vjp_matches_central_differences(
        s in prop::array::uniform3(-1.0f64..0.5),
        q in prop::array::uniform4(-1.0f64..1.0),
        g in prop::array::uniform3(prop::array::uniform3(-1.0f64..1.0)),
    ) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 0.1);
        let (ds, dq) = covariance_vjp(&s, &q, &g);
        let h = 1e-6;
        for k in 0..3 {
            let (mut sp, mut sm) = (s, s);
            sp[k] += h;
            sm[k] -= h;
            let fd = (frob(&covariance(&sp, &q), &g) - frob(&covariance(&sm, &q), &g)) / (2.0 * h);
            prop_assert!((fd - ds[k]).abs() < 1e-7 * (1.0 + fd.abs()), "scale {}: {} vs {}", k, fd, ds[k]);
        }
        for k in 0..4 {
            let (mut qp, mut qm) = (q, q);
            qp[k] += h;
            qm[k] -= h;
            let fd = (frob(&covariance(&s, &qp), &g) - frob(&covariance(&s, &qm), &g)) / (2.0 * h);
            prop_assert!((fd - dq[k]).abs() < 1e-6 * (1.0 + fd.abs()), "quat {}: {} vs {}", k, fd, dq[k]);
        }
    }
}
