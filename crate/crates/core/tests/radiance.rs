use hdrgs_core::dataio::synthetic::{generate_scene, SceneSpec};
use hdrgs_core::mlp::{MlpParams, OutputMap, LEAKY_SLOPE};
use hdrgs_core::model::Model;
use hdrgs_core::radiance::{
    compose, init_composer, init_modulator, modulate, render_branches, BranchMode, COMPOSER_DIMS, MODULATOR_DIMS,
};
use hdrgs_core::raster::RasterConfig;
use hdrgs_core::scene::{Camera, InitConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Per-row evaluation with softplus output, for comparison against the
/// batched kernel.
fn naive_mlp(dims: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut act = x.to_vec();
    let mut off = 0;
    for l in 0..dims.len() - 1 {
        let (din, dout) = (dims[l], dims[l + 1]);
        let last = l + 2 == dims.len();
        act = (0..dout)
            .map(|o| {
                let z = params[off + din * dout + o] + (0..din).map(|i| params[off + o * din + i] * act[i]).sum::<f64>();
                if last {
                    softplus(z)
                } else if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            })
            .collect();
        off += din * dout + dout;
    }
    act
}

fn zero_net(dims: &[usize], bias: f64) -> MlpParams {
    let mut m = MlpParams::zeros(dims, OutputMap::Softplus).unwrap();
    let r = m.bias_range(m.layers() - 1);
    m.params_mut()[r].fill(bias);
    m
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

struct Fixture {
    model: Model,
    camera: Camera,
}

fn fixture(seed: u64) -> Fixture {
    let scene = generate_scene(SceneSpec {
        seed,
        n_gaussians: 8,
        image_size: 16,
        n_views: 3,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (scene.dataset.bounds_min, scene.dataset.bounds_max);
    let pts: Vec<[f64; 3]> = (0..12).map(|_| [0, 1, 2].map(|k| rng.random_range(lo[k]..hi[k]))).collect();
    let mut model = Model::init(&pts, &InitConfig { opacity: 0.5, ..InitConfig::default() }, seed).unwrap();
    model.cloud.l_a_raw.iter_mut().flatten().for_each(|v| *v = rng.random_range(-1.0..1.5));
    Fixture {
        model,
        camera: scene.dataset.views[0].camera.clone(),
    }
}

fn branches(f: &Fixture, t: f64, l: f64) -> hdrgs_core::radiance::BranchOutputs {
    let m = &f.model;
    render_branches(&m.cloud, &f.camera, t, l, &m.g, &m.phi, BranchMode::Dual, &RasterConfig::default()).unwrap()
}

#[test]
fn zero_weight_composer_outputs_softplus_of_bias() {
    let g = zero_net(&COMPOSER_DIMS, 0.3);
    for (la, hr) in [([1.0, 2.0, 3.0], [0.0; 8]), ([0.01, 5.0, 0.2], [1.0, -2.0, 0.5, 0.0, 3.0, 0.1, -0.1, 9.0])] {
        assert_eq!(compose(&la, &hr, &g), [softplus(0.3); 3]);
    }
}

#[test]
fn zero_weight_modulator_ignores_lighting() {
    let phi = zero_net(&MODULATOR_DIMS, -0.7);
    for l in [0.25, 1.0, 4.0] {
        assert_eq!(modulate(&[0.5, 1.0, 2.0], l, &phi), [softplus(-0.7); 3]);
    }
}

#[test]
fn composer_regression_value() {
    let g = init_composer(&mut ChaCha8Rng::seed_from_u64(42));
    let c = compose(&[1.0; 3], &[0.0; 8], &g);
    let want = naive_mlp(&COMPOSER_DIMS, g.params(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    for k in 0..3 {
        assert!(close(c[k], want[k], 1e-14));
    }
    let pinned = [0.3904372926594445, 0.48738506140537907, 0.6588789948994528];
    for k in 0..3 {
        assert!(close(c[k], pinned[k], 1e-12), "{c:?}");
    }
}

#[test]
fn modulator_regression_value() {
    let phi = init_modulator(&mut ChaCha8Rng::seed_from_u64(43));
    let lh = modulate(&[1.0; 3], 1.0, &phi);
    let want = naive_mlp(&MODULATOR_DIMS, phi.params(), &[1.0; 4]);
    for k in 0..3 {
        assert!(close(lh[k], want[k], 1e-14));
    }
    let pinned = [0.5314022379080396, 0.5359411847299851, 0.36344845822353294];
    for k in 0..3 {
        assert!(close(lh[k], pinned[k], 1e-12), "{lh:?}");
    }
}

#[test]
fn modulator_responds_to_lighting() {
    let phi = init_modulator(&mut ChaCha8Rng::seed_from_u64(44));
    assert_ne!(modulate(&[1.0; 3], 0.5, &phi), modulate(&[1.0; 3], 2.0, &phi));
}

#[test]
fn unit_exposure_leaves_scaled_image_unchanged() {
    let out = branches(&fixture(1), 1.0, 1.0);
    assert_eq!(out.i_hdr_scaled, out.i_hdr);
}

#[test]
fn doubling_exposure_doubles_only_the_exposure_branch() {
    let f = fixture(2);
    let a = branches(&f, 1.0, 1.0);
    let b = branches(&f, 2.0, 2.0);
    assert_eq!(a.i_hdr, b.i_hdr);
    for (x, y) in a.i_hdr_scaled.data().iter().zip(b.i_hdr_scaled.data()) {
        assert_eq!(*y, 2.0 * x);
    }
    let ratios: Vec<f64> = a
        .i_hdr_relit
        .data()
        .iter()
        .zip(b.i_hdr_relit.data())
        .filter(|(x, _)| **x > 1e-6)
        .map(|(x, y)| y / x)
        .collect();
    assert!(!ratios.is_empty());
    assert!(ratios.iter().any(|r| (r - 2.0).abs() > 1e-6));
}

#[test]
fn illumination_independent_composer_gives_identical_branches() {
    let mut f = fixture(3);
    // Zero the composer columns that read L_a: colors then depend on H_r only.
    let g = &mut f.model.g;
    let din = COMPOSER_DIMS[0];
    for o in 0..COMPOSER_DIMS[1] {
        for i in 0..3 {
            g.params_mut()[o * din + i] = 0.0;
        }
    }
    let out = branches(&f, 0.5, 0.5);
    assert_eq!(out.i_hdr_relit, out.i_hdr);
}

#[test]
fn exposure_only_mode_renders_relit_as_scaled() {
    let f = fixture(4);
    let m = &f.model;
    let out = render_branches(&m.cloud, &f.camera, 4.0, 4.0, &m.g, &m.phi, BranchMode::IeOnly, &RasterConfig::default()).unwrap();
    assert_eq!(out.i_hdr_relit, out.i_hdr_scaled);
}

#[test]
fn invalid_exposure_is_rejected() {
    let f = fixture(5);
    let m = &f.model;
    for t in [0.0, -1.0, f64::NAN] {
        assert!(render_branches(&m.cloud, &f.camera, t, 1.0, &m.g, &m.phi, BranchMode::Dual, &RasterConfig::default()).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exposure_branch_is_linear_in_t(seed in 0u64..200, t1 in 0.05f64..8.0, t2 in 0.05f64..8.0) {
        let f = fixture(seed);
        let a = branches(&f, t1, 1.0);
        let b = branches(&f, t2, 1.0);
        for ((x, y), base) in a.i_hdr_scaled.data().iter().zip(b.i_hdr_scaled.data()).zip(a.i_hdr.data()) {
            prop_assert_eq!(*x, t1 * base);
            prop_assert_eq!(*y, t2 * base);
        }
    }

    #[test]
    fn branch_images_are_non_negative(seed in 0u64..200, t in 0.05f64..8.0) {
        let out = branches(&fixture(seed), t, t);
        for img in [&out.i_hdr, &out.i_hdr_scaled, &out.i_hdr_relit] {
            prop_assert!(img.data().iter().all(|v| *v >= 0.0));
        }
    }
}
