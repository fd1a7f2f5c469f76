use hdrgs_core::dataio::synthetic::{generate_scene, SceneSpec};
use hdrgs_core::dataio::Split;
use hdrgs_core::eval::{evaluate, is_trained_exposure, mean_scores, Score};
use hdrgs_core::pipeline::render_view;
use hdrgs_core::raster::RasterConfig;
use hdrgs_core::trainer::{initial_model, TrainConfig};

fn scene() -> hdrgs_core::dataio::synthetic::SyntheticScene {
    generate_scene(SceneSpec {
        seed: 11,
        n_gaussians: 6,
        image_size: 12,
        n_views: 6,
    })
    .unwrap()
}

fn score(psnr: f64) -> Score {
    Score {
        view: "v".into(),
        exposure: None,
        psnr,
        ssim: 0.5,
    }
}

#[test]
fn groups_follow_the_exposure_protocol() {
    let s = scene();
    let ds = &s.dataset;
    let model = initial_model(ds, &TrainConfig::default()).unwrap();
    let test = evaluate(&model, ds, Split::Test, &RasterConfig::default()).unwrap();
    let n_test = ds.split(Split::Test).count();
    assert_eq!(test.ldr_oe.len(), 3 * n_test);
    assert_eq!(test.ldr_ne.len(), 2 * n_test);
    assert_eq!(test.hdr.len(), n_test);
    for r in &test.ldr_ne {
        let t = r.exposure.unwrap();
        assert!(t == 0.5 || t == 2.0);
        assert!(!is_trained_exposure(ds, t));
    }
    let train = evaluate(&model, ds, Split::Train, &RasterConfig::default()).unwrap();
    assert!(train.ldr_ne.is_empty());
    assert_eq!(train.ldr_oe.len(), 3 * ds.split(Split::Train).count());
    for r in test.ldr_oe.iter().chain(&test.hdr) {
        assert!(r.psnr.is_finite() && r.ssim.is_finite() && r.ssim <= 1.0);
    }
}

#[test]
fn hdr_score_matches_direct_computation() {
    let s = scene();
    let ds = &s.dataset;
    let model = initial_model(ds, &TrainConfig::default()).unwrap();
    let table = evaluate(&model, ds, Split::Test, &RasterConfig::default()).unwrap();
    let view = ds.split(Split::Test).next().unwrap();
    let pred = render_view(&model, &view.camera, 1.0, &RasterConfig::default()).unwrap().i_hdr;
    let gt = view.hdr.as_ref().unwrap();
    let compress = |d: &[f64]| -> Vec<f64> {
        let m = d.iter().cloned().fold(0.0, f64::max);
        d.iter().map(|v| (1.0 + 5000.0 * v / m).ln() / 5001f64.ln()).collect()
    };
    let (a, b) = (compress(pred.data()), compress(gt.data()));
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let want = -10.0 * mse.log10();
    assert!((table.hdr[0].psnr - want).abs() < 1e-9, "{} vs {want}", table.hdr[0].psnr);
}

#[test]
fn means_of_groups() {
    let (p, s) = mean_scores(&[score(20.0), score(30.0)]);
    assert_eq!((p, s), (25.0, 0.5));
    assert!(mean_scores(&[]).0.is_nan());
}
