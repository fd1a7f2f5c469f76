use std::io::Cursor;

use hdrgs_core::dataio::pnm::{decode_ldr_byte, encode_ldr_byte, read_pfm, read_ppm, write_pfm, write_ppm};
use hdrgs_core::dataio::synthetic::{crf, derive_ldr, generate_scene, SceneSpec, EXPOSURE_LADDER};
use hdrgs_core::dataio::{psnr, ssim, ColorSpace, Dataset, ImageBuffer, Split};
use hdrgs_core::{Error, ErrorKind};
use proptest::prelude::*;

fn small_scene() -> hdrgs_core::dataio::synthetic::SyntheticScene {
    generate_scene(SceneSpec {
        seed: 5,
        n_gaussians: 5,
        image_size: 10,
        n_views: 6,
    })
    .unwrap()
}

#[test]
fn image_buffer_validation() {
    assert!(ImageBuffer::from_vec(2, 2, vec![0.0; 11], ColorSpace::LdrUnit).is_err());
    assert!(ImageBuffer::from_vec(2, 2, vec![f64::NAN; 12], ColorSpace::LinearHdr).is_ok());
    assert!(ImageBuffer::from_vec_checked(2, 2, vec![f64::NAN; 12], ColorSpace::LinearHdr).is_err());
    assert!(ImageBuffer::from_vec_checked(2, 2, vec![-0.1; 12], ColorSpace::LinearHdr).is_err());
    assert!(ImageBuffer::from_vec_checked(2, 2, vec![1.5; 12], ColorSpace::LdrUnit).is_err());
    assert!(ImageBuffer::from_vec_checked(2, 2, vec![1.5; 12], ColorSpace::LinearHdr).is_ok());
    let mut img = ImageBuffer::zeros(3, 2, ColorSpace::LinearHdr);
    img.set_pixel(2, 1, [1.0, 2.0, 3.0]);
    assert_eq!(img.pixel(2, 1), [1.0, 2.0, 3.0]);
    assert_eq!(img.data()[(1 * 3 + 2) * 3 + 1], 2.0);
    assert_eq!(img.max_value(), 3.0);
    assert_eq!(img.channel(2).iter().sum::<f64>(), 3.0);
}

#[test]
fn pfm_round_trip_is_f32_exact() {
    let data: Vec<f64> = (0..4 * 3 * 3).map(|i| i as f64 * 0.37 + 1e-3).collect();
    let img = ImageBuffer::from_vec(4, 3, data, ColorSpace::LinearHdr).unwrap();
    let mut buf = Vec::new();
    write_pfm(&img, &mut buf).unwrap();
    assert!(buf.starts_with(b"PF\n4 3\n"));
    let back = read_pfm(Cursor::new(&buf)).unwrap();
    assert_eq!((back.width(), back.height()), (4, 3));
    for (a, b) in img.data().iter().zip(back.data()) {
        assert_eq!(*b, *a as f32 as f64);
    }
}

#[test]
fn ppm_round_trip_within_quantization() {
    let data: Vec<f64> = (0..5 * 2 * 3).map(|i| i as f64 / 29.0).collect();
    let img = ImageBuffer::from_vec(5, 2, data, ColorSpace::LdrUnit).unwrap();
    let mut buf = Vec::new();
    write_ppm(&img, &mut buf).unwrap();
    let back = read_ppm(Cursor::new(&buf)).unwrap();
    for (a, b) in img.data().iter().zip(back.data()) {
        // Error of at most half a code value in gamma space.
        let ga = a.powf(1.0 / 2.2) * 255.0;
        let gb = b.powf(1.0 / 2.2) * 255.0;
        assert!((ga - gb).abs() <= 0.5 + 1e-9, "{a} -> {b}");
    }
}

#[test]
fn ldr_bytes_round_trip() {
    for b in 0..=255u8 {
        assert_eq!(encode_ldr_byte(decode_ldr_byte(b)), b);
    }
    assert_eq!(encode_ldr_byte(-0.5), 0);
    assert_eq!(encode_ldr_byte(7.0), 255);
}

#[test]
fn malformed_images_are_format_errors() {
    let cases: [&[u8]; 5] = [b"P3\n1 1\n255\n", b"P6\n1 1\n65535\n", b"P6\n0 1\n255\n", b"P6\n2 2\n255\nabc", b"P6\n2"];
    for bytes in cases {
        let err = read_ppm(Cursor::new(bytes)).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert_eq!(err.kind(), ErrorKind::Io);
    }
    assert!(read_pfm(Cursor::new(b"PF\n1 1\n0\n")).is_err());
    assert!(read_pfm(Cursor::new(b"PX\n1 1\n-1\n")).is_err());
    // Header comments are skipped.
    let img = read_ppm(Cursor::new(b"P6\n# note\n1 1\n255\n\xff\x00\x00")).unwrap();
    assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
}

#[test]
fn metrics_validate_shapes() {
    let a = ImageBuffer::filled(12, 12, 0.5, ColorSpace::LdrUnit);
    assert!(psnr(&a, &ImageBuffer::filled(12, 11, 0.5, ColorSpace::LdrUnit)).is_err());
    let err = ssim(&ImageBuffer::filled(8, 8, 0.5, ColorSpace::LdrUnit), &ImageBuffer::filled(8, 8, 0.5, ColorSpace::LdrUnit))
        .unwrap_err();
    assert!(matches!(err, Error::ImageTooSmall { window: 11, .. }));
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ldr_derivation_follows_the_response_curve() {
    let hdr = ImageBuffer::from_vec(1, 1, vec![0.1, 0.5, 3.0], ColorSpace::LinearHdr).unwrap();
    let ldr = derive_ldr(&hdr, 2.0);
    assert_eq!(ldr.space(), ColorSpace::LdrUnit);
    let want = [0.2f64.powf(1.0 / 2.2), 1.0, 1.0];
    for (a, b) in ldr.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(crf(0.0), 0.0);
}

#[test]
fn synthetic_split_and_exposures() {
    let s = small_scene();
    let ds = &s.dataset;
    assert_eq!(ds.ladder, EXPOSURE_LADDER.to_vec());
    let ids: Vec<&str> = ds.views.iter().map(|v| v.id.as_str()).collect();
    assert_eq!(ids, ["view_00", "view_01", "view_02", "view_03", "view_04", "view_05"]);
    for (k, v) in ds.views.iter().enumerate() {
        let ts: Vec<f64> = v.records.iter().map(|r| r.exposure_t).collect();
        if k % 3 == 1 {
            assert_eq!(v.split, Split::Test);
            assert_eq!(ts, EXPOSURE_LADDER.to_vec());
        } else {
            assert_eq!(v.split, Split::Train);
            assert_eq!(ts, vec![0.25, 1.0, 4.0]);
        }
        let hdr = v.hdr.as_ref().unwrap();
        for r in &v.records {
            assert_eq!(r.gt_ldr, derive_ldr(hdr, r.exposure_t));
            assert_eq!(r.lighting_l, r.exposure_t);
        }
        assert!(v.unit_record().is_some());
    }
    assert_eq!(ds.split(Split::Test).count(), 2);
    assert!(ds.view("view_03").is_some());
    assert!(ds.view("view_99").is_none());
    let (lo, hi) = (ds.bounds_min, ds.bounds_max);
    assert!((0..3).all(|k| lo[k] < hi[k]));
}

#[test]
fn dataset_save_and_load() {
    let s = small_scene();
    let tmp = tempfile::tempdir().unwrap();
    s.dataset.save(tmp.path()).unwrap();
    let back = Dataset::load(tmp.path()).unwrap();
    assert_eq!(back.ladder, s.dataset.ladder);
    assert_eq!(back.bounds_min, s.dataset.bounds_min);
    assert_eq!(back.views.len(), s.dataset.views.len());
    for (a, b) in s.dataset.views.iter().zip(&back.views) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.split, b.split);
        assert_eq!(a.camera, b.camera);
        assert_eq!(a.records.len(), b.records.len());
        let (ha, hb) = (a.hdr.as_ref().unwrap(), b.hdr.as_ref().unwrap());
        for (x, y) in ha.data().iter().zip(hb.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.exposure_t, rb.exposure_t);
            assert!(psnr(&ra.gt_ldr, &rb.gt_ldr).unwrap() > 35.0);
        }
    }
}

#[test]
fn loading_a_missing_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = Dataset::load(&tmp.path().join("nothing")).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Io);
}

#[test]
fn generation_is_deterministic_and_validated() {
    let a = small_scene();
    let b = small_scene();
    assert_eq!(a.truth, b.truth);
    for (x, y) in a.dataset.views.iter().zip(&b.dataset.views) {
        assert_eq!(x.hdr, y.hdr);
    }
    for bad in [
        SceneSpec { n_views: 2, ..SceneSpec::default() },
        SceneSpec { n_gaussians: 0, ..SceneSpec::default() },
        SceneSpec { image_size: 3, ..SceneSpec::default() },
    ] {
        assert_eq!(generate_scene(bad).unwrap_err().kind(), ErrorKind::Validation);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pfm_round_trip_any_size(w in 1usize..6, h in 1usize..6, seed in 0u32..1000) {
        let data: Vec<f64> = (0..w * h * 3).map(|i| ((i as u32 ^ seed) % 97) as f64 * 0.25).collect();
        let img = ImageBuffer::from_vec(w, h, data, ColorSpace::LinearHdr).unwrap();
        let mut buf = Vec::new();
        write_pfm(&img, &mut buf).unwrap();
        prop_assert_eq!(read_pfm(Cursor::new(&buf)).unwrap(), img);
    }
}
