use hdrgs_core::densify::{
    deviation, densify_and_prune, scale_factor, spearman, starvation_correlation, write_stats_csv, DensifyConfig,
    DensifyState, STATS_HEADER,
};
use hdrgs_core::model::Model;
use hdrgs_core::scene::InitConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pearson correlation of average ranks, ranks computed by counting.
fn spearman_oracle(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|x| {
                let below = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn model(n: usize) -> Model {
    let pts: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
    Model::init(&pts, &InitConfig::default(), 3).unwrap()
}

fn config() -> DensifyConfig {
    DensifyConfig {
        tau_p: 1e-3,
        ..DensifyConfig::default()
    }
}

#[test]
fn scale_factor_closed_forms() {
    let l = [0.4, 1.0, 2.0];
    assert_eq!(scale_factor(&l, &l, 1.0), 1.5);
    assert_eq!(scale_factor(&l, &[9.0; 3], 0.0), 1.0);
    let dev = deviation(&[0.0; 3], &[3f64.ln(); 3]);
    assert!((dev - 3f64.ln()).abs() < 1e-15);
    assert!((scale_factor(&[0.0; 3], &[3f64.ln(); 3], 1.0) - 1.75).abs() < 1e-15);
    let far = scale_factor(&[0.0; 3], &[10.0; 3], 1.0);
    assert!(far > 1.999 && far < 2.0);
    // Mean absolute componentwise difference.
    assert!((deviation(&[1.0, 2.0, 3.0], &[2.0, 0.0, 3.0]) - 1.0).abs() < 1e-15);
}

#[test]
fn schedule_window() {
    let c = DensifyConfig::default();
    assert!(!c.due(150));
    assert!(c.due(200));
    assert!(!c.due(201));
    assert!(c.due(1500));
    assert!(!c.due(1550));
    assert!(c.validate().is_ok());
    assert!(DensifyConfig { split_factor: 1.0, ..c }.validate().is_err());
    assert!(DensifyConfig { start: 10, stop: 5, ..c }.validate().is_err());
    assert!(DensifyConfig { s: -1.0, ..c }.validate().is_err());
}

#[test]
fn spearman_on_known_orders() {
    let a = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(spearman(&a, &[10.0, 20.0, 30.0, 400.0]), Some(1.0));
    assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(spearman(&a, &[5.0; 4]), None);
    assert_eq!(spearman(&[1.0], &[1.0]), None);
    assert_eq!(spearman(&a, &[1.0, 2.0]), None);
    let b = [1.0, 3.0, 2.0, 2.0];
    let got = spearman(&a, &b).unwrap();
    assert!((got - spearman_oracle(&a, &b)).abs() < 1e-15);
}

#[test]
fn unseen_gaussians_are_never_densified() {
    let m = model(4);
    let mut st = DensifyState::new(4, config());
    st.grad_accum = vec![1.0; 4];
    assert!((0..4).all(|i| !st.should_densify(i, &m.cloud)));
    assert_eq!(st.avg_grad(0), 0.0);
    // No relit pass yet: zero deviation.
    assert_eq!(st.s_a(0, &m.cloud), 1.5);
}

#[test]
fn threshold_uses_the_scaled_average() {
    let m = model(3);
    let mut st = DensifyState::new(3, config());
    st.visible_count = vec![2; 3];
    // avg 6e-4: below tau alone, 9e-4 at s_a = 1.5, above once the
    // deviation pushes s_a past 5/3.
    st.grad_accum = vec![1.2e-3; 3];
    let l = m.cloud.ambient(1);
    st.last_l_hat[1] = Some(l);
    st.last_l_hat[2] = Some(l.map(|v| v + 2.0));
    assert!(!st.should_densify(0, &m.cloud));
    assert!(!st.should_densify(1, &m.cloud));
    assert!(st.should_densify(2, &m.cloud));
    let s2 = st.s_a(2, &m.cloud);
    assert!((s2 - (1.0 + logistic(2.0))).abs() < 1e-15);

    let rows = st.stats(&m.cloud);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().filter(|r| r.densified).count(), 1);
    assert!((rows[2].avg_grad - 6e-4).abs() < 1e-18);
    assert!((rows[2].deviation - 2.0).abs() < 1e-12);
}

#[test]
fn densify_clones_small_and_splits_large() {
    let mut m = model(4);
    // Gaussian 0 tiny, 1 large, 2 not flagged, 3 transparent.
    m.cloud.log_scale[0] = [(1e-4f64).ln(); 3];
    m.cloud.log_scale[1] = [(0.5f64).ln(); 3];
    m.cloud.opacity_logit[3] = -10.0;
    let mut st = DensifyState::new(4, config());
    st.visible_count = vec![1; 4];
    st.grad_accum = vec![1.0, 1.0, 0.0, 1.0];
    let before = m.cloud.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = densify_and_prune(&mut m, &mut st, 1.0, &mut rng);
    assert_eq!((out.cloned, out.split, out.pruned, out.skipped), (1, 1, 1, false));
    assert_eq!(m.cloud.len(), 5);
    assert_eq!(out.sources, vec![Some(0), None, Some(2), None, None]);
    // The clone keeps its parent in place; the split replaces it with a
    // shrunk sample.
    assert_eq!(m.cloud.mu[0], before.mu[0]);
    let shrink = 1.6f64.ln();
    for k in 0..3 {
        assert!((m.cloud.log_scale[1][k] - (before.log_scale[1][k] - shrink)).abs() < 1e-15);
        assert!((m.cloud.log_scale[4][k] - (before.log_scale[1][k] - shrink)).abs() < 1e-15);
    }
    assert_eq!(m.cloud.h_r[3], before.h_r[0]);
    assert_eq!(m.cloud.l_a_raw[4], before.l_a_raw[1]);
    assert_eq!(st.len(), 5);
    assert!(st.grad_accum.iter().all(|g| *g == 0.0));
    m.cloud.validate().unwrap();
}

#[test]
fn growth_past_the_cap_is_skipped() {
    let mut m = model(4);
    let mut st = DensifyState::new(
        4,
        DensifyConfig {
            max_gaussians: 5,
            ..config()
        },
    );
    st.visible_count = vec![1; 4];
    st.grad_accum = vec![1.0; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = densify_and_prune(&mut m, &mut st, 1.0, &mut rng);
    assert!(out.skipped);
    assert_eq!((out.cloned, out.split), (0, 0));
    assert_eq!(m.cloud.len(), 4);
}

#[test]
fn stats_csv_layout() {
    let m = model(3);
    let mut st = DensifyState::new(3, config());
    st.visible_count = vec![1, 0, 3];
    st.grad_accum = vec![2e-3, 0.0, 3e-4];
    let rows = st.stats(&m.cloud);
    let mut buf = Vec::new();
    write_stats_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], STATS_HEADER);
    assert_eq!(lines.len(), 4);
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(f[0], "0");
    assert_eq!(f[4], "1");
    assert_eq!(f[1].parse::<f64>().unwrap(), 2e-3);
    // 17 significant digits: one before the point, sixteen after.
    assert_eq!(f[1].split('e').next().unwrap().len(), 18);
    // Only seen Gaussians take part in the correlation.
    assert!(starvation_correlation(&rows, &st).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scale_factor_bounds_and_monotonicity(
        l in prop::array::uniform3(0.0f64..5.0),
        d1 in 0.0f64..5.0,
        d2 in 0.0f64..5.0,
        s in 0.0f64..3.0,
    ) {
        let a = scale_factor(&l, &l.map(|v| v + d1.min(d2)), s);
        let b = scale_factor(&l, &l.map(|v| v + d1.max(d2)), s);
        prop_assert!(a >= 1.0 + s / 2.0 - 1e-15 && b < 1.0 + s + 1e-15);
        prop_assert!(a <= b);
    }

    #[test]
    fn spearman_matches_rank_oracle(v in prop::collection::vec((0u8..6, 0u8..6), 3..30)) {
        let a: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = v.iter().map(|p| p.1 as f64).collect();
        match spearman(&a, &b) {
            Some(r) => prop_assert!((r - spearman_oracle(&a, &b)).abs() < 1e-12),
            None => prop_assert!(a.iter().all(|x| *x == a[0]) || b.iter().all(|x| *x == b[0])),
        }
    }
}
