mod common;

use common::metric_reference::{self as reference, as_rows};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagat_core::image::Gray8;
use tagat_core::metrics::*;

fn random_gray(h: usize, w: usize, rng: &mut impl Rng) -> Gray8 {
    Gray8::new(h, w, (0..h * w).map(|_| rng.random::<u8>()).collect())
}

fn smooth_gray(h: usize, w: usize, phase: f64) -> Gray8 {
    Gray8::new(
        h,
        w,
        (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (127.5 + 100.0 * (0.3 * x + phase).sin() * (0.2 * y).cos()).round() as u8
            })
            .collect(),
    )
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn every_metric_matches_the_reference_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = MetricConfig::default();
    for _ in 0..20 {
        let (f, a, b) = (random_gray(16, 16, &mut rng), random_gray(16, 16, &mut rng), random_gray(16, 16, &mut rng));
        let got = evaluate_pair(&f, &a, &b, &cfg);
        let want = reference::all(&f, &a, &b);
        for ((name, g), w) in METRIC_NAMES.iter().zip(got.values()).zip(want) {
            assert!(close(g, w, 1e-6), "{name}: {g} vs {w}");
        }
    }
}

#[test]
fn constant_image_has_no_spread() {
    let c = Gray8::new(4, 5, vec![90; 20]);
    assert_eq!(intensity_stats(&c), (0.0, 0.0, 0.0));
}

#[test]
fn half_black_half_white() {
    let img = Gray8::new(2, 2, vec![0, 255, 255, 0]);
    let (en, sd, sf) = intensity_stats(&img);
    assert_eq!(en, 1.0);
    assert_eq!(sd, 127.5);
    assert!(close(sf, 255.0 * 2f64.sqrt(), 1e-12));
    assert!(close(sf, reference::sf(&as_rows(&img)), 1e-12));
}

#[test]
fn checkerboard_frequency_matches_double_loop() {
    let img = Gray8::new(6, 7, (0..42).map(|i| if ((i % 7) + (i / 7)) % 2 == 0 { 0 } else { 255 }).collect());
    assert!(close(spatial_frequency(&img), reference::sf(&as_rows(&img)), 1e-12));
}

#[test]
fn identical_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MetricConfig::default();
    for _ in 0..5 {
        let img = random_gray(20, 24, &mut rng);
        assert_eq!(mutual_information(&img, &img), entropy(&img));
        let (mi, _) = information_metrics(&img, &img, &img);
        assert_eq!(mi, 2.0 * entropy(&img));
        assert!((ssim_pair(&img, &img) - 1.0).abs() < 1e-12);
        let (vif, q, s) = perceptual_metrics(&img, &img, &img, &cfg);
        assert!((vif - 1.0).abs() < 1e-6, "{vif}");
        assert!((q - cfg.qabf.self_preservation()).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn disjoint_support_sum_gives_scd_two() {
    let (h, w) = (12, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut a = vec![0u8; h * w];
    let mut b = vec![0u8; h * w];
    for i in 0..h * w {
        if (i % w) < w / 2 {
            a[i] = rng.random_range(1..120);
        } else {
            b[i] = rng.random_range(1..120);
        }
    }
    let f: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let (f, a, b) = (Gray8::new(h, w, f), Gray8::new(h, w, a), Gray8::new(h, w, b));
    assert!(close(scd(&f, &a, &b), 2.0, 1e-12));
    assert!(close(scd(&f, &a, &b), reference::scd(&as_rows(&f), &as_rows(&a), &as_rows(&b)), 1e-9));
}

#[test]
fn independent_images_share_little_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_gray(1000, 1000, &mut rng);
    let b = random_gray(1000, 1000, &mut rng);
    let mi = mutual_information(&a, &b);
    assert!(mi < 0.05, "{mi}");
}

#[test]
fn noise_is_structurally_unlike_smooth_sources() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = smooth_gray(64, 80, 0.0);
    let b = smooth_gray(64, 80, 1.0);
    let noise = random_gray(64, 80, &mut rng);
    let (_, _, s) = perceptual_metrics(&noise, &a, &b, &MetricConfig::default());
    assert!(s.abs() < 0.1, "{s}");
}

#[test]
fn naive_average_report_is_finite_and_batches_keep_order() {
    let a = smooth_gray(32, 40, 0.0);
    let b = smooth_gray(32, 40, 2.0);
    let avg = Gray8::new(32, 40, a.data().iter().zip(b.data()).map(|(&x, &y)| ((x as u16 + y as u16) / 2) as u8).collect());
    let cfg = MetricConfig::default();
    let r = evaluate_pair(&avg, &a, &b, &cfg);
    assert!(r.values().iter().all(|v| v.is_finite()));
    let triples = vec![(avg.clone(), a.clone(), b.clone()), (a.clone(), a.clone(), b.clone()), (b.clone(), a.clone(), b.clone())];
    let rows = evaluate_batch(&triples, &cfg);
    assert_eq!(rows.len(), 3);
    for (row, (f, x, y)) in rows.iter().zip(&triples) {
        assert_eq!(*row, evaluate_pair(f, x, y, &cfg));
    }
}

#[test]
fn vif_skips_scales_that_do_not_fit() {
    // 4×4: only the first scale (window clipped to 3) is usable
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_gray(4, 4, &mut rng);
    let b = random_gray(4, 4, &mut rng);
    let v = vif(&a, &b, &VifParams::default());
    assert!(close(v, reference::vif(&as_rows(&a), &as_rows(&b)), 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn report_invariants_and_flip_invariance(seed in any::<u64>(), h in 12usize..28, w in 12usize..28) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, a, b) = (random_gray(h, w, &mut rng), random_gray(h, w, &mut rng), random_gray(h, w, &mut rng));
        let cfg = MetricConfig::default();
        let r = evaluate_pair(&f, &a, &b, &cfg);
        prop_assert!(r.en >= 0.0 && r.sd >= 0.0 && r.sf >= 0.0 && r.mi >= 0.0);
        prop_assert!((0.0..=1.0).contains(&r.qabf));
        prop_assert!((-1.0..=1.0).contains(&r.ssim));
        let flipped = evaluate_pair(&f.flip_horizontal(), &a.flip_horizontal(), &b.flip_horizontal(), &cfg);
        for (x, y) in r.values().iter().zip(flipped.values()) {
            prop_assert!(close(*x, y, 1e-9), "{x} vs {y}");
        }
        prop_assert_eq!(r, evaluate_pair(&f, &a, &b, &cfg));
    }

    #[test]
    fn perturbing_the_fused_image_never_beats_self_preservation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = smooth_gray(24, 24, rng.random_range(0.0..3.0));
        let cfg = QabfParams::default();
        let best = qabf(&img, &img, &img, &cfg);
        let noisy = Gray8::new(24, 24, img.data().iter().map(|&v| v.saturating_add_signed(rng.random_range(-20..=20))).collect());
        prop_assert!(qabf(&noisy, &img, &img, &cfg) <= best);
    }
}
