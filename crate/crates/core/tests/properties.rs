//! Cross-module invariants as property tests.

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;

use splatdiff::camera::Camera;
use splatdiff::diffusion::rng_stream;
use splatdiff::fitting::{densify_topk, pad_to_count, prune, FitConfig};
use splatdiff::gaussians::{GaussianSet, FEATURE_DIM};
use splatdiff::render::{project_set, render, render_backward, render_brute_force, SIGMA_MAX, SIGMA_SKIP, TRANSMITTANCE_STOP};

fn random_set(seed: u64, n: usize, scale: (f64, f64)) -> GaussianSet {
    let mut rng = rng_stream(seed, 0);
    let mut set = GaussianSet::empty();
    for _ in 0..n {
        let mut r = vec![0.0; FEATURE_DIM];
        for v in &mut r[0..3] {
            *v = rng.random_range(-0.6..0.6);
        }
        for v in &mut r[3..6] {
            *v = rng.random_range(scale.0.ln()..scale.1.ln());
        }
        for v in &mut r[6..12] {
            *v = rng.random_range(-1.0..1.0);
        }
        r[6] += 1.5;
        r[10] += 1.5;
        r[12] = rng.random_range(-2.0..3.0);
        for v in &mut r[13..16] {
            *v = rng.random_range(0.0..1.0);
        }
        set.push_row(&r, true);
    }
    set
}

fn camera(azimuth: f64, elevation: f64, size: usize) -> Camera {
    Camera::orbit(Vector3::zeros(), 3.0, azimuth, elevation, size as f64 * 1.4, size, size).unwrap()
}

/// Pixels where no term is skipped, clamped or cut off by early termination.
fn clean_pixels(set: &GaussianSet, cam: &Camera) -> Vec<bool> {
    let projected = project_set(set, cam);
    let mut out = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut clean = true;
            for p in &projected {
                let (dx, dy) = (px - p.mean2d[0], py - p.mean2d[1]);
                let [a, b, c] = p.conic;
                let s = p.opacity * (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).exp();
                if (s > 1e-12 && s < SIGMA_SKIP) || s > SIGMA_MAX {
                    clean = false;
                    break;
                }
                t *= 1.0 - s;
                if t < TRANSMITTANCE_STOP {
                    clean = false;
                    break;
                }
            }
            out.push(clean);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiled_matches_brute_force_on_clean_pixels(seed in 0u64..10_000, n in 1usize..40, az in 0.0..6.28f64, el in -0.5..0.8f64) {
        let set = random_set(seed, n, (0.01, 0.1));
        let cam = camera(az, el, 32);
        let tiled = render(&set, &cam, [0.1, 0.2, 0.3]).image;
        let brute = render_brute_force(&set, &cam, [0.1, 0.2, 0.3]);
        for (i, clean) in clean_pixels(&set, &cam).into_iter().enumerate() {
            if clean {
                prop_assert!((tiled.alpha[i] - brute.alpha[i]).abs() <= 1e-5);
                for c in 0..3 {
                    prop_assert!((tiled.rgb[i * 3 + c] - brute.rgb[i * 3 + c]).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn render_is_bounded(seed in 0u64..10_000, n in 0usize..64, az in 0.0..6.28f64) {
        let set = random_set(seed, n, (0.01, 0.3));
        let img = render(&set, &camera(az, 0.3, 24), [1.0, 0.0, 0.5]).image;
        for &a in &img.alpha {
            prop_assert!((0.0..=1.0).contains(&a));
        }
        for &v in &img.rgb {
            prop_assert!(v.is_finite() && (-1e-12..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn backward_is_linear_in_the_upstream_gradient(seed in 0u64..10_000, k in -3.0..3.0f64) {
        let set = random_set(seed, 6, (0.05, 0.2));
        let cam = camera(0.7, 0.2, 16);
        let out = render(&set, &cam, [0.0; 3]);
        let mut rng = rng_stream(seed, 1);
        let w: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = w.iter().map(|v| v * k).collect();
        let g1 = render_backward(&out, &set, &cam, &w, None).unwrap();
        let gk = render_backward(&out, &set, &cam, &scaled, None).unwrap();
        for (a, b) in g1.features.iter().zip(&gk.features) {
            prop_assert!((a * k - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn densify_never_exceeds_the_cap(seed in 0u64..10_000, n in 1usize..80, cap in 1usize..120) {
        let set = random_set(seed, n, (0.005, 0.1));
        let mut rng = rng_stream(seed, 2);
        let grads: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let cfg = FitConfig { max_points: cap, grad_threshold: 0.0, ..Default::default() };
        let out = densify_topk(&set, &grads, &cfg, &mut rng).unwrap();
        prop_assert!(out.set.len() <= cap.max(n));
        prop_assert_eq!(out.source.len(), out.set.len());
        prop_assert!(out.set.len() - n <= cap.saturating_sub(n));
        let pruned = prune(&out.set, 0.01, 0.5);
        prop_assert!(pruned.set.len() <= out.set.len());
    }

    #[test]
    fn padding_reaches_the_target_exactly(seed in 0u64..10_000, n in 1usize..60, target in 1usize..90) {
        let set = random_set(seed, n, (0.01, 0.1));
        let padded = pad_to_count(&set, target, &mut rng_stream(seed, 3)).unwrap();
        prop_assert_eq!(padded.len(), target);
    }
}
