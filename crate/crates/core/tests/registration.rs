//! Registration oracles on analytically rendered textures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wastebot::cube::Camera;
use wastebot::image::Image;
use wastebot::register::synth::{synthetic_vis_triple, TextureField};
use wastebot::register::{
    detect_keypoints, match_descriptors, ransac_homography, register_series, Homography, Point, RansacParams,
    RegistrationParams, SiftParams,
};

fn corner_error(est: &Homography, truth: &Homography, size: f64) -> f64 {
    let s = size - 1.0;
    [(0.0, 0.0), (s, 0.0), (0.0, s), (s, s)]
        .iter()
        .map(|&p| {
            let a = est.apply(p);
            let b = truth.apply(p);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Independent re-implementation of the consensus rule used to verify
/// RANSAC's reported inlier count.
fn brute_force_inliers(h: &Homography, src: &[Point], dst: &[Point], thresh: f64) -> usize {
    let m = h.matrix();
    let inv = m.try_inverse().unwrap();
    let project = |m: &nalgebra::Matrix3<f64>, p: Point| {
        let v = m * nalgebra::Vector3::new(p.0, p.1, 1.0);
        (v.x / v.z, v.y / v.z)
    };
    src.iter()
        .zip(dst)
        .filter(|(p, q)| {
            let f = project(&m, **p);
            let b = project(&inv, **q);
            let d2 = (f.0 - q.0).powi(2) + (f.1 - q.1).powi(2) + (b.0 - p.0).powi(2) + (b.1 - p.1).powi(2);
            (d2 / 2.0).sqrt() < thresh
        })
        .count()
}

#[test]
fn ransac_recovers_model_with_constructed_outliers() {
    let truth = Homography::from_matrix([1.02, 0.05, 12.0, -0.04, 0.98, -7.0, 1e-5, -2e-5, 1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for _ in 0..60 {
        let p = (rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
        src.push(p);
        dst.push(truth.apply(p));
    }
    let inv = truth.inverse().unwrap();
    while src.len() < 100 {
        let p = (rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
        let q = (rng.random_range(0.0..500.0), rng.random_range(0.0..500.0));
        // Constructed outliers stay well outside the threshold.
        if wastebot::register::symmetric_error(&truth, &inv, p, q) > 20.0 {
            src.push(p);
            dst.push(q);
        }
    }
    let fit = ransac_homography(
        &src,
        &dst,
        &RansacParams {
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(fit.homography.inlier_count, 60);
    assert_eq!(fit.inliers, (0..60).collect::<Vec<_>>());
    for (a, b) in fit.homography.h.iter().zip(truth.h.iter()) {
        assert!((a - b).abs() < 1e-3, "{:?}", fit.homography.h);
    }
    assert_eq!(brute_force_inliers(&fit.homography, &src, &dst, 3.0), 60);
}

#[test]
fn ransac_is_reproducible_under_seed() {
    let truth = Homography::similarity(1.1, 0.1, 5.0, 5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let src: Vec<Point> = (0..80)
        .map(|_| (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)))
        .collect();
    let dst: Vec<Point> = src
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i % 3 == 0 {
                (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0))
            } else {
                let q = truth.apply(*p);
                (q.0 + rng.random_range(-0.5..0.5), q.1 + rng.random_range(-0.5..0.5))
            }
        })
        .collect();
    let params = RansacParams {
        seed: 17,
        ..Default::default()
    };
    let a = ransac_homography(&src, &dst, &params).unwrap();
    let b = ransac_homography(&src, &dst, &params).unwrap();
    assert_eq!(a, b);
}

#[test]
fn keypoints_repeat_under_half_pixel_shift() {
    let tex = TextureField::random(21, 192.0, 192.0, 150);
    let a = tex.render(&Homography::identity(), 192, 192);
    let b = tex.render(&Homography::translation(0.5, 0.0), 192, 192);
    let ka = detect_keypoints(&a, &SiftParams::default()).unwrap();
    let kb = detect_keypoints(&b, &SiftParams::default()).unwrap();
    assert!(ka.len() > 20);
    // Pixel p in b sees reference point p + 0.5, so a keypoint at x in a
    // appears at x - 0.5 in b.
    let repeated = ka
        .iter()
        .filter(|k| {
            kb.iter()
                .any(|m| ((k.x - 0.5 - m.x).powi(2) + (k.y - m.y).powi(2)).sqrt() <= 1.5)
        })
        .count();
    let rate = repeated as f64 / ka.len() as f64;
    assert!(rate >= 0.8, "repeatability {rate}");
}

#[test]
fn composition_consistency_on_synthetic_triple() {
    let t = synthetic_vis_triple(3, 384, 30.0, 10f64.to_radians(), 1.2);
    let params = RegistrationParams::default();
    let res = register_series(&t.frames, &params).unwrap();
    let swir_uv = *res.homography(Camera::Swir).unwrap();
    let visnir_uv = *res.homography(Camera::VisNir).unwrap();
    // Direct SWIR -> VIS/NIR registration.
    let norm = |img: &Image| wastebot::cube::normalize_image(img).unwrap();
    let ks = detect_keypoints(&norm(&t.frames.swir), &params.sift).unwrap();
    let kv = detect_keypoints(&norm(&t.frames.visnir), &params.sift).unwrap();
    let (swir_visnir, _) = wastebot::register::register_pair(&ks, &kv, &params).unwrap();
    let chained = visnir_uv.compose(&swir_visnir).unwrap();
    // Compare in coordinates scaled to [-1, 1].
    let n = 384.0;
    let t_norm = Homography::from_matrix([2.0 / n, 0.0, -1.0, 0.0, 2.0 / n, -1.0, 0.0, 0.0, 1.0]).unwrap();
    let to_norm = |h: &Homography| t_norm.compose(h).unwrap().compose(&t_norm.inverse().unwrap()).unwrap();
    let (a, b) = (to_norm(&swir_uv), to_norm(&chained));
    for (x, y) in a.h.iter().zip(b.h.iter()) {
        assert!((x - y).abs() <= 1e-2, "{:?} vs {:?}", a.h, b.h);
    }
}

#[test]
fn matching_then_ransac_recovers_similarity() {
    let t = synthetic_vis_triple(8, 320, 20.0, 8f64.to_radians(), 1.15);
    let res = register_series(&t.frames, &RegistrationParams::default()).unwrap();
    let h = res.homography(Camera::VisNir).unwrap();
    assert!(corner_error(h, &t.visnir_to_uv, 320.0) < 0.5);
    let descs_ok = match_descriptors(
        &detect_keypoints(&t.frames.uv, &SiftParams::default()).unwrap(),
        &detect_keypoints(&t.frames.uv, &SiftParams::default()).unwrap(),
        0.75,
    )
    .unwrap();
    assert!(!descs_ok.is_empty());
}
