use nalgebra::{Rotation3, Vector2, Vector3};
use proptest::prelude::*;

use stereo_nvs::diff::{grad_check, Tape, Tensor};
use stereo_nvs::geometry::*;
use stereo_nvs::image::RgbImage;
use stereo_nvs::image::{read_pfm, write_pfm, ScalarMap};
use stereo_nvs::losses::{g_distance, gamma_weight, DepthTarget};
use stereo_nvs::metrics::{psnr, ssim};
use stereo_nvs::render::composite;

fn intrinsics() -> Intrinsics {
    Intrinsics::new(79.0, 79.0, 48.0, 32.0, 96, 64).unwrap()
}

prop_compose! {
    fn pose()(ax in -0.6f64..0.6, ay in -0.6f64..0.6, az in -0.6f64..0.6,
              tx in -1.0f64..1.0, ty in -1.0f64..1.0, tz in -1.0f64..1.0) -> Pose {
        Pose::new(*Rotation3::from_euler_angles(ax, ay, az).matrix(), Vector3::new(tx, ty, tz)).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn backproject_then_project_is_identity(p in pose(), u in 0.0f64..96.0, v in 0.0f64..64.0, z in 0.5f64..10.0) {
        let cam = Camera::new(intrinsics(), p);
        let x = backproject(&Vector2::new(u, v), z, &cam).unwrap();
        let pr = project(&x, &cam);
        prop_assert!((pr.pixel - Vector2::new(u, v)).norm() < 1e-9);
        prop_assert!((pr.depth - z).abs() < 1e-10 * z);
    }

    #[test]
    fn plane_homography_matches_point_transfer(a in pose(), b in pose(), u in 0.0f64..96.0, v in 0.0f64..64.0, z in 1.0f64..4.0) {
        let (src, dst) = (Camera::new(intrinsics(), a), Camera::new(intrinsics(), b));
        let x = backproject(&Vector2::new(u, v), z, &dst).unwrap();
        let direct = project(&x, &src);
        prop_assume!(direct.depth > 0.1);
        let h = plane_homography(&src, &dst, z).unwrap();
        let via_h = apply_homography(&h, &Vector2::new(u, v));
        prop_assert!((via_h - direct.pixel).norm() < 1e-7 * (1.0 + direct.pixel.norm()));
    }

    #[test]
    fn disparity_depth_round_trip(d in 0.05f64..60.0, baseline in 0.01f64..0.5) {
        let rig = StereoRig::new(intrinsics(), Pose::identity(), baseline).unwrap();
        let z = disparity_to_depth(d, &rig).unwrap();
        prop_assert!((depth_to_disparity(z, &rig).unwrap() - d).abs() <= 1e-12 * d);
    }

    #[test]
    fn compositing_weights_form_a_sub_distribution(
        sigma in prop::collection::vec(0.0f64..50.0, 2..40),
        step in 0.001f64..0.5,
    ) {
        let n = sigma.len();
        let t: Vec<f64> = (0..n).map(|i| 1.0 + step * (i as f64 + 0.5)).collect();
        let colors = vec![[0.2, 0.5, 0.9]; n];
        let px = composite(&colors, &sigma, &t, &vec![step; n]).unwrap();
        prop_assert!(px.weights.iter().all(|&w| w >= 0.0));
        prop_assert!(px.opacity <= 1.0 + 1e-12);
        // Constant color composites to opacity times that color.
        for (got, want) in px.color.iter().zip(colors[0]) {
            prop_assert!((got - px.opacity * want).abs() < 1e-12);
        }
        if px.opacity > 1e-6 {
            prop_assert!(px.depth >= t[0] - 1e-9 && px.depth <= t[n - 1] + 1e-9);
        }
    }

    #[test]
    fn masked_pixels_never_change_the_depth_distance(
        vals in prop::collection::vec((0.2f64..5.0, 1.0f64..4.0, any::<bool>()), 1..30),
        junk in prop::num::f64::ANY,
    ) {
        let n = vals.len();
        let pred = ScalarMap { width: n, height: 1, data: vals.iter().map(|v| v.0).collect() };
        let gt = ScalarMap { width: n, height: 1, data: vals.iter().map(|v| v.1).collect() };
        let mask = ScalarMap { width: n, height: 1, data: vals.iter().map(|v| f64::from(v.2)).collect() };
        let target = DepthTarget::new(gt, &mask, 0.5, 5.0).unwrap();
        let base = g_distance(&pred, &target, 1.0).unwrap();
        let mut poked = pred.clone();
        for (i, v) in vals.iter().enumerate() {
            if !v.2 {
                poked.data[i] = junk;
            }
        }
        prop_assert_eq!(base.to_bits(), g_distance(&poked, &target, 1.0).unwrap().to_bits());
    }

    #[test]
    fn gamma_weights_decay_geometrically(n in 0usize..12) {
        prop_assert!((gamma_weight(0.9, n + 1) / gamma_weight(0.9, n) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn pfm_round_trip_is_exact_for_f32_values(vals in prop::collection::vec(-1e6f32..1e6, 12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pfm");
        let map = ScalarMap { width: 4, height: 3, data: vals.iter().map(|&v| f64::from(v)).collect() };
        write_pfm(&path, &map).unwrap();
        prop_assert_eq!(read_pfm(&path).unwrap(), map);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut img = || RgbImage {
            width: 16,
            height: 16,
            data: (0..256).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        };
        let (a, b) = (img(), img());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softplus_mlp_gradients_match_differences(
        w in prop::collection::vec(-1.0f64..1.0, 12),
        x in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let input = Tensor::matrix(2, 4, x).unwrap();
        let weight = Tensor::matrix(4, 3, w).unwrap();
        let err = grad_check(
            |tape: &Tape, wv| {
                let xv = tape.constant(input.clone());
                let h = xv.matmul(wv)?.softplus()?;
                h.mul(h)?.softmax(1)?.cumsum_exclusive(1)?.sum()
            },
            &weight,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-6, "relative error {err}");
    }
}
