mod common;

use avatar_splat::image::RgbImage;
use avatar_splat::losses::ssim;
use avatar_splat::rasterizer::RasterConfig;
use avatar_splat::scene::IDENTITY_DIM;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle(scene: &RandomScene, cfg: &RasterConfig) -> OracleImage {
    brute_force_render(
        &scene.gaussians,
        &oracle_camera(&scene.camera),
        cfg.background,
        cfg.background_logit,
        IDENTITY_DIM,
    )
}

#[test]
fn tiled_matches_brute_force_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = RasterConfig::default();
    let mut worst = 0.0f64;
    let mut drawn = 0;
    for _ in 0..100 {
        let scene = random_scene(&mut rng, 64, 32);
        let a = tiled_render(&scene, &cfg);
        let b = oracle(&scene, &cfg);
        drawn += a.alpha.iter().filter(|&&v| v > 0.0).count();
        worst = worst.max(max_channel_diff(&a, &b));
    }
    assert!(worst <= 1e-6, "max difference {worst}");
    // The scenes actually put something on screen.
    assert!(drawn > 100 * 32 * 32 / 10, "{drawn}");
}

#[test]
fn non_square_multi_tile_images_and_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = RasterConfig {
        background: [0.2, 0.5, 0.9],
        background_logit: 7.0,
    };
    for _ in 0..10 {
        let mut scene = random_scene(&mut rng, 40, 32);
        scene.camera.width = 53;
        scene.camera.height = 37;
        scene.camera.cx = 26.0;
        let a = tiled_render(&scene, &cfg);
        let b = oracle(&scene, &cfg);
        assert!(max_channel_diff(&a, &b) <= 1e-6);
    }
}

#[test]
fn empty_scene_is_background() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut scene = random_scene(&mut rng, 4, 16);
    scene.gaussians.clear();
    let cfg = RasterConfig {
        background: [0.1, 0.2, 0.3],
        background_logit: 4.0,
    };
    let a = tiled_render(&scene, &cfg);
    assert!(a.alpha.iter().all(|&v| v == 0.0));
    assert!(a.color.chunks(3).all(|c| c == [0.1, 0.2, 0.3]));
    assert!(a.identity.chunks(IDENTITY_DIM).all(|c| c[0] == 4.0 && c[1..].iter().all(|&v| v == 0.0)));
}

#[test]
fn gaussians_behind_the_camera_are_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let scene = random_scene(&mut rng, 30, 24);
    let mut behind = RandomScene {
        gaussians: scene.gaussians.clone(),
        camera: scene.camera.clone(),
        sh_degree: scene.sh_degree,
    };
    let center = scene.camera.center();
    for g in &mut behind.gaussians {
        // Mirror through the camera center.
        g.position = center * 2.0 - g.position;
    }
    let a = tiled_render(&behind, &RasterConfig::default());
    assert!(a.alpha.iter().all(|&v| v == 0.0));
}

#[test]
fn ssim_matches_direct_window_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (w, h) in [(17, 13), (32, 32), (8, 5)] {
        let x: Vec<f64> = (0..3 * w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| (v + rng.random_range(-0.2..0.2f64)).clamp(0.0, 1.0)).collect();
        let a = RgbImage::from_data(w, h, x.clone()).unwrap();
        let b = RgbImage::from_data(w, h, y.clone()).unwrap();
        let got = ssim(&a, &b).unwrap();
        let want = direct_ssim(&x, &y, w, h);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn render_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 24, 20);
        let cfg = RasterConfig::default();
        let a = tiled_render(&scene, &cfg);
        prop_assert!(a.alpha.iter().all(|&v| (0.0..1.0).contains(&v)));
        for p in 0..a.pixel_count() {
            // Depth is an alpha-weighted average of positive depths.
            prop_assert!(a.depth[p] >= 0.0);
            if a.alpha[p] == 0.0 {
                prop_assert_eq!(a.depth[p], 0.0);
            }
        }
        // Input order does not matter.
        let mut shuffled = RandomScene {
            gaussians: scene.gaussians.clone(),
            camera: scene.camera.clone(),
            sh_degree: scene.sh_degree,
        };
        shuffled.gaussians.reverse();
        let b = tiled_render(&shuffled, &cfg);
        let ob = oracle(&shuffled, &cfg);
        prop_assert!(max_channel_diff(&b, &ob) <= 1e-6);
        let diff = a.color.iter().zip(&b.color).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        prop_assert!(diff <= 1e-9, "order changed the image by {}", diff);
    }
}
