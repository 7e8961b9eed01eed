use avatar_splat::deform::*;
use avatar_splat::gradients::render_reposed;
use avatar_splat::image::RgbImage;
use avatar_splat::procedural::{gradcheck_problem, oscillating_band, orbit_cameras};
use avatar_splat::rasterizer::RasterConfig;
use avatar_splat::scene::{Camera, Layer};
use avatar_splat::skinning::{repose_all, Pose, PosedMesh};
use avatar_splat::Error;
use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Field with small random head weights so every output is non-zero.
fn perturbed(seed: u64, scale: f64) -> DeformField {
    let mut f = DeformField::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
    let mut p = f.params();
    for v in p.iter_mut() {
        if *v == 0.0 {
            *v = scale * rng.random_range(-1.0..1.0);
        }
    }
    f.set_params(&p).unwrap();
    f
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> Pose {
    let mut iso = |s: f64| {
        Isometry3::from_parts(
            Translation3::new(
                s * rng.random_range(-0.1..0.1),
                s * rng.random_range(-0.1..0.1),
                s * rng.random_range(-0.1..0.1),
            ),
            UnitQuaternion::from_euler_angles(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            ),
        )
    };
    Pose {
        joint_transforms: (0..joints).map(|_| iso(1.0)).collect(),
        root: iso(2.0),
    }
}

#[test]
fn fresh_field_outputs_exact_zero() {
    let f = DeformField::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let p = [0; 3].map(|_| rng.random_range(-2.0..2.0));
        let d = f.eval(&p, rng.random_range(0.0..1.0));
        assert!(d.is_zero(), "{d:?}");
    }
}

#[test]
fn zero_field_is_bitwise_identity_under_posing() {
    let prob = gradcheck_problem(4);
    let field = DeformField::new(11);
    let cams = orbit_cameras(2, Vector3::new(0.0, 0.8, 0.0), 2.6, 0.3, 40.0, 32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let poses: Vec<Pose> = (0..10).map(|_| random_pose(&mut rng, prob.mesh.joints.len())).collect();
    let times: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
    let with = animate(&prob.set, &prob.mesh, &poses, &times, Some(&field), &cams, &prob.raster).unwrap();
    let without = animate(&prob.set, &prob.mesh, &poses, &times, None, &cams, &prob.raster).unwrap();
    assert_eq!(with, without);
    for (pose, &t) in poses.iter().zip(&times) {
        let reposed = repose_all(&prob.set, &PosedMesh::posed(&prob.mesh, pose).unwrap()).unwrap();
        assert_eq!(apply_deform(&field, &prob.set, &reposed, t), reposed);
    }
}

#[test]
fn constant_position_head_translates_assets_only() {
    let prob = gradcheck_problem(2);
    let mut field = DeformField::new(0);
    let head = field.biases.len() - 1;
    field.biases[head][2] = 0.1;
    let reposed = repose_all(&prob.set, &PosedMesh::canonical(&prob.mesh).unwrap()).unwrap();
    let out = apply_deform(&field, &prob.set, &reposed, 0.4);
    for i in 0..prob.set.len() {
        match prob.set.layer[i] {
            Layer::Body => assert_eq!(out[i], reposed[i]),
            Layer::Asset => {
                assert_eq!(out[i].position, reposed[i].position + Vector3::new(0.0, 0.0, 0.1));
                assert_eq!(out[i].rotation, reposed[i].rotation);
                assert_eq!(out[i].scale, reposed[i].scale);
            }
        }
    }
}

#[test]
fn time_derivative_matches_finite_differences() {
    let f = perturbed(8, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for _ in 0..10 {
        let p = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        let t = rng.random_range(0.05..0.95);
        let d = f.time_derivative(&p, t);
        let flat = |x: Delta| [x.position.as_slice(), &x.rotation, &x.log_scale].concat();
        let (a, b) = (flat(f.eval(&p, t + h)), flat(f.eval(&p, t - h)));
        for k in 0..OUTPUT_DIM {
            let fd = (a[k] - b[k]) / (2.0 * h);
            assert!((fd - d[k]).abs() <= 1e-4 * (1.0 + fd.abs()), "output {k}: fd {fd} vs {}", d[k]);
        }
    }
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let prob = gradcheck_problem(6);
    let field = perturbed(12, 0.02);
    let frame = &prob.frames[0];
    let targets = [(&frame.camera, &frame.image, 1.0), (&prob.views[1].camera, &prob.views[1].image, 0.5)];
    let t = 0.37;
    let loss = |f: &DeformField| frame_loss_grad(f, &prob.set, &prob.mesh, &frame.pose, t, &targets, &prob.raster).unwrap();
    let (_, grad) = loss(&field);
    let base = field.params();
    let n = base.len();
    let head_start = n - (OUTPUT_DIM * HIDDEN + OUTPUT_DIM);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut picks: Vec<usize> = (0..20).map(|_| rng.random_range(0..head_start)).collect();
    picks.extend((0..20).map(|_| rng.random_range(head_start..n)));
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(scale > 0.0);
    let h = 1e-6;
    for j in picks {
        let mut p = base.clone();
        let mut f = field.clone();
        p[j] = base[j] + h;
        f.set_params(&p).unwrap();
        let up = loss(&f).0;
        p[j] = base[j] - h;
        f.set_params(&p).unwrap();
        let down = loss(&f).0;
        let fd = (up - down) / (2.0 * h);
        assert!(
            (fd - grad[j]).abs() <= 1e-4 * scale + 1e-3 * fd.abs(),
            "param {j}: fd {fd} vs analytic {}",
            grad[j]
        );
    }
}

#[test]
fn serialization_round_trips_bitwise() {
    let f = perturbed(21, 0.3);
    let bytes = f.to_bytes();
    let g = DeformField::from_bytes(&bytes).unwrap();
    assert_eq!(f, g);
    assert_eq!(g.to_bytes(), bytes);

    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header = String::from_utf8(bytes[..nl].to_vec()).unwrap().replace("\"version\":1", "\"version\":2");
    let mut bumped = header.into_bytes();
    bumped.extend_from_slice(&bytes[nl..]);
    assert!(matches!(DeformField::from_bytes(&bumped), Err(Error::VersionMismatch { found: 2, .. })));
    assert!(matches!(DeformField::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::MalformedHeader(_))));
    assert!(matches!(DeformField::from_bytes(b"not json\n"), Err(Error::MalformedHeader(_))));
    assert!(f.clone().set_params(&[0.0; 3]).is_err());
}

#[test]
fn fresh_fields_are_seed_deterministic() {
    assert_eq!(DeformField::new(4), DeformField::new(4));
    assert_ne!(DeformField::new(4), DeformField::new(5));
}

#[test]
fn rigid_pose_matches_moved_camera() {
    let mut prob = gradcheck_problem(9);
    // Colors are view dependent in world space, so keep only the constant band.
    for i in 0..prob.set.len() {
        prob.set.sh_of_mut(i)[3..].fill(0.0);
    }
    let root = Isometry3::from_parts(
        Translation3::new(0.2, -0.1, 0.3),
        UnitQuaternion::from_euler_angles(0.1, 0.7, -0.2),
    );
    let pose = Pose::rigid(prob.mesh.joints.len(), root);
    let cam = orbit_cameras(1, Vector3::new(0.0, 0.8, 0.0), 2.6, 0.3, 40.0, 32, 32).remove(0);
    // Pulling the world back through `root` before the camera sees it.
    let moved = Camera {
        rotation: cam.rotation * root.rotation.inverse().to_rotation_matrix().matrix(),
        translation: cam.translation - cam.rotation * (root.rotation.inverse() * root.translation.vector),
        ..cam.clone()
    };
    let canon = animate(&prob.set, &prob.mesh, &[Pose::identity(2)], &[0.0], None, &[cam], &prob.raster).unwrap();
    let posed = animate(&prob.set, &prob.mesh, &[pose], &[0.0], None, &[moved], &prob.raster).unwrap();
    let (a, b) = (&canon[0][0], &posed[0][0]);
    let worst = a.color.iter().zip(&b.color).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(worst < 1e-5, "max pixel difference {worst}");
}

#[test]
fn training_rejects_bad_sequences() {
    let fx = oscillating_band(3, 16, 0.05).unwrap();
    let cfg = DeformConfig {
        iters: 1,
        ..Default::default()
    };
    let run = |frames: &[FrameSample], aux: &[AuxView]| train_deform(&fx.set, &fx.mesh, frames, aux, &cfg, 0);
    assert!(matches!(run(&fx.frames[..1], &[]), Err(Error::TooFewFrames { needed: 2, available: 1 })));
    let mut swapped = fx.frames.clone();
    swapped.swap(0, 1);
    assert!(matches!(run(&swapped, &[]), Err(Error::InvalidArgument(_))));
    let mut bad_aux = fx.aux.clone();
    bad_aux[0].frame = 7;
    assert!(matches!(run(&fx.frames, &bad_aux), Err(Error::InvalidArgument(_))));
    let mut small = fx.frames.clone();
    small[1].image = RgbImage::from_data(4, 4, vec![0.0; 48]).unwrap();
    assert!(run(&small, &[]).is_err());
    let bad_lr = DeformConfig {
        lr: 0.0,
        ..cfg.clone()
    };
    assert!(matches!(
        train_deform(&fx.set, &fx.mesh, &fx.frames, &[], &bad_lr, 0),
        Err(Error::InvalidConfig(_))
    ));
    // No auxiliary views is allowed.
    let (_, report) = run(&fx.frames, &[]).unwrap();
    assert_eq!(report.log.len(), 1);
    assert_eq!(report.log[0].2, 0.0);
}

#[test]
fn static_scene_keeps_field_near_zero() {
    let fx = oscillating_band(4, 24, 0.0).unwrap();
    let cfg = DeformConfig {
        iters: 40,
        ..Default::default()
    };
    let (field, report) = train_deform(&fx.set, &fx.mesh, &fx.frames, &fx.aux, &cfg, 1).unwrap();
    assert!(report.final_ref <= report.initial_ref + 1e-12);
    let reposed = repose_all(&fx.set, &PosedMesh::canonical(&fx.mesh).unwrap()).unwrap();
    for f in &fx.frames {
        let out = apply_deform(&field, &fx.set, &reposed, f.t);
        let mean: f64 = fx.band.iter().map(|&i| (out[i].position - reposed[i].position).norm()).sum::<f64>()
            / fx.band.len() as f64;
        assert!(mean <= 1e-3, "mean displacement {mean}");
    }
}

#[test]
fn training_reduces_reference_loss_and_is_deterministic() {
    let fx = oscillating_band(4, 24, 0.06).unwrap();
    let cfg = DeformConfig {
        iters: 30,
        ..Default::default()
    };
    let (a, ra) = train_deform(&fx.set, &fx.mesh, &fx.frames, &fx.aux, &cfg, 2).unwrap();
    let (b, rb) = train_deform(&fx.set, &fx.mesh, &fx.frames, &fx.aux, &cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(ra.final_ref < ra.initial_ref, "{} -> {}", ra.initial_ref, ra.final_ref);
    // The body never moves, trained or not.
    let reposed = repose_all(&fx.set, &PosedMesh::canonical(&fx.mesh).unwrap()).unwrap();
    let out = apply_deform(&a, &fx.set, &reposed, 0.25);
    for i in fx.set.indices_in(Layer::Body) {
        assert_eq!(out[i], reposed[i]);
    }
}

#[test]
fn body_only_render_ignores_field() {
    let fx = oscillating_band(2, 24, 0.0).unwrap();
    let body = fx.set.select(&fx.set.indices_in(Layer::Body));
    let field = perturbed(5, 0.1);
    let cam = &fx.frames[0].camera;
    let raster = RasterConfig::default();
    let a = animate(&body, &fx.mesh, &[Pose::identity(2)], &[0.5], Some(&field), std::slice::from_ref(cam), &raster).unwrap();
    let reposed = repose_all(&body, &PosedMesh::canonical(&fx.mesh).unwrap()).unwrap();
    let b = render_reposed(&body, &reposed, None, cam, &raster).0;
    assert_eq!(a[0][0], b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_field_identity_for_any_time(t in 0.0f64..1.0, x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0, seed in 0u64..1000) {
        prop_assert!(DeformField::new(seed).eval(&[x, y, z], t).is_zero());
    }
}
