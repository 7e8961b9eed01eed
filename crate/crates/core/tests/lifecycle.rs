use avatar_splat::geometry::{Quat, SH_C0};
use avatar_splat::gradients::{ParamGradients, View};
use avatar_splat::lifecycle::*;
use avatar_splat::procedural::{icosphere, render_view, unit_cube};
use avatar_splat::scene::{
    category_of, label_identity, logit, resolve_position, sh_dc_for, Camera, Gaussian, GaussianSet,
    Layer, SkinnedMesh, TriangleEmbedding, IDENTITY_DIM, PANTS, SKIN, UPPER_CLOTHES,
};
use avatar_splat::sdf::MeshSdf;
use avatar_splat::Error;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn asset(face: u32, offsets: [f64; 3], identity: [f64; IDENTITY_DIM], stride: usize) -> Gaussian {
    Gaussian {
        embedding: TriangleEmbedding {
            face_index: face,
            sigma: offsets[0],
            beta: offsets[1],
            gamma: offsets[2],
        },
        rotation: Quat::IDENTITY,
        log_scale: Vector3::repeat(0.05f64.ln()),
        opacity_logit: 2.0,
        sh: vec![0.5; stride],
        identity,
        layer: Layer::Asset,
        frozen: false,
    }
}

fn cube() -> SkinnedMesh {
    let (v, f) = unit_cube();
    SkinnedMesh::rigid(v, f)
}

fn plane() -> SkinnedMesh {
    SkinnedMesh::rigid(
        vec![
            Vector3::new(-1.0, -1.0, 0.0),
            Vector3::new(1.0, -1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(-1.0, 1.0, 0.0),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    )
}

// ---------------------------------------------------------------- Adam

fn one_param_set(frozen: bool) -> GaussianSet {
    let mut set = GaussianSet::new(0);
    let mut g = asset(0, [0.1, 0.2, 0.3], [0.0; IDENTITY_DIM], 3);
    g.frozen = frozen;
    set.push(&g).unwrap();
    set
}

#[test]
fn adam_zero_gradient_leaves_params_and_decays_moments() {
    let mut set = one_param_set(false);
    let before = set.clone();
    let mut adam = Adam::new(&set);
    adam.m.offsets[0] = [1.0, -2.0, 0.5];
    adam.v.offsets[0] = [4.0, 4.0, 4.0];
    adam.step = 1000;
    // Moments are nonzero, so the first zero-gradient step still moves
    // parameters; what must hold is that with zero moments nothing moves.
    let mut fresh = Adam::new(&set);
    fresh.apply(&mut set, &ParamGradients::zeros(&before), &LearningRates::default()).unwrap();
    assert_eq!(set, before);
    adam.apply(&mut set, &ParamGradients::zeros(&before), &LearningRates::default()).unwrap();
    assert_eq!(adam.m.offsets[0], [0.9, -1.8, 0.45]);
    assert!((adam.v.offsets[0][0] - 4.0 * 0.999).abs() < 1e-15);
}

#[test]
fn adam_first_step_is_normalized_gradient() {
    let mut set = one_param_set(false);
    let before = set.clone();
    let mut adam = Adam::new(&set);
    let mut g = ParamGradients::zeros(&set);
    g.offsets[0] = [3.0, -0.25, 0.0];
    g.opacity_logit[0] = 1e-3;
    let lr = LearningRates::default();
    adam.apply(&mut set, &g, &lr).unwrap();
    // m̂ = g and v̂ = g² after bias correction.
    for k in 0..3 {
        let gk = g.offsets[0][k];
        let expect = before.offsets[0][k] - lr.offsets * gk / (gk.abs() + 1e-15);
        assert!((set.offsets[0][k] - expect).abs() < 1e-15, "{k}");
    }
    assert!((set.opacity_logit[0] - (before.opacity_logit[0] - lr.opacity)).abs() < 1e-12);
}

#[test]
fn adam_constant_gradient_steps_approach_lr() {
    let mut set = one_param_set(false);
    let mut adam = Adam::new(&set);
    let mut g = ParamGradients::zeros(&set);
    g.log_scale[0] = [0.7, -5.0, 1e-6];
    let lr = LearningRates::default();
    for _ in 0..500 {
        let prev = set.log_scale[0];
        adam.apply(&mut set, &g, &lr).unwrap();
        for k in 0..3 {
            let step = prev[k] - set.log_scale[0][k];
            assert!((step.abs() - lr.scale).abs() < 1e-9 * lr.scale + 1e-15);
            assert_eq!(step.signum(), g.log_scale[0][k].signum());
        }
    }
}

#[test]
fn adam_skips_frozen_rows_and_checks_shapes() {
    let mut set = one_param_set(true);
    let before = set.clone();
    let mut adam = Adam::new(&set);
    let mut g = ParamGradients::zeros(&set);
    g.offsets[0] = [1.0; 3];
    g.sh[0] = 1.0;
    adam.apply(&mut set, &g, &LearningRates::default()).unwrap();
    assert_eq!(set, before);
    assert_eq!(adam.m.offsets[0], [0.0; 3]);

    let mut bigger = set.clone();
    bigger.push(&asset(0, [0.0; 3], [0.0; IDENTITY_DIM], 3)).unwrap();
    let zeros = ParamGradients::zeros(&bigger);
    let err = adam.apply(&mut bigger, &zeros, &LearningRates::default());
    assert!(matches!(err, Err(Error::ShapeMismatch(_))));
}

// ---------------------------------------------------------------- pruning

#[test]
fn prune_inside_removes_the_center_gaussian_only() {
    let mesh = cube();
    let mut set = GaussianSet::new(0);
    let c = mesh.frame(0).unwrap().to_local(&Vector3::repeat(0.5));
    assert!((c.z + 0.5).abs() < 1e-12);
    set.push(&asset(0, [0.0, 0.0, 0.2], [0.0; IDENTITY_DIM], 3)).unwrap();
    set.push(&asset(0, c.into(), label_identity(PANTS), 3)).unwrap();
    let mut body = asset(0, c.into(), label_identity(SKIN), 3);
    body.layer = Layer::Body;
    body.frozen = true;
    set.push(&body).unwrap();
    let sdf = MeshSdf::new(&mesh.vertices, &mesh.faces);
    let centre = set.canonical_positions(&mesh).unwrap()[1];
    assert!((sdf.query(&centre) + 0.5).abs() < 1e-12);

    let mut adam = Adam::new(&set);
    adam.m.opacity_logit = vec![1.0, 2.0, 3.0];
    assert_eq!(prune_inside(&mut set, &mesh, Some(&mut adam)).unwrap(), 1);
    assert_eq!(set.len(), 2);
    assert_eq!(adam.m.opacity_logit, vec![1.0, 3.0]);
    assert_eq!(adam.m.len(), 2);
    assert_eq!(set.layer, vec![Layer::Asset, Layer::Body]);
    assert_eq!(prune_inside(&mut set, &mesh, Some(&mut adam)).unwrap(), 0);
}

#[test]
fn prune_inside_is_a_noop_when_all_assets_are_outside() {
    let mesh = cube();
    let mut set = GaussianSet::new(0);
    for f in 0..12 {
        set.push(&asset(f, [0.01, -0.02, 0.05], [0.0; IDENTITY_DIM], 3)).unwrap();
    }
    let before = set.clone();
    assert_eq!(prune_inside(&mut set, &mesh, None).unwrap(), 0);
    assert_eq!(set, before);
}

#[test]
fn prune_transparent_thresholds() {
    let mut set = GaussianSet::new(0);
    for k in 0..4 {
        let mut g = asset(0, [0.0; 3], [0.0; IDENTITY_DIM], 3);
        g.opacity_logit = logit(0.5 + 0.1 * k as f64);
        set.push(&g).unwrap();
    }
    assert_eq!(prune_transparent(&mut set, 0.005, None), 0);
    assert_eq!(prune_transparent(&mut set.clone(), 0.0, None), 0);
    let mut g = asset(0, [0.0; 3], [0.0; IDENTITY_DIM], 3);
    g.opacity_logit = logit(1e-4);
    set.push(&g).unwrap();
    let mut body = g.clone();
    body.layer = Layer::Body;
    body.frozen = true;
    set.push(&body).unwrap();
    assert_eq!(prune_transparent(&mut set.clone(), 0.0, None), 0);
    assert_eq!(prune_transparent(&mut set, 0.005, None), 1);
    assert_eq!(set.len(), 5);
}

// ---------------------------------------------------------------- densification

fn cluster(mesh: &SkinnedMesh, face: u32, n: usize, seed: u64) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = GaussianSet::new(1);
    let stride = set.sh_stride();
    for _ in 0..n {
        let mut identity = [0.0; IDENTITY_DIM];
        for e in identity.iter_mut() {
            *e = rng.random_range(-1.0..1.0);
        }
        identity[UPPER_CLOTHES] = 3.0;
        let mut g = asset(
            face,
            [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(0.0..0.05)],
            identity,
            stride,
        );
        g.rotation = Quat::from_axis_angle(&Vector3::new(0.3, 1.0, 0.2), rng.random_range(-0.4..0.4));
        g.log_scale = Vector3::from_fn(|_, _| rng.random_range(-4.0..-3.0));
        g.opacity_logit = rng.random_range(-1.0..2.0);
        g.sh = (0..stride).map(|_| rng.random_range(-1.0..1.0)).collect();
        set.push(&g).unwrap();
    }
    let _ = mesh;
    set
}

#[test]
fn densify_zero_is_a_noop() {
    let mesh = cube();
    let mut set = cluster(&mesh, 4, 6, 1);
    let before = set.clone();
    assert_eq!(densify_category(&mut set, &mesh, UPPER_CLOTHES, 0, 3, 9).unwrap(), 0);
    assert_eq!(set, before);
}

#[test]
fn densify_needs_k_members() {
    let mesh = cube();
    let mut set = cluster(&mesh, 4, 3, 1);
    let err = densify_category(&mut set, &mesh, UPPER_CLOTHES, 5, 4, 9);
    assert!(matches!(err, Err(Error::TooFewGaussians { needed: 4, available: 3 })));
    let err = densify_category(&mut set, &mesh, PANTS, 5, 1, 9);
    assert!(matches!(err, Err(Error::TooFewGaussians { .. })));
}

#[test]
fn densify_single_cluster_inherits_cluster_means() {
    let mesh = cube();
    let n = 7;
    let mut set = cluster(&mesh, 4, n, 2);
    let orig = set.clone();
    let stride = set.sh_stride();
    let added = densify_category(&mut set, &mesh, UPPER_CLOTHES, 20, n, 3).unwrap();
    assert_eq!(added, 20);
    assert_eq!(set.len(), n + 20);

    // Hand-computed cluster means.
    let w = 1.0 / n as f64;
    let q0 = Quat::from_array(orig.rotation[0]);
    let mut q = [0.0; 4];
    let mut ls = [0.0; 3];
    let mut op = 0.0;
    let mut sh = vec![0.0; stride];
    let mut id = [0.0; IDENTITY_DIM];
    for i in 0..n {
        let qi = orig.rotation[i];
        let s = if Quat::from_array(qi).dot(&q0) < 0.0 { -1.0 } else { 1.0 };
        for k in 0..4 {
            q[k] += s * w * qi[k];
        }
        for k in 0..3 {
            ls[k] += w * orig.log_scale[i][k];
        }
        op += w * orig.opacity_logit[i];
        for k in 0..stride {
            sh[k] += w * orig.sh_of(i)[k];
        }
        for k in 0..IDENTITY_DIM {
            id[k] += w * orig.identity[i][k];
        }
    }
    let qn = Quat::from_array(q).normalized();
    for i in n..set.len() {
        assert_eq!(set.face[i], 4);
        assert_eq!(set.layer[i], Layer::Asset);
        assert!(!set.frozen[i]);
        assert!((Quat::from_array(set.rotation[i]).dot(&qn).abs() - 1.0).abs() < 1e-9);
        for k in 0..3 {
            assert!((set.log_scale[i][k] - ls[k]).abs() < 1e-9);
        }
        assert!((set.opacity_logit[i] - op).abs() < 1e-9);
        for k in 0..stride {
            assert!((set.sh_of(i)[k] - sh[k]).abs() < 1e-9);
        }
        for k in 0..IDENTITY_DIM {
            assert!((set.identity[i][k] - id[k]).abs() < 1e-9);
        }
    }
}

#[test]
fn densify_round_trips_sampled_positions() {
    let mesh = cube();
    let mut set = cluster(&mesh, 2, 5, 4);
    let mut more = cluster(&mesh, 3, 5, 5);
    set.append(&mut more).unwrap();
    let first_new = set.len();
    let sampled = densify_category_traced(&mut set, &mesh, UPPER_CLOTHES, 30, 3, 6).unwrap();
    assert_eq!(sampled.len(), set.len() - first_new);
    for (k, p) in sampled.iter().enumerate() {
        let q = resolve_position(&set.embedding(first_new + k), &mesh.faces, &mesh.vertices).unwrap();
        assert!((p - q).norm() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn densify_never_changes_category(seed in 0u64..1000, margin in 0.0f64..0.3) {
        let mesh = cube();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = GaussianSet::new(0);
        for _ in 0..12 {
            let mut id = [0.0; IDENTITY_DIM];
            let rival = if rng.random::<bool>() { PANTS } else { SKIN };
            id[UPPER_CLOTHES] = 1.0;
            id[rival] = 1.0 - margin - rng.random_range(0.0..0.05);
            let face = rng.random_range(0..12u32);
            set.push(&asset(face, [0.0, 0.0, 0.02], id, 3)).unwrap();
        }
        let mut flipped = set.clone();
        for i in 0..6 {
            flipped.identity[i][PANTS] = 2.0;
        }
        for s in [&mut set, &mut flipped] {
            let before = s.len();
            let _ = densify_category(s, &mesh, UPPER_CLOTHES, 25, 4, seed);
            for i in before..s.len() {
                prop_assert_eq!(category_of(&s.identity[i]), UPPER_CLOTHES);
            }
        }
    }
}

// ---------------------------------------------------------------- body layer

#[test]
fn single_face_body_sits_at_centroid() {
    let mesh = SkinnedMesh::rigid(
        vec![Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.5)],
        vec![[0, 1, 2]],
    );
    let set = build_body_gaussians(&mesh, 1, 2).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.offsets[0][2], 0.0);
    let p = set.canonical_positions(&mesh).unwrap()[0];
    let c = (mesh.vertices[0] + mesh.vertices[1] + mesh.vertices[2]) / 3.0;
    assert!((p - c).norm() < 1e-12);
    assert!(set.frozen[0]);
    assert_eq!(set.layer[0], Layer::Body);
    assert!((set.opacity(0) - 0.99).abs() < 1e-12);
    assert_eq!(category_of(&set.identity[0]), SKIN);
}

#[test]
fn body_gaussians_are_flat_aligned_and_cover_the_incircle() {
    let (v, f) = icosphere(1);
    let mesh = SkinnedMesh::rigid(v, f);
    for count in [1, 4, 7] {
        let set = build_body_gaussians(&mesh, count, 0).unwrap();
        assert_eq!(set.len(), count * mesh.faces.len());
        let mut per_face = vec![0; mesh.faces.len()];
        for i in 0..set.len() {
            per_face[set.face[i] as usize] += 1;
            let s = set.scale(i);
            assert!((s.z / s.x - 0.1).abs() < 1e-12);
            assert_eq!(s.x, s.y);
            let t = mesh.triangle(set.face[i] as usize);
            let area = 0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm();
            let perim = (t[1] - t[0]).norm() + (t[2] - t[1]).norm() + (t[0] - t[2]).norm();
            assert!((s.x - 2.0 * area / perim).abs() < 1e-12);
            let n = (t[1] - t[0]).cross(&(t[2] - t[0])).normalize();
            let axis = set.unit_rotation(i).to_matrix().column(2).into_owned();
            assert!((axis - n).norm() < 1e-9);
            assert_eq!(set.offsets[i][2], 0.0);
        }
        assert!(per_face.iter().all(|&c| c == count));
    }
    assert!(build_body_gaussians(&mesh, 0, 0).is_err());
    assert!(build_body_gaussians(&mesh, 8, 0).is_err());
}

#[test]
fn face_region_gets_the_face_label() {
    let mut mesh = cube();
    mesh.face_regions.insert("face".into(), vec![2, 3]);
    let set = build_body_gaussians(&mesh, 1, 0).unwrap();
    for i in 0..set.len() {
        let want = if set.face[i] == 2 || set.face[i] == 3 { 11 } else { SKIN };
        assert_eq!(category_of(&set.identity[i]), want);
    }
}

// ---------------------------------------------------------------- inpainting

fn colored_body(seed: u64) -> (SkinnedMesh, GaussianSet) {
    let (v, f) = icosphere(1);
    let mesh = SkinnedMesh::rigid(v, f);
    let mut set = build_body_gaussians(&mesh, 1, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..set.len() {
        let sh = set.sh_of_mut(i);
        for c in 0..3 {
            sh[c] = sh_dc_for(0.6 + 0.05 * rng.random_range(-1.0..1.0));
        }
        for x in sh[3..].iter_mut() {
            *x = 0.1;
        }
    }
    (mesh, set)
}

#[test]
fn occluded_converge_to_visible_sample_mean() {
    let (mesh, mut set) = colored_body(11);
    let n = set.len();
    let vis: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let stride = set.sh_stride();
    let mut mean = [0.0; 3];
    for i in (0..n).filter(|i| vis[*i]) {
        for c in 0..3 {
            mean[c] += set.sh[i * stride + c] * SH_C0;
        }
    }
    let nv = vis.iter().filter(|v| **v).count() as f64;
    let mean = mean.map(|m| m / nv);
    let before = set.clone();
    let rep = inpaint_body_color(&mut set, &mesh, &vis, &[], &Default::default(), &InpaintConfig::default()).unwrap();
    for i in 0..n {
        if vis[i] {
            assert_eq!(set.sh_of(i), before.sh_of(i));
        } else {
            for c in 0..3 {
                assert!((set.sh[i * stride + c] * SH_C0 - mean[c]).abs() < 1e-3);
            }
            assert!(set.sh_of(i)[3..].iter().all(|&x| x == 0.0));
        }
    }
    for c in 0..3 {
        assert!((rep.occluded_mean_color[c] - rep.visible_mean_color[c]).abs() <= 1e-3);
        assert!((rep.visible_mean_color[c] - mean[c]).abs() < 1e-12);
    }
}

#[test]
fn shared_visible_color_propagates_exactly() {
    let (mesh, mut set) = colored_body(12);
    let stride = set.sh_stride();
    for i in 0..set.len() {
        set.sh[i * stride..i * stride + 3].fill(sh_dc_for(0.3));
    }
    let vis: Vec<bool> = (0..set.len()).map(|i| i < 5).collect();
    inpaint_body_color(&mut set, &mesh, &vis, &[], &Default::default(), &InpaintConfig::default()).unwrap();
    for i in 0..set.len() {
        for c in 0..3 {
            assert!((set.sh[i * stride + c] * SH_C0 - 0.3).abs() < 1e-9);
        }
    }
}

#[test]
fn inpaint_needs_a_visible_gaussian_and_matching_flags() {
    let (mesh, mut set) = colored_body(13);
    let none = vec![false; set.len()];
    let err = inpaint_body_color(&mut set, &mesh, &none, &[], &Default::default(), &InpaintConfig::default());
    assert!(matches!(err, Err(Error::NoVisibleBody)));
    let err = inpaint_body_color(&mut set, &mesh, &[true], &[], &Default::default(), &InpaintConfig::default());
    assert!(matches!(err, Err(Error::ShapeMismatch(_))));
}

#[test]
fn all_visible_inpaint_reconstructs_skin() {
    let (mesh, truth) = colored_body(14);
    let stride = truth.sh_stride();
    let mut truth = truth;
    for i in 0..truth.len() {
        truth.sh[i * stride..(i + 1) * stride].fill(0.0);
        truth.sh[i * stride..i * stride + 3].copy_from_slice(&[sh_dc_for(0.8), sh_dc_for(0.55), sh_dc_for(0.45)]);
    }
    let cams: Vec<Camera> = avatar_splat::procedural::orbit_cameras(4, Vector3::zeros(), 3.0, 0.5, 40.0, 32, 32);
    let raster = Default::default();
    let views: Vec<View> = cams.iter().map(|c| render_view(&truth, &mesh, c, &raster).unwrap()).collect();
    let mut set = build_body_gaussians(&mesh, 1, 1).unwrap();
    let vis = body_visibility(&set, &mesh, &views, &raster).unwrap();
    assert!(vis.iter().all(|&v| v), "every face of a sphere is seen from 4 orbit views");
    let rep = inpaint_body_color(&mut set, &mesh, &vis, &views, &raster, &InpaintConfig::default()).unwrap();
    assert_eq!(rep.occluded, 0);
    assert!(rep.final_skin_mse < 1e-4, "{}", rep.final_skin_mse);
}

// ---------------------------------------------------------------- fit

fn splat_target() -> (SkinnedMesh, GaussianSet, View) {
    let mesh = plane();
    let mut set = GaussianSet::new(0);
    let mut g = asset(0, [0.2, -0.1, 0.3], label_identity(UPPER_CLOTHES), 3);
    g.log_scale = Vector3::new(0.25f64.ln(), 0.2f64.ln(), 0.1f64.ln());
    g.opacity_logit = logit(0.9);
    g.sh = vec![sh_dc_for(0.8), sh_dc_for(0.3), sh_dc_for(0.2)];
    set.push(&g).unwrap();
    let cam = Camera::look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y(), 40.0, 32, 32);
    let view = render_view(&set, &mesh, &cam, &Default::default()).unwrap();
    (mesh, set, view)
}

fn short_fit(iters: usize) -> FitConfig {
    let mut cfg = FitConfig::default();
    cfg.schedule.total_iters = iters;
    cfg.schedule.densify_start = iters;
    cfg.schedule.densify_stop = iters;
    cfg.schedule.prune_interval = iters.max(1);
    cfg.schedule.densify_interval = iters.max(1);
    cfg
}

#[test]
fn zero_iterations_change_nothing() {
    let (mesh, set, view) = splat_target();
    let mut fitted = set.clone();
    let rep = fit(&mut fitted, &mesh, &[view], &short_fit(0), 1, &mut |_, _| Ok(())).unwrap();
    assert!(rep.log.is_empty());
    assert_eq!(fitted, set);
}

#[test]
fn fit_recovers_a_single_splat() {
    let (mesh, truth, view) = splat_target();
    let mut set = truth.clone();
    set.sh = vec![sh_dc_for(0.5); 3];
    set.opacity_logit[0] = 0.0;
    set.offsets[0][0] += 0.03;
    set.offsets[0][1] -= 0.02;
    set.log_scale[0][0] += 0.1;
    let mut cfg = short_fit(200);
    cfg.schedule.lr.offsets = 1e-3;
    let mut lines = 0;
    let rep = fit(&mut set, &mesh, &[view.clone()], &cfg, 3, &mut |e, _| {
        lines += 1;
        assert!(e.to_string().starts_with(&format!("iter={} ", e.iteration)));
        Ok(())
    })
    .unwrap();
    assert_eq!(lines, 200);
    assert_eq!(rep.log.len(), 200);
    let out = render_view(&set, &mesh, &view.camera, &Default::default()).unwrap();
    let l1 = out.image.data.iter().zip(&view.image.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / out.image.data.len() as f64;
    assert!(l1 < 1e-2, "L1 {l1}");
}

#[test]
fn fit_rejects_unfrozen_body_and_no_views() {
    let (mesh, mut set, view) = splat_target();
    let err = fit(&mut set.clone(), &mesh, &[], &short_fit(1), 0, &mut |_, _| Ok(()));
    assert!(err.is_err());
    set.layer[0] = Layer::Body;
    let err = fit(&mut set, &mesh, &[view], &short_fit(1), 0, &mut |_, _| Ok(()));
    assert!(err.is_err());
}

#[test]
fn schedule_validation() {
    assert!(Schedule::default().validate().is_ok());
    let mut s = Schedule::default();
    s.prune_interval = 0;
    assert!(s.validate().is_err());
    let mut s = Schedule::default();
    s.densify_start = 2600;
    assert!(s.validate().is_err());
    let mut s = Schedule::default();
    s.densify_stop = 4000;
    assert!(s.validate().is_err());
    let mut s = Schedule::default();
    s.lr.sh = 0.0;
    assert!(s.validate().is_err());
}
