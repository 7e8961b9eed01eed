//! Procedural meshes and camera rigs for tests, fixtures and demos.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{sh_coeff_count, Quat};
use crate::deform::{AuxView, FrameSample};
use crate::error::Result;
use crate::gradients::{render_reposed, GradProblem, RefFrame, View};
use crate::lifecycle::build_body_gaussians;
use crate::image::{MaskImage, RgbImage};
use crate::losses::LossWeights;
use crate::rasterizer::RasterConfig;
use crate::scene::{
    label_identity, logit, sh_dc_for, Camera, Gaussian, GaussianSet, Joint, Layer, SkinnedMesh,
    TriangleEmbedding, IDENTITY_DIM, PANTS, SKIN, SKIRT, UPPER_CLOTHES,
};
use crate::skinning::{repose_all, Pose, PosedMesh};

type V = Vector3<f64>;

/// Axis-aligned unit cube `[0, 1]³` with outward winding.
pub fn unit_cube() -> (Vec<V>, Vec<[u32; 3]>) {
    let vertices = (0..8)
        .map(|i| V::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
        .collect();
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    (vertices, faces)
}

/// Unit-radius icosphere after `level` rounds of 4:1 subdivision.
pub fn icosphere(level: u32) -> (Vec<V>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<V> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| V::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, vs: &mut Vec<V>| -> u32 {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vs.push(((vs[a as usize] + vs[b as usize]) / 2.0).normalize());
                vs.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (vertices, faces)
}

/// Shape of a capped cylinder standing on the `y = 0` plane.
#[derive(Clone, Copy, Debug)]
pub struct CylinderSpec {
    pub radius: f64,
    pub height: f64,
    pub segments: u32,
    pub rings: u32,
}

impl Default for CylinderSpec {
    fn default() -> Self {
        Self {
            radius: 0.35,
            height: 1.6,
            segments: 24,
            rings: 16,
        }
    }
}

/// Closed cylinder along `+y` skinned to two joints: `lower` at the base and
/// `upper` at mid-height, blended smoothly across the middle fifth. The top
/// cap is tagged as the `"face"` region.
pub fn two_bone_cylinder(spec: &CylinderSpec) -> SkinnedMesh {
    let CylinderSpec {
        radius,
        height,
        segments,
        rings,
    } = *spec;
    let mut vertices = Vec::new();
    for r in 0..=rings {
        let y = height * r as f64 / rings as f64;
        for s in 0..segments {
            let a = 2.0 * PI * s as f64 / segments as f64;
            vertices.push(V::new(radius * a.cos(), y, -radius * a.sin()));
        }
    }
    let bottom = vertices.len() as u32;
    vertices.push(V::new(0.0, 0.0, 0.0));
    let top = vertices.len() as u32;
    vertices.push(V::new(0.0, height, 0.0));

    let idx = |r: u32, s: u32| r * segments + (s % segments);
    let mut faces = Vec::new();
    for r in 0..rings {
        for s in 0..segments {
            let (a, b, c, d) = (idx(r, s), idx(r, s + 1), idx(r + 1, s), idx(r + 1, s + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    for s in 0..segments {
        faces.push([bottom, idx(0, s + 1), idx(0, s)]);
    }
    let cap_start = faces.len() as u32;
    for s in 0..segments {
        faces.push([top, idx(rings, s), idx(rings, s + 1)]);
    }
    let cap: Vec<u32> = (cap_start..faces.len() as u32).collect();

    let mid = height / 2.0;
    let band = height / 10.0;
    let skin_weights = vertices
        .iter()
        .map(|v| {
            let t = ((v.y - (mid - band)) / (2.0 * band)).clamp(0.0, 1.0);
            let w = t * t * (3.0 - 2.0 * t);
            if w <= 0.0 {
                vec![(0, 1.0)]
            } else if w >= 1.0 {
                vec![(1, 1.0)]
            } else {
                vec![(0, 1.0 - w), (1, w)]
            }
        })
        .collect();
    let joints = vec![
        Joint {
            name: "lower".into(),
            parent: None,
            bind: Isometry3::identity(),
        },
        Joint {
            name: "upper".into(),
            parent: Some(0),
            bind: Isometry3::from_parts(Translation3::new(0.0, mid, 0.0), Default::default()),
        },
    ];
    let mut face_regions = BTreeMap::new();
    face_regions.insert("face".to_string(), cap);
    SkinnedMesh {
        vertices,
        faces,
        joints,
        skin_weights,
        face_regions,
    }
}

/// `count` cameras evenly spaced on a horizontal circle around `target`,
/// starting in front (`+z`) of it.
pub fn orbit_cameras(
    count: usize,
    target: V,
    distance: f64,
    elevation: f64,
    focal: f64,
    width: u32,
    height: u32,
) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / count as f64;
            let eye = target + V::new(distance * a.sin(), elevation, distance * a.cos());
            Camera::look_at(eye, target, V::y(), focal, width, height)
        })
        .collect()
}

/// Ground-truth colors of the layered-avatar fixture.
pub const SKIN_RGB: [f64; 3] = [0.88, 0.68, 0.55];
pub const UPPER_RGB: [f64; 3] = [0.18, 0.32, 0.72];
pub const PANTS_RGB: [f64; 3] = [0.35, 0.27, 0.2];

/// Synthetic clothed body with known layers, plus rendered supervision.
#[derive(Clone, Debug)]
pub struct AvatarFixture {
    pub mesh: SkinnedMesh,
    pub truth: GaussianSet,
    pub views: Vec<View>,
    pub held_out: View,
    pub raster: RasterConfig,
}

/// Renders `set` in the canonical pose and labels each pixel by the argmax
/// of its identity channels.
pub fn render_view(set: &GaussianSet, mesh: &SkinnedMesh, camera: &Camera, raster: &RasterConfig) -> Result<View> {
    let posed = PosedMesh::canonical(mesh)?;
    let reposed = repose_all(set, &posed)?;
    let (out, _) = render_reposed(set, &reposed, None, camera, raster);
    let image = RgbImage::from_data(out.width, out.height, out.color.clone())?;
    let mask = MaskImage::from_labels(out.width, out.height, out.labels().iter().map(|&l| l as u8).collect())?;
    Ok(View {
        camera: camera.clone(),
        image,
        mask,
    })
}

/// Cameras alternating between two heights on a circle around the body.
pub fn fixture_cameras(count: usize, size: u32, phase: f64) -> Vec<Camera> {
    let target = V::new(0.0, 0.8, 0.0);
    (0..count)
        .map(|i| {
            let a = 2.0 * PI * (i as f64 + phase) / count as f64;
            let lift = if i % 2 == 0 { 0.9 } else { -0.2 };
            let eye = target + V::new(3.0 * a.sin(), lift, 3.0 * a.cos());
            Camera::look_at(eye, target, V::y(), 1.55 * size as f64, size, size)
        })
        .collect()
}

/// A two-bone cylinder body in skin color wearing an upper-clothes band and
/// a pants band that float just above the surface. Views are rendered from
/// `view_count` cameras around it, the held-out view from between two of
/// them at a different height.
pub fn layered_avatar(view_count: usize, size: u32, sh_degree: usize) -> Result<AvatarFixture> {
    let spec = CylinderSpec::default();
    let mesh = two_bone_cylinder(&spec);
    let mut truth = build_body_gaussians(&mesh, 4, sh_degree)?;
    let stride = truth.sh_stride();
    for i in 0..truth.len() {
        let sh = truth.sh_of_mut(i);
        sh.fill(0.0);
        for c in 0..3 {
            sh[c] = sh_dc_for(SKIN_RGB[c]);
        }
    }
    let ring_of = |f: usize| f / (2 * spec.segments as usize);
    let side = (2 * spec.segments * spec.rings) as usize;
    for f in 0..side {
        let (label, rgb) = match ring_of(f) {
            10..=12 => (UPPER_CLOTHES, UPPER_RGB),
            2..=5 => (PANTS, PANTS_RGB),
            _ => continue,
        };
        let frame = mesh.frame(f as u32)?;
        let tri = mesh.triangle(f);
        let perimeter: f64 = (0..3).map(|k| (tri[(k + 1) % 3] - tri[k]).norm()).sum();
        let area = 0.5 * (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm();
        let r = 1.3 * 2.0 * area / perimeter;
        let mut sh = vec![0.0; stride];
        for c in 0..3 {
            sh[c] = sh_dc_for(rgb[c]);
        }
        for site in [[1.0 / 3.0; 3], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]] {
            let p = tri[0] * site[0] + tri[1] * site[1] + tri[2] * site[2];
            let local = frame.to_local(&p);
            truth.push(&Gaussian {
                embedding: TriangleEmbedding {
                    face_index: f as u32,
                    sigma: local.x,
                    beta: local.y,
                    gamma: 0.025,
                },
                rotation: Quat::from_matrix(&frame.basis()),
                log_scale: Vector3::new(r.ln(), r.ln(), (0.3 * r).ln()),
                opacity_logit: logit(0.99),
                sh: sh.clone(),
                identity: label_identity(label),
                layer: Layer::Asset,
                frozen: false,
            })?;
        }
    }
    let raster = RasterConfig::default();
    let views = fixture_cameras(view_count, size, 0.0)
        .iter()
        .map(|c| render_view(&truth, &mesh, c, &raster))
        .collect::<Result<Vec<_>>>()?;
    let held = &fixture_cameras(view_count, size, 0.5)[1];
    let held_out = render_view(&truth, &mesh, held, &raster)?;
    Ok(AvatarFixture {
        mesh,
        truth,
        views,
        held_out,
        raster,
    })
}

/// A skirt band that bobs along `+y` as `amplitude · sin(2πt)` over a
/// static body, with known per-frame displacement.
#[derive(Clone, Debug)]
pub struct OscillationFixture {
    pub mesh: SkinnedMesh,
    /// The band at rest.
    pub set: GaussianSet,
    pub band: Vec<usize>,
    pub frames: Vec<FrameSample>,
    pub aux: Vec<AuxView>,
    pub displacement: Vec<V>,
    pub amplitude: f64,
}

pub fn oscillating_band(frame_count: usize, size: u32, amplitude: f64) -> Result<OscillationFixture> {
    let spec = CylinderSpec::default();
    let mesh = two_bone_cylinder(&spec);
    let mut set = build_body_gaussians(&mesh, 4, 0)?;
    for i in 0..set.len() {
        set.sh_of_mut(i).copy_from_slice(&SKIN_RGB.map(sh_dc_for));
    }
    let first_band = set.len();
    let per_ring = 2 * spec.segments as usize;
    for f in 4 * per_ring..6 * per_ring {
        let frame = mesh.frame(f as u32)?;
        let tri = mesh.triangle(f);
        let perimeter: f64 = (0..3).map(|k| (tri[(k + 1) % 3] - tri[k]).norm()).sum();
        let area = 0.5 * (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm();
        let r = 1.3 * 2.0 * area / perimeter;
        for site in [[1.0 / 3.0; 3], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]] {
            let local = frame.to_local(&(tri[0] * site[0] + tri[1] * site[1] + tri[2] * site[2]));
            set.push(&Gaussian {
                embedding: TriangleEmbedding {
                    face_index: f as u32,
                    sigma: local.x,
                    beta: local.y,
                    gamma: 0.03,
                },
                rotation: Quat::from_matrix(&frame.basis()),
                log_scale: Vector3::new(r.ln(), r.ln(), (0.3 * r).ln()),
                opacity_logit: logit(0.99),
                sh: UPPER_RGB.map(sh_dc_for).to_vec(),
                identity: label_identity(SKIRT),
                layer: Layer::Asset,
                frozen: false,
            })?;
        }
    }
    let band: Vec<usize> = (first_band..set.len()).collect();

    let target = V::new(0.0, 0.5, 0.0);
    let cam_at = |azimuth: f64| {
        let eye = target + V::new(2.0 * azimuth.sin(), 0.3, 2.0 * azimuth.cos());
        Camera::look_at(eye, target, V::y(), 1.6 * size as f64, size, size)
    };
    let raster = RasterConfig::default();
    let posed = PosedMesh::canonical(&mesh)?;
    let rest = repose_all(&set, &posed)?;
    let mut frames = Vec::new();
    let mut aux = Vec::new();
    let mut displacement = Vec::new();
    for f in 0..frame_count {
        let t = f as f64 / (frame_count.max(2) - 1) as f64;
        let d = V::new(0.0, amplitude * (2.0 * PI * t).sin(), 0.0);
        let mut moved = rest.clone();
        for &i in &band {
            moved[i].position += d;
        }
        let shot = |cam: &Camera| {
            let out = render_reposed(&set, &moved, None, cam, &raster).0;
            RgbImage::from_data(out.width, out.height, out.color)
        };
        let camera = cam_at(0.0);
        frames.push(FrameSample {
            t,
            pose: Pose::identity(mesh.joints.len()),
            image: shot(&camera)?,
            camera,
        });
        for k in 1..4 {
            let camera = cam_at(PI * k as f64 / 2.0);
            aux.push(AuxView {
                frame: f,
                image: shot(&camera)?,
                camera,
            });
        }
        displacement.push(d);
    }
    Ok(OscillationFixture {
        mesh,
        set,
        band,
        frames,
        aux,
        displacement,
        amplitude,
    })
}

/// Small random scene with every loss active, used to check gradients.
///
/// A coarse two-bone cylinder carries 4 frozen body Gaussians and 12 asset
/// Gaussians, a few of them sunk below the surface and a few stretched past
/// the default anisotropy threshold. Two supervised views and two posed
/// reference frames have random targets.
pub fn gradcheck_problem(seed: u64) -> GradProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = two_bone_cylinder(&CylinderSpec {
        radius: 0.35,
        height: 1.6,
        segments: 8,
        rings: 4,
    });
    let side_faces = 8 * 4 * 2;
    let degree = 2;
    let mut set = GaussianSet::new(degree);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    for k in 0..16 {
        let body = k < 4;
        let face = rng.random_range(0..side_faces) as u32;
        let gamma = if body {
            0.0
        } else if k < 8 {
            -rng.random_range(0.02..0.06)
        } else {
            rng.random_range(0.02..0.1)
        };
        let mut log_scale = [0.0; 3].map(|_| rng.random_range(0.06f64..0.16).ln());
        if k == 10 || k == 11 {
            log_scale[k % 3] += 5f64.ln();
        }
        let mut sh = vec![0.0; sh_coeff_count(degree)];
        for (c, v) in sh.iter_mut().enumerate() {
            *v = if c < 3 {
                rng.random_range(0.6..2.6)
            } else {
                0.2 * normal(&mut rng)
            };
        }
        let identity = if body {
            label_identity(SKIN)
        } else {
            [0.0; IDENTITY_DIM].map(|_| normal(&mut rng))
        };
        let q = Quat::new(
            1.0 + 0.3 * normal(&mut rng),
            0.3 * normal(&mut rng),
            0.3 * normal(&mut rng),
            0.3 * normal(&mut rng),
        );
        set.push(&Gaussian {
            embedding: TriangleEmbedding {
                face_index: face,
                sigma: rng.random_range(-0.05..0.05),
                beta: rng.random_range(-0.05..0.05),
                gamma,
            },
            rotation: q,
            log_scale: Vector3::from(log_scale),
            opacity_logit: rng.random_range(-1.0..1.5),
            sh,
            identity,
            layer: if body { Layer::Body } else { Layer::Asset },
            frozen: body,
        })
        .expect("stride matches");
    }

    let (w, h) = (32, 32);
    let target = V::new(0.0, 0.8, 0.0);
    let random_image = |rng: &mut ChaCha8Rng| {
        let data = (0..3 * w * h).map(|_| rng.random_range(0.2..0.8)).collect();
        RgbImage::from_data(w, h, data).expect("sized")
    };
    let cams = orbit_cameras(3, target, 2.6, 0.3, 40.0, w as u32, h as u32);
    let views = cams[..2]
        .iter()
        .map(|c| View {
            camera: c.clone(),
            image: random_image(&mut rng),
            mask: MaskImage::from_labels(
                w,
                h,
                (0..w * h).map(|_| rng.random_range(0..IDENTITY_DIM as u8)).collect(),
            )
            .expect("labels in range"),
        })
        .collect();
    let bend = Isometry3::from_parts(
        Translation3::identity(),
        UnitQuaternion::from_axis_angle(&V::z_axis(), 0.35),
    );
    let poses = [
        Pose::from_local(&mesh, &[Isometry3::identity(), bend], Isometry3::identity()),
        Pose::from_local(
            &mesh,
            &[Isometry3::identity(), bend.inverse()],
            Isometry3::translation(0.05, 0.0, -0.1),
        ),
    ];
    let frames = poses
        .into_iter()
        .zip([&cams[0], &cams[2]])
        .map(|(p, c)| RefFrame {
            pose: p.expect("two joints"),
            camera: c.clone(),
            image: random_image(&mut rng),
        })
        .collect();
    GradProblem {
        set,
        mesh,
        views,
        frames,
        weights: LossWeights {
            knn_k: 3,
            knn_m: 8,
            ..Default::default()
        },
        raster: RasterConfig {
            background: [0.5; 3],
            ..Default::default()
        },
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::triangle_area;

    fn signed_volume(v: &[V], f: &[[u32; 3]]) -> f64 {
        f.iter()
            .map(|t| v[t[0] as usize].dot(&v[t[1] as usize].cross(&v[t[2] as usize])) / 6.0)
            .sum()
    }

    #[test]
    fn closed_meshes_have_outward_winding() {
        let (v, f) = unit_cube();
        assert!((signed_volume(&v, &f) - 1.0).abs() < 1e-12);
        let (v, f) = icosphere(2);
        assert_eq!(f.len(), 320);
        let vol = signed_volume(&v, &f);
        assert!(vol > 0.9 * 4.0 / 3.0 * PI && vol < 4.0 / 3.0 * PI);
        let m = two_bone_cylinder(&CylinderSpec::default());
        m.validate().unwrap();
        let vol = signed_volume(&m.vertices, &m.faces);
        let exact = PI * 0.35 * 0.35 * 1.6;
        assert!(vol > 0.95 * exact && vol < exact);
        assert!(m.faces.iter().enumerate().all(|(i, _)| {
            let [a, b, c] = m.triangle(i);
            triangle_area(&a, &b, &c) > 1e-6
        }));
    }

    #[test]
    fn orbit_faces_target() {
        let cams = orbit_cameras(4, V::new(0.0, 0.8, 0.0), 3.0, 0.0, 100.0, 64, 64);
        for c in &cams {
            let (u, v, z) = c.project_point(&V::new(0.0, 0.8, 0.0)).unwrap();
            assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9 && (z - 3.0).abs() < 1e-9);
            // World up is image up.
            let (_, v2, _) = c.project_point(&V::new(0.0, 1.0, 0.0)).unwrap();
            assert!(v2 < v);
        }
    }
}
