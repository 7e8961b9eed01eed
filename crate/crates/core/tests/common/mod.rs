//! Slow, direct reference implementations used as test oracles.

#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix3, Vector3};

/// A world-space Gaussian as the oracle sees it.
#[derive(Clone, Debug)]
pub struct OracleGaussian {
    pub position: Vector3<f64>,
    /// `[w, x, y, z]`, unit length.
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
    /// Degree 0 or 1 coefficients, `3` per basis function.
    pub sh: Vec<f64>,
    pub opacity_logit: f64,
    pub identity: Vec<f64>,
}

pub struct OracleCamera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

pub struct OracleImage {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub identity: Vec<f64>,
    pub depth: Vec<f64>,
}

fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

struct Footprint {
    mean: [f64; 2],
    inv: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: [f64; 3],
    index: usize,
}

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;

/// Every pixel composites every surviving Gaussian front to back; no tiles,
/// no bounding boxes. Culling and thresholds follow the renderer's
/// documented rules: near plane, opacity below 1/255, a non-positive 2D
/// determinant, a 3-sigma box fully off screen, per-pixel alpha clamped to
/// 0.99 and skipped below 1/255, and a stop before transmittance drops
/// under 1e-4. Low-pass of 0.3 px² on the projected covariance.
pub fn brute_force_render(
    gaussians: &[OracleGaussian],
    cam: &OracleCamera,
    background: [f64; 3],
    background_logit: f64,
    identity_dim: usize,
) -> OracleImage {
    let center = -(cam.rotation.transpose() * cam.translation);
    let mut fps = Vec::new();
    for (index, g) in gaussians.iter().enumerate() {
        let t = cam.rotation * g.position + cam.translation;
        if t.z <= cam.near {
            continue;
        }
        let opacity = 1.0 / (1.0 + (-g.opacity_logit).exp());
        if opacity < 1.0 / 255.0 {
            continue;
        }
        let r = rotation_matrix(g.rotation);
        let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
        let sigma = cam.rotation * r * s2 * r.transpose() * cam.rotation.transpose();
        // Perspective Jacobian, 2x3, written out.
        let j = nalgebra::Matrix2x3::new(
            cam.fx / t.z,
            0.0,
            -cam.fx * t.x / (t.z * t.z),
            0.0,
            cam.fy / t.z,
            -cam.fy * t.y / (t.z * t.z),
        );
        let cov = j * sigma * j.transpose() + Matrix2::identity() * 0.3;
        if cov.determinant() <= 0.0 {
            continue;
        }
        let mean = [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
        let (sx, sy) = (3.0 * cov[(0, 0)].sqrt(), 3.0 * cov[(1, 1)].sqrt());
        if mean[0] + sx < 0.0 || mean[0] - sx > cam.width as f64 || mean[1] + sy < 0.0 || mean[1] - sy > cam.height as f64 {
            continue;
        }
        let d = (g.position - center).normalize();
        let mut basis = vec![C0];
        if g.sh.len() >= 12 {
            basis.extend([-C1 * d.y, C1 * d.z, -C1 * d.x]);
        }
        let mut color = [0.0; 3];
        for (k, b) in basis.iter().enumerate() {
            for (c, out) in color.iter_mut().enumerate() {
                *out += b * g.sh[3 * k + c];
            }
        }
        fps.push(Footprint {
            mean,
            inv: cov.try_inverse().unwrap(),
            depth: t.z,
            opacity,
            color,
            index,
        });
    }
    fps.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let n = cam.width * cam.height;
    let mut img = OracleImage {
        color: vec![0.0; 3 * n],
        alpha: vec![0.0; n],
        identity: vec![0.0; identity_dim * n],
        depth: vec![0.0; n],
    };
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = y * cam.width + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            for f in &fps {
                let d = nalgebra::Vector2::new(px - f.mean[0], py - f.mean[1]);
                let q = (d.transpose() * f.inv * d)[(0, 0)];
                let a = (f.opacity * (-0.5 * q).exp()).min(0.99);
                if a < 1.0 / 255.0 {
                    continue;
                }
                if trans * (1.0 - a) < 1e-4 {
                    break;
                }
                let w = a * trans;
                for c in 0..3 {
                    img.color[3 * p + c] += w * f.color[c];
                }
                for k in 0..identity_dim {
                    img.identity[identity_dim * p + k] += w * gaussians[f.index].identity[k];
                }
                img.depth[p] += w * f.depth;
                trans *= 1.0 - a;
            }
            for c in 0..3 {
                img.color[3 * p + c] += trans * background[c];
            }
            img.identity[identity_dim * p] += trans * background_logit;
            img.alpha[p] = 1.0 - trans;
        }
    }
    img
}

/// Mean SSIM with an 11-tap Gaussian window (sigma 1.5), zero padding,
/// computed by direct 2D summation per pixel and channel. Interleaved RGB.
pub fn direct_ssim(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let r = 5isize;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for ch in 0..3 {
        for py in 0..h as isize {
            for px in 0..w as isize {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qx, qy) = (px + dx, py + dy);
                        if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                            continue;
                        }
                        let k = g[(dx + r) as usize] * g[(dy + r) as usize] / norm;
                        let i = 3 * (qy as usize * w + qx as usize) + ch;
                        mx += k * x[i];
                        my += k * y[i];
                        mxx += k * x[i] * x[i];
                        myy += k * y[i] * y[i];
                        mxy += k * x[i] * y[i];
                    }
                }
                let (vx, vy, cxy) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (3 * w * h) as f64
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

use avatar_splat::geometry::Quat;
use avatar_splat::rasterizer::{project, rasterize, Appearance, RasterConfig, RenderOutput};
use avatar_splat::scene::{Camera, Identity, IDENTITY_DIM};
use avatar_splat::skinning::ReposedGaussian;
use rand::Rng;

pub struct RandomScene {
    pub gaussians: Vec<OracleGaussian>,
    pub camera: Camera,
    pub sh_degree: usize,
}

/// Up to `max_n` Gaussians in a unit ball seen from a random direction.
pub fn random_scene(rng: &mut impl Rng, max_n: usize, size: u32) -> RandomScene {
    let n = rng.random_range(1..=max_n);
    let sh_degree = rng.random_range(0..=1);
    let gaussians = (0..n)
        .map(|_| {
            let q = [0; 4].map(|_| rng.random_range(-1.0..1.0f64));
            let len = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            OracleGaussian {
                position: Vector3::from([0; 3].map(|_| rng.random_range(-0.8..0.8))),
                rotation: q.map(|v| v / len),
                scale: Vector3::from([0; 3].map(|_| rng.random_range(-4.0..-1.2f64).exp())),
                sh: (0..3 * (1 + 3 * sh_degree)).map(|_| rng.random_range(-1.0..2.5)).collect(),
                opacity_logit: rng.random_range(-3.0..5.0),
                identity: (0..IDENTITY_DIM).map(|_| rng.random_range(-2.0..2.0)).collect(),
            }
        })
        .collect();
    let dir = Vector3::from([0; 3].map(|_| rng.random_range(-1.0..1.0f64))).normalize();
    let eye = dir * rng.random_range(2.0..4.0);
    let up = if dir.y.abs() > 0.9 { Vector3::x() } else { Vector3::y() };
    let focal = rng.random_range(20.0..45.0);
    let camera = Camera::look_at(eye, Vector3::zeros(), up, focal, size, size);
    RandomScene {
        gaussians,
        camera,
        sh_degree,
    }
}

pub fn oracle_camera(c: &Camera) -> OracleCamera {
    OracleCamera {
        rotation: c.rotation,
        translation: c.translation,
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        width: c.width as usize,
        height: c.height as usize,
        near: c.near,
    }
}

/// The library's tiled path on the same inputs.
pub fn tiled_render(scene: &RandomScene, cfg: &RasterConfig) -> RenderOutput {
    let identities: Vec<Identity> = scene
        .gaussians
        .iter()
        .map(|g| std::array::from_fn(|k| g.identity[k]))
        .collect();
    let splats: Vec<_> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let placed = ReposedGaussian {
                position: g.position,
                rotation: Quat::from_array(g.rotation),
                scale: g.scale,
            };
            let app = Appearance {
                sh_degree: scene.sh_degree,
                sh: &g.sh,
                opacity_logit: g.opacity_logit,
                identity: &identities[i],
            };
            project(&placed, &app, i as u32, &scene.camera)
        })
        .collect();
    rasterize(&splats, &scene.camera, cfg).0
}

/// Largest absolute difference over all four channels.
pub fn max_channel_diff(a: &RenderOutput, b: &OracleImage) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    d(&a.color, &b.color)
        .max(d(&a.alpha, &b.alpha))
        .max(d(&a.identity, &b.identity))
        .max(d(&a.depth, &b.depth))
}

/// Inside test by ray parity: counts crossings of a fixed skew ray with the
/// closed mesh. Independent of any distance field.
pub fn inside_closed_mesh(p: &Vector3<f64>, vertices: &[Vector3<f64>], faces: &[[u32; 3]]) -> bool {
    let dir = Vector3::new(0.5377, 0.8231, 0.1812).normalize();
    let mut hits = 0;
    for f in faces {
        let [a, b, c] = f.map(|i| vertices[i as usize]);
        let (e1, e2) = (b - a, c - a);
        let h = dir.cross(&e2);
        let det = e1.dot(&h);
        if det.abs() < 1e-14 {
            continue;
        }
        let s = p - a;
        let u = s.dot(&h) / det;
        if !(0.0..=1.0).contains(&u) {
            continue;
        }
        let q = s.cross(&e1);
        let v = dir.dot(&q) / det;
        if v < 0.0 || u + v > 1.0 {
            continue;
        }
        if e2.dot(&q) / det > 0.0 {
            hits += 1;
        }
    }
    hits % 2 == 1
}
