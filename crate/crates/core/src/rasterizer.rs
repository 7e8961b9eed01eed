//! Tile-based forward splatting and its adjoint.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sh_basis, sh_basis_count, Quat};
use crate::scene::{sigmoid, Camera, Identity, BACKGROUND, IDENTITY_DIM, LABEL_LOGIT};
use crate::skinning::{ReposedGaussian, ReposedGrad};

pub const TILE_SIZE: usize = 16;
/// Added to the diagonal of every projected covariance, in px².
pub const LOW_PASS: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Traversal stops once transmittance would fall below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub background: [f64; 3],
    /// Logit placed on the background channel of the identity image where
    /// nothing is drawn.
    pub background_logit: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            background_logit: LABEL_LOGIT,
        }
    }
}

/// Per-Gaussian inputs to projection other than its world placement.
#[derive(Clone, Copy, Debug)]
pub struct Appearance<'a> {
    pub sh_degree: usize,
    pub sh: &'a [f64],
    pub opacity_logit: f64,
    pub identity: &'a Identity,
}

/// A Gaussian projected to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// `[a, b, c]` of the symmetric covariance `[[a, b], [b, c]]`, px².
    pub cov: [f64; 3],
    /// Same layout for the inverse covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub identity: Identity,
    pub source: u32,
    /// Half-widths of the box outside which the splat never reaches
    /// `MIN_ALPHA`.
    pub extent: [f64; 2],
}

impl Splat2D {
    /// Unclamped pixel influence `α · exp(power)` and the exponent.
    #[inline]
    pub fn falloff(&self, px: f64, py: f64) -> (f64, f64) {
        let dx = px - self.mean.x;
        let dy = py - self.mean.y;
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        (power, self.opacity * power.exp())
    }
}

struct Projected {
    splat: Splat2D,
    cam_pos: Vector3<f64>,
    cov_cam: Matrix3<f64>,
    jac: Matrix2x3<f64>,
    view_dir: Vector3<f64>,
    view_dist: f64,
}

fn project_inner(
    g: &ReposedGaussian,
    app: &Appearance,
    source: u32,
    cam: &Camera,
) -> Option<Projected> {
    let t = cam.to_camera(&g.position);
    if !(t.z > cam.near) {
        return None;
    }
    let opacity = sigmoid(app.opacity_logit);
    if opacity < MIN_ALPHA {
        return None;
    }
    let m = g.rotation.to_matrix() * Matrix3::from_diagonal(&g.scale);
    let cov_world = m * m.transpose();
    let cov_cam = cam.rotation * cov_world * cam.rotation.transpose();
    let (x, y, z) = (t.x, t.y, t.z);
    let jac = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let cov2 = jac * cov_cam * jac.transpose();
    let a = cov2[(0, 0)] + LOW_PASS;
    let b = 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]);
    let c = cov2[(1, 1)] + LOW_PASS;
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mean = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);

    let (w, h) = (cam.width as f64, cam.height as f64);
    let (sx, sy) = (3.0 * a.sqrt(), 3.0 * c.sqrt());
    if mean.x + sx < 0.0 || mean.x - sx > w || mean.y + sy < 0.0 || mean.y - sy > h {
        return None;
    }

    let m2 = 2.0 * (opacity / MIN_ALPHA).ln();
    let extent = [(m2 * a).sqrt(), (m2 * c).sqrt()];

    let offset = g.position - cam.center();
    let view_dist = offset.norm();
    let view_dir = if view_dist > 0.0 {
        offset / view_dist
    } else {
        Vector3::z()
    };
    let mut basis = [0.0; 16];
    sh_basis(app.sh_degree, &view_dir, &mut basis, None);
    let mut color = [0.0; 3];
    for (k, bk) in basis.iter().take(sh_basis_count(app.sh_degree)).enumerate() {
        for (ch, out) in color.iter_mut().enumerate() {
            *out += app.sh[k * 3 + ch] * bk;
        }
    }

    Some(Projected {
        splat: Splat2D {
            mean,
            cov: [a, b, c],
            conic: [c / det, -b / det, a / det],
            depth: z,
            color,
            opacity,
            identity: *app.identity,
            source,
            extent,
        },
        cam_pos: t,
        cov_cam,
        jac,
        view_dir,
        view_dist,
    })
}

/// Projects one Gaussian, or returns `None` when it is culled.
pub fn project(
    g: &ReposedGaussian,
    app: &Appearance,
    source: u32,
    cam: &Camera,
) -> Option<Splat2D> {
    project_inner(g, app, source, cam).map(|p| p.splat)
}

/// Gradient of a scalar with respect to one [`Splat2D`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrad {
    pub mean: [f64; 2],
    /// The off-diagonal entry is a single parameter.
    pub conic: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    pub identity: Identity,
    pub depth: f64,
}

impl Default for SplatGrad {
    fn default() -> Self {
        Self {
            mean: [0.0; 2],
            conic: [0.0; 3],
            color: [0.0; 3],
            opacity: 0.0,
            identity: [0.0; IDENTITY_DIM],
            depth: 0.0,
        }
    }
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        for k in 0..IDENTITY_DIM {
            self.identity[k] += o.identity[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }

    pub fn is_zero(&self) -> bool {
        *self == SplatGrad::default()
    }
}

/// Backward pass of [`project`] for a splat that was not culled.
///
/// Returns the world placement gradient, `dL/d(opacity logit)` and the
/// identity gradient; SH gradients are added into `d_sh`.
pub fn project_vjp(
    g: &ReposedGaussian,
    app: &Appearance,
    cam: &Camera,
    grad: &SplatGrad,
    d_sh: &mut [f64],
) -> Result<(ReposedGrad, f64, Identity)> {
    let p = project_inner(g, app, 0, cam).ok_or_else(|| {
        Error::ShapeMismatch("gradient supplied for a culled splat".into())
    })?;
    let s = &p.splat;
    let [a, b, c] = s.cov;
    let det = a * c - b * b;
    let d2 = det * det;
    let [ga, gb, gc] = grad.conic;
    let d_a = -c * c / d2 * ga + b * c / d2 * gb - b * b / d2 * gc;
    let d_b = 2.0 * b * c / d2 * ga - (a * c + b * b) / d2 * gb + 2.0 * a * b / d2 * gc;
    let d_c = -b * b / d2 * ga + a * b / d2 * gb - a * a / d2 * gc;
    let g2 = nalgebra::Matrix2::new(d_a, 0.5 * d_b, 0.5 * d_b, d_c);

    let jac = p.jac;
    let d_cov_cam = jac.transpose() * g2 * jac;
    let d_jac = 2.0 * g2 * jac * p.cov_cam;

    let (x, y, z) = (p.cam_pos.x, p.cam_pos.y, p.cam_pos.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dt = Vector3::zeros();
    dt.x += d_jac[(0, 2)] * (-fx / z2);
    dt.y += d_jac[(1, 2)] * (-fy / z2);
    dt.z += d_jac[(0, 0)] * (-fx / z2)
        + d_jac[(0, 2)] * (2.0 * fx * x / z3)
        + d_jac[(1, 1)] * (-fy / z2)
        + d_jac[(1, 2)] * (2.0 * fy * y / z3);
    let [gmx, gmy] = grad.mean;
    dt.x += gmx * fx / z;
    dt.y += gmy * fy / z;
    dt.z += -gmx * fx * x / z2 - gmy * fy * y / z2 + grad.depth;

    let mut d_pos = cam.rotation.transpose() * dt;

    // Color through the SH basis and the view direction.
    let nb = sh_basis_count(app.sh_degree);
    let mut basis = [0.0; 16];
    let mut dbasis = [[0.0; 3]; 16];
    sh_basis(app.sh_degree, &p.view_dir, &mut basis, Some(&mut dbasis));
    let mut d_dir = Vector3::zeros();
    for k in 0..nb {
        let mut gk = 0.0;
        for ch in 0..3 {
            d_sh[k * 3 + ch] += grad.color[ch] * basis[k];
            gk += grad.color[ch] * app.sh[k * 3 + ch];
        }
        if k > 0 {
            d_dir += Vector3::from(dbasis[k]) * gk;
        }
    }
    if p.view_dist > 0.0 {
        let d = p.view_dir;
        d_pos += (d_dir - d * d.dot(&d_dir)) / p.view_dist;
    }

    let d_cov_world = cam.rotation.transpose() * d_cov_cam * cam.rotation;
    let r = g.rotation.to_matrix();
    let m = r * Matrix3::from_diagonal(&g.scale);
    let d_m = (d_cov_world + d_cov_world.transpose()) * m;
    let mut d_r = d_m;
    let mut d_scale = Vector3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            d_r[(i, j)] *= g.scale[j];
            d_scale[j] += d_m[(i, j)] * r[(i, j)];
        }
    }
    let d_rot = Quat::to_matrix_vjp(&g.rotation, &d_r);

    let op = s.opacity;
    let d_logit = grad.opacity * op * (1.0 - op);
    Ok((
        ReposedGrad {
            position: d_pos,
            rotation: d_rot,
            scale: d_scale,
        },
        d_logit,
        grad.identity,
    ))
}

/// Rendered channels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `3` values per pixel.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `IDENTITY_DIM` raw logits per pixel.
    pub identity: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderOutput {
    fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            color: vec![0.0; 3 * n],
            alpha: vec![0.0; n],
            identity: vec![0.0; IDENTITY_DIM * n],
            depth: vec![0.0; n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn color_at(&self, x: usize, y: usize) -> [f64; 3] {
        let p = y * self.width + x;
        [self.color[3 * p], self.color[3 * p + 1], self.color[3 * p + 2]]
    }

    pub fn identity_at(&self, x: usize, y: usize) -> &[f64] {
        let p = y * self.width + x;
        &self.identity[IDENTITY_DIM * p..IDENTITY_DIM * (p + 1)]
    }

    /// Argmax of the identity feature per pixel (ties to the lower index).
    pub fn labels(&self) -> Vec<u8> {
        self.identity
            .chunks_exact(IDENTITY_DIM)
            .map(|e| {
                let mut best = 0;
                for k in 1..IDENTITY_DIM {
                    if e[k] > e[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Upstream gradient with the same layout as [`RenderOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrad {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub identity: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        let RenderOutput {
            color,
            alpha,
            identity,
            depth,
            ..
        } = RenderOutput::new(width, height);
        Self {
            width,
            height,
            color,
            alpha,
            identity,
            depth,
        }
    }

    pub fn add_assign(&mut self, other: &RenderGrad) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        for (a, b) in [
            (&mut self.color, &other.color),
            (&mut self.alpha, &other.alpha),
            (&mut self.identity, &other.identity),
            (&mut self.depth, &other.depth),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

/// What the backward pass needs from a forward render.
#[derive(Clone, Debug)]
pub struct RasterRecord {
    width: usize,
    height: usize,
    tiles_x: usize,
    splat_count: usize,
    /// Splat indices per tile, front to back.
    tile_lists: Vec<Vec<u32>>,
    /// Per pixel, how many entries of its tile list were walked.
    ends: Vec<u32>,
}

impl RasterRecord {
    pub fn splat_count(&self) -> usize {
        self.splat_count
    }

    pub fn tile_lists(&self) -> &[Vec<u32>] {
        &self.tile_lists
    }
}

fn tile_range(center: f64, half: f64, size: usize) -> Option<(usize, usize)> {
    // Pixel p is covered when |p + 0.5 - center| <= half; one pixel of slack.
    let lo = (center - half - 0.5).ceil() - 1.0;
    let hi = (center + half - 0.5).floor() + 1.0;
    if hi < 0.0 || lo > size as f64 - 1.0 {
        return None;
    }
    let lo = lo.max(0.0) as usize;
    let hi = (hi.min(size as f64 - 1.0)) as usize;
    Some((lo / TILE_SIZE, hi / TILE_SIZE))
}

fn bin(splats: &[Splat2D], width: usize, height: usize) -> (usize, Vec<Vec<u32>>) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&splats[i as usize], &splats[j as usize]);
        a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source))
    });
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let s = &splats[i as usize];
        let Some((tx0, tx1)) = tile_range(s.mean.x, s.extent[0], width) else {
            continue;
        };
        let Some((ty0, ty1)) = tile_range(s.mean.y, s.extent[1], height) else {
            continue;
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    (tiles_x, lists)
}

struct TileOut {
    color: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    identity: Vec<Identity>,
    depth: Vec<f64>,
    ends: Vec<u32>,
}

fn tile_pixels(tile: usize, tiles_x: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let x0 = (tile % tiles_x) * TILE_SIZE;
    let y0 = (tile / tiles_x) * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(width);
    let y1 = (y0 + TILE_SIZE).min(height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Composites `splats` front to back into an image of the camera's size.
pub fn rasterize(splats: &[Splat2D], cam: &Camera, cfg: &RasterConfig) -> (RenderOutput, RasterRecord) {
    let (width, height) = (cam.width as usize, cam.height as usize);
    let (tiles_x, tile_lists) = bin(splats, width, height);

    let tiles: Vec<TileOut> = tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut out = TileOut {
                color: Vec::new(),
                alpha: Vec::new(),
                identity: Vec::new(),
                depth: Vec::new(),
                ends: Vec::new(),
            };
            for (x, y) in tile_pixels(tile, tiles_x, width, height) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0;
                let mut color = [0.0; 3];
                let mut ident = [0.0; IDENTITY_DIM];
                let mut depth = 0.0;
                let mut end = 0u32;
                for (pos, &i) in list.iter().enumerate() {
                    let s = &splats[i as usize];
                    let (_, raw) = s.falloff(px, py);
                    let a = raw.min(MAX_ALPHA);
                    if a < MIN_ALPHA {
                        continue;
                    }
                    let next_t = t * (1.0 - a);
                    if next_t < MIN_TRANSMITTANCE {
                        break;
                    }
                    let w = a * t;
                    for ch in 0..3 {
                        color[ch] += w * s.color[ch];
                    }
                    for k in 0..IDENTITY_DIM {
                        ident[k] += w * s.identity[k];
                    }
                    depth += w * s.depth;
                    t = next_t;
                    end = pos as u32 + 1;
                }
                for ch in 0..3 {
                    color[ch] += t * cfg.background[ch];
                }
                ident[BACKGROUND] += t * cfg.background_logit;
                out.color.push(color);
                out.alpha.push(1.0 - t);
                out.identity.push(ident);
                out.depth.push(depth);
                out.ends.push(end);
            }
            out
        })
        .collect();

    let mut img = RenderOutput::new(width, height);
    let mut ends = vec![0u32; width * height];
    for (tile, out) in tiles.iter().enumerate() {
        for (k, (x, y)) in tile_pixels(tile, tiles_x, width, height).enumerate() {
            let p = y * width + x;
            img.color[3 * p..3 * p + 3].copy_from_slice(&out.color[k]);
            img.alpha[p] = out.alpha[k];
            img.identity[IDENTITY_DIM * p..IDENTITY_DIM * (p + 1)].copy_from_slice(&out.identity[k]);
            img.depth[p] = out.depth[k];
            ends[p] = out.ends[k];
        }
    }
    let record = RasterRecord {
        width,
        height,
        tiles_x,
        splat_count: splats.len(),
        tile_lists,
        ends,
    };
    (img, record)
}

/// Calls `visit(pixel, splat, weight)` for every blend term of a render, in
/// compositing order per pixel.
pub fn visit_contributions(
    splats: &[Splat2D],
    record: &RasterRecord,
    mut visit: impl FnMut(usize, usize, f64),
) {
    let (width, height, tiles_x) = (record.width, record.height, record.tiles_x);
    for (tile, list) in record.tile_lists.iter().enumerate() {
        for (x, y) in tile_pixels(tile, tiles_x, width, height) {
            let p = y * width + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            for &i in list.iter().take(record.ends[p] as usize) {
                let a = splats[i as usize].falloff(px, py).1.min(MAX_ALPHA);
                if a < MIN_ALPHA {
                    continue;
                }
                visit(p, i as usize, a * t);
                t *= 1.0 - a;
            }
        }
    }
}

/// Backward pass of [`rasterize`]. `splats` must be the slice that produced
/// `record`.
pub fn rasterize_backward(
    splats: &[Splat2D],
    record: &RasterRecord,
    cfg: &RasterConfig,
    upstream: &RenderGrad,
) -> Result<Vec<SplatGrad>> {
    if splats.len() != record.splat_count {
        return Err(Error::ShapeMismatch(format!(
            "record was made for {} splats, got {}",
            record.splat_count,
            splats.len()
        )));
    }
    if (upstream.width, upstream.height) != (record.width, record.height) {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient is {}x{}, render was {}x{}",
            upstream.width, upstream.height, record.width, record.height
        )));
    }
    let (width, height, tiles_x) = (record.width, record.height, record.tiles_x);

    let partials: Vec<Vec<SplatGrad>> = record
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut local = vec![SplatGrad::default(); list.len()];
            let mut walk: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
            for (x, y) in tile_pixels(tile, tiles_x, width, height) {
                let p = y * width + x;
                let end = record.ends[p] as usize;
                let gc = &upstream.color[3 * p..3 * p + 3];
                let ge = &upstream.identity[IDENTITY_DIM * p..IDENTITY_DIM * (p + 1)];
                let ga = upstream.alpha[p];
                let gd = upstream.depth[p];
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);

                // Forward re-walk: (slot, alpha', T before, power, raw).
                walk.clear();
                let mut t = 1.0;
                for (pos, &i) in list.iter().enumerate().take(end) {
                    let s = &splats[i as usize];
                    let (power, raw) = s.falloff(px, py);
                    let a = raw.min(MAX_ALPHA);
                    if a < MIN_ALPHA {
                        continue;
                    }
                    walk.push((pos, a, t, power, raw));
                    t *= 1.0 - a;
                }
                let t_final = t;
                let bg_dot = gc[0] * cfg.background[0]
                    + gc[1] * cfg.background[1]
                    + gc[2] * cfg.background[2]
                    + ge[BACKGROUND] * cfg.background_logit;
                let mut suffix = t_final * bg_dot - ga * t_final;

                for &(pos, a, t_i, power, raw) in walk.iter().rev() {
                    let s = &splats[list[pos] as usize];
                    let mut feat = gd * s.depth;
                    for ch in 0..3 {
                        feat += gc[ch] * s.color[ch];
                    }
                    for k in 0..IDENTITY_DIM {
                        feat += ge[k] * s.identity[k];
                    }
                    let w = a * t_i;
                    let d_alpha = t_i * feat - suffix / (1.0 - a);
                    suffix += w * feat;

                    let g = &mut local[pos];
                    for ch in 0..3 {
                        g.color[ch] += w * gc[ch];
                    }
                    for k in 0..IDENTITY_DIM {
                        g.identity[k] += w * ge[k];
                    }
                    g.depth += w * gd;
                    if raw > MAX_ALPHA {
                        continue;
                    }
                    let falloff = power.exp();
                    g.opacity += d_alpha * falloff;
                    let d_power = d_alpha * raw;
                    let dx = px - s.mean.x;
                    let dy = py - s.mean.y;
                    let [ca, cb, cc] = s.conic;
                    g.conic[0] += -0.5 * dx * dx * d_power;
                    g.conic[1] += -dx * dy * d_power;
                    g.conic[2] += -0.5 * dy * dy * d_power;
                    g.mean[0] += d_power * (ca * dx + cb * dy);
                    g.mean[1] += d_power * (cb * dx + cc * dy);
                }
            }
            local
        })
        .collect();

    let mut grads = vec![SplatGrad::default(); splats.len()];
    for (list, local) in record.tile_lists.iter().zip(&partials) {
        for (&i, g) in list.iter().zip(local) {
            grads[i as usize].add(g);
        }
    }
    Ok(grads)
}
