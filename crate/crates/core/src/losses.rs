//! Training objectives and their gradients.
//!
//! Each loss comes as a value-only function and a `_grad` variant returning
//! the value together with the gradient with respect to the loss's direct
//! inputs (rendered channels, identity logits, log-scales or positions).

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{MaskImage, RgbImage};
use crate::knn::GridIndex;
use crate::rasterizer::RenderOutput;
use crate::scene::{GaussianSet, Identity, Layer, IDENTITY_DIM};
use crate::sdf::MeshSdf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_ori: f64,
    pub w_id2d: f64,
    pub w_id3d: f64,
    pub w_ani: f64,
    pub w_sdf: f64,
    pub w_ref: f64,
    pub lambda_ssim: f64,
    /// Largest allowed ratio between a Gaussian's longest and shortest axis.
    pub tau: f64,
    pub knn_k: usize,
    pub knn_m: usize,
    pub sdf_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ori: 1.0,
            w_id2d: 1.0,
            w_id3d: 1.0,
            w_ani: 1.0,
            w_sdf: 1.0,
            w_ref: 1.0,
            lambda_ssim: 0.2,
            tau: 4.0,
            knn_k: 5,
            knn_m: 1000,
            sdf_margin: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_ori, self.w_id2d, self.w_id3d, self.w_ani, self.w_sdf, self.w_ref];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::InvalidConfig("lambda_ssim must lie in [0, 1]".into()));
        }
        if !(self.tau >= 1.0) {
            return Err(Error::InvalidConfig("tau must be at least 1".into()));
        }
        if self.knn_k == 0 || self.knn_m == 0 {
            return Err(Error::InvalidConfig("knn_k and knn_m must be at least 1".into()));
        }
        if !self.sdf_margin.is_finite() {
            return Err(Error::InvalidConfig("sdf_margin must be finite".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- SSIM

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable zero-padded "same" Gaussian blur of one plane. The kernel is
/// symmetric, so this is also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kt) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kt * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kt) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kt * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(data: &[f64], ch: usize) -> Vec<f64> {
    data.chunks_exact(3).map(|p| p[ch]).collect()
}

/// Mean SSIM over all pixels and channels of two interleaved RGB buffers.
/// With `want_grad`, also returns `d(mean SSIM)/d(x)`.
fn ssim_impl(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Vec<f64>) {
    let k = ssim_kernel();
    let n = (3 * w * h) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; x.len()] } else { Vec::new() };
    for ch in 0..3 {
        let xp = plane(x, ch);
        let yp = plane(y, ch);
        let xx: Vec<f64> = xp.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yp.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xp.iter().zip(&yp).map(|(a, b)| a * b).collect();
        let mx = blur(&xp, w, h, &k);
        let my = blur(&yp, w, h, &k);
        let mxx = blur(&xx, w, h, &k);
        let myy = blur(&yy, w, h, &k);
        let mxy = blur(&xy, w, h, &k);
        let mut g_mx = vec![0.0; w * h];
        let mut g_mxx = vec![0.0; w * h];
        let mut g_mxy = vec![0.0; w * h];
        for p in 0..w * h {
            let (ux, uy) = (mx[p], my[p]);
            let vx = mxx[p] - ux * ux;
            let vy = myy[p] - uy * uy;
            let cxy = mxy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_ux = 2.0 * uy * a2 / (b1 * b2) - 2.0 * ux * s / b1;
                let d_vx = -s / b2;
                let d_cxy = 2.0 * a1 / (b1 * b2);
                g_mx[p] = (d_ux - 2.0 * ux * d_vx - uy * d_cxy) / n;
                g_mxx[p] = d_vx / n;
                g_mxy[p] = d_cxy / n;
            }
        }
        if want_grad {
            let a = blur(&g_mx, w, h, &k);
            let b = blur(&g_mxx, w, h, &k);
            let c = blur(&g_mxy, w, h, &k);
            for p in 0..w * h {
                grad[3 * p + ch] = a[p] + 2.0 * xp[p] * b[p] + yp[p] * c[p];
            }
        }
    }
    (total / n, grad)
}

/// Mean structural similarity of two RGB images.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    b.check_same_size(a.width, a.height)?;
    Ok(ssim_impl(&a.data, &b.data, a.width, a.height, false).0)
}

// ---------------------------------------------------------------- image losses

fn check_render_size(r: &RenderOutput, w: usize, h: usize) -> Result<()> {
    if (r.width, r.height) != (w, h) {
        return Err(Error::DimensionMismatch(format!(
            "render is {}x{}, target is {w}x{h}",
            r.width, r.height
        )));
    }
    Ok(())
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)` between the rendered color and `target`.
pub fn loss_ori(rendered: &RenderOutput, target: &RgbImage, lambda: f64) -> Result<f64> {
    check_render_size(rendered, target.width, target.height)?;
    let l1 = l1_mean(&rendered.color, &target.data);
    let s = if lambda > 0.0 {
        ssim_impl(&rendered.color, &target.data, target.width, target.height, false).0
    } else {
        1.0
    };
    Ok((1.0 - lambda) * l1 + lambda * (1.0 - s))
}

fn l1_mean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Value of [`loss_ori`] and its gradient with respect to the color buffer.
pub fn loss_ori_grad(rendered: &RenderOutput, target: &RgbImage, lambda: f64) -> Result<(f64, Vec<f64>)> {
    check_render_size(rendered, target.width, target.height)?;
    let n = rendered.color.len().max(1) as f64;
    let l1 = l1_mean(&rendered.color, &target.data);
    let mut grad: Vec<f64> = rendered
        .color
        .iter()
        .zip(&target.data)
        .map(|(x, y)| (1.0 - lambda) * sign(x - y) / n)
        .collect();
    let mut s = 1.0;
    if lambda > 0.0 {
        let (v, g) = ssim_impl(&rendered.color, &target.data, target.width, target.height, true);
        s = v;
        for (o, gi) in grad.iter_mut().zip(g) {
            *o -= lambda * gi;
        }
    }
    Ok(((1.0 - lambda) * l1 + lambda * (1.0 - s), grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn log_softmax(e: &[f64], out: &mut [f64; IDENTITY_DIM]) {
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
    let lz = m + z.ln();
    for (o, v) in out.iter_mut().zip(e) {
        *o = v - lz;
    }
}

pub fn softmax(e: &[f64]) -> Identity {
    let mut ls = [0.0; IDENTITY_DIM];
    log_softmax(e, &mut ls);
    ls.map(f64::exp)
}

/// Mean per-pixel cross-entropy of `softmax(identity)` against mask labels.
pub fn loss_id2d(rendered: &RenderOutput, mask: &MaskImage) -> Result<f64> {
    Ok(id2d_impl(rendered, mask, false)?.0)
}

/// Value of [`loss_id2d`] and its gradient with respect to the identity
/// buffer.
pub fn loss_id2d_grad(rendered: &RenderOutput, mask: &MaskImage) -> Result<(f64, Vec<f64>)> {
    id2d_impl(rendered, mask, true)
}

fn id2d_impl(rendered: &RenderOutput, mask: &MaskImage, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    check_render_size(rendered, mask.width, mask.height)?;
    let n = rendered.pixel_count().max(1) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad {
        vec![0.0; rendered.identity.len()]
    } else {
        Vec::new()
    };
    let mut ls = [0.0; IDENTITY_DIM];
    for (p, e) in rendered.identity.chunks_exact(IDENTITY_DIM).enumerate() {
        let label = mask.labels[p] as usize;
        log_softmax(e, &mut ls);
        total -= ls[label];
        if want_grad {
            for k in 0..IDENTITY_DIM {
                let onehot = if k == label { 1.0 } else { 0.0 };
                grad[IDENTITY_DIM * p + k] = (ls[k].exp() - onehot) / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// `(1/T)·Σ_t MSE(rendered_t, video_t)`.
pub fn loss_ref(rendered: &[RgbImage], video: &[RgbImage]) -> Result<f64> {
    Ok(ref_impl(rendered, video, false)?.0)
}

/// Value of [`loss_ref`] and the gradient for each rendered frame.
pub fn loss_ref_grad(rendered: &[RgbImage], video: &[RgbImage]) -> Result<(f64, Vec<Vec<f64>>)> {
    ref_impl(rendered, video, true)
}

fn ref_impl(rendered: &[RgbImage], video: &[RgbImage], want_grad: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    if rendered.len() != video.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rendered frames for {} video frames",
            rendered.len(),
            video.len()
        )));
    }
    let t = rendered.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (r, v) in rendered.iter().zip(video) {
        v.check_same_size(r.width, r.height)?;
        let n = r.data.len().max(1) as f64;
        let mut se = 0.0;
        for (a, b) in r.data.iter().zip(&v.data) {
            se += (a - b) * (a - b);
        }
        total += se / n;
        if want_grad {
            grads.push(
                r.data
                    .iter()
                    .zip(&v.data)
                    .map(|(a, b)| 2.0 * (a - b) / (n * t))
                    .collect(),
            );
        }
    }
    Ok((total / t, grads))
}

// ---------------------------------------------------------------- 3D losses

/// Sampled Gaussians and their nearest same-layer neighbors for the KL term.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KlPlan {
    pub pairs: Vec<(usize, Vec<usize>)>,
    pub k: usize,
}

/// Samples `min(m, n)` asset Gaussians without replacement and finds each
/// one's `k` nearest asset neighbors among `positions` (indexed like `set`).
pub fn kl_plan(
    set: &GaussianSet,
    positions: &[Vector3<f64>],
    k: usize,
    m: usize,
    seed: u64,
) -> Result<KlPlan> {
    let assets = set.indices_in(Layer::Asset);
    if assets.len() < k + 1 {
        return Err(Error::TooFewGaussians {
            needed: k + 1,
            available: assets.len(),
        });
    }
    let pts: Vec<Vector3<f64>> = assets.iter().map(|&i| positions[i]).collect();
    let grid = GridIndex::new(&pts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m_eff = m.min(assets.len());
    let mut picks = sample(&mut rng, assets.len(), m_eff).into_vec();
    picks.sort_unstable();
    let pairs = picks
        .into_iter()
        .map(|a| {
            let nb = grid
                .nearest(&pts[a], k, Some(a))
                .into_iter()
                .map(|(_, j)| assets[j])
                .collect();
            (assets[a], nb)
        })
        .collect();
    Ok(KlPlan { pairs, k })
}

/// Mean KL divergence between each sampled Gaussian's category distribution
/// and those of its neighbors.
pub fn loss_id3d(set: &GaussianSet, plan: &KlPlan) -> f64 {
    id3d_impl(set, plan, false).0
}

/// Value of [`loss_id3d`] and the gradient for every Gaussian's identity.
pub fn loss_id3d_grad(set: &GaussianSet, plan: &KlPlan) -> (f64, Vec<Identity>) {
    id3d_impl(set, plan, true)
}

fn id3d_impl(set: &GaussianSet, plan: &KlPlan, want_grad: bool) -> (f64, Vec<Identity>) {
    let mut grad = if want_grad {
        vec![[0.0; IDENTITY_DIM]; set.len()]
    } else {
        Vec::new()
    };
    if plan.pairs.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / (plan.pairs.len() * plan.k) as f64;
    let mut total = 0.0;
    let mut lp = [0.0; IDENTITY_DIM];
    let mut lq = [0.0; IDENTITY_DIM];
    for (j, nbs) in &plan.pairs {
        log_softmax(&set.identity[*j], &mut lp);
        let p = lp.map(f64::exp);
        for &i in nbs {
            log_softmax(&set.identity[i], &mut lq);
            let mut kl = 0.0;
            let mut d = [0.0; IDENTITY_DIM];
            for c in 0..IDENTITY_DIM {
                d[c] = lp[c] - lq[c];
                kl += p[c] * d[c];
            }
            total += kl;
            if want_grad {
                for c in 0..IDENTITY_DIM {
                    grad[*j][c] += scale * p[c] * (d[c] - kl);
                    grad[i][c] += scale * (lq[c].exp() - p[c]);
                }
            }
        }
    }
    (total * scale, grad)
}

fn axis_ratio(log_scale: &[f64; 3]) -> (f64, usize, usize) {
    let mut hi = 0;
    let mut lo = 0;
    for k in 1..3 {
        if log_scale[k] > log_scale[hi] {
            hi = k;
        }
        if log_scale[k] < log_scale[lo] {
            lo = k;
        }
    }
    ((log_scale[hi] - log_scale[lo]).exp(), hi, lo)
}

/// Mean over asset Gaussians of `max(ratio, τ) − τ`, where `ratio` is the
/// longest over the shortest axis.
pub fn loss_ani(set: &GaussianSet, tau: f64) -> f64 {
    ani_impl(set, tau, false).0
}

/// Value of [`loss_ani`] and its gradient with respect to log-scales.
pub fn loss_ani_grad(set: &GaussianSet, tau: f64) -> (f64, Vec<[f64; 3]>) {
    ani_impl(set, tau, true)
}

fn ani_impl(set: &GaussianSet, tau: f64, want_grad: bool) -> (f64, Vec<[f64; 3]>) {
    let mut grad = if want_grad { vec![[0.0; 3]; set.len()] } else { Vec::new() };
    let assets = set.indices_in(Layer::Asset);
    if assets.is_empty() {
        return (0.0, grad);
    }
    let n = assets.len() as f64;
    let mut total = 0.0;
    for &i in &assets {
        let (r, hi, lo) = axis_ratio(&set.log_scale[i]);
        if r > tau {
            total += r - tau;
            if want_grad {
                grad[i][hi] += r / n;
                grad[i][lo] -= r / n;
            }
        }
    }
    (total / n, grad)
}

/// Mean over asset Gaussians of `max(0, margin − sdf(position))²`.
/// `positions` is indexed like `set`.
pub fn loss_sdf(set: &GaussianSet, positions: &[Vector3<f64>], sdf: &MeshSdf, margin: f64) -> f64 {
    sdf_impl(set, positions, sdf, margin, false).0
}

/// Value of [`loss_sdf`] and its gradient with respect to each position.
pub fn loss_sdf_grad(
    set: &GaussianSet,
    positions: &[Vector3<f64>],
    sdf: &MeshSdf,
    margin: f64,
) -> (f64, Vec<Vector3<f64>>) {
    sdf_impl(set, positions, sdf, margin, true)
}

fn sdf_impl(
    set: &GaussianSet,
    positions: &[Vector3<f64>],
    sdf: &MeshSdf,
    margin: f64,
    want_grad: bool,
) -> (f64, Vec<Vector3<f64>>) {
    let mut grad = if want_grad {
        vec![Vector3::zeros(); set.len()]
    } else {
        Vec::new()
    };
    let assets = set.indices_in(Layer::Asset);
    if assets.is_empty() {
        return (0.0, grad);
    }
    let n = assets.len() as f64;
    let mut total = 0.0;
    for &i in &assets {
        let Some((d, g, _)) = sdf.query_grad(&positions[i]) else {
            continue;
        };
        let v = margin - d;
        if v > 0.0 {
            total += v * v;
            if want_grad {
                grad[i] = -2.0 * v * g / n;
            }
        }
    }
    (total / n, grad)
}
