//! Optimization loop: Adam, pruning, category-guided densification, body
//! construction and skin inpainting.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Quat, SH_C0};
use crate::gradients::{backward_reposed, render_reposed, DiffRenderer, ParamGradients, View};
use crate::knn::GridIndex;
use crate::losses::{self, LossWeights};
use crate::rasterizer::{visit_contributions, RasterConfig, RenderGrad, RenderOutput, MIN_ALPHA};
use crate::scene::{
    label_identity, logit, sh_dc_for, Gaussian, GaussianSet, Layer, SkinnedMesh, TriangleEmbedding,
    BACKGROUND, FACE, IDENTITY_DIM, SKIN,
};
use crate::sdf::MeshSdf;
use crate::skinning::{repose_all, PosedMesh};

/// Opacity given to body Gaussians, standing in for a fully opaque surface.
pub const BODY_OPACITY: f64 = 0.99;
/// Normal-axis scale of a body Gaussian relative to its in-plane scale.
pub const BODY_FLATNESS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub offsets: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    /// Applies to the DC band; higher bands use a twentieth of it.
    pub sh: f64,
    pub identity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            offsets: 5e-4,
            rotation: 2e-3,
            scale: 5e-3,
            opacity: 5e-2,
            sh: 1e-2,
            identity: 2e-2,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [self.offsets, self.rotation, self.scale, self.opacity, self.sh, self.identity];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }
}

const SH_REST_FACTOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub total_iters: usize,
    pub prune_interval: usize,
    pub densify_interval: usize,
    pub densify_start: usize,
    pub densify_stop: usize,
    pub lr: LearningRates,
    pub opacity_prune_threshold: f64,
    /// Iterations at the start that only see the first view.
    pub front_view_iters: usize,
    /// New Gaussians per densification, as a fraction of the category size.
    pub densify_fraction: f64,
    pub densify_k: usize,
    pub max_gaussians: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_iters: 3000,
            prune_interval: 300,
            densify_interval: 300,
            densify_start: 500,
            densify_stop: 2500,
            lr: LearningRates::default(),
            opacity_prune_threshold: 0.005,
            front_view_iters: 500,
            densify_fraction: 0.1,
            densify_k: 5,
            max_gaussians: 200_000,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.prune_interval == 0 || self.densify_interval == 0 {
            return Err(Error::InvalidConfig("intervals must be at least 1".into()));
        }
        if self.densify_start > self.densify_stop || self.densify_stop > self.total_iters {
            return Err(Error::InvalidConfig(
                "need densify_start <= densify_stop <= total_iters".into(),
            ));
        }
        if !(self.opacity_prune_threshold > 0.0 && self.opacity_prune_threshold < 1.0) {
            return Err(Error::InvalidConfig("opacity_prune_threshold must lie in (0, 1)".into()));
        }
        if !(self.densify_fraction >= 0.0) || self.densify_k == 0 {
            return Err(Error::InvalidConfig(
                "densify_fraction must be non-negative and densify_k positive".into(),
            ));
        }
        self.lr.validate()
    }
}

// ---------------------------------------------------------------- Adam

/// Adam with one step counter shared by all parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamGradients,
    pub v: ParamGradients,
}

fn retain_rows(g: &mut ParamGradients, keep: &[bool], stride: usize) {
    fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
        let mut it = keep.iter();
        v.retain(|_| *it.next().unwrap());
    }
    filter(&mut g.offsets, keep);
    filter(&mut g.rotation, keep);
    filter(&mut g.log_scale, keep);
    filter(&mut g.opacity_logit, keep);
    filter(&mut g.identity, keep);
    let mut sh = Vec::with_capacity(g.offsets.len() * stride);
    for (i, &k) in keep.iter().enumerate() {
        if k {
            sh.extend_from_slice(&g.sh[i * stride..(i + 1) * stride]);
        }
    }
    g.sh = sh;
}

fn grow_rows(g: &mut ParamGradients, n: usize, stride: usize) {
    g.offsets.resize(n, [0.0; 3]);
    g.rotation.resize(n, [0.0; 4]);
    g.log_scale.resize(n, [0.0; 3]);
    g.opacity_logit.resize(n, 0.0);
    g.identity.resize(n, [0.0; IDENTITY_DIM]);
    g.sh.resize(n * stride, 0.0);
}

impl Adam {
    pub fn new(set: &GaussianSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step: 0,
            m: ParamGradients::zeros(set),
            v: ParamGradients::zeros(set),
        }
    }

    /// Drops moment rows alongside [`GaussianSet::retain_mask`].
    pub fn compact(&mut self, keep: &[bool], sh_stride: usize) {
        retain_rows(&mut self.m, keep, sh_stride);
        retain_rows(&mut self.v, keep, sh_stride);
    }

    /// Appends zero moments for Gaussians added at the end of the set.
    pub fn extend_to(&mut self, set: &GaussianSet) {
        grow_rows(&mut self.m, set.len(), set.sh_stride());
        grow_rows(&mut self.v, set.len(), set.sh_stride());
    }

    pub fn apply(&mut self, set: &mut GaussianSet, grads: &ParamGradients, lr: &LearningRates) -> Result<()> {
        let n = set.len();
        for g in [grads, &self.m, &self.v] {
            if g.len() != n || g.sh.len() != set.sh.len() {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer buffers hold {} rows, set has {n}",
                    g.len()
                )));
            }
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        let stride = set.sh_stride();
        for i in 0..n {
            if set.frozen[i] {
                continue;
            }
            for k in 0..3 {
                update(&mut set.offsets[i][k], &mut self.m.offsets[i][k], &mut self.v.offsets[i][k], grads.offsets[i][k], lr.offsets);
                update(&mut set.log_scale[i][k], &mut self.m.log_scale[i][k], &mut self.v.log_scale[i][k], grads.log_scale[i][k], lr.scale);
            }
            for k in 0..4 {
                update(&mut set.rotation[i][k], &mut self.m.rotation[i][k], &mut self.v.rotation[i][k], grads.rotation[i][k], lr.rotation);
            }
            update(&mut set.opacity_logit[i], &mut self.m.opacity_logit[i], &mut self.v.opacity_logit[i], grads.opacity_logit[i], lr.opacity);
            for k in 0..IDENTITY_DIM {
                update(&mut set.identity[i][k], &mut self.m.identity[i][k], &mut self.v.identity[i][k], grads.identity[i][k], lr.identity);
            }
            for k in 0..stride {
                let j = i * stride + k;
                let rate = if k < 3 { lr.sh } else { lr.sh * SH_REST_FACTOR };
                update(&mut set.sh[j], &mut self.m.sh[j], &mut self.v.sh[j], grads.sh[j], rate);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- pruning

fn drop_rows(set: &mut GaussianSet, keep: &[bool], adam: Option<&mut Adam>) -> usize {
    let stride = set.sh_stride();
    let removed = set.retain_mask(keep);
    if let Some(a) = adam {
        a.compact(keep, stride);
    }
    removed
}

/// Removes asset Gaussians whose canonical position lies inside the mesh.
pub fn prune_inside(set: &mut GaussianSet, mesh: &SkinnedMesh, adam: Option<&mut Adam>) -> Result<usize> {
    let sdf = MeshSdf::new(&mesh.vertices, &mesh.faces);
    let positions = set.canonical_positions(mesh)?;
    let keep: Vec<bool> = (0..set.len())
        .map(|i| set.layer[i] == Layer::Body || sdf.query(&positions[i]) >= 0.0)
        .collect();
    Ok(drop_rows(set, &keep, adam))
}

/// Removes asset Gaussians with opacity below `threshold`.
pub fn prune_transparent(set: &mut GaussianSet, threshold: f64, adam: Option<&mut Adam>) -> usize {
    let keep: Vec<bool> = (0..set.len())
        .map(|i| set.layer[i] == Layer::Body || set.opacity(i) >= threshold)
        .collect();
    drop_rows(set, &keep, adam)
}

// ---------------------------------------------------------------- densification

/// Adds up to `n_new` asset Gaussians of `category` next to existing ones,
/// inheriting the mean properties of their `k` nearest same-category
/// neighbors. Returns how many were added.
pub fn densify_category(
    set: &mut GaussianSet,
    mesh: &SkinnedMesh,
    category: usize,
    n_new: usize,
    k: usize,
    seed: u64,
) -> Result<usize> {
    densify_category_traced(set, mesh, category, n_new, k, seed).map(|p| p.len())
}

/// [`densify_category`], returning the sampled world position of every
/// Gaussian it added.
pub fn densify_category_traced(
    set: &mut GaussianSet,
    mesh: &SkinnedMesh,
    category: usize,
    n_new: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Vector3<f64>>> {
    if category >= IDENTITY_DIM {
        return Err(Error::InvalidCategory(category));
    }
    let members: Vec<usize> = set
        .indices_in(Layer::Asset)
        .into_iter()
        .filter(|&i| set.category(i) == category)
        .collect();
    if members.len() < k.max(1) {
        return Err(Error::TooFewGaussians {
            needed: k.max(1),
            available: members.len(),
        });
    }
    if n_new == 0 {
        return Ok(Vec::new());
    }
    let all_pos = set.canonical_positions(mesh)?;
    let pts: Vec<Vector3<f64>> = members.iter().map(|&i| all_pos[i]).collect();
    let grid = GridIndex::new(&pts);
    let jitter = members
        .iter()
        .map(|&i| set.scale(i).sum() / 3.0)
        .sum::<f64>()
        / members.len() as f64;

    let stride = set.sh_stride();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fresh = Vec::new();
    for _ in 0..n_new {
        let pick = members[rng.random_range(0..members.len())];
        let noise = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let p = all_pos[pick] + noise * jitter;
        let nb: Vec<usize> = grid.nearest(&p, k, None).into_iter().map(|(_, j)| members[j]).collect();

        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &j in &nb {
            *votes.entry(set.face[j]).or_insert(0) += 1;
        }
        let top = *votes.values().max().unwrap();
        let face = nb.iter().map(|&j| set.face[j]).find(|f| votes[f] == top).unwrap();
        let frame = mesh.frame(face)?;
        let local = frame.to_local(&p);

        let w = 1.0 / nb.len() as f64;
        let q0 = Quat::from_array(set.rotation[nb[0]]);
        let mut q = [0.0; 4];
        let mut log_scale = Vector3::zeros();
        let mut opacity_logit = 0.0;
        let mut sh = vec![0.0; stride];
        let mut identity = [0.0; IDENTITY_DIM];
        for &j in &nb {
            let qj = Quat::from_array(set.rotation[j]);
            let s = if qj.dot(&q0) < 0.0 { -w } else { w };
            for (a, b) in q.iter_mut().zip(qj.to_array()) {
                *a += s * b;
            }
            log_scale += Vector3::from(set.log_scale[j]) * w;
            opacity_logit += set.opacity_logit[j] * w;
            for (a, b) in sh.iter_mut().zip(set.sh_of(j)) {
                *a += b * w;
            }
            for (a, b) in identity.iter_mut().zip(&set.identity[j]) {
                *a += b * w;
            }
        }
        let g = Gaussian {
            embedding: TriangleEmbedding {
                face_index: face,
                sigma: local.x,
                beta: local.y,
                gamma: local.z,
            },
            rotation: Quat::from_array(q).normalized(),
            log_scale,
            opacity_logit,
            sh,
            identity,
            layer: Layer::Asset,
            frozen: false,
        };
        if crate::scene::category_of(&g.identity) == category {
            fresh.push((g, p));
        }
    }
    for (g, _) in &fresh {
        set.push(g)?;
    }
    Ok(fresh.into_iter().map(|(_, p)| p).collect())
}

// ---------------------------------------------------------------- body layer

const BODY_SITES: [[f64; 3]; 7] = [
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    [0.5, 0.5, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
];

pub const MAX_BODY_PER_FACE: usize = BODY_SITES.len();

/// Flat, frozen, nearly opaque Gaussians bound to every face: the centroid
/// first, then edge midpoints, then points halfway to each vertex.
pub fn build_body_gaussians(mesh: &SkinnedMesh, per_face_count: usize, sh_degree: usize) -> Result<GaussianSet> {
    if !(1..=MAX_BODY_PER_FACE).contains(&per_face_count) {
        return Err(Error::InvalidArgument(format!(
            "per_face_count must lie in 1..={MAX_BODY_PER_FACE}, got {per_face_count}"
        )));
    }
    let face_region: std::collections::BTreeSet<u32> = mesh
        .face_regions
        .get("face")
        .map(|v| v.iter().copied().collect())
        .unwrap_or_default();
    let mut set = GaussianSet::new(sh_degree);
    let mut sh = vec![0.0; set.sh_stride()];
    sh[..3].fill(sh_dc_for(0.5));
    for f in 0..mesh.faces.len() as u32 {
        let frame = mesh.frame(f)?;
        let tri = mesh.triangle(f as usize);
        let perimeter: f64 = (0..3).map(|k| (tri[(k + 1) % 3] - tri[k]).norm()).sum();
        let area = 0.5 * (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm();
        let ln_r = (2.0 * area / perimeter).ln();
        let rotation = Quat::from_matrix(&frame.basis());
        let label = if face_region.contains(&f) { FACE } else { SKIN };
        for site in &BODY_SITES[..per_face_count] {
            let p = tri[0] * site[0] + tri[1] * site[1] + tri[2] * site[2];
            let mut local = frame.to_local(&p);
            local.z = 0.0;
            set.push(&Gaussian {
                embedding: TriangleEmbedding {
                    face_index: f,
                    sigma: local.x,
                    beta: local.y,
                    gamma: 0.0,
                },
                rotation,
                log_scale: Vector3::new(ln_r, ln_r, ln_r + BODY_FLATNESS.ln()),
                opacity_logit: logit(BODY_OPACITY),
                sh: sh.clone(),
                identity: label_identity(label),
                layer: Layer::Body,
                frozen: true,
            })?;
        }
    }
    Ok(set)
}

fn body_mask(set: &GaussianSet) -> Vec<bool> {
    set.layer.iter().map(|&l| l == Layer::Body).collect()
}

/// Per body Gaussian (in set order), whether it contributes a blend weight
/// of at least `1/255` to a skin pixel of any view when the body is drawn
/// alone.
pub fn body_visibility(
    set: &GaussianSet,
    mesh: &SkinnedMesh,
    views: &[View],
    raster: &RasterConfig,
) -> Result<Vec<bool>> {
    let body = set.indices_in(Layer::Body);
    let mut row = vec![usize::MAX; set.len()];
    for (r, &i) in body.iter().enumerate() {
        row[i] = r;
    }
    let mut visible = vec![false; body.len()];
    let posed = PosedMesh::canonical(mesh)?;
    let reposed = repose_all(set, &posed)?;
    let include = body_mask(set);
    for v in views {
        v.mask.check_same_size(v.camera.width as usize, v.camera.height as usize)?;
        let (_, record) = render_reposed(set, &reposed, Some(&include), &v.camera, raster);
        let splats = record.splats();
        visit_contributions(splats, record.raster(), |p, s, w| {
            if w >= MIN_ALPHA && v.mask.labels[p] as usize == SKIN {
                visible[row[splats[s].source as usize]] = true;
            }
        });
    }
    Ok(visible)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintReport {
    pub visible: usize,
    pub occluded: usize,
    pub visible_mean_color: [f64; 3],
    pub occluded_mean_color: [f64; 3],
    pub final_skin_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintConfig {
    pub iters: usize,
    pub lr: f64,
    /// Step size of the pull toward the visible mean.
    pub pull_rate: f64,
    pub pull_tolerance: f64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: 0.05,
            pull_rate: 0.5,
            pull_tolerance: 1e-9,
        }
    }
}

fn skin_mse(out: &RenderOutput, view: &View, grad: Option<&mut [f64]>) -> f64 {
    let n: usize = view.mask.labels.iter().filter(|&&l| l as usize == SKIN).count();
    if n == 0 {
        return 0.0;
    }
    let norm = 1.0 / (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for (p, &l) in view.mask.labels.iter().enumerate() {
        if l as usize != SKIN {
            continue;
        }
        for c in 0..3 {
            let d = out.color[3 * p + c] - view.image.data[3 * p + c];
            total += d * d;
            if let Some(g) = grad.as_deref_mut() {
                g[3 * p + c] = 2.0 * d * norm;
            }
        }
    }
    total * norm
}

/// Fits the SH of visible body Gaussians to the skin pixels of `views`, then
/// pulls the DC color of the occluded ones to the visible mean and clears
/// their higher bands. `visibility` is indexed like the body Gaussians.
pub fn inpaint_body_color(
    set: &mut GaussianSet,
    mesh: &SkinnedMesh,
    visibility: &[bool],
    views: &[View],
    raster: &RasterConfig,
    cfg: &InpaintConfig,
) -> Result<InpaintReport> {
    let body = set.indices_in(Layer::Body);
    if visibility.len() != body.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} visibility flags for {} body gaussians",
            visibility.len(),
            body.len()
        )));
    }
    let visible: Vec<usize> = body.iter().zip(visibility).filter(|(_, &v)| v).map(|(&i, _)| i).collect();
    let occluded: Vec<usize> = body.iter().zip(visibility).filter(|(_, &v)| !v).map(|(&i, _)| i).collect();
    if visible.is_empty() {
        return Err(Error::NoVisibleBody);
    }
    let stride = set.sh_stride();
    let posed = PosedMesh::canonical(mesh)?;
    let reposed = repose_all(set, &posed)?;
    let include = body_mask(set);

    let mut m = vec![0.0; visible.len() * stride];
    let mut v = vec![0.0; visible.len() * stride];
    let mut last = 0.0;
    if !views.is_empty() {
        for it in 0..cfg.iters {
            let view = &views[it % views.len()];
            let (out, record) = render_reposed(set, &reposed, Some(&include), &view.camera, raster);
            let mut up = RenderGrad::zeros(out.width, out.height);
            last = skin_mse(&out, view, Some(&mut up.color));
            let rg = backward_reposed(set, &record, raster, &up)?;
            let t = (it + 1) as i32;
            let (c1, c2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
            let lr = cfg.lr * (1.0 - 0.9 * it as f64 / cfg.iters as f64);
            for (r, &i) in visible.iter().enumerate() {
                for k in 0..stride {
                    let g = rg.sh[i * stride + k];
                    let (mk, vk) = (&mut m[r * stride + k], &mut v[r * stride + k]);
                    *mk = 0.9 * *mk + 0.1 * g;
                    *vk = 0.999 * *vk + 0.001 * g * g;
                    let rate = if k < 3 { lr } else { lr * SH_REST_FACTOR };
                    set.sh[i * stride + k] -= rate * (*mk / c1) / ((*vk / c2).sqrt() + 1e-15);
                }
            }
        }
    }

    let mean_dc = |set: &GaussianSet, idx: &[usize]| -> [f64; 3] {
        let mut acc = [0.0; 3];
        for &i in idx {
            for c in 0..3 {
                acc[c] += set.sh[i * stride + c];
            }
        }
        acc.map(|a| a / idx.len().max(1) as f64)
    };
    let target = mean_dc(set, &visible);
    for &i in &occluded {
        set.sh[i * stride + 3..(i + 1) * stride].fill(0.0);
        loop {
            let mut worst: f64 = 0.0;
            for c in 0..3 {
                let d = set.sh[i * stride + c] - target[c];
                set.sh[i * stride + c] -= cfg.pull_rate * d;
                worst = worst.max(d.abs());
            }
            if worst <= cfg.pull_tolerance {
                break;
            }
        }
    }
    let occ = if occluded.is_empty() { target } else { mean_dc(set, &occluded) };
    Ok(InpaintReport {
        visible: visible.len(),
        occluded: occluded.len(),
        visible_mean_color: target.map(|d| d * SH_C0),
        occluded_mean_color: occ.map(|d| d * SH_C0),
        final_skin_mse: last,
    })
}

// ---------------------------------------------------------------- seeding

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub candidates: usize,
    /// Largest normal offset of a candidate, in mean edge lengths.
    pub max_height: f64,
    /// In-plane standard deviation, in mean edge lengths.
    pub scale: f64,
    pub flatness: f64,
    pub opacity: f64,
    pub identity_logit: f64,
    /// Depth slack of the visibility test, in mean edge lengths.
    pub depth_slack: f64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            candidates: 6000,
            max_height: 0.5,
            scale: 0.25,
            flatness: 0.35,
            opacity: 0.6,
            identity_logit: 2.0,
            depth_slack: 0.5,
        }
    }
}

/// Samples points on and just above the body, labels each by majority vote
/// of the masks of the views that see it, and keeps those voted into an
/// asset category as new asset Gaussians colored from the images.
pub fn seed_assets(
    set: &mut GaussianSet,
    mesh: &SkinnedMesh,
    views: &[View],
    raster: &RasterConfig,
    cfg: &SeedConfig,
    seed: u64,
) -> Result<usize> {
    let edge = mesh.mean_edge_length();
    let posed = PosedMesh::canonical(mesh)?;
    let reposed = repose_all(set, &posed)?;
    let include = body_mask(set);
    let body_depth: Vec<RenderOutput> = views
        .iter()
        .map(|v| render_reposed(set, &reposed, Some(&include), &v.camera, raster).0)
        .collect();

    let areas: Vec<f64> = (0..mesh.faces.len())
        .map(|f| {
            let t = mesh.triangle(f);
            0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
        })
        .collect();
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cdf.push(acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = set.sh_stride();
    let mut added = 0;
    for _ in 0..cfg.candidates {
        let r: f64 = rng.random::<f64>() * acc;
        let f = cdf.partition_point(|&c| c < r).min(areas.len() - 1) as u32;
        let (mut u, mut w): (f64, f64) = (rng.random(), rng.random());
        if u + w > 1.0 {
            u = 1.0 - u;
            w = 1.0 - w;
        }
        let h = rng.random::<f64>() * cfg.max_height * edge;
        let tri = mesh.triangle(f as usize);
        let frame = mesh.frame(f)?;
        let p = tri[0] + (tri[1] - tri[0]) * u + (tri[2] - tri[0]) * w + frame.normal * h;

        let mut votes = [0usize; IDENTITY_DIM];
        let mut colors = vec![[0.0; 3]; IDENTITY_DIM];
        for (v, body) in views.iter().zip(&body_depth) {
            let Some((x, y, z)) = v.camera.project_point(&p) else {
                continue;
            };
            if x < 0.0 || y < 0.0 || x >= v.camera.width as f64 || y >= v.camera.height as f64 {
                continue;
            }
            let px = y as usize * v.camera.width as usize + x as usize;
            let a = body.alpha[px];
            if a > 0.5 && z > body.depth[px] / a + cfg.depth_slack * edge {
                continue;
            }
            let label = v.mask.labels[px] as usize;
            votes[label] += 1;
            for c in 0..3 {
                colors[label][c] += v.image.data[3 * px + c];
            }
        }
        let mut label = 0;
        for l in 1..IDENTITY_DIM {
            if votes[l] > votes[label] {
                label = l;
            }
        }
        if votes[label] == 0 || matches!(label, BACKGROUND | FACE | SKIN) {
            continue;
        }
        let color = colors[label].map(|c| c / votes[label] as f64);
        let mut sh = vec![0.0; stride];
        for c in 0..3 {
            sh[c] = sh_dc_for(color[c]);
        }
        let mut identity = [0.0; IDENTITY_DIM];
        identity[label] = cfg.identity_logit;
        let local = frame.to_local(&p);
        let ls = (cfg.scale * edge).ln();
        set.push(&Gaussian {
            embedding: TriangleEmbedding {
                face_index: f,
                sigma: local.x,
                beta: local.y,
                gamma: local.z,
            },
            rotation: Quat::from_matrix(&frame.basis()),
            log_scale: Vector3::new(ls, ls, ls + cfg.flatness.ln()),
            opacity_logit: logit(cfg.opacity),
            sh,
            identity,
            layer: Layer::Asset,
            frozen: false,
        })?;
        added += 1;
    }
    Ok(added)
}

// ---------------------------------------------------------------- fit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub raster: RasterConfig,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub view: usize,
    pub total: f64,
    pub ori: f64,
    pub id2d: f64,
    pub id3d: f64,
    pub ani: f64,
    pub sdf: f64,
    pub body: usize,
    pub assets: usize,
    pub categories: BTreeMap<usize, usize>,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} view={} loss={:.6} ori={:.6} id2d={:.6} id3d={:.6} ani={:.6} sdf={:.6} body={} assets={}",
            self.iteration, self.view, self.total, self.ori, self.id2d, self.id3d, self.ani, self.sdf, self.body, self.assets
        )?;
        for (c, n) in &self.categories {
            write!(f, " cat{c}={n}")?;
        }
        Ok(())
    }
}

/// Mutable state of a training run.
#[derive(Clone, Debug)]
pub struct RunState {
    pub iteration: usize,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Most recent log entries.
    pub history: VecDeque<LogEntry>,
}

const HISTORY_LEN: usize = 64;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub log: Vec<LogEntry>,
    pub pruned_inside: usize,
    pub pruned_transparent: usize,
    pub densified: usize,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the training schedule on `set` in the canonical pose.
/// `observer` sees every log entry together with the current scene.
pub fn fit(
    set: &mut GaussianSet,
    mesh: &SkinnedMesh,
    views: &[View],
    cfg: &FitConfig,
    seed: u64,
    observer: &mut dyn FnMut(&LogEntry, &GaussianSet) -> Result<()>,
) -> Result<FitReport> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("fit needs at least one view".into()));
    }
    if (0..set.len()).any(|i| set.layer[i] == Layer::Body && !set.frozen[i]) {
        return Err(Error::InvalidArgument("body gaussians must be frozen".into()));
    }
    for v in views {
        let (w, h) = (v.camera.width as usize, v.camera.height as usize);
        v.image.check_same_size(w, h)?;
        v.mask.check_same_size(w, h)?;
    }
    let sched = &cfg.schedule;
    let wts = &cfg.weights;
    let posed = PosedMesh::canonical(mesh)?;
    let sdf = MeshSdf::new(&mesh.vertices, &mesh.faces);
    let mut state = RunState {
        iteration: 0,
        adam: Adam::new(set),
        rng: ChaCha8Rng::seed_from_u64(seed),
        history: VecDeque::with_capacity(HISTORY_LEN),
    };
    let mut report = FitReport::default();
    let mut renderer = DiffRenderer::new(cfg.raster.clone());

    for it in 0..sched.total_iters {
        state.iteration = it;
        let view_idx = if it < sched.front_view_iters {
            0
        } else {
            state.rng.random_range(0..views.len())
        };
        let view = &views[view_idx];

        let out = renderer.forward(set, &posed, &view.camera, None)?;
        let mut up = RenderGrad::zeros(out.width, out.height);
        let (ori, g_ori) = losses::loss_ori_grad(&out, &view.image, wts.lambda_ssim)?;
        let (id2d, g_id) = losses::loss_id2d_grad(&out, &view.mask)?;
        for (u, g) in up.color.iter_mut().zip(&g_ori) {
            *u = wts.w_ori * g;
        }
        for (u, g) in up.identity.iter_mut().zip(&g_id) {
            *u = wts.w_id2d * g;
        }
        let mut grads = renderer.backward(set, &posed, &up)?;

        let positions: Vec<Vector3<f64>> = repose_all(set, &posed)?.iter().map(|r| r.position).collect();
        let n_assets = set.count_in(Layer::Asset);
        let mut id3d = 0.0;
        if wts.w_id3d > 0.0 && n_assets > wts.knn_k {
            let plan = losses::kl_plan(set, &positions, wts.knn_k, wts.knn_m, mix(seed, it as u64))?;
            let (l, g) = losses::loss_id3d_grad(set, &plan);
            id3d = l;
            for (a, b) in grads.identity.iter_mut().zip(&g) {
                for k in 0..IDENTITY_DIM {
                    a[k] += wts.w_id3d * b[k];
                }
            }
        }
        let (ani, g_ani) = losses::loss_ani_grad(set, wts.tau);
        for (a, b) in grads.log_scale.iter_mut().zip(&g_ani) {
            for k in 0..3 {
                a[k] += wts.w_ani * b[k];
            }
        }
        let (sdf_l, g_sdf) = losses::loss_sdf_grad(set, &positions, &sdf, wts.sdf_margin);
        let g_sdf: Vec<Vector3<f64>> = g_sdf.iter().map(|g| g * wts.w_sdf).collect();
        grads.add_position_grads(set, &posed, &g_sdf)?;
        grads.zero_frozen(set);
        state.adam.apply(set, &grads, &sched.lr)?;

        let step = it + 1;
        if step % sched.prune_interval == 0 || step == sched.total_iters {
            report.pruned_inside += prune_inside(set, mesh, Some(&mut state.adam))?;
            if step % sched.prune_interval == 0 {
                report.pruned_transparent +=
                    prune_transparent(set, sched.opacity_prune_threshold, Some(&mut state.adam));
            }
        }
        if step % sched.densify_interval == 0
            && (sched.densify_start..=sched.densify_stop).contains(&step)
        {
            for (cat, count) in set.category_counts() {
                let budget = sched.max_gaussians.saturating_sub(set.len());
                let n_new = ((count as f64 * sched.densify_fraction).ceil() as usize).min(budget);
                if n_new == 0 || count < sched.densify_k {
                    continue;
                }
                let s = mix(seed, (step as u64) << 8 | cat as u64);
                report.densified += densify_category(set, mesh, cat, n_new, sched.densify_k, s)?;
            }
            state.adam.extend_to(set);
        }

        let entry = LogEntry {
            iteration: it,
            view: view_idx,
            total: wts.w_ori * ori + wts.w_id2d * id2d + wts.w_id3d * id3d + wts.w_ani * ani + wts.w_sdf * sdf_l,
            ori,
            id2d,
            id3d,
            ani,
            sdf: sdf_l,
            body: set.count_in(Layer::Body),
            assets: set.count_in(Layer::Asset),
            categories: set.category_counts(),
        };
        observer(&entry, set)?;
        if state.history.len() == HISTORY_LEN {
            state.history.pop_front();
        }
        state.history.push_back(entry.clone());
        report.log.push(entry);
    }
    Ok(report)
}

/// Settings for the whole reconstruction: body layer, skin inpainting,
/// asset seeding and the fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub sh_degree: usize,
    pub body_per_face: usize,
    pub inpaint: InpaintConfig,
    pub seeding: SeedConfig,
    pub fit: FitConfig,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            sh_degree: 3,
            body_per_face: 4,
            inpaint: InpaintConfig::default(),
            seeding: SeedConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructReport {
    pub inpaint: InpaintReport,
    pub seeded: usize,
    pub fit: FitReport,
}

/// Builds the body layer, inpaints its color, seeds assets from the masks
/// (or takes the asset layer of `init_assets`) and runs [`fit`].
pub fn reconstruct(
    mesh: &SkinnedMesh,
    views: &[View],
    cfg: &ReconstructConfig,
    seed: u64,
    init_assets: Option<&GaussianSet>,
    observer: &mut dyn FnMut(&LogEntry, &GaussianSet) -> Result<()>,
) -> Result<(GaussianSet, ReconstructReport)> {
    if cfg.sh_degree > 3 {
        return Err(Error::InvalidConfig("sh_degree must be at most 3".into()));
    }
    cfg.fit.validate()?;
    let raster = &cfg.fit.raster;
    let mut set = build_body_gaussians(mesh, cfg.body_per_face, cfg.sh_degree)?;
    let visibility = body_visibility(&set, mesh, views, raster)?;
    let inpaint = inpaint_body_color(&mut set, mesh, &visibility, views, raster, &cfg.inpaint)?;
    let seeded = match init_assets {
        None => seed_assets(&mut set, mesh, views, raster, &cfg.seeding, mix(seed, 1))?,
        Some(init) => {
            if init.sh_degree != cfg.sh_degree {
                return Err(Error::InvalidArgument(format!(
                    "initial splats have SH degree {}, the run uses {}",
                    init.sh_degree, cfg.sh_degree
                )));
            }
            init.validate(mesh)?;
            let assets = init.select(&init.indices_in(Layer::Asset));
            set.append(&assets)?;
            assets.len()
        }
    };
    let fit = fit(&mut set, mesh, views, &cfg.fit, seed, observer)?;
    Ok((set, ReconstructReport { inpaint, seeded, fit }))
}
