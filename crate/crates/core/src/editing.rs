//! Whole-group asset edits: removal, recoloring, extraction and transfer to
//! another body of the same topology.
//!
//! Every operation returns a new set and leaves body Gaussians untouched.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::SH_C0;
use crate::gradients::{backward_reposed, render_reposed};
use crate::image::RgbImage;
use crate::rasterizer::{RasterConfig, RenderGrad};
use crate::scene::{sh_dc_for, Camera, GaussianSet, Layer, SkinnedMesh, BACKGROUND, IDENTITY_DIM};
use crate::skinning::{face_transport, repose_all, PosedMesh};

/// Color every recolored group restarts from.
pub const NEUTRAL_GRAY: f64 = 0.5;

/// SHA-256 over every stored value except SH coefficients. Recoloring
/// never changes it.
pub fn geometry_hash(set: &GaussianSet) -> String {
    let mut h = Sha256::new();
    h.update((set.len() as u64).to_le_bytes());
    for i in 0..set.len() {
        h.update(set.face[i].to_le_bytes());
        let values = set.offsets[i]
            .iter()
            .chain(&set.rotation[i])
            .chain(&set.log_scale[i])
            .chain(std::iter::once(&set.opacity_logit[i]))
            .chain(&set.identity[i]);
        for v in values {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update([set.layer[i] as u8, set.frozen[i] as u8]);
    }
    hex::encode(h.finalize())
}

fn check_category(category: usize) -> Result<()> {
    if category == BACKGROUND || category >= IDENTITY_DIM {
        return Err(Error::InvalidCategory(category));
    }
    Ok(())
}

/// Asset Gaussians whose identity argmax is `category`.
pub fn group_indices(set: &GaussianSet, category: usize) -> Vec<usize> {
    (0..set.len())
        .filter(|&i| set.layer[i] == Layer::Asset && set.category(i) == category)
        .collect()
}

fn group_mask(set: &GaussianSet, category: usize) -> Vec<bool> {
    (0..set.len())
        .map(|i| set.layer[i] == Layer::Asset && set.category(i) == category)
        .collect()
}

pub fn remove_group(set: &GaussianSet, category: usize) -> Result<GaussianSet> {
    check_category(category)?;
    let keep: Vec<bool> = group_mask(set, category).into_iter().map(|g| !g).collect();
    let mut out = set.clone();
    out.retain_mask(&keep);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecolorTarget {
    /// Uniform color for the whole group.
    Flat([f64; 3]),
    /// Images of the edited scene in the canonical pose.
    Views(Vec<(Camera, RgbImage)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecolorConfig {
    pub iters: usize,
    pub lr: f64,
    pub raster: RasterConfig,
}

impl Default for RecolorConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: 0.05,
            raster: RasterConfig::default(),
        }
    }
}

/// Resets the group's SH to neutral gray and fits them to `target`. Nothing
/// but the group's SH coefficients changes.
pub fn recolor_group(
    set: &GaussianSet,
    mesh: &SkinnedMesh,
    category: usize,
    target: &RecolorTarget,
    cfg: &RecolorConfig,
) -> Result<GaussianSet> {
    check_category(category)?;
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("recolor learning rate must be positive".into()));
    }
    let group = group_indices(set, category);
    if group.is_empty() {
        return Err(Error::EmptyGroup(category));
    }
    let stride = set.sh_stride();
    let mut out = set.clone();
    for &i in &group {
        let sh = out.sh_of_mut(i);
        sh.fill(0.0);
        sh[..3].fill(sh_dc_for(NEUTRAL_GRAY));
    }

    let mut m = vec![0.0; group.len() * stride];
    let mut v = vec![0.0; group.len() * stride];
    let mut grad = vec![0.0; group.len() * stride];
    let reposed = match target {
        RecolorTarget::Views(views) => {
            for (cam, img) in views {
                img.check_same_size(cam.width as usize, cam.height as usize)?;
            }
            Some(repose_all(&out, &PosedMesh::canonical(mesh)?)?)
        }
        RecolorTarget::Flat(_) => None,
    };
    for it in 0..cfg.iters {
        grad.fill(0.0);
        match target {
            // Per-Gaussian squared error of the constant color term.
            RecolorTarget::Flat(rgb) => {
                for (r, &i) in group.iter().enumerate() {
                    for c in 0..3 {
                        grad[r * stride + c] = 2.0 * (SH_C0 * out.sh[i * stride + c] - rgb[c]) * SH_C0;
                    }
                }
            }
            RecolorTarget::Views(views) => {
                if views.is_empty() {
                    break;
                }
                let (cam, img) = &views[it % views.len()];
                let (rendered, record) = render_reposed(&out, reposed.as_ref().expect("views"), None, cam, &cfg.raster);
                let mut up = RenderGrad::zeros(rendered.width, rendered.height);
                let n = rendered.color.len() as f64;
                for (k, (a, b)) in rendered.color.iter().zip(&img.data).enumerate() {
                    up.color[k] = if a > b {
                        1.0 / n
                    } else if a < b {
                        -1.0 / n
                    } else {
                        0.0
                    };
                }
                let rg = backward_reposed(&out, &record, &cfg.raster, &up)?;
                for (r, &i) in group.iter().enumerate() {
                    grad[r * stride..(r + 1) * stride].copy_from_slice(&rg.sh[i * stride..(i + 1) * stride]);
                }
            }
        }
        let t = (it + 1) as i32;
        let (c1, c2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
        for (r, &i) in group.iter().enumerate() {
            for k in 0..stride {
                let g = grad[r * stride + k];
                let (mk, vk) = (&mut m[r * stride + k], &mut v[r * stride + k]);
                *mk = 0.9 * *mk + 0.1 * g;
                *vk = 0.999 * *vk + 0.001 * g * g;
                out.sh[i * stride + k] -= cfg.lr * (*mk / c1) / ((*vk / c2).sqrt() + 1e-15);
            }
        }
    }
    Ok(out)
}

/// A group lifted out of a scene, with what is needed to put it back.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedGroup {
    pub category: usize,
    pub set: GaussianSet,
    /// Content hash of the mesh the embeddings refer to.
    pub mesh_hash: String,
    /// Position of each extracted Gaussian in the source set.
    pub source_indices: Vec<usize>,
}

/// Splits `set` into the group and the remainder.
pub fn extract_group(set: &GaussianSet, mesh: &SkinnedMesh, category: usize) -> Result<(ExtractedGroup, GaussianSet)> {
    check_category(category)?;
    let group = group_indices(set, category);
    if group.is_empty() {
        return Err(Error::EmptyGroup(category));
    }
    let rest = remove_group(set, category)?;
    Ok((
        ExtractedGroup {
            category,
            set: set.select(&group),
            mesh_hash: mesh.content_hash(),
            source_indices: group,
        },
        rest,
    ))
}

/// Inverse of [`extract_group`]: puts the group back at its original
/// positions.
pub fn merge_group(rest: &GaussianSet, group: &ExtractedGroup) -> Result<GaussianSet> {
    if rest.sh_degree != group.set.sh_degree {
        return Err(Error::ShapeMismatch(format!(
            "SH degree {} vs {}",
            rest.sh_degree, group.set.sh_degree
        )));
    }
    let total = rest.len() + group.set.len();
    if group.source_indices.len() != group.set.len()
        || group.source_indices.windows(2).any(|w| w[0] >= w[1])
        || group.source_indices.last().is_some_and(|&i| i >= total)
    {
        return Err(Error::ShapeMismatch("extracted indices do not fit the remainder".into()));
    }
    let mut both = rest.clone();
    both.append(&group.set)?;
    let mut order = Vec::with_capacity(total);
    let (mut r, mut g) = (0, 0);
    for k in 0..total {
        if group.source_indices.get(g) == Some(&k) {
            order.push(rest.len() + g);
            g += 1;
        } else {
            order.push(r);
            r += 1;
        }
    }
    Ok(both.select(&order))
}

/// Re-embeds asset Gaussians defined on `source` onto `target`, a mesh with
/// the same faces. Offsets and scales follow each face's per-axis length
/// ratios and rotations follow its frame, as in reposing.
pub fn transfer_group(set: &GaussianSet, source: &SkinnedMesh, target: &SkinnedMesh) -> Result<GaussianSet> {
    if source.faces != target.faces || source.vertices.len() != target.vertices.len() {
        return Err(Error::TopologyMismatch(format!(
            "{} faces / {} vertices vs {} faces / {} vertices",
            source.faces.len(),
            source.vertices.len(),
            target.faces.len(),
            target.vertices.len()
        )));
    }
    let mut out = set.clone();
    for i in set.indices_in(Layer::Asset) {
        let f = set.face[i] as usize;
        if f >= source.faces.len() {
            return Err(Error::InvalidArgument(format!("gaussian {i} refers to face {f}")));
        }
        let t = face_transport(&source.triangle(f), &target.triangle(f))?;
        if t.is_identity {
            continue;
        }
        for k in 0..3 {
            out.offsets[i][k] *= t.ratios[k];
            out.log_scale[i][k] += t.ratios[k].ln();
        }
        out.rotation[i] = t.rotation.mul(&set.unit_rotation(i)).to_array();
    }
    Ok(out)
}
