//! In-memory model of a layered avatar: Gaussian populations, the skinned
//! mesh they are embedded in, cameras and the category table.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Isometry3, Matrix3, Vector3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{sh_coeff_count, triangle_frame, Quat, TriangleFrame, SH_C0};

/// Length of every identity encoding.
pub const IDENTITY_DIM: usize = 15;

pub type Identity = [f64; IDENTITY_DIM];

pub const CATEGORY_NAMES: [&str; IDENTITY_DIM] = [
    "Background",
    "Hat",
    "Hair",
    "Sunglasses",
    "Upper-clothes",
    "Skirt",
    "Pants",
    "Dress",
    "Belt",
    "Left-shoe",
    "Right-shoe",
    "Face",
    "Skin",
    "Bag",
    "Scarf",
];

pub const BACKGROUND: usize = 0;
pub const UPPER_CLOTHES: usize = 4;
pub const SKIRT: usize = 5;
pub const PANTS: usize = 6;
pub const FACE: usize = 11;
pub const SKIN: usize = 12;

/// Logit magnitude used for fixed labels (body Gaussians, background).
pub const LABEL_LOGIT: f64 = 10.0;

/// Index → name table for the segmentation categories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryTable {
    names: Vec<String>,
}

impl Default for CategoryTable {
    fn default() -> Self {
        Self {
            names: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl CategoryTable {
    /// Display names may be overridden; the index layout may not.
    pub fn with_names(names: Vec<String>) -> Result<Self> {
        if names.len() != IDENTITY_DIM {
            return Err(Error::InvalidConfig(format!(
                "category table needs {IDENTITY_DIM} names, got {}",
                names.len()
            )));
        }
        Ok(Self { names })
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One-hot identity logits for a fixed label.
pub fn label_identity(label: usize) -> Identity {
    let mut e = [0.0; IDENTITY_DIM];
    e[label] = LABEL_LOGIT;
    e
}

/// Argmax of the identity logits; ties resolve toward the lower index.
pub fn category_of(identity: &Identity) -> usize {
    let mut best = 0;
    for (i, &v) in identity.iter().enumerate().skip(1) {
        if v > identity[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Layer {
    Body = 0,
    Asset = 1,
}

impl Layer {
    pub fn from_u8(v: u8) -> Option<Layer> {
        match v {
            0 => Some(Layer::Body),
            1 => Some(Layer::Asset),
            _ => None,
        }
    }
}

/// Location of a Gaussian in a triangle's local frame: offsets along the
/// tangent, bitangent and normal from the triangle centroid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleEmbedding {
    pub face_index: u32,
    pub sigma: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl TriangleEmbedding {
    pub fn offsets(&self) -> Vector3<f64> {
        Vector3::new(self.sigma, self.beta, self.gamma)
    }
}

/// `origin + σ·i + β·j + γ·k` of the embedding face, evaluated on `vertices`.
pub fn resolve_position(
    embedding: &TriangleEmbedding,
    faces: &[[u32; 3]],
    vertices: &[Vector3<f64>],
) -> Result<Vector3<f64>> {
    let frame = face_frame(faces, vertices, embedding.face_index)?;
    Ok(frame.to_world(&embedding.offsets()))
}

pub fn face_frame(faces: &[[u32; 3]], vertices: &[Vector3<f64>], face: u32) -> Result<TriangleFrame> {
    let [a, b, c] = *faces
        .get(face as usize)
        .ok_or_else(|| Error::InvalidArgument(format!("face index {face} out of range")))?;
    triangle_frame(&vertices[a as usize], &vertices[b as usize], &vertices[c as usize]).map_err(
        |e| match e {
            Error::DegenerateTriangle { area, .. } => Error::DegenerateTriangle {
                face: Some(face),
                area,
            },
            other => other,
        },
    )
}

/// A single Gaussian in array-of-structs form, used for construction and
/// inspection. Storage lives in [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub embedding: TriangleEmbedding,
    pub rotation: Quat,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh: Vec<f64>,
    pub identity: Identity,
    pub layer: Layer,
    pub frozen: bool,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// DC coefficient that renders as `value` in every channel.
pub fn sh_dc_for(value: f64) -> f64 {
    value / SH_C0
}

/// Structure-of-arrays storage for a Gaussian population.
///
/// Positions are never stored: they are always derived from the embedding
/// and the (posed) mesh. Opacity and scale are kept unconstrained as a
/// logit and a log. SH coefficients are flattened with a fixed stride of
/// [`GaussianSet::sh_stride`] per Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub face: Vec<u32>,
    pub offsets: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<f64>,
    pub identity: Vec<Identity>,
    pub layer: Vec<Layer>,
    pub frozen: Vec<bool>,
}

impl GaussianSet {
    pub fn new(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            face: Vec::new(),
            offsets: Vec::new(),
            rotation: Vec::new(),
            log_scale: Vec::new(),
            opacity_logit: Vec::new(),
            sh: Vec::new(),
            identity: Vec::new(),
            layer: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.face.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    pub fn push(&mut self, g: &Gaussian) -> Result<()> {
        if g.sh.len() != self.sh_stride() {
            return Err(Error::ShapeMismatch(format!(
                "gaussian has {} SH coefficients, set expects {}",
                g.sh.len(),
                self.sh_stride()
            )));
        }
        self.face.push(g.embedding.face_index);
        self.offsets
            .push([g.embedding.sigma, g.embedding.beta, g.embedding.gamma]);
        self.rotation.push(g.rotation.to_array());
        self.log_scale.push(g.log_scale.into());
        self.opacity_logit.push(g.opacity_logit);
        self.sh.extend_from_slice(&g.sh);
        self.identity.push(g.identity);
        self.layer.push(g.layer);
        self.frozen.push(g.frozen);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            embedding: self.embedding(i),
            rotation: Quat::from_array(self.rotation[i]),
            log_scale: self.log_scale[i].into(),
            opacity_logit: self.opacity_logit[i],
            sh: self.sh_of(i).to_vec(),
            identity: self.identity[i],
            layer: self.layer[i],
            frozen: self.frozen[i],
        }
    }

    pub fn embedding(&self, i: usize) -> TriangleEmbedding {
        let [sigma, beta, gamma] = self.offsets[i];
        TriangleEmbedding {
            face_index: self.face[i],
            sigma,
            beta,
            gamma,
        }
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    pub fn sh_of_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sh_stride();
        &mut self.sh[i * s..(i + 1) * s]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logit[i])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.log_scale[i]).map(f64::exp)
    }

    /// Normalized rotation.
    pub fn unit_rotation(&self, i: usize) -> Quat {
        Quat::from_array(self.rotation[i]).normalized()
    }

    pub fn category(&self, i: usize) -> usize {
        category_of(&self.identity[i])
    }

    pub fn indices_in(&self, layer: Layer) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.layer[i] == layer).collect()
    }

    pub fn count_in(&self, layer: Layer) -> usize {
        self.layer.iter().filter(|&&l| l == layer).count()
    }

    /// Asset Gaussian count per category.
    pub fn category_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for i in self.indices_in(Layer::Asset) {
            *counts.entry(self.category(i)).or_insert(0) += 1;
        }
        counts
    }

    /// Keeps Gaussians whose mask entry is true; returns how many were dropped.
    pub fn retain_mask(&mut self, keep: &[bool]) -> usize {
        assert_eq!(keep.len(), self.len());
        let stride = self.sh_stride();
        let before = self.len();
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.face, keep);
        filter(&mut self.offsets, keep);
        filter(&mut self.rotation, keep);
        filter(&mut self.log_scale, keep);
        filter(&mut self.opacity_logit, keep);
        filter(&mut self.identity, keep);
        filter(&mut self.layer, keep);
        filter(&mut self.frozen, keep);
        let mut sh = Vec::with_capacity(self.len() * stride);
        for (i, &k) in keep.iter().enumerate() {
            if k {
                sh.extend_from_slice(&self.sh[i * stride..(i + 1) * stride]);
            }
        }
        self.sh = sh;
        before - self.len()
    }

    /// New set holding the listed Gaussians in the given order.
    pub fn select(&self, indices: &[usize]) -> GaussianSet {
        let mut out = GaussianSet::new(self.sh_degree);
        for &i in indices {
            out.face.push(self.face[i]);
            out.offsets.push(self.offsets[i]);
            out.rotation.push(self.rotation[i]);
            out.log_scale.push(self.log_scale[i]);
            out.opacity_logit.push(self.opacity_logit[i]);
            out.sh.extend_from_slice(self.sh_of(i));
            out.identity.push(self.identity[i]);
            out.layer.push(self.layer[i]);
            out.frozen.push(self.frozen[i]);
        }
        out
    }

    pub fn append(&mut self, other: &GaussianSet) -> Result<()> {
        if other.sh_degree != self.sh_degree {
            return Err(Error::ShapeMismatch(format!(
                "SH degree {} vs {}",
                self.sh_degree, other.sh_degree
            )));
        }
        self.face.extend_from_slice(&other.face);
        self.offsets.extend_from_slice(&other.offsets);
        self.rotation.extend_from_slice(&other.rotation);
        self.log_scale.extend_from_slice(&other.log_scale);
        self.opacity_logit.extend_from_slice(&other.opacity_logit);
        self.sh.extend_from_slice(&other.sh);
        self.identity.extend_from_slice(&other.identity);
        self.layer.extend_from_slice(&other.layer);
        self.frozen.extend_from_slice(&other.frozen);
        Ok(())
    }

    /// Positions in the canonical pose.
    pub fn canonical_positions(&self, mesh: &SkinnedMesh) -> Result<Vec<Vector3<f64>>> {
        (0..self.len())
            .map(|i| resolve_position(&self.embedding(i), &mesh.faces, &mesh.vertices))
            .collect()
    }

    /// Checks array lengths and per-Gaussian invariants against a mesh.
    pub fn validate(&self, mesh: &SkinnedMesh) -> Result<()> {
        let n = self.len();
        let lens = [
            self.offsets.len(),
            self.rotation.len(),
            self.log_scale.len(),
            self.opacity_logit.len(),
            self.identity.len(),
            self.layer.len(),
            self.frozen.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.sh.len() != n * self.sh_stride() {
            return Err(Error::ShapeMismatch("gaussian arrays disagree in length".into()));
        }
        if let Some(f) = self.face.iter().find(|&&f| f as usize >= mesh.faces.len()) {
            return Err(Error::InvalidArgument(format!(
                "face index {f} out of range for mesh with {} faces",
                mesh.faces.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Joint frame → model space in the canonical pose.
    pub bind: Isometry3<f64>,
}

/// Canonical triangle mesh with a joint hierarchy and per-vertex skin weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinnedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub joints: Vec<Joint>,
    /// Sparse `(joint, weight)` pairs per vertex.
    pub skin_weights: Vec<Vec<(u32, f64)>>,
    /// Optional named face sets, e.g. `"face"` for the head's facial region.
    pub face_regions: BTreeMap<String, Vec<u32>>,
}

impl SkinnedMesh {
    /// Mesh with a single root joint carrying every vertex.
    pub fn rigid(vertices: Vec<Vector3<f64>>, faces: Vec<[u32; 3]>) -> Self {
        let n = vertices.len();
        Self {
            vertices,
            faces,
            joints: vec![Joint {
                name: "root".into(),
                parent: None,
                bind: Isometry3::identity(),
            }],
            skin_weights: vec![vec![(0, 1.0)]; n],
            face_regions: BTreeMap::new(),
        }
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn triangle(&self, face: usize) -> [Vector3<f64>; 3] {
        self.faces[face].map(|v| self.vertices[v as usize])
    }

    pub fn frame(&self, face: u32) -> Result<TriangleFrame> {
        face_frame(&self.faces, &self.vertices, face)
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        for (f, tri) in self.faces.iter().enumerate() {
            if tri.iter().any(|&v| v as usize >= nv) {
                return Err(Error::InvalidMesh(format!("face {f} references a missing vertex")));
            }
        }
        for (j, joint) in self.joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                if p >= j {
                    return Err(Error::InvalidMesh(format!(
                        "joint {} must come after its parent",
                        joint.name
                    )));
                }
            }
        }
        if self.skin_weights.len() != nv {
            return Err(Error::InvalidMesh(format!(
                "{} skin weight rows for {nv} vertices",
                self.skin_weights.len()
            )));
        }
        for (v, row) in self.skin_weights.iter().enumerate() {
            let mut sum = 0.0;
            for &(j, w) in row {
                if j as usize >= self.joints.len() || !(w >= 0.0) {
                    return Err(Error::InvalidMesh(format!("bad skin weight on vertex {v}")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidMesh(format!(
                    "skin weights of vertex {v} sum to {sum}"
                )));
            }
        }
        let mut edge_use: HashMap<(u32, u32), u32> = HashMap::new();
        for tri in &self.faces {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edge_use.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        if let Some(((a, b), _)) = edge_use.iter().find(|(_, &c)| c > 2) {
            return Err(Error::InvalidMesh(format!(
                "edge ({a}, {b}) is shared by more than two faces"
            )));
        }
        for (name, faces) in &self.face_regions {
            if faces.iter().any(|&f| f as usize >= self.faces.len()) {
                return Err(Error::InvalidMesh(format!("region {name} lists a missing face")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical vertex and face data, hex encoded. Splat
    /// files record it so embeddings are never resolved against another mesh.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        for v in &self.vertices {
            for c in v.iter() {
                h.update(c.to_bits().to_le_bytes());
            }
        }
        h.update((self.faces.len() as u64).to_le_bytes());
        for f in &self.faces {
            for i in f {
                h.update(i.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Same face count and identical vertex indices per face.
    pub fn same_topology(&self, other: &SkinnedMesh) -> bool {
        self.faces == other.faces && self.vertices.len() == other.vertices.len()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            total += (b - a).norm() + (c - b).norm() + (a - c).norm();
        }
        total / (3.0 * self.faces.len().max(1) as f64)
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Copy with `f` applied to every canonical vertex. Joints are left as is.
    pub fn transformed(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> SkinnedMesh {
        let mut out = self.clone();
        out.vertices = self.vertices.iter().map(f).collect();
        out
    }
}

/// Pinhole camera with an OpenCV-style frame (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// World → camera rotation.
    pub rotation: Matrix3<f64>,
    /// World → camera translation.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, square pixels, principal point at
    /// the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: 0.01,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera that sees `transform · world` exactly as `self` sees `world`.
    pub fn following(&self, transform: &Isometry3<f64>) -> Camera {
        let inv = transform.inverse();
        let r = inv.rotation.to_rotation_matrix().into_inner();
        let t = inv.translation.vector;
        Camera {
            rotation: self.rotation * r,
            translation: self.rotation * t + self.translation,
            ..self.clone()
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image size must be at least 1×1".into()));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).amax() > 1e-6 {
            return Err(Error::InvalidArgument("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= self.near {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }
}
